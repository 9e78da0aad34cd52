//! Skip-gram instruction embeddings.
//!
//! Each center token predicts the tokens within `window` positions of it in
//! the same method. With a small vocabulary the exact softmax over all output
//! vectors is used; larger vocabularies fall back to negative sampling.

use std::collections::{BTreeMap, HashMap};

use dexprint_nn::{Adam, AdamConfig, Checkpoint, Graph, NamedArray, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::asmparse::PAD_ID;
use crate::error::{Error, Result};
use crate::seed;

pub const CHECKPOINT_KIND: &str = "inst2vec";
/// Largest vocabulary trained with the exact softmax when the objective is automatic.
pub const FULL_SOFTMAX_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    FullSoftmax,
    NegativeSampling { k: usize },
}

impl Objective {
    pub fn auto(table_rows: usize) -> Objective {
        if table_rows <= FULL_SOFTMAX_LIMIT {
            Objective::FullSoftmax
        } else {
            Objective::NegativeSampling { k: 5 }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Inst2VecConfig {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Center positions (full softmax) or pairs (negative sampling) per step.
    pub batch_size: usize,
    /// `None` picks by vocabulary size.
    pub objective: Option<Objective>,
    pub seed: u64,
}

impl Default for Inst2VecConfig {
    fn default() -> Self {
        Inst2VecConfig {
            dim: 64,
            window: 5,
            epochs: 5,
            learning_rate: 1e-2,
            batch_size: 256,
            objective: None,
            seed: 0,
        }
    }
}

/// Input vectors `v_w` and output vectors `v′_w`, both `[rows, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub input: Tensor<f32>,
    pub output: Tensor<f32>,
    pub window: usize,
    pub objective: Objective,
    pub epoch_losses: Vec<f64>,
}

impl EmbeddingTable {
    pub fn rows(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.input.shape()[1]
    }

    pub fn vector(&self, id: u32) -> &[f32] {
        self.input.row(id as usize)
    }

    /// `P(w | center)` over every row, computed in `f64`.
    pub fn context_distribution(&self, center: u32) -> Vec<f64> {
        let v = self.vector(center);
        let logits: Vec<f64> = (0..self.rows())
            .map(|w| {
                self.output
                    .row(w)
                    .iter()
                    .zip(v)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum()
            })
            .collect();
        dexprint_nn::functional::softmax(&logits)
    }

    pub fn cosine(&self, a: u32, b: u32) -> f64 {
        let (x, y) = (self.vector(a), self.vector(b));
        let dot: f64 = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum();
        let nx: f64 = x.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            0.0
        } else {
            dot / (nx * ny)
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let metadata = serde_json::json!({
            "dim": self.dim(),
            "window": self.window,
            "vocab_rows": self.rows(),
            "objective": self.objective,
            "epoch_losses": self.epoch_losses,
        });
        let arr = |name: &str, t: &Tensor<f32>| NamedArray {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        };
        Checkpoint::new(
            CHECKPOINT_KIND,
            metadata,
            vec![arr("input", &self.input), arr("output", &self.output)],
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<EmbeddingTable> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Data(format!(
                "expected an {CHECKPOINT_KIND} checkpoint, found `{}`",
                ck.kind
            )));
        }
        let get = |name: &str| -> Result<Tensor<f32>> {
            let a = ck
                .array(name)
                .ok_or_else(|| Error::Data(format!("embedding checkpoint lacks `{name}`")))?;
            Ok(Tensor::new(a.shape.clone(), a.data.clone())?)
        };
        let (input, output) = (get("input")?, get("output")?);
        if input.shape().len() != 2 || input.shape() != output.shape() {
            return Err(Error::Data(
                "embedding tables must share a 2-D shape".into(),
            ));
        }
        let meta = &ck.metadata;
        Ok(EmbeddingTable {
            input,
            output,
            window: meta["window"].as_u64().unwrap_or(0) as usize,
            objective: serde_json::from_value(meta["objective"].clone())?,
            epoch_losses: serde_json::from_value(meta["epoch_losses"].clone()).unwrap_or_default(),
        })
    }
}

/// Every `(center, context)` pair with `0 < |i − j| ≤ window`, in position order.
pub fn context_pairs(seq: &[u32], window: usize) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for i in 0..seq.len() {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(seq.len().saturating_sub(1));
        for j in lo..=hi {
            if j != i {
                out.push((seq[i], seq[j]));
            }
        }
    }
    out
}

fn validate(streams: &[&[u32]], rows: usize, cfg: &Inst2VecConfig) -> Result<()> {
    if rows < 2 {
        return Err(Error::invalid("vocabulary needs at least 2 rows"));
    }
    if cfg.dim == 0 || cfg.window == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid(
            "dim, window and batch size must be positive",
        ));
    }
    if let Some(&bad) = streams
        .iter()
        .flat_map(|s| s.iter())
        .find(|&&t| t as usize >= rows)
    {
        return Err(Error::invalid(format!(
            "token {bad} outside a table of {rows} rows"
        )));
    }
    if !streams.iter().any(|s| s.len() >= 2) {
        return Err(Error::Degenerate("corpus has no context pairs".into()));
    }
    Ok(())
}

/// The table training starts from: input `U(±0.5/d)` with a zero PAD row,
/// output all zero.
pub fn init_table(rows: usize, cfg: &Inst2VecConfig, objective: Objective) -> EmbeddingTable {
    let mut rng = seed::child_rng(cfg.seed, "inst2vec-init");
    let bound = 0.5 / cfg.dim as f64;
    let mut input = Tensor::uniform(&[rows, cfg.dim], bound, &mut rng);
    input.data_mut()[..cfg.dim]
        .iter_mut()
        .for_each(|v| *v = 0.0);
    EmbeddingTable {
        input,
        output: Tensor::zeros(&[rows, cfg.dim]),
        window: cfg.window,
        objective,
        epoch_losses: Vec::new(),
    }
}

/// Trains embeddings over per-method token streams; returns the table with
/// the mean loss of each epoch recorded.
pub fn train_embeddings(
    streams: &[&[u32]],
    rows: usize,
    cfg: &Inst2VecConfig,
) -> Result<EmbeddingTable> {
    validate(streams, rows, cfg)?;
    let objective = cfg.objective.unwrap_or_else(|| Objective::auto(rows));
    let mut table = init_table(rows, cfg, objective);
    let mut opt = Adam::new(
        &[table.input.clone(), table.output.clone()],
        AdamConfig::with_learning_rate(cfg.learning_rate),
    );
    let mut rng = seed::child_rng(cfg.seed, "inst2vec-train");
    match objective {
        Objective::FullSoftmax => {
            let mut positions: Vec<(u32, u32)> = streams
                .iter()
                .enumerate()
                .filter(|(_, s)| s.len() >= 2)
                .flat_map(|(si, s)| (0..s.len() as u32).map(move |p| (si as u32, p)))
                .collect();
            for _ in 0..cfg.epochs {
                positions.shuffle(&mut rng);
                let (mut total, mut pairs) = (0.0, 0usize);
                for batch in positions.chunks(cfg.batch_size) {
                    let (centers, targets, n) = softmax_batch(streams, batch, cfg.window);
                    let loss = step(&mut table, &mut opt, |g, inp, out| {
                        let emb = g.embedding(inp, &centers, Some(PAD_ID as usize))?;
                        let logits = g.linear(emb, out, None)?;
                        g.softmax_cross_entropy(logits, &targets, n as f32)
                    })?;
                    total += loss * n as f64;
                    pairs += n;
                }
                table.epoch_losses.push(total / pairs as f64);
            }
        }
        Objective::NegativeSampling { k } => {
            let sampler = UnigramSampler::new(streams, rows);
            let mut pairs: Vec<(u32, u32)> = streams
                .iter()
                .flat_map(|s| context_pairs(s, cfg.window))
                .collect();
            for _ in 0..cfg.epochs {
                pairs.shuffle(&mut rng);
                let mut total = 0.0;
                for batch in pairs.chunks(cfg.batch_size) {
                    let (centers, others, labels) = negative_batch(batch, k, &sampler, &mut rng);
                    let loss = step(&mut table, &mut opt, |g, inp, out| {
                        let a = g.embedding(inp, &centers, Some(PAD_ID as usize))?;
                        let b = g.embedding(out, &others, None)?;
                        let b = g.reshape(b, &[centers.len(), k + 1, cfg.dim])?;
                        let s = g.row_dot(a, b)?;
                        let p = g.sigmoid(s);
                        g.log_loss(p, &labels)
                    })?;
                    total += loss * batch.len() as f64;
                }
                table.epoch_losses.push(total / pairs.len() as f64);
            }
        }
    }
    Ok(table)
}

fn step<F>(table: &mut EmbeddingTable, opt: &mut Adam<f32>, build: F) -> Result<f64>
where
    F: FnOnce(
        &mut Graph<f32>,
        dexprint_nn::Var,
        dexprint_nn::Var,
    ) -> dexprint_nn::Result<dexprint_nn::Var>,
{
    let mut g = Graph::new();
    let inp = g.param(std::mem::replace(&mut table.input, Tensor::zeros(&[0])));
    let out = g.param(std::mem::replace(&mut table.output, Tensor::zeros(&[0])));
    let loss = build(&mut g, inp, out)?;
    let value = g.value(loss).data()[0] as f64;
    let mut grads = g.backward(loss)?;
    let grads = vec![grads.take(inp), grads.take(out)];
    let mut params = [g.value(inp).clone(), g.value(out).clone()];
    opt.step(&mut params, &grads);
    let [i, o] = params;
    table.input = i;
    table.output = o;
    Ok(value)
}

/// Distinct centers of a batch of positions with their aggregated context
/// counts as `(row, context, count)` targets.
fn softmax_batch(
    streams: &[&[u32]],
    batch: &[(u32, u32)],
    window: usize,
) -> (Vec<usize>, Vec<(usize, usize, f32)>, usize) {
    let mut row_of: HashMap<u32, usize> = HashMap::new();
    let mut centers = Vec::new();
    let mut counts: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    let mut n = 0;
    for &(si, p) in batch {
        let s = streams[si as usize];
        let i = p as usize;
        let c = s[i];
        let row = *row_of.entry(c).or_insert_with(|| {
            centers.push(c as usize);
            centers.len() - 1
        });
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(s.len() - 1);
        for j in (lo..=hi).filter(|&j| j != i) {
            *counts.entry((row, s[j] as usize)).or_insert(0) += 1;
            n += 1;
        }
    }
    let targets = counts
        .into_iter()
        .map(|((r, c), w)| (r, c, w as f32))
        .collect();
    (centers, targets, n)
}

fn negative_batch<R: Rng>(
    batch: &[(u32, u32)],
    k: usize,
    sampler: &UnigramSampler,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>, Vec<f32>) {
    let mut centers = Vec::with_capacity(batch.len());
    let mut others = Vec::with_capacity(batch.len() * (k + 1));
    let mut labels = Vec::with_capacity(batch.len() * (k + 1));
    for &(c, o) in batch {
        centers.push(c as usize);
        others.push(o as usize);
        labels.push(1.0);
        for _ in 0..k {
            others.push(sampler.sample(rng) as usize);
            labels.push(0.0);
        }
    }
    (centers, others, labels)
}

/// Draws tokens proportionally to `count^0.75`.
pub struct UnigramSampler {
    cumulative: Vec<f64>,
    tokens: Vec<u32>,
}

impl UnigramSampler {
    pub fn new(streams: &[&[u32]], rows: usize) -> UnigramSampler {
        let mut counts = vec![0u64; rows];
        for &t in streams.iter().flat_map(|s| s.iter()) {
            counts[t as usize] += 1;
        }
        let mut cumulative = Vec::new();
        let mut tokens = Vec::new();
        let mut acc = 0.0;
        for (t, &c) in counts.iter().enumerate() {
            if c > 0 {
                acc += (c as f64).powf(0.75);
                cumulative.push(acc);
                tokens.push(t as u32);
            }
        }
        UnigramSampler { cumulative, tokens }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let total = *self.cumulative.last().expect("non-empty sampler");
        let x = rng.gen::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= x);
        self.tokens[i.min(self.tokens.len() - 1)]
    }
}

/// Gradients of the loss with respect to the input and output tables for a
/// fixed table and a set of pairs, under either objective (negatives drawn
/// from `rng`).
pub fn objective_gradients<R: Rng>(
    table: &EmbeddingTable,
    pairs: &[(u32, u32)],
    objective: Objective,
    sampler: &UnigramSampler,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut g = Graph::<f32>::new();
    let inp = g.param(table.input.clone());
    let out = g.param(table.output.clone());
    let loss = match objective {
        Objective::FullSoftmax => {
            let centers: Vec<usize> = pairs.iter().map(|&(c, _)| c as usize).collect();
            let targets: Vec<(usize, usize, f32)> = pairs
                .iter()
                .enumerate()
                .map(|(r, &(_, o))| (r, o as usize, 1.0))
                .collect();
            let emb = g.embedding(inp, &centers, Some(PAD_ID as usize))?;
            let logits = g.linear(emb, out, None)?;
            g.softmax_cross_entropy(logits, &targets, pairs.len() as f32)?
        }
        Objective::NegativeSampling { k } => {
            let (centers, others, labels) = negative_batch(pairs, k, sampler, rng);
            let a = g.embedding(inp, &centers, Some(PAD_ID as usize))?;
            let b = g.embedding(out, &others, None)?;
            let b = g.reshape(b, &[centers.len(), k + 1, table.dim()])?;
            let s = g.row_dot(a, b)?;
            let p = g.sigmoid(s);
            g.log_loss(p, &labels)?
        }
    };
    let mut grads = g.backward(loss)?;
    let zeros = || Tensor::zeros(table.input.shape());
    Ok((
        grads.take(inp).unwrap_or_else(zeros),
        grads.take(out).unwrap_or_else(zeros),
    ))
}

/// Column `i` is the input vector of token `i`: `[d, |F|]`.
pub fn embed_fragment(tokens: &[u32], table: &EmbeddingTable) -> Result<Tensor<f32>> {
    let (rows, d) = (table.rows(), table.dim());
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= rows) {
        return Err(Error::invalid(format!(
            "token {bad} outside a table of {rows} rows"
        )));
    }
    let f = tokens.len();
    let mut out = vec![0.0f32; d * f];
    for (i, &t) in tokens.iter().enumerate() {
        if t == PAD_ID {
            continue;
        }
        for (k, &v) in table.vector(t).iter().enumerate() {
            out[k * f + i] = v;
        }
    }
    Ok(Tensor::new(vec![d, f], out)?)
}
