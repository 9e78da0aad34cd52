//! Training one CNN with per-epoch snapshots, and snapshot selection.

use dexprint_nn::{Adam, AdamConfig, Graph, Tensor};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{CnnShape, CnnWeights, InferenceCnn, Mode};
use crate::asmparse::AppRepresentation;
use crate::error::{Error, Result};
use crate::fragment::make_fragment;
use crate::seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub fragment_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fragments averaged per app when computing validation loss.
    pub valid_fragments: usize,
    pub filters: usize,
    pub kernel: usize,
    pub hidden: [usize; 2],
    pub fine_tune_embeddings: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            fragment_len: 256,
            epochs: 20,
            batch_size: 32,
            learning_rate: 3e-4,
            valid_fragments: 6,
            filters: 128,
            kernel: 5,
            hidden: [512, 256],
            fine_tune_embeddings: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn shape(&self, embed_dim: usize) -> CnnShape {
        CnnShape {
            embed_dim,
            filters: self.filters,
            kernel: self.kernel,
            hidden: self.hidden,
        }
    }
}

/// Model state after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub run: usize,
    pub epoch: usize,
    pub loss_t: f64,
    pub loss_v: f64,
    pub weights: CnnWeights<f32>,
    /// Present only when embeddings were fine-tuned.
    pub embedding: Option<Tensor<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub run: usize,
    pub epoch: usize,
    pub loss_t: f64,
    pub loss_v: f64,
}

impl Snapshot {
    pub fn summary(&self) -> SnapshotSummary {
        SnapshotSummary {
            run: self.run,
            epoch: self.epoch,
            loss_t: self.loss_t,
            loss_v: self.loss_v,
        }
    }
}

/// Splits `0..n` into minibatches; a trailing batch of one sample is merged
/// into the previous batch because batch normalization needs two samples.
pub fn minibatches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size.max(2)).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let start = order.len() - size.max(2) - 1;
        out.pop();
        out.pop();
        out.push(&order[start..]);
    }
    out
}

fn validate_sets(
    train: &[&AppRepresentation],
    train_y: &[bool],
    valid: &[&AppRepresentation],
    valid_y: &[bool],
) -> Result<()> {
    if train.len() != train_y.len() || valid.len() != valid_y.len() {
        return Err(Error::invalid("apps and labels differ in length"));
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::invalid(
            "training and validation sets must be non-empty",
        ));
    }
    if train_y.iter().all(|&y| y) || train_y.iter().all(|&y| !y) {
        return Err(Error::Degenerate(
            "training set holds a single class".into(),
        ));
    }
    Ok(())
}

/// Mean log loss of apps whose probability is the mean over `per_app` fragments.
pub fn app_log_loss(
    engine: &InferenceCnn,
    apps: &[&AppRepresentation],
    labels: &[bool],
    fragment_len: usize,
    per_app: usize,
    seed: u64,
) -> Result<f64> {
    let losses: Vec<f64> = apps
        .par_iter()
        .enumerate()
        .map(|(i, app)| {
            let mut rng = seed::rng(seed::derive_indexed(seed, "valid-fragment", i as u64));
            let frags = (0..per_app)
                .map(|_| make_fragment(app, fragment_len, &mut rng).map(|f| f.tokens))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[u32]> = frags.iter().map(|f| f.as_slice()).collect();
            let p = engine
                .predict(&refs)?
                .iter()
                .map(|&p| p as f64)
                .sum::<f64>()
                / per_app as f64;
            let y = if labels[i] { 1.0 } else { 0.0 };
            Ok(dexprint_nn::functional::log_loss(y, p))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains one CNN for `cfg.epochs` epochs and returns a snapshot per epoch.
///
/// Every minibatch draws fresh fragments. `loss_t` is the mean per-sample
/// training loss over the epoch's minibatches; `loss_v` is the eval-mode log
/// loss on the validation apps.
pub fn train_single(
    train: &[&AppRepresentation],
    train_y: &[bool],
    valid: &[&AppRepresentation],
    valid_y: &[bool],
    table: &Tensor<f32>,
    cfg: &TrainConfig,
    run: usize,
) -> Result<Vec<Snapshot>> {
    validate_sets(train, train_y, valid, valid_y)?;
    if cfg.fragment_len < cfg.kernel {
        return Err(Error::invalid(
            "fragment length must cover the kernel width",
        ));
    }
    let run_seed = seed::derive_indexed(cfg.seed, "cnn-run", run as u64);
    let shape = cfg.shape(table.shape()[1]);
    let mut weights = CnnWeights::<f32>::init(shape, &mut seed::child_rng(run_seed, "cnn-init"));
    let mut embedding = table.clone();
    let adam_cfg = AdamConfig::with_learning_rate(cfg.learning_rate);
    let mut opt = Adam::new(weights.params.tensors(), adam_cfg);
    let mut embed_opt = Adam::new(std::slice::from_ref(&embedding), adam_cfg);
    let mut rng = seed::child_rng(run_seed, "cnn-train");
    let valid_seed = seed::derive_seed(run_seed, "cnn-valid");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut snapshots = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in minibatches(&order, cfg.batch_size) {
            let mut tokens = Vec::with_capacity(batch.len() * cfg.fragment_len);
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let f = make_fragment(train[i], cfg.fragment_len, &mut rng)?;
                tokens.extend(f.tokens.iter().map(|&t| t as usize));
                labels.push(if train_y[i] { 1.0f32 } else { 0.0 });
            }
            let mut g = Graph::<f32>::new();
            let vars = weights.params.attach(&mut g);
            let t = if cfg.fine_tune_embeddings {
                g.param(embedding.clone())
            } else {
                g.constant(embedding.clone())
            };
            let fw = weights.forward(&mut g, &vars, t, &tokens, batch.len(), Mode::Train)?;
            let loss = g.log_loss(fw.prob, &labels)?;
            total += g.value(loss).data()[0] as f64 * batch.len() as f64;
            let stats = g
                .batch_stats(fw.batchnorm)
                .cloned()
                .expect("training batch norm records stats");
            let mut grads = g.backward(loss)?;
            let pg: Vec<_> = vars.iter().map(|&v| grads.take(v)).collect();
            opt.step(weights.params.tensors_mut(), &pg);
            if cfg.fine_tune_embeddings {
                let eg = [grads.take(t)];
                embed_opt.step(std::slice::from_mut(&mut embedding), &eg);
            }
            weights.update_running(&stats);
        }
        let engine = InferenceCnn::new(&weights, &embedding)?;
        let loss_v = app_log_loss(
            &engine,
            valid,
            valid_y,
            cfg.fragment_len,
            cfg.valid_fragments,
            valid_seed,
        )?;
        let loss_t = total / train.len() as f64;
        log::debug!("run {run} epoch {epoch}: loss_t {loss_t:.5} loss_v {loss_v:.5}");
        snapshots.push(Snapshot {
            run,
            epoch,
            loss_t,
            loss_v,
            weights: weights.clone(),
            embedding: cfg.fine_tune_embeddings.then(|| embedding.clone()),
        });
    }
    Ok(snapshots)
}

/// The `phi` snapshots with the lowest validation loss, ties broken by
/// training loss, then run and epoch.
pub fn select_ensemble(mut snapshots: Vec<Snapshot>, phi: usize) -> Result<Vec<Snapshot>> {
    if phi == 0 || phi > snapshots.len() {
        return Err(Error::invalid(format!(
            "cannot select {phi} of {} snapshots",
            snapshots.len()
        )));
    }
    snapshots.sort_by(|a, b| {
        a.loss_v
            .total_cmp(&b.loss_v)
            .then(a.loss_t.total_cmp(&b.loss_t))
            .then(a.run.cmp(&b.run))
            .then(a.epoch.cmp(&b.epoch))
    });
    snapshots.truncate(phi);
    Ok(snapshots)
}
