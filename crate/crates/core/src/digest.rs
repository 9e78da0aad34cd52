//! Deep auto-encoder compressing hashing vectors into 64-wide digests.
//!
//! The encoder is `L → 512 → 256 → 128 → 64` and the decoder mirrors it back
//! to `L`; every layer is a linear map followed by `tanh`. Training minimizes
//! the squared reconstruction error with Adam. Only the encoder half is used
//! after training.

use dexprint_nn::{Adam, AdamConfig, Checkpoint, Graph, ParamSet, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const CHECKPOINT_KIND: &str = "autoencoder";

/// Encoder widths after the input layer. The last one is the digest width.
pub const ENCODER_WIDTHS: [usize; 4] = [512, 256, 128, 64];

pub const DIGEST_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DigestConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DigestConfig {
    fn default() -> Self {
        DigestConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoEncoder<T: Real = f32> {
    pub input_dim: usize,
    /// Encoder widths; the decoder runs them in reverse and ends at `input_dim`.
    pub widths: Vec<usize>,
    /// `enc{i}.weight`, `enc{i}.bias`, then `dec{i}.weight`, `dec{i}.bias`.
    pub params: ParamSet<T>,
    /// Mean per-vector reconstruction error of each training epoch.
    pub epoch_losses: Vec<f64>,
}

impl<T: Real> AutoEncoder<T> {
    /// The standard architecture for inputs of width `input_dim`.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Result<Self> {
        Self::with_widths(input_dim, &ENCODER_WIDTHS, rng)
    }

    /// Arbitrary widths, used by gradient checks and small experiments.
    pub fn with_widths<R: Rng + ?Sized>(
        input_dim: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::invalid("auto-encoder widths must be positive"));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(widths);
        let mut params = ParamSet::new();
        let mut layer = |name: String, fin: usize, fout: usize, rng: &mut R| {
            let bound = 1.0 / (fin as f64).sqrt();
            params.push(
                format!("{name}.weight"),
                Tensor::<f64>::uniform(&[fout, fin], bound, rng).cast(),
            );
            params.push(
                format!("{name}.bias"),
                Tensor::<f64>::uniform(&[fout], bound, rng).cast(),
            );
        };
        for (i, w) in dims.windows(2).enumerate() {
            layer(format!("enc{i}"), w[0], w[1], rng);
        }
        for (i, w) in dims.windows(2).rev().enumerate() {
            layer(format!("dec{i}"), w[1], w[0], rng);
        }
        Ok(AutoEncoder {
            input_dim,
            widths: widths.to_vec(),
            params,
            epoch_losses: Vec::new(),
        })
    }

    pub fn digest_dim(&self) -> usize {
        *self.widths.last().expect("widths are non-empty")
    }

    fn layers(&self) -> usize {
        self.widths.len()
    }

    /// Encoder nodes on `g`; returns the latent `[N, digest_dim]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.layers() {
            h = g.linear(h, vars[2 * i], Some(vars[2 * i + 1]))?;
            h = g.tanh(h);
        }
        Ok(h)
    }

    /// Decoder nodes on `g`; returns the reconstruction `[N, input_dim]`.
    pub fn decode_graph(&self, g: &mut Graph<T>, vars: &[Var], z: Var) -> Result<Var> {
        let off = 2 * self.layers();
        let mut h = z;
        for i in 0..self.layers() {
            h = g.linear(h, vars[off + 2 * i], Some(vars[off + 2 * i + 1]))?;
            h = g.tanh(h);
        }
        Ok(h)
    }

    fn check_width(&self, v: &[T]) -> Result<()> {
        if v.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "vector of length {} given to an auto-encoder over {} features",
                v.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    fn batch_tensor(&self, rows: &[&[T]]) -> Result<Tensor<T>> {
        for r in rows {
            self.check_width(r)?;
        }
        let data: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Tensor::new(vec![rows.len(), self.input_dim], data)?)
    }

    /// Digests of a batch of vectors, one row each.
    pub fn encode_batch(&self, rows: &[&[T]]) -> Result<Vec<Vec<T>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let vars = self.params.attach_frozen(&mut g);
        let x = g.constant(self.batch_tensor(rows)?);
        let z = self.encode_graph(&mut g, &vars, x)?;
        Ok(g.value(z)
            .data()
            .chunks(self.digest_dim())
            .map(|c| c.to_vec())
            .collect())
    }

    pub fn encode(&self, hv: &[T]) -> Result<Vec<T>> {
        Ok(self
            .encode_batch(&[hv])?
            .pop()
            .expect("one row in, one row out"))
    }

    /// Full encoder-decoder pass.
    pub fn reconstruct(&self, hv: &[T]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let vars = self.params.attach_frozen(&mut g);
        let x = g.constant(self.batch_tensor(&[hv])?);
        let z = self.encode_graph(&mut g, &vars, x)?;
        let y = self.decode_graph(&mut g, &vars, z)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Mean per-vector squared reconstruction error.
    pub fn reconstruction_loss(&self, rows: &[&[T]]) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.params.attach_frozen(&mut g);
        let x = g.constant(self.batch_tensor(rows)?);
        let z = self.encode_graph(&mut g, &vars, x)?;
        let y = self.decode_graph(&mut g, &vars, z)?;
        let target: Vec<T> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let loss = g.squared_error(y, &target)?;
        Ok(g.value(loss).data()[0].to_f64_lossy())
    }
}

impl AutoEncoder<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "input_dim": self.input_dim,
            "widths": self.widths,
            "epoch_losses": self.epoch_losses,
        });
        Checkpoint::new(CHECKPOINT_KIND, meta, self.params.to_arrays())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Data(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found `{}`",
                ck.kind
            )));
        }
        let input_dim: usize = serde_json::from_value(ck.metadata["input_dim"].clone())?;
        let widths: Vec<usize> = serde_json::from_value(ck.metadata["widths"].clone())?;
        let mut ae = AutoEncoder::with_widths(input_dim, &widths, &mut seed::rng(0))?;
        ae.params.load_arrays(&ck.arrays)?;
        ae.epoch_losses =
            serde_json::from_value(ck.metadata["epoch_losses"].clone()).unwrap_or_default();
        Ok(ae)
    }
}

/// Trains the standard auto-encoder on unit-norm hashing vectors.
pub fn train_autoencoder(vectors: &[&[f32]], cfg: &DigestConfig) -> Result<AutoEncoder> {
    train_with_widths(vectors, &ENCODER_WIDTHS, cfg)
}

/// Like [`train_autoencoder`] with custom encoder widths.
pub fn train_with_widths(
    vectors: &[&[f32]],
    widths: &[usize],
    cfg: &DigestConfig,
) -> Result<AutoEncoder> {
    if vectors.len() < 2 {
        return Err(Error::invalid(
            "auto-encoder training needs at least two vectors",
        ));
    }
    let dim = vectors[0].len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::invalid(format!(
            "inconsistent vector lengths {dim} and {}",
            bad.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut ae = AutoEncoder::<f32>::with_widths(
        dim,
        widths,
        &mut seed::child_rng(cfg.seed, "digest.init"),
    )?;
    let mut adam = Adam::new(
        ae.params.tensors(),
        AdamConfig::with_learning_rate(cfg.learning_rate),
    );
    let mut order_rng = seed::child_rng(cfg.seed, "digest.order");
    let mut order: Vec<usize> = (0..vectors.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for batch in crate::detect::minibatches(&order, cfg.batch_size) {
            let rows: Vec<&[f32]> = batch.iter().map(|&i| vectors[i]).collect();
            let mut g = Graph::new();
            let vars = ae.params.attach(&mut g);
            let x = g.constant(ae.batch_tensor(&rows)?);
            let z = ae.encode_graph(&mut g, &vars, x)?;
            let y = ae.decode_graph(&mut g, &vars, z)?;
            let target: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
            let loss = g.squared_error(y, &target)?;
            total += g.value(loss).data()[0] as f64 * rows.len() as f64;
            let mut grads = g.backward(loss)?;
            let grads = ParamSet::<f32>::collect_grads(&vars, &mut grads);
            adam.step(ae.params.tensors_mut(), &grads);
        }
        let mean = total / vectors.len() as f64;
        log::debug!("auto-encoder epoch {epoch}: loss {mean:.6}");
        if !mean.is_finite() {
            return Err(Error::Degenerate(format!(
                "auto-encoder loss diverged at epoch {epoch}"
            )));
        }
        ae.epoch_losses.push(mean);
    }
    Ok(ae)
}

/// Finite-difference check of the full encoder-decoder and its squared
/// reconstruction loss on a random small shape, in `f64`.
pub fn gradient_check<R: Rng + ?Sized>(rng: &mut R) -> Result<dexprint_nn::gradcheck::GradCheck> {
    let input_dim = rng.gen_range(2..7);
    let depth = rng.gen_range(1..4);
    let widths: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..5)).collect();
    let ae = AutoEncoder::<f64>::with_widths(input_dim, &widths, rng)?;
    let n = rng.gen_range(1..4);
    let x = Tensor::<f64>::uniform(&[n, input_dim], 1.0, rng);
    let target = x.data().to_vec();
    let mut inputs = ae.params.tensors().to_vec();
    inputs.push(x);
    let p = ae.params.len();
    Ok(dexprint_nn::gradcheck::check(
        &inputs,
        1e-6,
        dexprint_nn::gradcheck::NETWORK_FLOOR,
        |g, v| {
            let lift = |e: Error| dexprint_nn::NnError::InvalidInput(e.to_string());
            let z = ae.encode_graph(g, &v[..p], v[p]).map_err(lift)?;
            let y = ae.decode_graph(g, &v[..p], z).map_err(lift)?;
            g.squared_error(y, &target)
        },
    )?)
}
