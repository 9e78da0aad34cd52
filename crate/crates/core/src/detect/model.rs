//! The single CNN classifier: fused embedding + 1-D convolution, ReLU,
//! batch normalization, global max pooling and a three-layer head ending in
//! a sigmoid.

use dexprint_nn::{BatchStats, Checkpoint, Graph, ParamSet, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::asmparse::PAD_ID;
use crate::error::{Error, Result};

pub const CHECKPOINT_KIND: &str = "cnn";

const CONV_W: usize = 0;
const CONV_B: usize = 1;
const BN_GAMMA: usize = 2;
const BN_BETA: usize = 3;
const FC1_W: usize = 4;
const FC1_B: usize = 5;
const FC2_W: usize = 6;
const FC2_B: usize = 7;
const OUT_W: usize = 8;
const OUT_B: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnShape {
    pub embed_dim: usize,
    pub filters: usize,
    pub kernel: usize,
    pub hidden: [usize; 2],
}

impl CnnShape {
    /// 128 filters of width 5, then 512 and 256 hidden units.
    pub fn standard(embed_dim: usize) -> CnnShape {
        CnnShape {
            embed_dim,
            filters: 128,
            kernel: 5,
            hidden: [512, 256],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Probabilities `[N, 1]`.
    pub prob: Var,
    pub batchnorm: Var,
}

/// Parameters and batch-norm running statistics of one CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnWeights<T: Real> {
    pub shape: CnnShape,
    pub params: ParamSet<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

fn uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::<f64>::uniform(shape, bound, rng).cast()
}

impl<T: Real> CnnWeights<T> {
    /// Uniform `±1/√fan_in` weights and biases, unit batch-norm scale.
    pub fn init<R: Rng + ?Sized>(shape: CnnShape, rng: &mut R) -> Self {
        let CnnShape {
            embed_dim: d,
            filters: f,
            kernel: k,
            hidden: [h1, h2],
        } = shape;
        let mut p = ParamSet::new();
        p.push("conv.weight", uniform(&[f, d, k], d * k, rng));
        p.push("conv.bias", uniform(&[f], d * k, rng));
        p.push("bn.gamma", Tensor::filled(&[f], T::one()));
        p.push("bn.beta", Tensor::zeros(&[f]));
        p.push("fc1.weight", uniform(&[h1, f], f, rng));
        p.push("fc1.bias", uniform(&[h1], f, rng));
        p.push("fc2.weight", uniform(&[h2, h1], h1, rng));
        p.push("fc2.bias", uniform(&[h2], h1, rng));
        p.push("out.weight", uniform(&[1, h2], h2, rng));
        p.push("out.bias", uniform(&[1], h2, rng));
        CnnWeights {
            shape,
            params: p,
            running_mean: vec![T::zero(); f],
            running_var: vec![T::one(); f],
        }
    }

    /// Builds the forward pass for `batch` fragments laid out row-major in `tokens`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        table: Var,
        tokens: &[usize],
        batch: usize,
        mode: Mode,
    ) -> Result<Forward> {
        let conv = g.embed_conv1d(
            table,
            tokens,
            batch,
            vars[CONV_W],
            vars[CONV_B],
            1,
            0,
            Some(PAD_ID as usize),
        )?;
        let conv = g.relu(conv);
        let bn = match mode {
            Mode::Train => g.batchnorm_train(
                conv,
                vars[BN_GAMMA],
                vars[BN_BETA],
                dexprint_nn::BATCHNORM_EPS,
            )?,
            Mode::Eval => g.batchnorm_eval(
                conv,
                vars[BN_GAMMA],
                vars[BN_BETA],
                &self.running_mean,
                &self.running_var,
                dexprint_nn::BATCHNORM_EPS,
            )?,
        };
        let pooled = g.global_max_pool(bn)?;
        let h = g.linear(pooled, vars[FC1_W], Some(vars[FC1_B]))?;
        let h = g.relu(h);
        let h = g.linear(h, vars[FC2_W], Some(vars[FC2_B]))?;
        let h = g.relu(h);
        let logit = g.linear(h, vars[OUT_W], Some(vars[OUT_B]))?;
        Ok(Forward {
            prob: g.sigmoid(logit),
            batchnorm: bn,
        })
    }

    /// Exponential update of the running statistics (momentum 0.1) with the
    /// unbiased batch variance.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64_lossy(dexprint_nn::BATCHNORM_MOMENTUM);
        let n = stats.count as f64;
        let correction = T::from_f64_lossy(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] =
                (T::one() - m) * self.running_var[c] + m * stats.var[c] * correction;
        }
    }

    /// Eval-mode probabilities through the tape (reference path).
    pub fn predict_graph(&self, table: &Tensor<T>, fragments: &[&[u32]]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let vars = self.params.attach_frozen(&mut g);
        let t = g.constant(table.clone());
        let tokens: Vec<usize> = fragments
            .iter()
            .flat_map(|f| f.iter().map(|&x| x as usize))
            .collect();
        let fw = self.forward(&mut g, &vars, t, &tokens, fragments.len(), Mode::Eval)?;
        Ok(g.value(fw.prob).data().to_vec())
    }

    pub fn cast<U: Real>(&self) -> CnnWeights<U> {
        CnnWeights {
            shape: self.shape,
            params: self.params.cast(),
            running_mean: self
                .running_mean
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
            running_var: self
                .running_var
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

impl CnnWeights<f32> {
    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        let mut arrays = self.params.to_arrays();
        arrays.push(dexprint_nn::NamedArray {
            name: "bn.running_mean".into(),
            shape: vec![self.running_mean.len()],
            data: self.running_mean.clone(),
        });
        arrays.push(dexprint_nn::NamedArray {
            name: "bn.running_var".into(),
            shape: vec![self.running_var.len()],
            data: self.running_var.clone(),
        });
        let mut meta = metadata;
        meta["shape"] = serde_json::to_value(self.shape).expect("shape serializes");
        Checkpoint::new(CHECKPOINT_KIND, meta, arrays)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<CnnWeights<f32>> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Data(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found `{}`",
                ck.kind
            )));
        }
        let shape: CnnShape = serde_json::from_value(ck.metadata["shape"].clone())?;
        let mut w = CnnWeights::<f32>::init(shape, &mut crate::seed::rng(0));
        w.params.load_arrays(&ck.arrays)?;
        let stat = |name: &str| -> Result<Vec<f32>> {
            let a = ck
                .array(name)
                .filter(|a| a.shape == [shape.filters])
                .ok_or_else(|| {
                    Error::Data(format!(
                        "checkpoint lacks `{name}` of {} channels",
                        shape.filters
                    ))
                })?;
            Ok(a.data.clone())
        };
        w.running_mean = stat("bn.running_mean")?;
        w.running_var = stat("bn.running_var")?;
        Ok(w)
    }
}

/// Eval-mode CNN specialised for scoring: every vocabulary row is projected
/// through the kernel once, so a fragment costs one vector add per
/// position and kernel tap.
#[derive(Debug, Clone)]
pub struct InferenceCnn {
    rows: usize,
    filters: usize,
    kernel: usize,
    hidden: [usize; 2],
    /// `[kernel][rows][filters]`
    proj: Vec<f32>,
    conv_bias: Vec<f32>,
    bn_scale: Vec<f32>,
    bn_shift: Vec<f32>,
    fc1_w: Vec<f32>,
    fc1_b: Vec<f32>,
    fc2_w: Vec<f32>,
    fc2_b: Vec<f32>,
    out_w: Vec<f32>,
    out_b: f32,
}

impl InferenceCnn {
    pub fn new(w: &CnnWeights<f32>, table: &Tensor<f32>) -> Result<InferenceCnn> {
        let CnnShape {
            embed_dim: d,
            filters: f,
            kernel: k,
            hidden,
        } = w.shape;
        if table.shape().len() != 2 || table.shape()[1] != d {
            return Err(Error::invalid(format!(
                "embedding table {:?} does not match embedding width {d}",
                table.shape()
            )));
        }
        let rows = table.shape()[0];
        let p = |i: usize| w.params.get(i).data();
        let mut proj = vec![0.0f32; k * rows * f];
        for tap in 0..k {
            f32::gemm(
                rows,
                d,
                f,
                1.0,
                table.data(),
                (d as isize, 1),
                &p(CONV_W)[tap..],
                (k as isize, (d * k) as isize),
                0.0,
                &mut proj[tap * rows * f..(tap + 1) * rows * f],
                (f as isize, 1),
            );
        }
        let eps = dexprint_nn::BATCHNORM_EPS as f32;
        let bn_scale: Vec<f32> = (0..f)
            .map(|c| p(BN_GAMMA)[c] / (w.running_var[c] + eps).sqrt())
            .collect();
        let bn_shift: Vec<f32> = (0..f)
            .map(|c| p(BN_BETA)[c] - bn_scale[c] * w.running_mean[c])
            .collect();
        Ok(InferenceCnn {
            rows,
            filters: f,
            kernel: k,
            hidden,
            proj,
            conv_bias: p(CONV_B).to_vec(),
            bn_scale,
            bn_shift,
            fc1_w: p(FC1_W).to_vec(),
            fc1_b: p(FC1_B).to_vec(),
            fc2_w: p(FC2_W).to_vec(),
            fc2_b: p(FC2_B).to_vec(),
            out_w: p(OUT_W).to_vec(),
            out_b: p(OUT_B)[0],
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    /// Pooled, normalized conv features of one fragment.
    fn features(
        &self,
        tokens: &[u32],
        out: &mut [f32],
        acc: &mut [f32],
        hi: &mut [f32],
        lo: &mut [f32],
    ) {
        let f = self.filters;
        hi.iter_mut().for_each(|v| *v = f32::NEG_INFINITY);
        lo.iter_mut().for_each(|v| *v = f32::INFINITY);
        for i in 0..=tokens.len() - self.kernel {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for tap in 0..self.kernel {
                let t = tokens[i + tap] as usize;
                let row = &self.proj[(tap * self.rows + t) * f..(tap * self.rows + t + 1) * f];
                acc.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
            }
            for c in 0..f {
                let v = (self.conv_bias[c] + acc[c]).max(0.0);
                hi[c] = hi[c].max(v);
                lo[c] = lo[c].min(v);
            }
        }
        // the affine batch-norm map is monotone, so pooling commutes with it
        for c in 0..f {
            let x = if self.bn_scale[c] >= 0.0 {
                hi[c]
            } else {
                lo[c]
            };
            out[c] = self.bn_scale[c] * x + self.bn_shift[c];
        }
    }

    /// Probabilities for a batch of fragments.
    pub fn predict(&self, fragments: &[&[u32]]) -> Result<Vec<f32>> {
        let n = fragments.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        for frag in fragments {
            if frag.len() < self.kernel {
                return Err(Error::invalid(format!(
                    "fragment of {} tokens is shorter than the kernel width {}",
                    frag.len(),
                    self.kernel
                )));
            }
            if let Some(&bad) = frag.iter().find(|&&t| t as usize >= self.rows) {
                return Err(Error::invalid(format!(
                    "token {bad} outside a table of {} rows",
                    self.rows
                )));
            }
        }
        let f = self.filters;
        let [h1, h2] = self.hidden;
        let mut x = vec![0.0f32; n * f];
        let (mut acc, mut hi, mut lo) = (vec![0.0; f], vec![0.0; f], vec![0.0; f]);
        for (s, frag) in fragments.iter().enumerate() {
            self.features(frag, &mut x[s * f..(s + 1) * f], &mut acc, &mut hi, &mut lo);
        }
        let dense = |input: &[f32], fin: usize, w: &[f32], b: &[f32], fout: usize| -> Vec<f32> {
            let mut out: Vec<f32> = (0..n).flat_map(|_| b.iter().copied()).collect();
            f32::gemm(
                n,
                fin,
                fout,
                1.0,
                input,
                (fin as isize, 1),
                w,
                (1, fin as isize),
                1.0,
                &mut out,
                (fout as isize, 1),
            );
            out
        };
        let mut a1 = dense(&x, f, &self.fc1_w, &self.fc1_b, h1);
        a1.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut a2 = dense(&a1, h1, &self.fc2_w, &self.fc2_b, h2);
        a2.iter_mut().for_each(|v| *v = v.max(0.0));
        let logits = dense(&a2, h2, &self.out_w, &[self.out_b], 1);
        Ok(logits
            .into_iter()
            .map(dexprint_nn::functional::sigmoid)
            .collect())
    }
}

/// Finite-difference check of the whole train-mode CNN (embedding table
/// included) on a random small shape, in `f64`.
pub fn gradient_check<R: Rng + ?Sized>(rng: &mut R) -> Result<dexprint_nn::gradcheck::GradCheck> {
    let shape = CnnShape {
        embed_dim: rng.gen_range(1..4),
        filters: rng.gen_range(1..4),
        kernel: rng.gen_range(1..4),
        hidden: [rng.gen_range(1..5), rng.gen_range(1..4)],
    };
    let rows = rng.gen_range(3..7);
    let len = shape.kernel + rng.gen_range(0..4);
    let batch = rng.gen_range(2..4);
    let weights = CnnWeights::<f64>::init(shape, rng);
    let mut table = Tensor::<f64>::uniform(&[rows, shape.embed_dim], 1.0, rng);
    table.data_mut()[..shape.embed_dim]
        .iter_mut()
        .for_each(|v| *v = 0.0);
    // PAD rows are frozen by construction, so the check draws only real tokens
    let tokens: Vec<usize> = (0..batch * len).map(|_| rng.gen_range(1..rows)).collect();
    let labels: Vec<f64> = (0..batch).map(|i| (i % 2) as f64).collect();
    let mut inputs = weights.params.tensors().to_vec();
    // spread batch-norm scale away from zero
    for v in inputs[BN_GAMMA].data_mut() {
        *v = rng.gen_range(0.5..1.5);
    }
    inputs.push(table);
    let n = weights.params.len();
    Ok(dexprint_nn::gradcheck::check(
        &inputs,
        1e-6,
        dexprint_nn::gradcheck::NETWORK_FLOOR,
        |g, v| {
            let fw = weights
                .forward(g, &v[..n], v[n], &tokens, batch, Mode::Train)
                .map_err(|e| dexprint_nn::NnError::InvalidInput(e.to_string()))?;
            g.log_loss(fw.prob, &labels)
        },
    )?)
}
