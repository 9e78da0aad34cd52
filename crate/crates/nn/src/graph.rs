//! The tape and its operators.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid reverse topological order. Each operator caches whatever its
//! backward pass needs at forward time.

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::LOG_LOSS_CLAMP;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch-normalization call.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of elements each channel statistic was computed over.
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Embedding {
        table: Var,
        ids: Vec<usize>,
        padding_idx: Option<usize>,
    },
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    EmbedConv1d(Box<EmbedConvCache<T>>),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        stats: Option<BatchStats<T>>,
    },
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Reshape(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogLoss {
        input: Var,
        labels: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize, T)>,
        probs: Vec<T>,
        norm: T,
    },
    SquaredError {
        input: Var,
        target: Vec<T>,
    },
    RowDot {
        a: Var,
        b: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
}

struct EmbedConvCache<T> {
    table: Var,
    weight: Var,
    bias: Var,
    batch: usize,
    length: usize,
    stride: usize,
    padding: usize,
    padding_idx: Option<usize>,
    /// Distinct token ids present in the batch, ascending.
    uniq: Vec<usize>,
    /// For every input position, its index into `uniq`.
    local: Vec<u32>,
    /// Gathered embedding rows `[uniq.len(), dim]`.
    rows: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// A recording of one forward computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(NnError::Shape(msg))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Statistics of a training-mode batch normalization node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats<T>> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Row lookup: `table[V, d]`, `ids` → `[ids.len(), d]`.
    ///
    /// Rows equal to `padding_idx` receive no gradient.
    pub fn embedding(
        &mut self,
        table: Var,
        ids: &[usize],
        padding_idx: Option<usize>,
    ) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return shape_err(format!("embedding table must be 2-D, got {shape:?}"));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NnError::InvalidInput(format!(
                "token id {bad} out of range for table of {vocab} rows"
            )));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&t[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                padding_idx,
            },
            &[table],
        ))
    }

    /// Cross-correlation over the last axis: `input[N, C_in, L]`,
    /// `weight[C_out, C_in, K]`, `bias[C_out]` → `[N, C_out, L_out]`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 {
            return shape_err(format!(
                "conv1d expects 3-D input/weight and 1-D bias, got {xs:?} {ws:?} {bs:?}"
            ));
        }
        let (n, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, kw) = (ws[0], ws[1], ws[2]);
        if wcin != cin || bs[0] != cout {
            return shape_err(format!(
                "conv1d channel mismatch: input {xs:?}, weight {ws:?}, bias {bs:?}"
            ));
        }
        let lout = conv_out_len(len, kw, stride, padding)?;
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); n * cout * lout];
        for s in 0..n {
            for co in 0..cout {
                let o = &mut out[(s * cout + co) * lout..(s * cout + co + 1) * lout];
                o.iter_mut().for_each(|v| *v = b[co]);
                for ci in 0..cin {
                    let xrow = &x[(s * cin + ci) * len..(s * cin + ci + 1) * len];
                    let wrow = &w[(co * cin + ci) * kw..(co * cin + ci + 1) * kw];
                    for (i, ov) in o.iter_mut().enumerate() {
                        for (k, &wk) in wrow.iter().enumerate() {
                            if let Some(p) = src_pos(i, k, stride, padding, len) {
                                *ov += wk * xrow[p];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, cout, lout], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            &[input, weight, bias],
        ))
    }

    /// Convolution applied directly to embedded token ids.
    ///
    /// Computes exactly `conv1d(embed(ids) transposed to [N, d, L], weight, bias)`
    /// but projects each distinct token through the kernel once per batch
    /// instead of once per position.
    #[allow(clippy::too_many_arguments)]
    pub fn embed_conv1d(
        &mut self,
        table: Var,
        ids: &[usize],
        batch: usize,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        padding_idx: Option<usize>,
    ) -> Result<Var> {
        let (ts, ws, bs) = (self.shape(table), self.shape(weight), self.shape(bias));
        if ts.len() != 2 || ws.len() != 3 || bs.len() != 1 {
            return shape_err(format!(
                "embed_conv1d expects 2-D table, 3-D weight, 1-D bias: {ts:?} {ws:?} {bs:?}"
            ));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        let (cout, kw) = (ws[0], ws[2]);
        if ws[1] != dim || bs[0] != cout {
            return shape_err(format!(
                "embed_conv1d channel mismatch: table {ts:?}, weight {ws:?}, bias {bs:?}"
            ));
        }
        if batch == 0 || ids.len() % batch != 0 {
            return shape_err(format!(
                "{} ids cannot be split into {batch} rows",
                ids.len()
            ));
        }
        let len = ids.len() / batch;
        let lout = conv_out_len(len, kw, stride, padding)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NnError::InvalidInput(format!(
                "token id {bad} out of range for table of {vocab} rows"
            )));
        }

        let mut uniq = ids.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        let mut slot = vec![u32::MAX; vocab];
        for (u, &id) in uniq.iter().enumerate() {
            slot[id] = u as u32;
        }
        let local: Vec<u32> = ids.iter().map(|&id| slot[id]).collect();
        let nu = uniq.len();

        let t = self.value(table).data();
        let mut rows = Vec::with_capacity(nu * dim);
        for &id in &uniq {
            rows.extend_from_slice(&t[id * dim..(id + 1) * dim]);
        }

        let w = self.value(weight).data();
        let b = self.value(bias).data();
        // proj[k][u][co] = sum_j w[co, j, k] * rows[u, j]
        let mut proj = vec![T::zero(); kw * nu * cout];
        for k in 0..kw {
            T::gemm(
                nu,
                dim,
                cout,
                T::one(),
                &rows,
                (dim as isize, 1),
                &w[k..],
                (kw as isize, (dim * kw) as isize),
                T::zero(),
                &mut proj[k * nu * cout..(k + 1) * nu * cout],
                (cout as isize, 1),
            );
        }

        let mut out = vec![T::zero(); batch * cout * lout];
        let mut tmp = vec![T::zero(); lout * cout];
        for s in 0..batch {
            tmp.iter_mut().for_each(|v| *v = T::zero());
            let loc = &local[s * len..(s + 1) * len];
            for i in 0..lout {
                let acc = &mut tmp[i * cout..(i + 1) * cout];
                for k in 0..kw {
                    if let Some(p) = src_pos(i, k, stride, padding, len) {
                        let u = loc[p] as usize;
                        let pr = &proj[(k * nu + u) * cout..(k * nu + u + 1) * cout];
                        for (a, &v) in acc.iter_mut().zip(pr) {
                            *a += v;
                        }
                    }
                }
            }
            let o = &mut out[s * cout * lout..(s + 1) * cout * lout];
            for co in 0..cout {
                for i in 0..lout {
                    o[co * lout + i] = b[co] + tmp[i * cout + co];
                }
            }
        }
        let value = Tensor::new(vec![batch, cout, lout], out)?;
        Ok(self.push(
            value,
            Op::EmbedConv1d(Box::new(EmbedConvCache {
                table,
                weight,
                bias,
                batch,
                length: len,
                stride,
                padding,
                padding_idx,
                uniq,
                local,
                rows,
            })),
            &[table, weight, bias],
        ))
    }

    /// Training-mode batch normalization over axis 1 of `[N, C]` or `[N, C, L]`,
    /// using the statistics of this batch.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c, l) = self.bn_dims(input, gamma, beta)?;
        if n < 2 {
            return Err(NnError::InvalidInput(
                "training-mode batch normalization needs at least 2 samples".into(),
            ));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let count = n * l;
        let cnt = T::from_usize(count).unwrap();
        let eps = T::from_f64_lossy(eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for smp in 0..n {
                s += x[(smp * c + ch) * l..(smp * c + ch + 1) * l]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
            let m = s / cnt;
            let mut v = T::zero();
            for smp in 0..n {
                for &xv in &x[(smp * c + ch) * l..(smp * c + ch + 1) * l] {
                    v += (xv - m) * (xv - m);
                }
            }
            mean[ch] = m;
            var[ch] = v / cnt;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for smp in 0..n {
            for ch in 0..c {
                let base = (smp * c + ch) * l;
                for i in base..base + l {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                stats: Some(BatchStats { mean, var, count }),
            },
            &[input, gamma, beta],
        ))
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, l) = self.bn_dims(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err(format!("running statistics must have {c} channels"));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let eps = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for smp in 0..n {
            for ch in 0..c {
                let base = (smp * c + ch) * l;
                for i in base..base + l {
                    let h = (x[i] - running_mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                stats: None,
            },
            &[input, gamma, beta],
        ))
    }

    fn bn_dims(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(input);
        if xs.len() < 2 {
            return shape_err(format!("batch normalization needs [N, C, ...], got {xs:?}"));
        }
        let (n, c) = (xs[0], xs[1]);
        let l: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!("gamma/beta must be [{c}]"));
        }
        Ok((n, c, l))
    }

    /// Maximum over the last axis: `[N, C, L]` → `[N, C]`.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input);
        if xs.len() != 3 || xs[2] == 0 {
            return shape_err(format!(
                "global max pooling needs non-empty [N, C, L], got {xs:?}"
            ));
        }
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for r in 0..n * c {
            let row = &x[r * l..(r + 1) * l];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            out.push(row[best]);
            argmax.push(r * l + best);
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalMaxPool { input, argmax }, &[input]))
    }

    /// `input[N, in] · weight[out, in]ᵀ + bias[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            ));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return shape_err(format!(
                    "linear bias must be [{fout}], got {:?}",
                    self.shape(b)
                ));
            }
        }
        let mut out = vec![T::zero(); n * fout];
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            self.value(input).data(),
            (fin as isize, 1),
            self.value(weight).data(),
            (1, fin as isize),
            T::zero(),
            &mut out,
            (fout as isize, 1),
        );
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let value = Tensor::new(vec![n, fout], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &inputs,
        ))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self
            .value(input)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(input), &[input])
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.tanh());
        self.push(value, Op::Tanh(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(sigmoid);
        self.push(value, Op::Sigmoid(input), &[input])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let width = *xs
            .last()
            .ok_or_else(|| NnError::Shape("softmax of a 0-D tensor".into()))?;
        if width == 0 {
            return shape_err("softmax over an empty axis".into());
        }
        let mut out = self.value(input).data().to_vec();
        for row in out.chunks_mut(width) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::Softmax(input), &[input]))
    }

    /// Mean binary log loss of probabilities against 0/1 labels.
    ///
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]`; the gradient is
    /// evaluated at the clamped value.
    pub fn log_loss(&mut self, input: Var, labels: &[T]) -> Result<Var> {
        let p = self.value(input).data();
        if p.len() != labels.len() || p.is_empty() {
            return shape_err(format!(
                "log loss: {} probabilities vs {} labels",
                p.len(),
                labels.len()
            ));
        }
        let total: T = p
            .iter()
            .zip(labels)
            .map(|(&p, &y)| log_loss_term(y, p))
            .sum();
        let value = Tensor::scalar(total / T::from_usize(p.len()).unwrap());
        Ok(self.push(
            value,
            Op::LogLoss {
                input,
                labels: labels.to_vec(),
            },
            &[input],
        ))
    }

    /// `Σ weight · (−log softmax(logits[row])[col]) / norm` over sparse targets.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[(usize, usize, T)],
        norm: T,
    ) -> Result<Var> {
        let xs = self.shape(logits);
        if xs.len() != 2 {
            return shape_err(format!(
                "softmax cross entropy expects [N, V] logits, got {xs:?}"
            ));
        }
        let (n, v) = (xs[0], xs[1]);
        if targets.iter().any(|&(r, c, _)| r >= n || c >= v) {
            return Err(NnError::InvalidInput("target index out of range".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut lse = vec![T::zero(); n];
        for (r, row) in probs.chunks_mut(v).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&x| (x - m).exp()).sum();
            lse[r] = m + s.ln();
            row.iter_mut().for_each(|x| *x = (*x - lse[r]).exp());
        }
        let logit = self.value(logits).data();
        let mut loss = T::zero();
        for &(r, c, w) in targets {
            loss += w * (lse[r] - logit[r * v + c]);
        }
        let value = Tensor::scalar(loss / norm);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                norm,
            },
            &[logits],
        ))
    }

    /// Squared reconstruction error summed per row and averaged over rows.
    pub fn squared_error(&mut self, input: Var, target: &[T]) -> Result<Var> {
        let x = self.value(input);
        if x.len() != target.len() || x.shape().is_empty() || x.shape()[0] == 0 {
            return shape_err(format!(
                "squared error: {} values vs {} targets",
                x.len(),
                target.len()
            ));
        }
        let rows = T::from_usize(x.shape()[0]).unwrap();
        let total: T = x
            .data()
            .iter()
            .zip(target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(total / rows);
        Ok(self.push(
            value,
            Op::SquaredError {
                input,
                target: target.to_vec(),
            },
            &[input],
        ))
    }

    /// Batched dot products: `a[N, d]`, `b[N, K, d]` → `[N, K]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 3 || bs[0] != as_[0] || bs[2] != as_[1] {
            return shape_err(format!("row_dot: {as_:?} vs {bs:?}"));
        }
        let (n, k, d) = (bs[0], bs[1], bs[2]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * k);
        for r in 0..n {
            let ar = &ad[r * d..(r + 1) * d];
            for j in 0..k {
                let br = &bd[(r * k + j) * d..(r * k + j + 1) * d];
                out.push(ar.iter().zip(br).map(|(&x, &y)| x * y).sum());
            }
        }
        let value = Tensor::new(vec![n, k], out)?;
        Ok(self.push(value, Op::RowDot { a, b }, &[a, b]))
    }

    /// `Σ weights[i] · input[i]`, a scalar probe used by gradient checks.
    pub fn weighted_sum(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let x = self.value(input).data();
        if x.len() != weights.len() {
            return shape_err(format!(
                "weighted sum: {} values vs {} weights",
                x.len(),
                weights.len()
            ));
        }
        let s: T = x.iter().zip(weights).map(|(&a, &b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
            &[input],
        ))
    }

    /// Reverse-mode accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(NnError::InvalidInput(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, g.data(), &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Embedding {
                table,
                ids,
                padding_idx,
            } => {
                let dim = self.shape(*table)[1];
                self.accumulate(grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) == *padding_idx {
                            continue;
                        }
                        for (a, &b) in dt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&g[r * dim..(r + 1) * dim])
                        {
                            *a += b;
                        }
                    }
                });
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (xs, ws) = (self.shape(*input), self.shape(*weight));
                let (n, cin, len) = (xs[0], xs[1], xs[2]);
                let (cout, kw) = (ws[0], ws[2]);
                let lout = node.value.shape()[2];
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let (stride, padding) = (*stride, *padding);
                self.accumulate(grads, *input, |dx| {
                    for s in 0..n {
                        for co in 0..cout {
                            let gr = &g[(s * cout + co) * lout..(s * cout + co + 1) * lout];
                            for ci in 0..cin {
                                let wrow = &w[(co * cin + ci) * kw..(co * cin + ci + 1) * kw];
                                let dxr = &mut dx[(s * cin + ci) * len..(s * cin + ci + 1) * len];
                                for (i, &gv) in gr.iter().enumerate() {
                                    for (k, &wk) in wrow.iter().enumerate() {
                                        if let Some(p) = src_pos(i, k, stride, padding, len) {
                                            dxr[p] += wk * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *weight, |dw| {
                    for s in 0..n {
                        for co in 0..cout {
                            let gr = &g[(s * cout + co) * lout..(s * cout + co + 1) * lout];
                            for ci in 0..cin {
                                let xrow = &x[(s * cin + ci) * len..(s * cin + ci + 1) * len];
                                let dwr = &mut dw[(co * cin + ci) * kw..(co * cin + ci + 1) * kw];
                                for (i, &gv) in gr.iter().enumerate() {
                                    for (k, dwk) in dwr.iter_mut().enumerate() {
                                        if let Some(p) = src_pos(i, k, stride, padding, len) {
                                            *dwk += gv * xrow[p];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for s in 0..n {
                        for (co, dbv) in db.iter_mut().enumerate() {
                            *dbv += g[(s * cout + co) * lout..(s * cout + co + 1) * lout]
                                .iter()
                                .copied()
                                .sum::<T>();
                        }
                    }
                });
            }
            Op::EmbedConv1d(c) => self.backprop_embed_conv(c, node.value.shape(), g, grads),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            } => {
                let xs = self.shape(*input);
                let (n, ch) = (xs[0], xs[1]);
                let l: usize = xs[2..].iter().product();
                let gm = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); ch];
                let mut sum_gx = vec![T::zero(); ch];
                for s in 0..n {
                    for c in 0..ch {
                        let base = (s * ch + c) * l;
                        for i in base..base + l {
                            sum_g[c] += g[i];
                            sum_gx[c] += g[i] * xhat[i];
                        }
                    }
                }
                self.accumulate(grads, *gamma, |d| {
                    d.iter_mut().zip(&sum_gx).for_each(|(a, &b)| *a += b)
                });
                self.accumulate(grads, *beta, |d| {
                    d.iter_mut().zip(&sum_g).for_each(|(a, &b)| *a += b)
                });
                let training = stats.is_some();
                let m = T::from_usize(n * l).unwrap();
                self.accumulate(grads, *input, |dx| {
                    for s in 0..n {
                        for c in 0..ch {
                            let base = (s * ch + c) * l;
                            let scale = gm[c] * inv_std[c];
                            for i in base..base + l {
                                if training {
                                    dx[i] +=
                                        scale * (g[i] - sum_g[c] / m - xhat[i] * sum_gx[c] / m);
                                } else {
                                    dx[i] += scale * g[i];
                                }
                            }
                        }
                    }
                });
            }
            Op::GlobalMaxPool { input, argmax } => {
                self.accumulate(grads, *input, |dx| {
                    for (&pos, &gv) in argmax.iter().zip(g) {
                        dx[pos] += gv;
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let (n, fin) = (xs[0], xs[1]);
                let fout = self.shape(*weight)[0];
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                self.accumulate(grads, *input, |dx| {
                    T::gemm(
                        n,
                        fout,
                        fin,
                        T::one(),
                        g,
                        (fout as isize, 1),
                        w,
                        (fin as isize, 1),
                        T::one(),
                        dx,
                        (fin as isize, 1),
                    );
                });
                self.accumulate(grads, *weight, |dw| {
                    T::gemm(
                        fout,
                        n,
                        fin,
                        T::one(),
                        g,
                        (1, fout as isize),
                        x,
                        (fin as isize, 1),
                        T::one(),
                        dw,
                        (fin as isize, 1),
                    );
                });
                if let Some(b) = bias {
                    self.accumulate(grads, *b, |db| {
                        for row in g.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                    });
                }
            }
            Op::Reshape(input) => {
                self.accumulate(grads, *input, |dx| {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                });
            }
            Op::Relu(input) => {
                self.accumulate(grads, *input, |dx| {
                    for ((d, &y), &gv) in dx.iter_mut().zip(out).zip(g) {
                        if y > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Tanh(input) => {
                self.accumulate(grads, *input, |dx| {
                    for ((d, &y), &gv) in dx.iter_mut().zip(out).zip(g) {
                        *d += gv * (T::one() - y * y);
                    }
                });
            }
            Op::Sigmoid(input) => {
                self.accumulate(grads, *input, |dx| {
                    for ((d, &y), &gv) in dx.iter_mut().zip(out).zip(g) {
                        *d += gv * y * (T::one() - y);
                    }
                });
            }
            Op::Softmax(input) => {
                let width = *node.value.shape().last().unwrap();
                self.accumulate(grads, *input, |dx| {
                    for ((dr, yr), gr) in dx
                        .chunks_mut(width)
                        .zip(out.chunks(width))
                        .zip(g.chunks(width))
                    {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                        for ((d, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += y * (gv - dot);
                        }
                    }
                });
            }
            Op::LogLoss { input, labels } => {
                let p = self.value(*input).data();
                let scale = g[0] / T::from_usize(p.len()).unwrap();
                self.accumulate(grads, *input, |dx| {
                    for ((d, &pv), &y) in dx.iter_mut().zip(p).zip(labels) {
                        let pc = clamp_prob(pv);
                        *d += scale * (-(y / pc) + (T::one() - y) / (T::one() - pc));
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
                norm,
            } => {
                let v = self.shape(*logits)[1];
                let n = self.shape(*logits)[0];
                let scale = g[0] / *norm;
                let mut row_weight = vec![T::zero(); n];
                for &(r, _, w) in targets {
                    row_weight[r] += w;
                }
                self.accumulate(grads, *logits, |dx| {
                    for (r, &rw) in row_weight.iter().enumerate() {
                        if rw == T::zero() {
                            continue;
                        }
                        for (d, &p) in dx[r * v..(r + 1) * v]
                            .iter_mut()
                            .zip(&probs[r * v..(r + 1) * v])
                        {
                            *d += scale * rw * p;
                        }
                    }
                    for &(r, c, w) in targets {
                        dx[r * v + c] -= scale * w;
                    }
                });
            }
            Op::SquaredError { input, target } => {
                let x = self.value(*input);
                let scale = g[0] * T::from_f64_lossy(2.0) / T::from_usize(x.shape()[0]).unwrap();
                self.accumulate(grads, *input, |dx| {
                    for ((d, &a), &b) in dx.iter_mut().zip(x.data()).zip(target) {
                        *d += scale * (a - b);
                    }
                });
            }
            Op::RowDot { a, b } => {
                let bs = self.shape(*b);
                let (n, k, d) = (bs[0], bs[1], bs[2]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |da| {
                    for r in 0..n {
                        for j in 0..k {
                            let gv = g[r * k + j];
                            let br = &bd[(r * k + j) * d..(r * k + j + 1) * d];
                            for (x, &y) in da[r * d..(r + 1) * d].iter_mut().zip(br) {
                                *x += gv * y;
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for r in 0..n {
                        let ar = &ad[r * d..(r + 1) * d];
                        for j in 0..k {
                            let gv = g[r * k + j];
                            for (x, &y) in
                                db[(r * k + j) * d..(r * k + j + 1) * d].iter_mut().zip(ar)
                            {
                                *x += gv * y;
                            }
                        }
                    }
                });
            }
            Op::WeightedSum { input, weights } => {
                self.accumulate(grads, *input, |dx| {
                    for (d, &w) in dx.iter_mut().zip(weights) {
                        *d += g[0] * w;
                    }
                });
            }
        }
        Ok(())
    }

    fn backprop_embed_conv(
        &self,
        c: &EmbedConvCache<T>,
        out_shape: &[usize],
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (batch, cout, lout) = (c.batch, out_shape[1], out_shape[2]);
        let ws = self.shape(c.weight);
        let (dim, kw) = (ws[1], ws[2]);
        let nu = c.uniq.len();
        let len = c.length;

        // gsum[k][u][co]: output gradient routed to token slot u through kernel tap k.
        let mut gsum = vec![T::zero(); kw * nu * cout];
        let mut tmp = vec![T::zero(); lout * cout];
        for s in 0..batch {
            let gs = &g[s * cout * lout..(s + 1) * cout * lout];
            for co in 0..cout {
                for i in 0..lout {
                    tmp[i * cout + co] = gs[co * lout + i];
                }
            }
            let loc = &c.local[s * len..(s + 1) * len];
            for i in 0..lout {
                let gi = &tmp[i * cout..(i + 1) * cout];
                for k in 0..kw {
                    if let Some(p) = src_pos(i, k, c.stride, c.padding, len) {
                        let u = loc[p] as usize;
                        let dst = &mut gsum[(k * nu + u) * cout..(k * nu + u + 1) * cout];
                        for (a, &b) in dst.iter_mut().zip(gi) {
                            *a += b;
                        }
                    }
                }
            }
        }

        self.accumulate(grads, c.weight, |dw| {
            for k in 0..kw {
                T::gemm(
                    cout,
                    nu,
                    dim,
                    T::one(),
                    &gsum[k * nu * cout..(k + 1) * nu * cout],
                    (1, cout as isize),
                    &c.rows,
                    (dim as isize, 1),
                    T::one(),
                    &mut dw[k..],
                    ((dim * kw) as isize, kw as isize),
                );
            }
        });
        self.accumulate(grads, c.bias, |db| {
            for s in 0..batch {
                for (co, d) in db.iter_mut().enumerate() {
                    *d += g[(s * cout + co) * lout..(s * cout + co + 1) * lout]
                        .iter()
                        .copied()
                        .sum::<T>();
                }
            }
        });
        if self.nodes[c.table.0].tracked {
            let w = self.value(c.weight).data();
            let mut drows = vec![T::zero(); nu * dim];
            for k in 0..kw {
                T::gemm(
                    nu,
                    cout,
                    dim,
                    T::one(),
                    &gsum[k * nu * cout..(k + 1) * nu * cout],
                    (cout as isize, 1),
                    &w[k..],
                    ((dim * kw) as isize, kw as isize),
                    T::one(),
                    &mut drows,
                    (dim as isize, 1),
                );
            }
            self.accumulate(grads, c.table, |dt| {
                for (u, &id) in c.uniq.iter().enumerate() {
                    if Some(id) == c.padding_idx {
                        continue;
                    }
                    for (a, &b) in dt[id * dim..(id + 1) * dim]
                        .iter_mut()
                        .zip(&drows[u * dim..(u + 1) * dim])
                    {
                        *a += b;
                    }
                }
            });
        }
    }
}

fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(NnError::InvalidInput(
            "kernel width and stride must be positive".into(),
        ));
    }
    let padded = len + 2 * padding;
    if padded < kernel {
        return shape_err(format!(
            "sequence length {len} (padding {padding}) shorter than kernel {kernel}"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Input position read by output `i` through kernel tap `k`, if inside the sequence.
#[inline]
fn src_pos(i: usize, k: usize, stride: usize, padding: usize, len: usize) -> Option<usize> {
    let p = i * stride + k;
    if p < padding || p - padding >= len {
        None
    } else {
        Some(p - padding)
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

fn clamp_prob<T: Real>(p: T) -> T {
    let lo = T::from_f64_lossy(LOG_LOSS_CLAMP);
    let hi = T::one() - lo;
    p.max(lo).min(hi)
}

pub(crate) fn log_loss_term<T: Real>(y: T, p: T) -> T {
    let pc = clamp_prob(p);
    -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln())
}
