//! Central finite-difference checks against [`Graph::backward`].

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error over every checked element.
    pub max_rel_error: f64,
    /// `(input index, element index)` where the maximum occurred.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Denominator floor for checks of whole networks. Central differences at
/// h = 1e-6 carry roundoff of about 2.2e-10 · |loss|, so derivatives below the
/// floor are compared in absolute terms (tolerance × floor).
pub const NETWORK_FLOOR: f64 = 1e-4;

/// Relative error used by every check: `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of `f` with respect to every tensor in
/// `inputs` against central differences with step `h`.
///
/// `f` receives the graph and one tracked leaf per input and must return a
/// scalar node.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, floor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[ti].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for ei in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic.data()[ei], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ei);
                report.worst_values = (analytic.data()[ei], numeric);
            }
        }
    }
    Ok(report)
}

/// Per-operator results of [`operator_suite`].
#[derive(Debug, Clone)]
pub struct OperatorCheck {
    pub operator: &'static str,
    pub result: GradCheck,
}

/// Runs a finite-difference check of every operator on randomly drawn small
/// shapes. Each operator output is reduced to a scalar through a random
/// weighted sum so that every output element contributes.
pub fn operator_suite<R: rand::Rng>(rng: &mut R) -> Result<Vec<OperatorCheck>> {
    const H: f64 = 1e-6;
    const FLOOR: f64 = 1e-6;
    let mut out = Vec::new();
    let rand_t = |shape: &[usize], rng: &mut R| Tensor::<f64>::uniform(shape, 1.0, rng);
    let probe = |g: &mut Graph<f64>, v: Var, seed: u64| -> Result<Var> {
        let n = g.value(v).len();
        let w: Vec<f64> = (0..n)
            .map(|i| (((i as u64 + 1) * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        g.weighted_sum(v, &w)
    };
    let seed: u64 = rng.gen_range(0..1000);

    let n = rng.gen_range(2..4);
    let cin = rng.gen_range(1..4);
    let cout = rng.gen_range(1..4);
    let k = rng.gen_range(1..4);
    let len = rng.gen_range(k..k + 5);
    let stride = rng.gen_range(1..3);
    let padding = rng.gen_range(0..2);
    let inputs = vec![
        rand_t(&[n, cin, len], rng),
        rand_t(&[cout, cin, k], rng),
        rand_t(&[cout], rng),
    ];
    out.push(OperatorCheck {
        operator: "conv1d",
        result: check(&inputs, H, FLOOR, |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], stride, padding)?;
            probe(g, y, seed)
        })?,
    });

    let vocab = rng.gen_range(3..7);
    let dim = rng.gen_range(1..4);
    let ids: Vec<usize> = (0..n * len).map(|_| rng.gen_range(0..vocab)).collect();
    let inputs = vec![
        rand_t(&[vocab, dim], rng),
        rand_t(&[cout, dim, k], rng),
        rand_t(&[cout], rng),
    ];
    out.push(OperatorCheck {
        operator: "embed_conv1d",
        result: check(&inputs, H, FLOOR, |g, v| {
            let y = g.embed_conv1d(v[0], &ids, n, v[1], v[2], stride, padding, None)?;
            probe(g, y, seed)
        })?,
    });

    let inputs = vec![rand_t(&[vocab, dim], rng)];
    let ids_small: Vec<usize> = (0..5).map(|_| rng.gen_range(0..vocab)).collect();
    out.push(OperatorCheck {
        operator: "embedding",
        result: check(&inputs, H, FLOOR, |g, v| {
            let y = g.embedding(v[0], &ids_small, None)?;
            probe(g, y, seed)
        })?,
    });

    let c = rng.gen_range(1..4);
    let l = rng.gen_range(1..4);
    let inputs = vec![
        rand_t(&[n, c, l], rng),
        rand_t(&[c], rng),
        rand_t(&[c], rng),
    ];
    out.push(OperatorCheck {
        operator: "batchnorm_train",
        result: check(&inputs, H, FLOOR, |g, v| {
            let y = g.batchnorm_train(v[0], v[1], v[2], crate::BATCHNORM_EPS)?;
            probe(g, y, seed)
        })?,
    });
    let rm: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let rv: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
    out.push(OperatorCheck {
        operator: "batchnorm_eval",
        result: check(&inputs, H, FLOOR, |g, v| {
            let y = g.batchnorm_eval(v[0], v[1], v[2], &rm, &rv, crate::BATCHNORM_EPS)?;
            probe(g, y, seed)
        })?,
    });

    // Distinct, well separated values keep the arg-max stable under ±h.
    let mut pool = Tensor::<f64>::from_fn(&[n, c, l + 1], |i| i as f64 * 0.1);
    shuffle(pool.data_mut(), rng);
    out.push(OperatorCheck {
        operator: "global_max_pool",
        result: check(&[pool], H, FLOOR, |g, v| {
            let y = g.global_max_pool(v[0])?;
            probe(g, y, seed)
        })?,
    });

    let fin = rng.gen_range(1..5);
    let fout = rng.gen_range(1..5);
    let inputs = vec![
        rand_t(&[n, fin], rng),
        rand_t(&[fout, fin], rng),
        rand_t(&[fout], rng),
    ];
    out.push(OperatorCheck {
        operator: "linear",
        result: check(&inputs, H, FLOOR, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            probe(g, y, seed)
        })?,
    });

    // Keep ReLU inputs away from the kink.
    let relu_in = rand_t(&[n, fin], rng).map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
    out.push(OperatorCheck {
        operator: "relu",
        result: check(&[relu_in], H, FLOOR, |g, v| {
            let y = g.relu(v[0]);
            probe(g, y, seed)
        })?,
    });
    let act_in = vec![rand_t(&[n, fin], rng).map(|x| 2.0 * x)];
    out.push(OperatorCheck {
        operator: "tanh",
        result: check(&act_in, H, FLOOR, |g, v| {
            let y = g.tanh(v[0]);
            probe(g, y, seed)
        })?,
    });
    out.push(OperatorCheck {
        operator: "sigmoid",
        result: check(&act_in, H, FLOOR, |g, v| {
            let y = g.sigmoid(v[0]);
            probe(g, y, seed)
        })?,
    });
    out.push(OperatorCheck {
        operator: "softmax",
        result: check(&act_in, H, FLOOR, |g, v| {
            let y = g.softmax(v[0])?;
            probe(g, y, seed)
        })?,
    });

    let probs = vec![Tensor::from_fn(&[n], |_| rng.gen_range(0.05..0.95))];
    let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
    out.push(OperatorCheck {
        operator: "log_loss",
        result: check(&probs, H, FLOOR, |g, v| g.log_loss(v[0], &labels))?,
    });

    let targets: Vec<(usize, usize, f64)> = (0..n * 2)
        .map(|_| {
            (
                rng.gen_range(0..n),
                rng.gen_range(0..fin),
                rng.gen_range(0.5..2.0),
            )
        })
        .collect();
    out.push(OperatorCheck {
        operator: "softmax_cross_entropy",
        result: check(&act_in, H, FLOOR, |g, v| {
            g.softmax_cross_entropy(v[0], &targets, 3.0)
        })?,
    });

    let target: Vec<f64> = (0..n * fin).map(|_| rng.gen_range(-1.0..1.0)).collect();
    out.push(OperatorCheck {
        operator: "squared_error",
        result: check(&act_in, H, FLOOR, |g, v| g.squared_error(v[0], &target))?,
    });

    let kk = rng.gen_range(1..4);
    let inputs = vec![rand_t(&[n, dim], rng), rand_t(&[n, kk, dim], rng)];
    out.push(OperatorCheck {
        operator: "row_dot",
        result: check(&inputs, H, FLOOR, |g, v| {
            let y = g.row_dot(v[0], v[1])?;
            probe(g, y, seed)
        })?,
    });

    let inputs = vec![rand_t(&[n * kk, dim], rng)];
    out.push(OperatorCheck {
        operator: "reshape",
        result: check(&inputs, H, FLOOR, |g, v| {
            let y = g.reshape(v[0], &[n, kk, dim])?;
            probe(g, y, seed)
        })?,
    });

    Ok(out)
}

fn shuffle<R: rand::Rng>(v: &mut [f64], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}
