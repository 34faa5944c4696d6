//! Runtime verification suites: finite-difference gradient checks for every
//! tape operation and independent oracles for the numeric routines.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::gradcheck::{check_gradients_on, relative_error, GradCheck};
use crate::autodiff::{Array, Fault, NodeId, Tape};
use crate::domains::{kmeans_fit, mean_pool};
use crate::error::Result;
use crate::eval::{pca, srcc, student_t_cdf};
use crate::model::{self, Bound, Mode, ModelConfig, ModelParams};
use crate::rng::{self, Rng, Stream};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-6;
pub const GRL_GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst observed error.
    pub error: f64,
    pub tolerance: f64,
    /// First failing case, if any.
    pub counterexample: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SelfCheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn first_failure(&self) -> Option<&CheckOutcome> {
        self.outcomes.iter().find(|o| !o.passed)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SelfCheckOptions {
    pub trials: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            fault: None,
        }
    }
}

fn outcome(name: &str, error: f64, tolerance: f64, counterexample: Option<String>) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed: counterexample.is_none() && error <= tolerance,
        error,
        tolerance,
        counterexample,
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Values bounded away from zero, for piecewise-linear ops.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).expect("sized")
}

fn dim(rng: &mut Rng) -> usize {
    rng.random_range(1..=5)
}

/// `sum(w * node)` with fixed random weights, making any node a scalar.
fn scalarize(tape: &mut Tape, node: NodeId, weights: &[f64]) -> Result<NodeId> {
    let masked = tape.mask(node, weights.to_vec())?;
    tape.sum(masked)
}

type Build = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;

struct Case {
    inputs: Vec<Array>,
    build: Build,
    /// Reversal-free function whose true gradient the analytic gradient of
    /// `build` must match at `inputs`; `build` itself when absent.
    reference: Option<Build>,
}

type CaseMaker = fn(&mut Rng) -> Case;

fn weights_for(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn case_matmul(rng: &mut Rng) -> Case {
    let (n, k, m) = (dim(rng), dim(rng), dim(rng));
    let w = weights_for(rng, n * m);
    Case {
        inputs: vec![uniform(rng, &[n, k], -1.0, 1.0), uniform(rng, &[k, m], -1.0, 1.0)],
        build: Box::new(move |t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            scalarize(t, y, &w)
        }),
        reference: None,
    }
}

fn case_add_bias(rng: &mut Rng) -> Case {
    let (n, m) = (dim(rng), dim(rng));
    let w = weights_for(rng, n * m);
    Case {
        inputs: vec![uniform(rng, &[n, m], -1.0, 1.0), uniform(rng, &[m], -1.0, 1.0)],
        build: Box::new(move |t, ids| {
            let y = t.add_bias(ids[0], ids[1])?;
            scalarize(t, y, &w)
        }),
        reference: None,
    }
}

fn case_add(rng: &mut Rng) -> Case {
    let (n, m) = (dim(rng), dim(rng));
    let w = weights_for(rng, n * m);
    Case {
        inputs: vec![uniform(rng, &[n, m], -1.0, 1.0), uniform(rng, &[n, m], -1.0, 1.0)],
        build: Box::new(move |t, ids| {
            let y = t.add(ids[0], ids[1])?;
            scalarize(t, y, &w)
        }),
        reference: None,
    }
}

fn case_relu(rng: &mut Rng) -> Case {
    let (n, m) = (dim(rng), dim(rng));
    let w = weights_for(rng, n * m);
    Case {
        inputs: vec![away_from_zero(rng, &[n, m])],
        build: Box::new(move |t, ids| {
            let y = t.relu(ids[0])?;
            scalarize(t, y, &w)
        }),
        reference: None,
    }
}

fn case_concat(rng: &mut Rng) -> Case {
    let (n, a, b) = (dim(rng), dim(rng), dim(rng));
    let w = weights_for(rng, n * (a + b));
    Case {
        inputs: vec![uniform(rng, &[n, a], -1.0, 1.0), uniform(rng, &[n, b], -1.0, 1.0)],
        build: Box::new(move |t, ids| {
            let y = t.concat(ids[0], ids[1])?;
            scalarize(t, y, &w)
        }),
        reference: None,
    }
}

fn case_slice(rng: &mut Rng) -> Case {
    let (n, m) = (dim(rng), dim(rng));
    let start = rng.random_range(0..m);
    let len = rng.random_range(1..=m - start);
    let w = weights_for(rng, n * len);
    Case {
        inputs: vec![uniform(rng, &[n, m], -1.0, 1.0)],
        build: Box::new(move |t, ids| {
            let y = t.slice(ids[0], start, len)?;
            scalarize(t, y, &w)
        }),
        reference: None,
    }
}

fn case_scale(rng: &mut Rng) -> Case {
    let (n, m) = (dim(rng), dim(rng));
    let factor = rng.random_range(-2.0..2.0);
    let w = weights_for(rng, n * m);
    Case {
        inputs: vec![uniform(rng, &[n, m], -1.0, 1.0)],
        build: Box::new(move |t, ids| {
            let y = t.scale(ids[0], factor)?;
            scalarize(t, y, &w)
        }),
        reference: None,
    }
}

fn case_exp_diagonal(rng: &mut Rng) -> Case {
    let (b, a) = (dim(rng), dim(rng).min(4));
    let w = weights_for(rng, b * a * a);
    Case {
        inputs: vec![uniform(rng, &[b, a * (a + 1) / 2], -1.0, 1.0)],
        build: Box::new(move |t, ids| {
            let y = t.exp_diagonal(ids[0])?;
            scalarize(t, y, &w)
        }),
        reference: None,
    }
}

fn case_grl(rng: &mut Rng) -> Case {
    let (n, m) = (dim(rng), dim(rng));
    let scale = rng.random_range(0.1..2.0);
    let w = weights_for(rng, n * m);
    let wr = w.clone();
    Case {
        inputs: vec![uniform(rng, &[n, m], -1.0, 1.0)],
        build: Box::new(move |t, ids| {
            let y = t.grl(ids[0], scale)?;
            scalarize(t, y, &w)
        }),
        reference: Some(Box::new(move |t, ids| {
            let y = t.scale(ids[0], -scale)?;
            scalarize(t, y, &wr)
        })),
    }
}

fn case_gnll(rng: &mut Rng) -> Case {
    let (b, a) = (dim(rng).min(3), dim(rng).min(4));
    let y = uniform(rng, &[b, a], -1.5, 1.5);
    Case {
        inputs: vec![uniform(rng, &[b, a], -1.0, 1.0), uniform(rng, &[b, a * (a + 1) / 2], -0.5, 0.5)],
        build: Box::new(move |t, ids| {
            let chol = t.exp_diagonal(ids[1])?;
            t.gnll(ids[0], chol, &y)
        }),
        reference: None,
    }
}

fn case_softmax_ce(rng: &mut Rng) -> Case {
    let (b, d) = (dim(rng), dim(rng).max(2));
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..d)).collect();
    Case {
        inputs: vec![uniform(rng, &[b, d], -3.0, 3.0)],
        build: Box::new(move |t, ids| t.softmax_cross_entropy(ids[0], &labels)),
        reference: None,
    }
}

/// Two-layer ReLU network under the Gaussian NLL.
fn case_net_gnll(rng: &mut Rng) -> Case {
    let (b, f, hdim, a) = (dim(rng).min(3), dim(rng), dim(rng), dim(rng).min(3));
    let p = a + a * (a + 1) / 2;
    let x = away_from_zero(rng, &[b, f]);
    let y = uniform(rng, &[b, a], -1.0, 1.0);
    Case {
        inputs: vec![
            uniform(rng, &[f, hdim], -0.8, 0.8),
            away_from_zero(rng, &[hdim]),
            uniform(rng, &[hdim, p], -0.5, 0.5),
            uniform(rng, &[p], -0.2, 0.2),
        ],
        build: Box::new(move |t, ids| {
            let xi = t.leaf(x.clone())?;
            let z = t.matmul(xi, ids[0])?;
            let z = t.add_bias(z, ids[1])?;
            let h = t.relu(z)?;
            let o = t.matmul(h, ids[2])?;
            let o = t.add_bias(o, ids[3])?;
            let m = t.slice(o, 0, a)?;
            let packed = t.slice(o, a, p - a)?;
            let chol = t.exp_diagonal(packed)?;
            t.gnll(m, chol, &y)
        }),
        reference: None,
    }
}

/// `task + lambda * CE(domain(grl(h)))` on a linear encoder.
///
/// The reference is `task - lambda * CE(h W_d) + 2 lambda * CE(h0 W_d)` with
/// `h0` frozen at the check point: encoder weights see the reversed domain
/// term while the domain weights see it unchanged.
fn case_grl_objective(rng: &mut Rng) -> Case {
    let (b, f, hdim, a, d) = (dim(rng).min(3), dim(rng), dim(rng), dim(rng).min(3), dim(rng).max(2));
    let p = a + a * (a + 1) / 2;
    let lambda = if rng.random::<bool>() { 0.5 } else { 0.1 };
    let x = uniform(rng, &[b, f], -1.0, 1.0);
    let y = uniform(rng, &[b, a], -1.0, 1.0);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..d)).collect();
    let inputs = vec![
        uniform(rng, &[f, hdim], -0.8, 0.8),
        uniform(rng, &[hdim, p], -0.5, 0.5),
        uniform(rng, &[hdim, d], -1.0, 1.0),
    ];
    let task = move |t: &mut Tape, x: &Array, ids: &[NodeId]| -> Result<(NodeId, NodeId)> {
        let xi = t.leaf(x.clone())?;
        let h = t.matmul(xi, ids[0])?;
        let o = t.matmul(h, ids[1])?;
        let m = t.slice(o, 0, a)?;
        let packed = t.slice(o, a, p - a)?;
        let chol = t.exp_diagonal(packed)?;
        Ok((t.gnll(m, chol, &y)?, h))
    };
    let task_ref = task.clone();
    let (xr, lr) = (x.clone(), labels.clone());
    let mut h0 = Tape::new();
    let h0 = (|| -> Result<Array> {
        let xi = h0.leaf(x.clone())?;
        let we = h0.leaf(inputs[0].clone())?;
        let h = h0.matmul(xi, we)?;
        Ok(h0.value(h).clone())
    })()
    .expect("shapes agree");
    Case {
        inputs,
        build: Box::new(move |t, ids| {
            let (task, h) = task(t, &x, ids)?;
            let r = t.grl(h, 1.0)?;
            let logits = t.matmul(r, ids[2])?;
            let adv = t.softmax_cross_entropy(logits, &labels)?;
            let weighted = t.scale(adv, lambda)?;
            t.add(task, weighted)
        }),
        reference: Some(Box::new(move |t, ids| {
            let (task, h) = task_ref(t, &xr, ids)?;
            let logits = t.matmul(h, ids[2])?;
            let adv = t.softmax_cross_entropy(logits, &lr)?;
            let reversed = t.scale(adv, -lambda)?;
            let frozen = t.leaf(h0.clone())?;
            let logits0 = t.matmul(frozen, ids[2])?;
            let adv0 = t.softmax_cross_entropy(logits0, &lr)?;
            let doubled = t.scale(adv0, 2.0 * lambda)?;
            let s = t.add(task, reversed)?;
            t.add(s, doubled)
        })),
    }
}

fn run_case(make_tape: impl Fn() -> Tape + Copy, case: &Case) -> Result<GradCheck> {
    let mut r = check_gradients_on(make_tape, &case.inputs, FD_STEP, &case.build)?;
    if let Some(reference) = &case.reference {
        r.numeric = check_gradients_on(Tape::new, &case.inputs, FD_STEP, reference)?.numeric;
        (r.max_rel_err, r.worst_input) = (0.0, 0);
        for (i, (a, n)) in r.analytic.iter().zip(&r.numeric).enumerate() {
            let e = relative_error(a.data(), n.data());
            if e > r.max_rel_err {
                (r.max_rel_err, r.worst_input) = (e, i);
            }
        }
    }
    Ok(r)
}

/// Finite-difference checks over randomized instances of every operation.
pub fn gradient_suite(opts: &SelfCheckOptions) -> Vec<CheckOutcome> {
    let kinds: [(&str, CaseMaker, f64); 13] = [
        ("grad/matmul", case_matmul, GRAD_TOL),
        ("grad/add_bias", case_add_bias, GRAD_TOL),
        ("grad/add", case_add, GRAD_TOL),
        ("grad/relu", case_relu, GRAD_TOL),
        ("grad/concat", case_concat, GRAD_TOL),
        ("grad/slice", case_slice, GRAD_TOL),
        ("grad/scale", case_scale, GRAD_TOL),
        ("grad/exp_diagonal", case_exp_diagonal, GRAD_TOL),
        ("grad/grl", case_grl, GRL_GRAD_TOL),
        ("grad/gnll", case_gnll, GRAD_TOL),
        ("grad/softmax_cross_entropy", case_softmax_ce, GRAD_TOL),
        ("grad/two_layer_gnll", case_net_gnll, GRAD_TOL),
        ("grad/grl_objective", case_grl_objective, GRL_GRAD_TOL),
    ];
    let fault = opts.fault;
    let make_tape = move || match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    kinds
        .iter()
        .enumerate()
        .map(|(k, (name, make, tol))| {
            let mut rng = rng::stream(opts.seed, Stream::Generator, 1000 + k as u64);
            let mut worst = 0.0f64;
            let mut counterexample = None;
            for trial in 0..opts.trials {
                let case = make(&mut rng);
                match run_case(make_tape, &case) {
                    Ok(r) => {
                        worst = worst.max(r.max_rel_err);
                        if r.max_rel_err > *tol && counterexample.is_none() {
                            counterexample = Some(format!(
                                "trial {trial}: input {} shape {:?}, rel. err {:.3e}; analytic {:?} vs numeric {:?}",
                                r.worst_input,
                                case.inputs[r.worst_input].shape(),
                                r.max_rel_err,
                                r.analytic[r.worst_input].data(),
                                r.numeric[r.worst_input].data()
                            ));
                        }
                    }
                    Err(e) => {
                        counterexample.get_or_insert_with(|| format!("trial {trial}: {e}"));
                    }
                }
            }
            outcome(name, worst, *tol, counterexample)
        })
        .collect()
}

fn small_model(seed: u64) -> (ModelConfig, ModelParams, Array, Vec<usize>) {
    let config = ModelConfig {
        input_dim: 5,
        encoder_hidden: vec![7],
        latent_dim: 4,
        aspects: vec!["a".into(), "b".into()],
        domain_hidden: vec![6],
        num_domains: 3,
        dropout_rate: 0.0,
        seed,
    };
    let params = ModelParams::init(&config).expect("valid config");
    let mut r = rng::stream(seed, Stream::Generator, 2000);
    let x = uniform(&mut r, &[6, 5], -1.0, 1.0);
    let labels = (0..6).map(|_| r.random_range(0..3)).collect();
    (config, params, x, labels)
}

fn encoder_grads(config: &ModelConfig, params: &ModelParams, x: &Array, labels: &[usize], lambda: f64, reversed: bool) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = Bound::bind(params, &mut tape)?;
    let xi = tape.leaf(x.clone())?;
    let h = model::encode(config, &bound, &mut tape, xi, &mut Mode::Infer)?;
    let logits = if reversed {
        model::domain_head(&bound, &mut tape, h, 1.0)?
    } else {
        model::domain_mlp(&bound, &mut tape, h)?
    };
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    let obj = if reversed { tape.scale(ce, lambda)? } else { ce };
    let g = tape.backward(obj)?;
    Ok(bound.encoder_ids().into_iter().flat_map(|id| g.wrt(id).into_data()).collect())
}

/// Largest elementwise gap between encoder gradients of `lambda * CE(grl(h))`
/// and `-lambda` times those of `CE(h)`.
pub fn grl_law_gap(lambda: f64, seed: u64) -> Result<f64> {
    let (config, params, x, labels) = small_model(seed);
    let with = encoder_grads(&config, &params, &x, &labels, lambda, true)?;
    let without = encoder_grads(&config, &params, &x, &labels, lambda, false)?;
    Ok(with.iter().zip(&without).map(|(a, b)| (a + lambda * b).abs()).fold(0.0, f64::max))
}

fn gnll_explicit_inverse(m: [f64; 2], l: [[f64; 2]; 2], y: [f64; 2]) -> f64 {
    let s = [
        [l[0][0] * l[0][0], l[0][0] * l[1][0]],
        [l[1][0] * l[0][0], l[1][0] * l[1][0] + l[1][1] * l[1][1]],
    ];
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
    let r = [y[0] - m[0], y[1] - m[1]];
    let quad = r[0] * (inv[0][0] * r[0] + inv[0][1] * r[1]) + r[1] * (inv[1][0] * r[0] + inv[1][1] * r[1]);
    0.5 * (quad + det.ln() + 2.0 * (2.0 * PI).ln())
}

fn rank_oracle(a: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|x| {
            let less = a.iter().filter(|y| *y < x).count() as f64;
            let equal = a.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Upper-tail-free t CDF by Simpson integration of the unnormalized density.
fn t_cdf_by_quadrature(t: f64, df: f64) -> f64 {
    let density = |x: f64| (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let simpson = |a: f64, b: f64, n: usize| {
        let h = (b - a) / n as f64;
        let mut s = density(a) + density(b);
        for i in 1..n {
            s += density(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let limit = 60.0;
    let total = simpson(-limit, limit, 200_000);
    simpson(-limit, t, 200_000) / total
}

fn exhaustive_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        if counts.iter().all(|&c| c > 0) {
            let mut inertia = 0.0;
            for c in 0..k {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                let f = members[0].len();
                let centre: Vec<f64> = (0..f).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
                inertia += members.iter().map(|p| p.iter().zip(&centre).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>();
            }
            best = best.min(inertia);
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// Closed forms and independent oracles for the numeric routines.
pub fn oracle_suite(opts: &SelfCheckOptions) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut rng = rng::stream(opts.seed, Stream::Generator, 3000);
    let fail = |e: crate::error::Error| Some(e.to_string());

    // Gaussian NLL: identity case and explicit 2x2 inverse
    let identity = (|| -> Result<f64> {
        let mut t = Tape::new();
        let m = t.leaf(Array::zeros(&[4]))?;
        let l = t.leaf(Array::new(vec![4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect())?)?;
        let v = t.gnll(m, l, &Array::zeros(&[4]))?;
        Ok(t.value(v).item())
    })();
    match identity {
        Ok(v) => out.push(outcome("closed/gnll_identity", (v - 2.0 * (2.0 * PI).ln()).abs(), 1e-9, None)),
        Err(e) => out.push(outcome("closed/gnll_identity", f64::INFINITY, 1e-9, fail(e))),
    }
    let mut worst = 0.0f64;
    let mut cx = None;
    for trial in 0..opts.trials {
        let m = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let y = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let l = [[rng.random_range(0.3..2.0), 0.0], [rng.random_range(-1.0..1.0), rng.random_range(0.3..2.0)]];
        let r = (|| -> Result<f64> {
            let mut t = Tape::new();
            let mi = t.leaf(Array::vector(m.to_vec()))?;
            let li = t.leaf(Array::new(vec![2, 2], vec![l[0][0], 0.0, l[1][0], l[1][1]])?)?;
            let v = t.gnll(mi, li, &Array::vector(y.to_vec()))?;
            Ok(t.value(v).item())
        })();
        match r {
            Ok(v) => {
                let e = (v - gnll_explicit_inverse(m, l, y)).abs();
                worst = worst.max(e);
                if e > 1e-12 && cx.is_none() {
                    cx = Some(format!("trial {trial}: m {m:?} L {l:?} y {y:?} error {e:.3e}"));
                }
            }
            Err(e) => {
                cx.get_or_insert_with(|| format!("trial {trial}: {e}"));
            }
        }
    }
    out.push(outcome("oracle/gnll_explicit_inverse", worst, 1e-12, cx));

    // cross-entropy: uniform logits and direct formula
    let mut worst = 0.0f64;
    let mut cx = None;
    for d in 2..=8 {
        let r = (|| -> Result<f64> {
            let mut t = Tape::new();
            let z = t.leaf(Array::new(vec![1, d], vec![0.7; d])?)?;
            let v = t.softmax_cross_entropy(z, &[d - 1])?;
            Ok(t.value(v).item())
        })();
        match r {
            Ok(v) => worst = worst.max((v - (d as f64).ln()).abs()),
            Err(e) => cx = cx.or(fail(e)),
        }
    }
    out.push(outcome("closed/ce_uniform", worst, 1e-12, cx));
    let mut worst = 0.0f64;
    let mut cx = None;
    for trial in 0..opts.trials {
        let z: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let label = rng.random_range(0..3);
        let direct = -(z[label].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln();
        let r = (|| -> Result<f64> {
            let mut t = Tape::new();
            let zi = t.leaf(Array::new(vec![1, 3], z.clone())?)?;
            let v = t.softmax_cross_entropy(zi, &[label])?;
            Ok(t.value(v).item())
        })();
        match r {
            Ok(v) => {
                let e = (v - direct).abs();
                worst = worst.max(e);
                if e > 1e-12 && cx.is_none() {
                    cx = Some(format!("trial {trial}: logits {z:?} label {label}"));
                }
            }
            Err(e) => cx = cx.or(fail(e)),
        }
    }
    out.push(outcome("oracle/ce_direct", worst, 1e-12, cx));

    // gradient reversal law at both lambda values used in training
    for lambda in [0.1, 0.5] {
        let name = format!("law/grl_sign_lambda_{lambda}");
        match grl_law_gap(lambda, opts.seed) {
            Ok(gap) => out.push(outcome(&name, gap, 1e-12, None)),
            Err(e) => out.push(outcome(&name, f64::INFINITY, 1e-12, fail(e))),
        }
    }

    // Spearman with ties
    let mut worst = 0.0f64;
    let mut cx = None;
    let fixed = srcc(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]);
    let expect = pearson_oracle(&rank_oracle(&[1.0, 2.0, 2.0, 3.0]), &rank_oracle(&[1.0, 3.0, 2.0, 4.0]));
    match fixed {
        Ok(v) => worst = worst.max((v - expect).abs()),
        Err(e) => cx = fail(e),
    }
    for trial in 0..opts.trials {
        let n = rng.random_range(3..20);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        let ra = rank_oracle(&a);
        let rb = rank_oracle(&b);
        if ra.iter().all(|v| *v == ra[0]) || rb.iter().all(|v| *v == rb[0]) {
            continue;
        }
        match srcc(&a, &b) {
            Ok(v) => {
                let e = (v - pearson_oracle(&ra, &rb)).abs();
                worst = worst.max(e);
                if e > 1e-12 && cx.is_none() {
                    cx = Some(format!("trial {trial}: {a:?} vs {b:?}"));
                }
            }
            Err(e) => cx = cx.or(fail(e)),
        }
    }
    out.push(outcome("oracle/srcc_ties", worst, 1e-12, cx));

    // Student t CDF
    let cauchy = (student_t_cdf(1.0, 1.0) - 0.75).abs();
    out.push(outcome("closed/t_cdf_df1", cauchy, 1e-14, None));
    let p_incomplete_beta = 2.0 * (1.0 - student_t_cdf(1.96, 200.0));
    let p_quadrature = 2.0 * (1.0 - t_cdf_by_quadrature(1.96, 200.0));
    let gap = (p_incomplete_beta - p_quadrature).abs().max((p_incomplete_beta - 0.0512).abs());
    out.push(outcome("oracle/t_cdf_df200", gap, 1e-3, None));

    // k-means against exhaustive partitions
    let mut worst = 0.0f64;
    let mut cx = None;
    for trial in 0..5 {
        let pts: Vec<Vec<f64>> = (0..8).map(|_| (0..2).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let best = exhaustive_inertia(&pts, 3);
        match kmeans_fit(&pts, 3, opts.seed + trial, 20) {
            Ok(fit) => {
                let e = (fit.inertia - best).abs() / best.max(1e-12);
                worst = worst.max(e);
                if e > 1e-9 && cx.is_none() {
                    cx = Some(format!("trial {trial}: inertia {} vs optimum {best}", fit.inertia));
                }
            }
            Err(e) => cx = cx.or(fail(e)),
        }
    }
    out.push(outcome("oracle/kmeans_exhaustive", worst, 1e-9, cx));

    // PCA against a dense symmetric eigendecomposition
    let mut worst = 0.0f64;
    let mut cx = None;
    for trial in 0..opts.trials.min(20) {
        let pts: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let mean: Vec<f64> = (0..3).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / 5.0).collect();
        let c = DMatrix::from_fn(5, 3, |i, j| pts[i][j] - mean[j]);
        let eig = SymmetricEigen::new(c.transpose() * &c / 4.0);
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        match pca(&pts, 2) {
            Ok(p) => {
                for (k, &idx) in order.iter().take(p.components.len()).enumerate() {
                    let e = eig.eigenvectors.column(idx);
                    let sign = p.components[k].iter().zip(e.iter()).map(|(a, b)| a * b).sum::<f64>().signum();
                    let gap = p.components[k].iter().zip(e.iter()).map(|(a, b)| (a - sign * b).abs()).fold(0.0, f64::max);
                    worst = worst.max(gap);
                    if gap > 1e-8 && cx.is_none() {
                        cx = Some(format!("trial {trial}: component {k} off by {gap:.3e}"));
                    }
                }
            }
            Err(e) => cx = cx.or(fail(e)),
        }
    }
    out.push(outcome("oracle/pca_eigen", worst, 1e-8, cx));

    // mean pooling against compensated summation
    let mut worst = 0.0f64;
    let mut cx = None;
    for _ in 0..opts.trials {
        let x = uniform(&mut rng, &[7, 3], -10.0, 10.0);
        match mean_pool(&x) {
            Ok(got) => {
                for j in 0..3 {
                    let (mut s, mut c) = (0.0f64, 0.0f64);
                    for i in 0..7 {
                        let v = x.data()[i * 3 + j];
                        let t = s + v;
                        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
                        s = t;
                    }
                    worst = worst.max((got[j] - (s + c) / 7.0).abs());
                }
            }
            Err(e) => cx = cx.or(fail(e)),
        }
    }
    out.push(outcome("oracle/mean_pool", worst, 1e-14, cx));
    out
}

pub fn run_selfcheck(opts: &SelfCheckOptions) -> SelfCheckReport {
    let mut outcomes = gradient_suite(opts);
    outcomes.extend(oracle_suite(opts));
    SelfCheckReport { outcomes }
}
