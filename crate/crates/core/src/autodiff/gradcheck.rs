//! Central finite-difference gradient checking.

use super::{Array, NodeId, Tape};
use crate::error::Result;

/// Norm-wise relative error between two gradient vectors.
///
/// Returns `|a - b| / max(|a|, |b|)`, or 0 when both norms are below `1e-12`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst relative error over all inputs.
    pub max_rel_err: f64,
    /// Input index at which the worst error occurred.
    pub worst_input: usize,
    pub analytic: Vec<Array>,
    pub numeric: Vec<Array>,
}

/// Checks the gradients of `build` with respect to each of `inputs`.
///
/// `build` receives the leaf ids of `inputs` and must return a scalar node.
pub fn check_gradients<F>(inputs: &[Array], step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    check_gradients_on(Tape::new, inputs, step, build)
}

/// As [`check_gradients`], but the analytic pass runs on a tape from `make_tape`.
pub fn check_gradients_on<T, F>(
    make_tape: T,
    inputs: &[Array],
    step: f64,
    build: F,
) -> Result<GradCheck>
where
    T: Fn() -> Tape,
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Array]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids = values
            .iter()
            .map(|v| tape.leaf(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &ids)?;
        Ok(tape.value(out).item())
    };

    let mut tape = make_tape();
    let ids = inputs
        .iter()
        .map(|v| tape.leaf(v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &ids)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Array> = ids.iter().map(|&id| grads.wrt(id)).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * step);
        }
        numeric.push(Array::new(inputs[i].shape().to_vec(), g)?);
    }

    let (mut max_rel_err, mut worst_input) = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a.data(), n.data());
        if e > max_rel_err {
            max_rel_err = e;
            worst_input = i;
        }
    }
    Ok(GradCheck {
        max_rel_err,
        worst_input,
        analytic,
        numeric,
    })
}
