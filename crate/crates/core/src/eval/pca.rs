//! Principal components by power iteration with deflation.

use crate::error::{Error, Result};

pub const POWER_ITERATIONS: usize = 200;
pub const POWER_TOL: f64 = 1e-10;
/// Components with variance at or below this are dropped.
pub const MIN_VARIANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Sample variance along each component.
    pub variances: Vec<f64>,
    /// Fewer components than requested were found.
    pub rank_deficient: bool,
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, v), m)| c * (v - m)).sum())
            .collect()
    }
}

fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn square(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let f = m.len();
    (0..f)
        .map(|i| (0..f).map(|j| (0..f).map(|k| m[i][k] * m[k][j]).sum()).collect())
        .collect()
}

/// Dominant unit eigenvector of a symmetric PSD matrix.
///
/// Iterates on `C^8` (three squarings, rescaled) so the gap ratio enters to
/// the eighth power per step.
fn dominant(cov: &[Vec<f64>]) -> Vec<f64> {
    let f = cov.len();
    let mut m = cov.to_vec();
    for _ in 0..3 {
        m = square(&m);
        let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        if scale > 0.0 {
            m.iter_mut().flatten().for_each(|v| *v /= scale);
        }
    }
    // fixed start with unequal entries to avoid symmetric dead spots
    let mut v: Vec<f64> = (0..f).map(|i| 1.0 + 0.1 * i as f64).collect();
    normalize(&mut v);
    for _ in 0..POWER_ITERATIONS {
        let mut next = matvec(&m, &v);
        if normalize(&mut next) == 0.0 {
            break;
        }
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    v
}

pub fn pca(points: &[Vec<f64>], dims: usize) -> Result<Pca> {
    let n = points.len();
    if n < dims + 1 {
        return Err(Error::InsufficientData(format!("PCA to {dims} dims needs at least {} points, got {n}", dims + 1)));
    }
    let f = points[0].len();
    if f == 0 || points.iter().any(|p| p.len() != f) {
        return Err(Error::shape("pca", "points must share a non-zero width"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "pca" });
    }
    let mut mean = vec![0.0; f];
    for p in points {
        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut cov = vec![vec![0.0; f]; f];
    for p in points {
        let d: Vec<f64> = p.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..f {
            for j in 0..f {
                cov[i][j] += d[i] * d[j] / (n - 1) as f64;
            }
        }
    }
    let mut components = Vec::new();
    let mut variances = Vec::new();
    for _ in 0..dims.min(f) {
        let v = dominant(&cov);
        let lambda: f64 = v.iter().zip(matvec(&cov, &v)).map(|(a, b)| a * b).sum();
        if !(lambda > MIN_VARIANCE) {
            break;
        }
        for i in 0..f {
            for j in 0..f {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        variances.push(lambda);
    }
    Ok(Pca {
        rank_deficient: components.len() < dims,
        mean,
        components,
        variances,
    })
}

/// Header of the projection CSV.
pub const PROJECTION_HEADER: &str = "x,y,predicted_mos,domain_label,truth_score";
