//! Linear probes on frozen latents.
//!
//! Points are split 80/20 by a hash of their content, so duplicated points
//! always land on the same side.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::srcc;
use crate::error::{Error, Result};
use crate::rng::splitmix64;

pub const HOLDOUT_FRACTION: f64 = 0.2;
pub const LOGISTIC_ITERATIONS: usize = 500;
pub const LOGISTIC_LR: f64 = 0.1;
pub const RIDGE: f64 = 1e-6;

fn held_out(row: &[f64], seed: u64) -> bool {
    let mut h = Sha256::new();
    for v in row {
        h.update(v.to_le_bytes());
    }
    let key = u64::from_le_bytes(h.finalize()[..8].try_into().expect("32-byte digest"));
    (splitmix64(seed ^ key) as f64) < HOLDOUT_FRACTION * 2f64.powi(64)
}

/// `(train, test)` positions.
pub fn probe_split(latents: &[Vec<f64>], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let (test, train): (Vec<usize>, Vec<usize>) = (0..latents.len()).partition(|&i| held_out(&latents[i], seed));
    if train.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData(format!(
            "probe split of {} points left {} train / {} test",
            latents.len(),
            train.len(),
            test.len()
        )));
    }
    Ok((train, test))
}

fn check_rows(latents: &[Vec<f64>], n: usize) -> Result<usize> {
    if latents.len() != n {
        return Err(Error::shape("probe", format!("{} latents for {n} targets", latents.len())));
    }
    let h = latents.first().map_or(0, Vec::len);
    if h == 0 || latents.iter().any(|r| r.len() != h) {
        return Err(Error::shape("probe", "latent rows must share a non-zero width"));
    }
    if latents.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "probe" });
    }
    Ok(h)
}

/// Column mean and std over `rows` of `latents`; constant columns get std 0.
fn column_stats(latents: &[Vec<f64>], rows: &[usize], h: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; h];
    for &i in rows {
        mean.iter_mut().zip(&latents[i]).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut sd = vec![0.0; h];
    for &i in rows {
        sd.iter_mut().zip(&latents[i]).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2));
    }
    let first = &latents[rows[0]];
    for (j, s) in sd.iter_mut().enumerate() {
        let constant = rows.iter().all(|&i| latents[i][j] == first[j]);
        *s = if constant { 0.0 } else { (*s / n).sqrt() };
    }
    (mean, sd)
}

fn features(row: &[f64], mean: &[f64], sd: &[f64]) -> Vec<f64> {
    row.iter()
        .zip(mean)
        .zip(sd)
        .filter(|(_, s)| **s > 0.0)
        .map(|((v, m), s)| (v - m) / s)
        .collect()
}

/// Held-out accuracy (percent) of multinomial logistic regression.
pub fn linear_probe_domain(latents: &[Vec<f64>], labels: &[usize], seed: u64) -> Result<f64> {
    check_rows(latents, labels.len())?;
    let (train, test) = probe_split(latents, seed)?;
    domain_probe_on(latents, labels, &train, &test)
}

/// As [`linear_probe_domain`] on a given split.
pub fn domain_probe_on(latents: &[Vec<f64>], labels: &[usize], train: &[usize], test: &[usize]) -> Result<f64> {
    let h = check_rows(latents, labels.len())?;
    if labels.is_empty() || labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Degenerate("domain probe needs at least two classes".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let (mean, sd) = column_stats(latents, train, h);
    let xs: Vec<Vec<f64>> = latents.iter().map(|r| features(r, &mean, &sd)).collect();
    let k = xs[0].len() + 1;
    let n = train.len() as f64;

    // weights [k, classes], last row is the bias
    let mut w = vec![vec![0.0; classes]; k];
    let logits = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| x.iter().enumerate().map(|(j, v)| v * w[j][c]).sum::<f64>() + w[k - 1][c])
            .collect()
    };
    for _ in 0..LOGISTIC_ITERATIONS {
        let mut grad = vec![vec![0.0; classes]; k];
        for &i in train {
            let z = logits(&w, &xs[i]);
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..classes {
                let d = e[c] / s - if c == labels[i] { 1.0 } else { 0.0 };
                for (j, v) in xs[i].iter().enumerate() {
                    grad[j][c] += d * v;
                }
                grad[k - 1][c] += d;
            }
        }
        for (wr, gr) in w.iter_mut().zip(&grad) {
            for (wv, gv) in wr.iter_mut().zip(gr) {
                *wv -= LOGISTIC_LR * gv / n;
            }
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let z = logits(&w, &xs[i]);
            let best = (0..classes).fold(0, |b, c| if z[c] > z[b] { c } else { b });
            best == labels[i]
        })
        .count();
    Ok(100.0 * correct as f64 / test.len() as f64)
}

/// Held-out SRCC of a ridge-stabilized least-squares fit.
pub fn linear_probe_score(latents: &[Vec<f64>], y: &[f64], seed: u64) -> Result<f64> {
    check_rows(latents, y.len())?;
    if y.len() < 3 {
        return Err(Error::InsufficientData("score probe needs at least 3 points".into()));
    }
    let (train, test) = probe_split(latents, seed)?;
    score_probe_on(latents, y, &train, &test)
}

/// As [`linear_probe_score`] on a given split.
pub fn score_probe_on(latents: &[Vec<f64>], y: &[f64], train: &[usize], test: &[usize]) -> Result<f64> {
    let h = check_rows(latents, y.len())?;
    let (mean, sd) = column_stats(latents, train, h);
    let k = sd.iter().filter(|s| **s > 0.0).count();
    if k == 0 {
        return Err(Error::Degenerate("all latent dimensions are constant".into()));
    }
    let y_mean = train.iter().map(|&i| y[i]).sum::<f64>() / train.len() as f64;
    let rows: Vec<Vec<f64>> = train.iter().map(|&i| features(&latents[i], &mean, &sd)).collect();
    let x = DMatrix::from_fn(train.len(), k, |r, c| rows[r][c]);
    let yc = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i] - y_mean));
    let gram = x.transpose() * &x + DMatrix::identity(k, k) * RIDGE;
    let rhs = x.transpose() * yc;
    let beta = gram
        .cholesky()
        .ok_or_else(|| Error::NumericalStability("probe normal equations not positive definite".into()))?
        .solve(&rhs);
    let pred: Vec<f64> = test
        .iter()
        .map(|&i| y_mean + features(&latents[i], &mean, &sd).iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let truth: Vec<f64> = test.iter().map(|&i| y[i]).collect();
    srcc(&pred, &truth)
}

/// Probe results for one set of latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub name: String,
    pub domain_acc: f64,
    /// `(aspect, srcc)` pairs.
    pub srcc: Vec<(String, f64)>,
}

pub fn probe_csv(reports: &[ProbeReport]) -> String {
    let mut out = String::from("strategy,domain_acc");
    if let Some(first) = reports.first() {
        for (a, _) in &first.srcc {
            out.push_str(&format!(",srcc_{a}"));
        }
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{},{}", r.name, r.domain_acc));
        for (_, s) in &r.srcc {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, h: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, Stream::Generator, 0);
        (0..n).map(|_| (0..h).map(|_| r.sample::<f64, _>(StandardNormal)).collect()).collect()
    }

    #[test]
    fn separable_blobs() {
        let mut pts = gaussian(400, 3, 1);
        let labels: Vec<usize> = (0..400).map(|i| i % 2).collect();
        for (p, &l) in pts.iter_mut().zip(&labels) {
            p[0] += if l == 1 { 8.0 } else { -8.0 };
        }
        assert!(linear_probe_domain(&pts, &labels, 0).unwrap() >= 99.0);
    }

    #[test]
    fn random_labels_near_chance() {
        let n = 1500;
        let pts = gaussian(n, 4, 2);
        let mut r = rng::stream(3, Stream::Generator, 1);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..6)).collect();
        let (_, test) = probe_split(&pts, 0).unwrap();
        let m = test.len() as f64;
        let p = 1.0 / 6.0;
        let sigma = (p * (1.0 - p) / m).sqrt() * 100.0;
        let acc = linear_probe_domain(&pts, &labels, 0).unwrap();
        assert!((acc - 100.0 * p).abs() <= 5.0 * sigma, "{acc}");
    }

    #[test]
    fn duplicates_keep_accuracy() {
        let mut pts = gaussian(300, 2, 4);
        let labels: Vec<usize> = pts.iter().map(|p| usize::from(p[0] + 0.3 * p[1] > 0.0)).collect();
        for p in pts.iter_mut() {
            p[1] += 0.1;
        }
        let acc = linear_probe_domain(&pts, &labels, 5).unwrap();
        let doubled: Vec<Vec<f64>> = pts.iter().chain(&pts).cloned().collect();
        let dl: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        assert!((linear_probe_domain(&doubled, &dl, 5).unwrap() - acc).abs() < 1e-9);
    }

    #[test]
    fn single_class_rejected() {
        assert!(linear_probe_domain(&gaussian(20, 2, 0), &[1; 20], 0).is_err());
    }

    #[test]
    fn exact_linear_scores() {
        let pts = gaussian(200, 3, 6);
        let y: Vec<f64> = pts.iter().map(|p| 2.0 * p[0] - p[1] + 0.5 * p[2] + 1.0).collect();
        assert!((linear_probe_score(&pts, &y, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_scores_are_uncorrelated() {
        let pts = gaussian(500, 4, 7);
        let y: Vec<f64> = gaussian(500, 1, 8).into_iter().map(|v| v[0]).collect();
        assert!(linear_probe_score(&pts, &y, 0).unwrap().abs() < 0.3);
    }

    #[test]
    fn constant_dimension_ignored() {
        let pts = gaussian(150, 2, 9);
        let y: Vec<f64> = pts.iter().map(|p| p[0] + 0.2 * p[1] * p[1]).collect();
        let padded: Vec<Vec<f64>> = pts.iter().map(|p| vec![p[0], 4.0, p[1]]).collect();
        let (train, test) = probe_split(&pts, 0).unwrap();
        assert_eq!(
            score_probe_on(&padded, &y, &train, &test).unwrap(),
            score_probe_on(&pts, &y, &train, &test).unwrap()
        );
        let constant = vec![vec![1.0, 2.0]; 10];
        assert!(linear_probe_score(&constant, &[1.0; 10], 0).is_err());
    }

    #[test]
    fn deterministic() {
        let pts = gaussian(120, 3, 10);
        let labels: Vec<usize> = (0..120).map(|i| i % 3).collect();
        assert_eq!(
            linear_probe_domain(&pts, &labels, 1).unwrap(),
            linear_probe_domain(&pts, &labels, 1).unwrap()
        );
    }
}
