//! Euclidean k-means with k-means++ seeding and Lloyd iterations.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

pub const MAX_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    /// `K` rows of width `F`.
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Lloyd iterations of the winning restart.
    pub iterations: usize,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn kmeans_assign(x: &[f64], centroids: &[Vec<f64>]) -> Result<usize> {
    if centroids.is_empty() {
        return Err(Error::InvalidConfig("no centroids".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        if c.len() != x.len() {
            return Err(Error::shape(
                "kmeans_assign",
                format!("point has {} dims, centroid {k} has {}", x.len(), c.len()),
            ));
        }
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best.0)
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        *l = kmeans_assign(p, centroids).expect("dims checked");
        inertia += sq_dist(p, &centroids[*l]);
    }
    inertia
}

fn update(points: &[Vec<f64>], labels: &[usize], centroids: &mut [Vec<f64>]) {
    let f = points[0].len();
    let k = centroids.len();
    let mut sums = vec![vec![0.0; f]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            centroids[c] = sums[c].iter().map(|s| s / n).collect();
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            // farthest point from the centroid it currently belongs to
            let far = (0..points.len())
                .map(|i| (i, sq_dist(&points[i], &centroids[labels[i]])))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                .0;
            centroids[c] = points[far].clone();
        }
    }
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> KMeansFit {
    let mut centroids = plus_plus(points, k, rng);
    let mut labels = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let previous = labels.clone();
        let inertia = assign_all(points, &centroids, &mut labels);
        trace.push(inertia);
        if labels == previous || iterations == MAX_ITERATIONS {
            break;
        }
        update(points, &labels, &mut centroids);
        iterations += 1;
    }
    KMeansFit {
        inertia: *trace.last().expect("at least one assignment"),
        centroids,
        labels,
        iterations,
        inertia_trace: trace,
    }
}

/// Best of `restarts` k-means++ / Lloyd runs (lowest inertia, earliest on ties).
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansFit> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k-means needs K >= 2, got {k}")));
    }
    if points.len() < k {
        return Err(Error::InsufficientData(format!("{} points for K = {k}", points.len())));
    }
    let f = points[0].len();
    if f == 0 || points.iter().any(|p| p.len() != f) {
        return Err(Error::shape("kmeans_fit", "points must share a non-zero dimension"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "kmeans_fit" });
    }
    let mut best: Option<KMeansFit> = None;
    for r in 0..restarts.max(1) {
        let fit = lloyd(points, k, &mut rng::stream(seed, Stream::Kmeans, r as u64));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn cloud(n: usize, f: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, Stream::Generator, 0);
        (0..n).map(|_| (0..f).map(|_| StandardNormal.sample(&mut r)).collect()).collect()
    }

    #[test]
    fn separable_line() {
        let fit = kmeans_fit(&[vec![0.0], vec![10.0]], 2, 0, 1).unwrap();
        let mut c: Vec<f64> = fit.centroids.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.0, 10.0]);
        assert_eq!(fit.inertia, 0.0);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts = cloud(6, 2, 1);
        assert_eq!(kmeans_fit(&pts, 6, 3, 1).unwrap().inertia, 0.0);
    }

    #[test]
    fn contract_errors() {
        let pts = cloud(3, 2, 1);
        assert!(kmeans_fit(&pts, 1, 0, 1).is_err());
        assert!(kmeans_fit(&pts, 4, 0, 1).is_err());
        let mut bad = pts.clone();
        bad[1][0] = f64::NAN;
        assert!(matches!(kmeans_fit(&bad, 2, 0, 1), Err(Error::NonFinite { .. })));
        assert!(kmeans_assign(&[0.0], &[vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        assert_eq!(kmeans_assign(&[0.0], &[vec![-1.0], vec![1.0]]).unwrap(), 0);
        assert_eq!(kmeans_assign(&[1.0], &[vec![-1.0], vec![1.0]]).unwrap(), 1);
    }

    #[test]
    fn assign_matches_linear_scan() {
        let cs = cloud(5, 3, 2);
        for x in cloud(50, 3, 3) {
            let scan = (0..cs.len())
                .min_by(|&a, &b| sq_dist(&x, &cs[a]).total_cmp(&sq_dist(&x, &cs[b])))
                .unwrap();
            assert_eq!(kmeans_assign(&x, &cs).unwrap(), scan);
        }
    }

    #[test]
    fn lloyd_inertia_never_increases_and_labels_are_nearest() {
        for seed in 0..10 {
            let pts = cloud(200, 3, seed);
            let fit = kmeans_fit(&pts, 5, seed, 1).unwrap();
            for w in fit.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{w:?}");
            }
            for (p, &l) in pts.iter().zip(&fit.labels) {
                assert_eq!(kmeans_assign(p, &fit.centroids).unwrap(), l);
            }
        }
    }

    #[test]
    fn deterministic() {
        let pts = cloud(100, 2, 4);
        assert_eq!(kmeans_fit(&pts, 4, 9, 3).unwrap(), kmeans_fit(&pts, 4, 9, 3).unwrap());
    }

    #[test]
    fn reseeds_empty_clusters() {
        // duplicates make k-means++ pick the same location twice
        let pts = vec![vec![0.0], vec![0.0], vec![0.0], vec![5.0]];
        let fit = kmeans_fit(&pts, 3, 0, 1).unwrap();
        assert!(fit.labels.iter().all(|&l| l < 3));
        assert_eq!(fit.inertia, 0.0);
    }
}
