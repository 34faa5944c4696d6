//! Domain labels for the adversarial branch.
//!
//! Each labelling rule implements [`DomainStrategy`] and is registered by
//! name in a [`StrategyRegistry`]; callers pick one at runtime.

mod kmeans;

pub use kmeans::{kmeans_assign, kmeans_fit, KMeansFit, MAX_ITERATIONS};

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Array;
use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Column means of a `[T, F]` matrix; a rank-1 input is returned as is.
pub fn mean_pool(features: &Array) -> Result<Vec<f64>> {
    match features.shape() {
        [_] => Ok(features.data().to_vec()),
        [0, _] => Err(Error::InsufficientData("mean_pool over zero frames".into())),
        &[t, f] => {
            let mut out = vec![0.0; f];
            for row in features.rows() {
                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= t as f64);
            Ok(out)
        }
        s => Err(Error::shape("mean_pool", format!("expected [T, F], got {s:?}"))),
    }
}

/// Per-dimension z-scoring fitted on one set of points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Constant dimensions get unit scale.
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::InsufficientData("no points to standardize".into()));
        }
        let f = points[0].len();
        let mut mean = vec![0.0; f];
        for p in points {
            mean.iter_mut().zip(p).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut std = vec![0.0; f];
        for p in points {
            std.iter_mut().zip(p).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n as f64);
        }
        std.iter_mut().for_each(|s| *s = if *s > 0.0 { s.sqrt() } else { 1.0 });
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// Domain label per record id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAssignment {
    pub strategy: String,
    pub num_domains: usize,
    pub labels: BTreeMap<String, usize>,
    /// Source tags in label order (source strategy only).
    pub label_names: Vec<String>,
    /// Cluster centres in the clustering space (k-means only).
    pub centroids: Vec<Vec<f64>>,
    pub standardization: Option<Standardization>,
    pub inertia: Option<f64>,
}

impl DomainAssignment {
    pub fn label(&self, id: &str) -> Option<usize> {
        self.labels.get(id).copied()
    }

    /// Labels for the given records; every one must be labelled.
    pub fn labels_for(&self, corpus: &Corpus, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                let id = &corpus.records()[i].id;
                self.label(id).ok_or_else(|| Error::Record {
                    id: id.clone(),
                    msg: format!("no `{}` domain label", self.strategy),
                })
            })
            .collect()
    }

    /// SHA-256 over the little-endian centroid values, hex encoded.
    pub fn centroid_hash(&self) -> Option<String> {
        if self.centroids.is_empty() {
            return None;
        }
        let mut h = Sha256::new();
        for v in self.centroids.iter().flatten() {
            h.update(v.to_le_bytes());
        }
        Some(hex::encode(h.finalize()))
    }

    /// `record_id,domain_label` rows in corpus order.
    pub fn to_csv(&self, corpus: &Corpus) -> String {
        let mut out = String::from("record_id,domain_label\n");
        for r in corpus.records() {
            if let Some(l) = self.label(&r.id) {
                out.push_str(&format!("{},{l}\n", r.id));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub name: String,
    /// Cluster count for k-means.
    pub k: usize,
    /// Label count for random labels.
    pub d: usize,
    pub seed: u64,
    pub standardize: bool,
    pub restarts: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            name: "source".into(),
            k: 8,
            d: 6,
            seed: 0,
            standardize: true,
            restarts: 1,
        }
    }
}

pub trait DomainStrategy: Send + Sync {
    fn name(&self) -> &str;
    /// Adversarial weight used when none is given.
    fn default_lambda(&self) -> f64;
    fn assign(&self, corpus: &Corpus) -> Result<DomainAssignment>;
}

pub type StrategyBuilder = fn(&StrategyConfig) -> Result<Box<dyn DomainStrategy>>;

pub struct StrategyRegistry {
    builders: BTreeMap<String, StrategyBuilder>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            builders: BTreeMap::new(),
        }
    }

    /// `source`, `kmeans` and `random`.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("source", |_| Ok(Box::new(SourceStrategy)));
        r.register("kmeans", |c| {
            if c.k < 2 {
                return Err(Error::InvalidConfig(format!("kmeans needs K >= 2, got {}", c.k)));
            }
            Ok(Box::new(KmeansStrategy {
                k: c.k,
                seed: c.seed,
                standardize: c.standardize,
                restarts: c.restarts.max(1),
            }))
        });
        r.register("random", |c| {
            if c.d < 2 {
                return Err(Error::InvalidConfig(format!("random labels need D >= 2, got {}", c.d)));
            }
            Ok(Box::new(RandomStrategy { d: c.d, seed: c.seed }))
        });
        r
    }

    pub fn register(&mut self, name: &str, builder: StrategyBuilder) {
        self.builders.insert(name.to_string(), builder);
    }

    pub fn names(&self) -> Vec<String> {
        self.builders.keys().cloned().collect()
    }

    pub fn build(&self, config: &StrategyConfig) -> Result<Box<dyn DomainStrategy>> {
        let builder = self.builders.get(&config.name).ok_or_else(|| Error::UnknownStrategy {
            name: config.name.clone(),
            known: self.names().join(", "),
        })?;
        builder(config)
    }
}

/// Dataset identifiers, sorted lexicographically.
pub struct SourceStrategy;

impl DomainStrategy for SourceStrategy {
    fn name(&self) -> &str {
        "source"
    }

    fn default_lambda(&self) -> f64 {
        0.5
    }

    fn assign(&self, corpus: &Corpus) -> Result<DomainAssignment> {
        let mut names = BTreeSet::new();
        for r in corpus.records() {
            if matches!(r.split, Split::Train | Split::Val) {
                if r.source.is_empty() {
                    return Err(Error::Record {
                        id: r.id.clone(),
                        msg: "empty source tag".into(),
                    });
                }
                names.insert(r.source.clone());
            }
        }
        if names.len() < 2 {
            return Err(Error::Degenerate(format!(
                "source labels need at least 2 distinct sources, found {}",
                names.len()
            )));
        }
        let label_names: Vec<String> = names.into_iter().collect();
        let index: BTreeMap<&str, usize> = label_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let labels = corpus
            .records()
            .iter()
            .filter_map(|r| index.get(r.source.as_str()).map(|&l| (r.id.clone(), l)))
            .collect();
        Ok(DomainAssignment {
            strategy: self.name().into(),
            num_domains: label_names.len(),
            labels,
            label_names,
            centroids: Vec::new(),
            standardization: None,
            inertia: None,
        })
    }
}

/// Clusters of pooled train features; other records get the nearest centroid.
pub struct KmeansStrategy {
    pub k: usize,
    pub seed: u64,
    pub standardize: bool,
    pub restarts: usize,
}

impl DomainStrategy for KmeansStrategy {
    fn name(&self) -> &str {
        "kmeans"
    }

    fn default_lambda(&self) -> f64 {
        0.1
    }

    fn assign(&self, corpus: &Corpus) -> Result<DomainAssignment> {
        let train = corpus.split_indices(Split::Train);
        let raw: Vec<Vec<f64>> = train.iter().map(|&i| corpus.pooled(i)).collect();
        let standardization = if self.standardize {
            Some(Standardization::fit(&raw)?)
        } else {
            None
        };
        let project = |x: Vec<f64>| match &standardization {
            Some(s) => s.apply(&x),
            None => x,
        };
        let points: Vec<Vec<f64>> = raw.into_iter().map(project).collect();
        let fit = kmeans_fit(&points, self.k, self.seed, self.restarts)?;
        let mut labels = BTreeMap::new();
        for (&i, &l) in train.iter().zip(&fit.labels) {
            labels.insert(corpus.records()[i].id.clone(), l);
        }
        for (i, r) in corpus.records().iter().enumerate() {
            if r.split != Split::Train {
                labels.insert(r.id.clone(), kmeans_assign(&project(corpus.pooled(i)), &fit.centroids)?);
            }
        }
        Ok(DomainAssignment {
            strategy: self.name().into(),
            num_domains: self.k,
            labels,
            label_names: Vec::new(),
            centroids: fit.centroids,
            standardization,
            inertia: Some(fit.inertia),
        })
    }
}

/// Uniform labels keyed by `(seed, record id)`.
pub struct RandomStrategy {
    pub d: usize,
    pub seed: u64,
}

impl DomainStrategy for RandomStrategy {
    fn name(&self) -> &str {
        "random"
    }

    fn default_lambda(&self) -> f64 {
        0.1
    }

    fn assign(&self, corpus: &Corpus) -> Result<DomainAssignment> {
        let labels = corpus
            .records()
            .iter()
            .map(|r| {
                let mut g = rng::stream(self.seed, Stream::RandomDomain, rng::key_of(&r.id));
                (r.id.clone(), g.random_range(0..self.d))
            })
            .collect();
        Ok(DomainAssignment {
            strategy: self.name().into(),
            num_domains: self.d,
            labels,
            label_names: Vec::new(),
            centroids: Vec::new(),
            standardization: None,
            inertia: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Features, QualityRecord, Schema};

    fn record(id: &str, split: Split, source: &str, x: Vec<f64>) -> QualityRecord {
        QualityRecord {
            id: id.into(),
            split,
            source: source.into(),
            system: if split == Split::Eval { "sys".into() } else { String::new() },
            features: Features::Vector(x),
            scores: vec![5.0; 4],
        }
    }

    fn build(name: &str) -> Box<dyn DomainStrategy> {
        StrategyRegistry::with_builtins()
            .build(&StrategyConfig {
                name: name.into(),
                k: 2,
                ..StrategyConfig::default()
            })
            .unwrap()
    }

    #[test]
    fn mean_pool_cases() {
        let x = Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(mean_pool(&x).unwrap(), vec![2.0, 3.0]);
        let one = Array::from_rows(&[vec![0.1, -7.0]]).unwrap();
        assert_eq!(mean_pool(&one).unwrap(), vec![0.1, -7.0]);
        assert!(mean_pool(&Array::zeros(&[0, 3])).is_err());
    }

    #[test]
    fn source_labels_are_lexicographic() {
        let c = Corpus::new(
            Schema::default(),
            vec![
                record("r0", Split::Train, "b", vec![0.0]),
                record("r1", Split::Train, "a", vec![0.0]),
                record("r2", Split::Val, "a", vec![0.0]),
            ],
        )
        .unwrap();
        let a = build("source").assign(&c).unwrap();
        assert_eq!(a.label_names, vec!["a", "b"]);
        assert_eq!(a.labels_for(&c, &[0, 1, 2]).unwrap(), vec![1, 0, 0]);
    }

    #[test]
    fn single_source_is_degenerate() {
        let c = Corpus::new(Schema::default(), vec![record("r0", Split::Train, "a", vec![0.0])]).unwrap();
        assert!(matches!(build("source").assign(&c), Err(Error::Degenerate(_))));
    }

    #[test]
    fn unknown_strategy_lists_known_names() {
        let err = StrategyRegistry::with_builtins()
            .build(&StrategyConfig {
                name: "nope".into(),
                ..StrategyConfig::default()
            })
            .err()
            .unwrap();
        assert!(err.to_string().contains("kmeans"));
    }

    #[test]
    fn kmeans_labels_val_and_eval_by_nearest_centroid() {
        let c = Corpus::new(
            Schema::default(),
            vec![
                record("t0", Split::Train, "s", vec![0.0]),
                record("t1", Split::Train, "s", vec![0.1]),
                record("t2", Split::Train, "s", vec![10.0]),
                record("t3", Split::Train, "s", vec![10.1]),
                record("v0", Split::Val, "s", vec![9.0]),
                record("e0", Split::Eval, "", vec![0.5]),
            ],
        )
        .unwrap();
        let a = build("kmeans").assign(&c).unwrap();
        assert_eq!(a.label("t0"), a.label("e0"));
        assert_eq!(a.label("t2"), a.label("v0"));
        assert_ne!(a.label("t0"), a.label("t2"));
        assert_eq!(a.centroid_hash().unwrap().len(), 64);
    }

    #[test]
    fn random_counts_within_binomial_bound() {
        let n = 10_000;
        let records = (0..n).map(|i| record(&format!("r{i}"), Split::Train, "s", vec![0.0])).collect();
        let c = Corpus::new(Schema::default(), records).unwrap();
        let strategy = RandomStrategy { d: 6, seed: 3 };
        let a = strategy.assign(&c).unwrap();
        let mut counts = [0usize; 6];
        a.labels.values().for_each(|&l| counts[l] += 1);
        let p = 1.0 / 6.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for k in counts {
            assert!((k as f64 - n as f64 * p).abs() <= 5.0 * sigma, "{counts:?}");
        }
        assert_eq!(a, strategy.assign(&c).unwrap());
    }

    #[test]
    fn labels_survive_corpus_reordering() {
        let mut recs: Vec<QualityRecord> = (0..20)
            .map(|i| record(&format!("r{i}"), Split::Train, if i % 3 == 0 { "x" } else { "y" }, vec![i as f64]))
            .collect();
        let a = Corpus::new(Schema::default(), recs.clone()).unwrap();
        recs.reverse();
        let b = Corpus::new(Schema::default(), recs).unwrap();
        for name in ["source", "random"] {
            assert_eq!(build(name).assign(&a).unwrap().labels, build(name).assign(&b).unwrap().labels);
        }
    }

    #[test]
    fn default_lambdas() {
        assert_eq!(build("source").default_lambda(), 0.5);
        assert_eq!(build("kmeans").default_lambda(), 0.1);
        assert_eq!(build("random").default_lambda(), 0.1);
    }
}
