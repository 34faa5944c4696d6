//! Synthetic confounded benchmark.
//!
//! Each clip has a latent quality vector `q` (standardized `z`, mapped into
//! the score range). Features are `x = W z + g + noise`, where `W` is a fixed
//! mixing matrix and `g` the acoustic signature of the clip's source (train
//! and val) or generative system (eval). Signatures live in a fixed
//! low-rank subspace; eval signatures are fresh draws from it.
//!
//! In train/val the confounded aspect's latent is
//! `rho * rank(source) + sqrt(1 - rho^2) * n`, so the source signature
//! predicts it. In eval every system has its own mean quality and its own
//! unseen signature, which breaks that shortcut.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Corpus, Features, QualityRecord, Schema, Split};
use crate::error::{Error, Result};
use crate::model::DEFAULT_ASPECTS;
use crate::rng::{self, Rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub feature_dim: usize,
    pub num_sources: usize,
    pub clips_per_source: usize,
    pub eval_systems: usize,
    pub clips_per_system: usize,
    /// Confound strength in `[0, 1]`.
    pub rho: f64,
    pub confounded_aspect: String,
    /// Per-coordinate RMS of signature vectors.
    pub signature_scale: f64,
    /// Dimension of the subspace signatures are drawn from.
    pub signature_rank: usize,
    /// Per-coordinate feature noise.
    pub noise_scale: f64,
    /// Within-system spread of eval latents (standardized units).
    pub system_spread: f64,
    /// Rating noise in score units.
    pub annotator_noise: f64,
    /// Fraction of each source's clips held out for validation.
    pub val_fraction: f64,
    pub range: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            num_sources: 6,
            clips_per_source: 400,
            eval_systems: 12,
            clips_per_system: 50,
            rho: 0.8,
            confounded_aspect: "PC".into(),
            signature_scale: 1.0,
            signature_rank: 4,
            noise_scale: 1.0,
            system_spread: 0.5,
            annotator_noise: 0.1,
            val_fraction: 0.08,
            range: (1.0, 10.0),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if self.feature_dim == 0
            || self.num_sources == 0
            || self.clips_per_source == 0
            || self.eval_systems == 0
            || self.clips_per_system == 0
        {
            return bad("counts and dimensions must be >= 1");
        }
        if self.signature_rank == 0 || self.signature_rank > self.feature_dim {
            return bad("signature_rank must lie in [1, feature_dim]");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(self.range.0 < self.range.1) {
            return bad("score range needs lo < hi");
        }
        for v in [self.signature_scale, self.noise_scale, self.system_spread, self.annotator_noise] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad("scales must be finite and non-negative");
            }
        }
        if !DEFAULT_ASPECTS.contains(&self.confounded_aspect.as_str()) {
            return bad("confounded_aspect must be one of PQ, PC, CE, CU");
        }
        Ok(())
    }
}

/// Generated corpus plus the signatures used to build it.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// One per source, in source order.
    pub train_signatures: Vec<Vec<f64>>,
    /// One per eval system.
    pub eval_signatures: Vec<Vec<f64>>,
}

fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Orthonormal `rank` columns (Gram-Schmidt on Gaussian draws), stored row-major `[F, rank]`.
fn subspace_basis(rng: &mut Rng, dim: usize, rank: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while cols.len() < rank {
        let mut v = normals(rng, dim);
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    cols
}

struct Mixer {
    /// `[F][A]`
    weights: Vec<Vec<f64>>,
    basis: Vec<Vec<f64>>,
    cfg: SyntheticConfig,
}

impl Mixer {
    fn signature(&self, rng: &mut Rng) -> Vec<f64> {
        let f = self.cfg.feature_dim;
        let r = self.cfg.signature_rank;
        let gain = self.cfg.signature_scale * (f as f64 / r as f64).sqrt();
        let coef = normals(rng, r);
        (0..f)
            .map(|i| gain * self.basis.iter().zip(&coef).map(|(b, c)| b[i] * c).sum::<f64>())
            .collect()
    }

    /// Scores and features for a standardized latent `z`.
    fn clip(&self, z: &[f64], signature: &[f64], rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let (lo, hi) = self.cfg.range;
        let mid = 0.5 * (lo + hi);
        let spread = (hi - lo) / 6.0;
        let q: Vec<f64> = z.iter().map(|v| (mid + spread * v).clamp(lo, hi)).collect();
        let zt: Vec<f64> = q.iter().map(|v| (v - mid) / spread).collect();
        let noise = normals(rng, self.cfg.feature_dim);
        let x = (0..self.cfg.feature_dim)
            .map(|i| {
                let mixed: f64 = self.weights[i].iter().zip(&zt).map(|(w, v)| w * v).sum();
                mixed + signature[i] + self.cfg.noise_scale * noise[i]
            })
            .collect();
        let rating = normals(rng, q.len());
        let y = q
            .iter()
            .zip(rating)
            .map(|(v, e)| (v + self.cfg.annotator_noise * e).clamp(lo, hi))
            .collect();
        (y, x)
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let schema = Schema {
        aspects: DEFAULT_ASPECTS.iter().map(|s| s.to_string()).collect(),
        range: cfg.range,
    };
    let a = schema.aspects.len();
    let confounded = schema.aspect_index(&cfg.confounded_aspect)?;
    let f = cfg.feature_dim;

    let mut mix_rng = rng::stream(cfg.seed, Stream::Generator, 0);
    let weights = (0..f)
        .map(|_| normals(&mut mix_rng, a).into_iter().map(|w| w / (f as f64).sqrt()).collect())
        .collect();
    let basis = subspace_basis(&mut mix_rng, f, cfg.signature_rank);
    let mixer = Mixer {
        weights,
        basis,
        cfg: cfg.clone(),
    };

    let mut sig_rng = rng::stream(cfg.seed, Stream::Generator, 1);
    let train_signatures: Vec<Vec<f64>> = (0..cfg.num_sources).map(|_| mixer.signature(&mut sig_rng)).collect();

    let s = cfg.num_sources as f64;
    let rank_sd = ((s * s - 1.0) / 12.0).sqrt();
    let width = cfg.num_sources.saturating_sub(1).to_string().len().max(2);
    let clip_width = cfg.clips_per_source.max(cfg.clips_per_system).to_string().len().max(4);

    let mut records = Vec::new();
    let mut clip_rng = rng::stream(cfg.seed, Stream::Generator, 2);
    let mut split_rng = rng::stream(cfg.seed, Stream::Generator, 3);
    let n_val = (cfg.val_fraction * cfg.clips_per_source as f64).round() as usize;
    for (src, signature) in train_signatures.iter().enumerate() {
        let source_rank = if cfg.num_sources > 1 {
            (src as f64 - (s - 1.0) / 2.0) / rank_sd
        } else {
            0.0
        };
        let mut order: Vec<usize> = (0..cfg.clips_per_source).collect();
        order.shuffle(&mut split_rng);
        let mut is_val = vec![false; cfg.clips_per_source];
        for &i in &order[..n_val] {
            is_val[i] = true;
        }
        for (i, val) in is_val.into_iter().enumerate() {
            let mut z = normals(&mut clip_rng, a);
            z[confounded] = cfg.rho * source_rank + (1.0 - cfg.rho * cfg.rho).sqrt() * z[confounded];
            let (scores, x) = mixer.clip(&z, signature, &mut clip_rng);
            records.push(QualityRecord {
                id: format!("src{src:0width$}-{i:0clip_width$}"),
                split: if val { Split::Val } else { Split::Train },
                source: format!("src{src:0width$}"),
                system: String::new(),
                features: Features::Vector(x),
                scores,
            });
        }
    }

    let mut eval_rng = rng::stream(cfg.seed, Stream::Generator, 4);
    let sys_width = cfg.eval_systems.saturating_sub(1).to_string().len().max(2);
    let mut eval_signatures = Vec::with_capacity(cfg.eval_systems);
    for sys in 0..cfg.eval_systems {
        let signature = mixer.signature(&mut eval_rng);
        let mean = normals(&mut eval_rng, a);
        for i in 0..cfg.clips_per_system {
            let z: Vec<f64> = normals(&mut eval_rng, a)
                .into_iter()
                .zip(&mean)
                .map(|(e, m)| m + cfg.system_spread * e)
                .collect();
            let (scores, x) = mixer.clip(&z, &signature, &mut eval_rng);
            records.push(QualityRecord {
                id: format!("sys{sys:0sys_width$}-{i:0clip_width$}"),
                split: Split::Eval,
                source: String::new(),
                system: format!("sys{sys:0sys_width$}"),
                features: Features::Vector(x),
                scores,
            });
        }
        eval_signatures.push(signature);
    }

    Ok(SyntheticCorpus {
        corpus: Corpus::new(schema, records)?,
        train_signatures,
        eval_signatures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small(rho: f64, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            clips_per_source: 200,
            clips_per_system: 10,
            rho,
            seed,
            ..SyntheticConfig::default()
        }
    }

    fn confound(cfg: &SyntheticConfig) -> f64 {
        let out = generate_synthetic(cfg).unwrap();
        let k = out.corpus.schema().aspect_index("PC").unwrap();
        out.corpus.source_confound(Split::Train, k).unwrap()
    }

    #[test]
    fn no_confound_at_rho_zero() {
        let c = confound(&SyntheticConfig {
            rho: 0.0,
            ..SyntheticConfig::default()
        });
        assert!(c.abs() <= 0.1, "{c}");
    }

    #[test]
    fn strong_confound_at_default_rho() {
        let c = confound(&SyntheticConfig::default());
        assert!(c >= 0.6, "{c}");
    }

    #[test]
    fn confound_grows_with_rho() {
        let median = |rho: f64| {
            let mut v: Vec<f64> = (0..3).map(|s| confound(&small(rho, s))).collect();
            v.sort_by(f64::total_cmp);
            v[1]
        };
        let (a, b, c) = (median(0.0), median(0.4), median(0.8));
        assert!(a <= b && b <= c, "{a} {b} {c}");
    }

    #[test]
    fn eval_signatures_are_fresh() {
        let out = generate_synthetic(&small(0.8, 3)).unwrap();
        let min = out
            .eval_signatures
            .iter()
            .flat_map(|e| {
                out.train_signatures
                    .iter()
                    .map(move |t| t.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            })
            .fold(f64::INFINITY, f64::min);
        assert!(min > 0.0);
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = generate_synthetic(&small(0.8, 9)).unwrap().corpus;
        let b = generate_synthetic(&small(0.8, 9)).unwrap().corpus;
        assert_eq!(a.to_jsonl_string(), b.to_jsonl_string());

        let mut ids: Vec<HashSet<&str>> = Vec::new();
        for split in Split::ALL {
            ids.push(a.split_indices(split).iter().map(|&i| a.records()[i].id.as_str()).collect());
        }
        assert!(ids[0].is_disjoint(&ids[1]) && ids[0].is_disjoint(&ids[2]) && ids[1].is_disjoint(&ids[2]));
        assert_eq!(ids[1].len(), 6 * 16);
        assert_eq!(ids[2].len(), 12 * 10);
    }

    #[test]
    fn defaults_have_six_sources_and_twelve_systems() {
        let c = generate_synthetic(&SyntheticConfig::default()).unwrap().corpus;
        let sources: HashSet<&str> = c.records().iter().filter(|r| !r.source.is_empty()).map(|r| r.source.as_str()).collect();
        let systems: HashSet<&str> = c.records().iter().filter(|r| !r.system.is_empty()).map(|r| r.system.as_str()).collect();
        assert_eq!((sources.len(), systems.len()), (6, 12));
        assert_eq!(c.split_indices(Split::Val).len(), 6 * 32);
    }

    #[test]
    fn invalid_rho_rejected() {
        assert!(generate_synthetic(&SyntheticConfig {
            rho: 1.5,
            ..SyntheticConfig::default()
        })
        .is_err());
    }
}
