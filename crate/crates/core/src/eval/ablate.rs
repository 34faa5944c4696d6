//! Sweep of domain granularity for the clustering and random strategies.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalReport};
use crate::data::{Corpus, Split};
use crate::error::Result;
use crate::train::{train, TrainConfig};

pub const DEFAULT_K_LIST: [usize; 5] = [2, 4, 6, 8, 10];
const STRATEGIES: [&str; 2] = ["kmeans", "random"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub k: usize,
    pub aspect: String,
    /// Model SRCC minus baseline SRCC.
    pub delta_srcc: f64,
    /// Baseline MSE minus model MSE, so positive means improvement.
    pub delta_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub baseline: EvalReport,
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    /// Mean SRCC delta per strategy, in strategy order.
    pub fn mean_delta_srcc(&self) -> Vec<(String, f64)> {
        STRATEGIES
            .iter()
            .filter_map(|s| {
                let d: Vec<f64> = self.rows.iter().filter(|r| r.strategy == *s).map(|r| r.delta_srcc).collect();
                (!d.is_empty()).then(|| (s.to_string(), d.iter().sum::<f64>() / d.len() as f64))
            })
            .collect()
    }
}

pub fn deltas(model: &EvalReport, baseline: &EvalReport, aspect: &str) -> Result<(f64, f64)> {
    let m = model.aspect(aspect)?;
    let b = baseline.aspect(aspect)?;
    Ok((m.srcc - b.srcc, b.mse - m.mse))
}

/// Trains a `lambda = 0` baseline, then one model per strategy and `K`
/// (strategy-default lambda), and reports eval-split deltas on `aspect`.
pub fn ablate_k(corpus: &Corpus, base: &TrainConfig, ks: &[usize], aspect: &str) -> Result<AblationResult> {
    corpus.schema().aspect_index(aspect)?;
    let baseline_ck = train(
        corpus,
        &TrainConfig {
            lambda: Some(0.0),
            ..base.clone()
        },
    )?;
    let baseline = evaluate(&baseline_ck.model, &baseline_ck.params, corpus, Split::Eval)?;

    let mut jobs: Vec<(&str, usize)> = STRATEGIES.iter().flat_map(|s| ks.iter().map(move |&k| (*s, k))).collect();
    jobs.sort();
    let rows = jobs
        .into_par_iter()
        .map(|(strategy, k)| {
            let mut cfg = base.clone();
            cfg.lambda = None;
            cfg.strategy.name = strategy.to_string();
            cfg.strategy.k = k;
            cfg.strategy.d = k;
            let ck = train(corpus, &cfg)?;
            let report = evaluate(&ck.model, &ck.params, corpus, Split::Eval)?;
            let (delta_srcc, delta_mse) = deltas(&report, &baseline, aspect)?;
            Ok(AblationRow {
                strategy: strategy.to_string(),
                k,
                aspect: aspect.to_string(),
                delta_srcc,
                delta_mse,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationResult { baseline, rows })
}

/// `strategy,K,aspect,delta_srcc,delta_mse`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("strategy,K,aspect,delta_srcc,delta_mse\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.strategy, r.k, r.aspect, r.delta_srcc, r.delta_mse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    #[test]
    fn baseline_against_itself_is_zero() {
        let c = generate_synthetic(&SyntheticConfig {
            feature_dim: 6,
            num_sources: 3,
            clips_per_source: 30,
            eval_systems: 4,
            clips_per_system: 4,
            ..SyntheticConfig::default()
        })
        .unwrap()
        .corpus;
        let ck = train(
            &c,
            &TrainConfig {
                epochs: 1,
                encoder_hidden: vec![8],
                latent_dim: 4,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let r = evaluate(&ck.model, &ck.params, &c, Split::Eval).unwrap();
        assert_eq!(deltas(&r, &r, "PQ").unwrap(), (0.0, 0.0));
    }

    #[test]
    fn csv_shape() {
        let rows: Vec<AblationRow> = ["kmeans", "random"]
            .iter()
            .flat_map(|s| {
                DEFAULT_K_LIST.iter().map(move |&k| AblationRow {
                    strategy: s.to_string(),
                    k,
                    aspect: "PQ".into(),
                    delta_srcc: 0.0,
                    delta_mse: 0.0,
                })
            })
            .collect();
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 11);
        assert_eq!(csv.lines().nth(1).unwrap(), "kmeans,2,PQ,0,0");
    }
}
