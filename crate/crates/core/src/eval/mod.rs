//! System-level metrics, significance tests, linear probes, projections and
//! the domain-granularity sweep.

mod ablate;
mod metrics;
mod pca;
mod probe;
mod stats;

pub use ablate::{ablate_k, ablation_csv, AblationResult, AblationRow, DEFAULT_K_LIST};
pub use metrics::{average_ranks, mse, pearson, srcc, system_aggregate, SystemMeans};
pub use pca::{pca, Pca, POWER_ITERATIONS, POWER_TOL, PROJECTION_HEADER};
pub use probe::{
    domain_probe_on, linear_probe_domain, linear_probe_score, probe_csv, probe_split, score_probe_on, ProbeReport,
};
pub use stats::{paired_ttest, student_t_cdf, TTest, ALPHA};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Split};
use crate::domains::{DomainStrategy, SourceStrategy};
use crate::error::{Error, Result};
use crate::model::{latents, predict, ModelConfig, ModelParams};
use crate::train::Checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspectReport {
    pub aspect: String,
    pub mse: f64,
    pub srcc: f64,
    pub sys_pred: Vec<f64>,
    pub sys_truth: Vec<f64>,
    pub ttest: Option<TTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub systems: Vec<String>,
    pub aspects: Vec<AspectReport>,
}

impl EvalReport {
    pub fn aspect(&self, name: &str) -> Result<&AspectReport> {
        self.aspects
            .iter()
            .find(|a| a.aspect == name)
            .ok_or_else(|| Error::InvalidConfig(format!("aspect `{name}` not in report")))
    }

    /// `aspect,systems,mse,srcc,t,p,significant`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("aspect,systems,mse,srcc,t,p,significant\n");
        for a in &self.aspects {
            let (t, p, s) = match &a.ttest {
                Some(tt) => (tt.t.to_string(), tt.p.to_string(), tt.significant.to_string()),
                None => Default::default(),
            };
            out.push_str(&format!("{},{},{},{},{t},{p},{s}\n", a.aspect, self.systems.len(), a.mse, a.srcc));
        }
        out
    }
}

/// Per-system error used by the paired test.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    #[default]
    Absolute,
    Squared,
}

impl FromStr for ErrorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" | "abs" => Ok(ErrorKind::Absolute),
            "squared" | "sq" => Ok(ErrorKind::Squared),
            other => Err(Error::InvalidConfig(format!("unknown error kind `{other}`"))),
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorKind::Absolute => "absolute",
            ErrorKind::Squared => "squared",
        })
    }
}

fn system_errors(a: &AspectReport, kind: ErrorKind) -> Vec<f64> {
    a.sys_pred
        .iter()
        .zip(&a.sys_truth)
        .map(|(p, t)| match kind {
            ErrorKind::Absolute => (p - t).abs(),
            ErrorKind::Squared => (p - t).powi(2),
        })
        .collect()
}

/// Report from per-record predictions aligned with `corpus.split_indices(split)`.
pub fn evaluate_predictions(corpus: &Corpus, split: Split, preds: &[Vec<f64>]) -> Result<EvalReport> {
    let idx = corpus.split_indices(split);
    if idx.is_empty() {
        return Err(Error::InsufficientData(format!("split `{split}` is empty")));
    }
    if preds.len() != idx.len() {
        return Err(Error::shape("evaluate", format!("{} predictions for {} records", preds.len(), idx.len())));
    }
    let systems: Vec<&str> = idx.iter().map(|&i| corpus.records()[i].system.as_str()).collect();
    if let Some(&i) = idx.iter().find(|&&i| corpus.records()[i].system.is_empty()) {
        return Err(Error::Record {
            id: corpus.records()[i].id.clone(),
            msg: "missing system id".into(),
        });
    }
    let mut aspects = Vec::new();
    let mut names = Vec::new();
    for (k, aspect) in corpus.schema().aspects.iter().enumerate() {
        let p: Vec<f64> = preds
            .iter()
            .map(|row| row.get(k).copied().ok_or_else(|| Error::shape("evaluate", "prediction row too short")))
            .collect::<Result<_>>()?;
        let t: Vec<f64> = idx.iter().map(|&i| corpus.records()[i].scores[k]).collect();
        let means = system_aggregate(&p, &t, &systems)?;
        aspects.push(AspectReport {
            aspect: aspect.clone(),
            mse: mse(&means.pred, &means.truth)?,
            srcc: srcc(&means.pred, &means.truth)?,
            sys_pred: means.pred,
            sys_truth: means.truth,
            ttest: None,
        });
        names = means.systems;
    }
    Ok(EvalReport {
        split,
        systems: names,
        aspects,
    })
}

/// Predicted means for the given records.
pub fn predict_records(model: &ModelConfig, params: &ModelParams, corpus: &Corpus, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let (x, _) = corpus.design(indices);
    Ok(predict(model, params, &x)?.into_iter().map(|p| p.m).collect())
}

/// Predicts every record of `split` and scores it per system.
pub fn evaluate(model: &ModelConfig, params: &ModelParams, corpus: &Corpus, split: Split) -> Result<EvalReport> {
    let idx = corpus.split_indices(split);
    if idx.is_empty() {
        return Err(Error::InsufficientData(format!("split `{split}` is empty")));
    }
    evaluate_predictions(corpus, split, &predict_records(model, params, corpus, &idx)?)
}

/// Attaches a paired t-test of `report` against `reference` to every aspect.
pub fn compare(report: &mut EvalReport, reference: &EvalReport, kind: ErrorKind) -> Result<()> {
    if report.systems != reference.systems {
        return Err(Error::InvalidConfig("reports cover different systems".into()));
    }
    for a in report.aspects.iter_mut() {
        let r = reference.aspect(&a.aspect)?;
        a.ttest = Some(paired_ttest(&system_errors(a, kind), &system_errors(r, kind))?);
    }
    Ok(())
}

/// Inference latents of the given records as rows.
pub fn latent_rows(ck: &Checkpoint, corpus: &Corpus, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    let (x, _) = corpus.design(indices);
    let h = latents(&ck.model, &ck.params, &x)?;
    Ok(h.rows().map(<[f64]>::to_vec).collect())
}

/// Probes latents of train and val records against source labels and scores.
pub fn probe_checkpoint(name: &str, ck: &Checkpoint, corpus: &Corpus, seed: u64) -> Result<ProbeReport> {
    let mut idx = corpus.split_indices(Split::Train);
    idx.extend(corpus.split_indices(Split::Val));
    let labels = SourceStrategy.assign(corpus)?.labels_for(corpus, &idx)?;
    let h = latent_rows(ck, corpus, &idx)?;
    let (train, test) = probe_split(&h, seed)?;
    let domain_acc = domain_probe_on(&h, &labels, &train, &test)?;
    let mut out = Vec::new();
    for (k, aspect) in corpus.schema().aspects.iter().enumerate() {
        let y: Vec<f64> = idx.iter().map(|&i| corpus.records()[i].scores[k]).collect();
        out.push((aspect.clone(), score_probe_on(&h, &y, &train, &test)?));
    }
    Ok(ProbeReport {
        name: name.to_string(),
        domain_acc,
        srcc: out,
    })
}

/// Two-dimensional PCA of train and val latents, colored by source label.
pub fn projection_csv(ck: &Checkpoint, corpus: &Corpus, aspect: &str) -> Result<(Pca, String)> {
    let k = corpus.schema().aspect_index(aspect)?;
    let mut idx = corpus.split_indices(Split::Train);
    idx.extend(corpus.split_indices(Split::Val));
    let labels = SourceStrategy.assign(corpus)?.labels_for(corpus, &idx)?;
    let h = latent_rows(ck, corpus, &idx)?;
    let preds = predict_records(&ck.model, &ck.params, corpus, &idx)?;
    let p = pca(&h, 2)?;
    let mut out = format!("{PROJECTION_HEADER}\n");
    for (j, &i) in idx.iter().enumerate() {
        let c = p.project(&h[j]);
        let x = c.first().copied().unwrap_or(0.0);
        let y = c.get(1).copied().unwrap_or(0.0);
        out.push_str(&format!("{x},{y},{},{},{}\n", preds[j][k], labels[j], corpus.records()[i].scores[k]));
    }
    Ok((p, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Features, QualityRecord, Schema};

    fn eval_corpus(per_system: &[(&str, [f64; 4])]) -> Corpus {
        let records = per_system
            .iter()
            .enumerate()
            .map(|(i, (sys, scores))| QualityRecord {
                id: format!("e{i}"),
                split: Split::Eval,
                source: String::new(),
                system: sys.to_string(),
                features: Features::Vector(vec![i as f64, 1.0]),
                scores: scores.to_vec(),
            })
            .collect();
        Corpus::new(Schema::default(), records).unwrap()
    }

    fn fixture() -> Corpus {
        eval_corpus(&[
            ("a", [2.0, 3.0, 4.0, 5.0]),
            ("a", [4.0, 5.0, 6.0, 7.0]),
            ("b", [6.0, 2.0, 8.0, 1.0]),
            ("c", [9.0, 8.0, 1.0, 3.0]),
            ("c", [7.0, 9.0, 2.0, 4.0]),
        ])
    }

    fn truths(c: &Corpus) -> Vec<Vec<f64>> {
        c.split_indices(Split::Eval).iter().map(|&i| c.records()[i].scores.clone()).collect()
    }

    #[test]
    fn perfect_predictions() {
        let c = fixture();
        let r = evaluate_predictions(&c, Split::Eval, &truths(&c)).unwrap();
        for a in &r.aspects {
            assert_eq!((a.srcc, a.mse), (1.0, 0.0));
        }
        assert_eq!(r.systems, vec!["a", "b", "c"]);
    }

    #[test]
    fn negated_predictions() {
        let c = fixture();
        let neg: Vec<Vec<f64>> = truths(&c).iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        let r = evaluate_predictions(&c, Split::Eval, &neg).unwrap();
        assert!(r.aspects.iter().all(|a| (a.srcc + 1.0).abs() < 1e-15));
    }

    #[test]
    fn report_composes_primitives() {
        let c = fixture();
        let preds: Vec<Vec<f64>> = truths(&c).iter().enumerate().map(|(i, r)| r.iter().map(|v| v + (i as f64).sin()).collect()).collect();
        let r = evaluate_predictions(&c, Split::Eval, &preds).unwrap();
        let sys: Vec<&str> = c.records().iter().map(|r| r.system.as_str()).collect();
        for (k, a) in r.aspects.iter().enumerate() {
            let p: Vec<f64> = preds.iter().map(|row| row[k]).collect();
            let t: Vec<f64> = c.records().iter().map(|r| r.scores[k]).collect();
            let m = system_aggregate(&p, &t, &sys).unwrap();
            assert_eq!(a.mse, mse(&m.pred, &m.truth).unwrap());
            assert_eq!(a.srcc, srcc(&m.pred, &m.truth).unwrap());
        }
    }

    #[test]
    fn identical_clips_per_system_equal_clip_level() {
        let rows = [
            ("a", [2.0, 3.0, 4.0, 5.0]),
            ("b", [5.0, 1.0, 2.0, 8.0]),
            ("c", [3.0, 7.0, 9.0, 1.0]),
            ("d", [8.0, 4.0, 3.0, 2.0]),
        ];
        let doubled: Vec<(&str, [f64; 4])> = rows.iter().chain(&rows).copied().collect();
        let c = eval_corpus(&doubled);
        let preds: Vec<Vec<f64>> = truths(&c).iter().map(|r| r.iter().map(|v| v * 0.9 + 0.4).collect()).collect();
        let r = evaluate_predictions(&c, Split::Eval, &preds).unwrap();
        for (k, a) in r.aspects.iter().enumerate() {
            let p: Vec<f64> = preds.iter().map(|row| row[k]).collect();
            let t: Vec<f64> = c.records().iter().map(|r| r.scores[k]).collect();
            assert!((a.mse - mse(&p, &t).unwrap()).abs() <= 1e-12);
            assert!((a.srcc - srcc(&p, &t).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn compare_against_self_is_not_significant() {
        let c = fixture();
        let preds: Vec<Vec<f64>> = truths(&c).iter().map(|r| r.iter().map(|v| v + 0.5).collect()).collect();
        let reference = evaluate_predictions(&c, Split::Eval, &preds).unwrap();
        let mut r = reference.clone();
        compare(&mut r, &reference, ErrorKind::Absolute).unwrap();
        let t = r.aspects[0].ttest.unwrap();
        assert_eq!((t.t, t.p, t.significant), (0.0, 1.0, false));
        assert!(r.to_csv().lines().nth(1).unwrap().ends_with(",0,1,false"));
    }

    #[test]
    fn single_system_cannot_rank() {
        let c = eval_corpus(&[("a", [2.0, 3.0, 4.0, 5.0]), ("a", [3.0, 3.0, 4.0, 5.0])]);
        assert!(evaluate_predictions(&c, Split::Eval, &truths(&c)).is_err());
    }
}
