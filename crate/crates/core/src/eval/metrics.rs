use std::collections::BTreeMap;

use crate::error::{Error, Result};

fn check_pair(op: &'static str, a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < min {
        return Err(Error::InsufficientData(format!("{op} needs at least {min} values, got {}", a.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("mse", a, b, 1)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("pearson", a, b, 2)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("correlation of a constant vector".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(a: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
    let mut ranks = vec![0.0; a.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && a[order[end]] == a[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation.
pub fn srcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("srcc", a, b, 2)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Per-system means of predictions and truths, systems in lexicographic order.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemMeans {
    pub systems: Vec<String>,
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
}

fn sorted_mean(mut v: Vec<f64>) -> f64 {
    // summation order fixed by value, so record order never matters
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn system_aggregate<S: AsRef<str>>(preds: &[f64], truths: &[f64], systems: &[S]) -> Result<SystemMeans> {
    check_pair("system_aggregate", preds, truths, 1)?;
    if systems.len() != preds.len() {
        return Err(Error::shape(
            "system_aggregate",
            format!("{} system ids for {} values", systems.len(), preds.len()),
        ));
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((p, t), s) in preds.iter().zip(truths).zip(systems) {
        let s = s.as_ref();
        if s.is_empty() {
            return Err(Error::InvalidConfig("record without a system id".into()));
        }
        let g = groups.entry(s).or_default();
        g.0.push(*p);
        g.1.push(*t);
    }
    let mut out = SystemMeans {
        systems: Vec::new(),
        pred: Vec::new(),
        truth: Vec::new(),
    };
    for (s, (p, t)) in groups {
        out.systems.push(s.to_string());
        out.pred.push(sorted_mean(p));
        out.truth.push(sorted_mean(t));
    }
    Ok(out)
}
