//! Corpus records, JSON Lines ingestion and export, and summary statistics.

mod batch;
mod synthetic;

pub use batch::batch_iter;
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticCorpus};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::model::DEFAULT_ASPECTS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "eval" => Ok(Split::Eval),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

/// Utterance-level vector or frame-level matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Features {
    Frames(Vec<Vec<f64>>),
    Vector(Vec<f64>),
}

impl Features {
    pub fn dim(&self) -> usize {
        match self {
            Features::Frames(rows) => rows.first().map_or(0, Vec::len),
            Features::Vector(v) => v.len(),
        }
    }

    pub fn to_array(&self) -> Result<Array> {
        match self {
            Features::Frames(rows) => Array::from_rows(rows),
            Features::Vector(v) => Ok(Array::vector(v.clone())),
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        match self {
            Features::Frames(rows) => {
                if rows.is_empty() {
                    return Err("feature matrix has no frames".into());
                }
                let f = rows[0].len();
                if rows.iter().any(|r| r.len() != f) {
                    return Err("feature frames have unequal widths".into());
                }
            }
            Features::Vector(_) => {}
        }
        if self.dim() == 0 {
            return Err("empty feature vector".into());
        }
        let finite = match self {
            Features::Frames(rows) => rows.iter().flatten().all(|v| v.is_finite()),
            Features::Vector(v) => v.iter().all(|v| v.is_finite()),
        };
        if !finite {
            return Err("non-finite feature value".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityRecord {
    pub id: String,
    pub split: Split,
    pub source: String,
    pub system: String,
    pub features: Features,
    /// Aligned with [`Schema::aspects`].
    pub scores: Vec<f64>,
}

/// Aspect names and the score range they live in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub aspects: Vec<String>,
    pub range: (f64, f64),
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            aspects: DEFAULT_ASPECTS.iter().map(|s| s.to_string()).collect(),
            range: (1.0, 10.0),
        }
    }
}

impl Schema {
    pub fn aspect_index(&self, name: &str) -> Result<usize> {
        self.aspects
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown aspect `{name}`")))
    }
}

/// One JSON Lines row.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    split: Split,
    #[serde(default)]
    source: String,
    #[serde(default)]
    system: String,
    features: Features,
    scores: IndexMap<String, f64>,
}

/// A validated record collection with a fixed aspect schema.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    schema: Schema,
    records: Vec<QualityRecord>,
    feature_dim: usize,
}

impl Corpus {
    pub fn new(schema: Schema, records: Vec<QualityRecord>) -> Result<Self> {
        let (lo, hi) = schema.range;
        if !(lo < hi) || schema.aspects.is_empty() {
            return Err(Error::InvalidConfig("schema needs aspects and lo < hi".into()));
        }
        let feature_dim = records.first().map_or(0, |r| r.features.dim());
        let mut seen = HashSet::new();
        for r in &records {
            validate_record(&schema, feature_dim, r)?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            schema,
            records,
            feature_dim,
        })
    }

    pub fn load_jsonl(path: impl AsRef<Path>, schema: Schema) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Self::read_jsonl(BufReader::new(file), schema)
    }

    /// Parses JSON Lines, stopping at the first malformed line.
    pub fn read_jsonl(reader: impl BufRead, schema: Schema) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        let mut feature_dim = None;
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            let record = from_line(&schema, parsed).map_err(|msg| Error::Parse { line: line_no, msg })?;
            let dim = *feature_dim.get_or_insert(record.features.dim());
            validate_record(&schema, dim, &record).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            if !seen.insert(record.id.clone()) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: Error::DuplicateId(record.id).to_string(),
                });
            }
            records.push(record);
        }
        Self::new(schema, records)
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            let line = RecordLine {
                id: r.id.clone(),
                split: r.split,
                source: r.source.clone(),
                system: r.system.clone(),
                features: r.features.clone(),
                scores: self.schema.aspects.iter().cloned().zip(r.scores.iter().copied()).collect(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn records(&self) -> &[QualityRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    /// Mean-pooled feature vector of record `i`.
    pub fn pooled(&self, i: usize) -> Vec<f64> {
        match &self.records[i].features {
            Features::Vector(v) => v.clone(),
            Features::Frames(rows) => {
                crate::domains::mean_pool(&Array::from_rows(rows).expect("validated"))
                    .expect("validated")
            }
        }
    }

    /// Pooled features `[n, F]` and scores `[n, A]` for the given records.
    pub fn design(&self, indices: &[usize]) -> (Array, Array) {
        let f = self.feature_dim;
        let a = self.schema.aspects.len();
        let mut x = Vec::with_capacity(indices.len() * f);
        let mut y = Vec::with_capacity(indices.len() * a);
        for &i in indices {
            x.extend(self.pooled(i));
            y.extend_from_slice(&self.records[i].scores);
        }
        (
            Array::new(vec![indices.len(), f], x).expect("validated dims"),
            Array::new(vec![indices.len(), a], y).expect("validated dims"),
        )
    }

    /// Per split and aspect: count, mean, sample std and the source
    /// confound correlation, as CSV.
    pub fn stats_csv(&self) -> String {
        let mut out = String::from("split,aspect,count,mean,std,source_corr\n");
        for split in Split::ALL {
            let idx = self.split_indices(split);
            if idx.is_empty() {
                continue;
            }
            for (k, aspect) in self.schema.aspects.iter().enumerate() {
                let ys: Vec<f64> = idx.iter().map(|&i| self.records[i].scores[k]).collect();
                let n = ys.len() as f64;
                let mean = ys.iter().sum::<f64>() / n;
                let std = if ys.len() > 1 {
                    (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                let corr = self
                    .source_confound(split, k)
                    .map(|c| format!("{c:.6}"))
                    .unwrap_or_default();
                out.push_str(&format!("{split},{aspect},{},{mean:.6},{std:.6},{corr}\n", ys.len()));
            }
        }
        out
    }

    /// Pearson correlation between each clip's score on `aspect` and the
    /// rank of its source's mean score on that aspect.
    ///
    /// `None` when the split has fewer than two sources or constant inputs.
    pub fn source_confound(&self, split: Split, aspect: usize) -> Option<f64> {
        let idx = self.split_indices(split);
        let mut by_source: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for &i in &idx {
            let r = &self.records[i];
            if r.source.is_empty() {
                return None;
            }
            let e = by_source.entry(r.source.as_str()).or_default();
            e.0 += r.scores[aspect];
            e.1 += 1;
        }
        if by_source.len() < 2 {
            return None;
        }
        let mut means: Vec<(&str, f64)> = by_source.iter().map(|(s, (t, n))| (*s, t / *n as f64)).collect();
        means.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
        let rank: BTreeMap<&str, f64> = means.iter().enumerate().map(|(k, (s, _))| (*s, k as f64)).collect();
        let xs: Vec<f64> = idx.iter().map(|&i| rank[self.records[i].source.as_str()]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| self.records[i].scores[aspect]).collect();
        crate::eval::pearson(&xs, &ys).ok()
    }
}

fn from_line(schema: &Schema, line: RecordLine) -> std::result::Result<QualityRecord, String> {
    let mut scores = Vec::with_capacity(schema.aspects.len());
    for aspect in &schema.aspects {
        match line.scores.get(aspect) {
            Some(v) => scores.push(*v),
            None => return Err(format!("record `{}`: missing score for aspect `{aspect}`", line.id)),
        }
    }
    if let Some(extra) = line.scores.keys().find(|k| !schema.aspects.contains(k)) {
        return Err(format!("record `{}`: unknown aspect `{extra}`", line.id));
    }
    Ok(QualityRecord {
        id: line.id,
        split: line.split,
        source: line.source,
        system: line.system,
        features: line.features,
        scores,
    })
}

fn validate_record(schema: &Schema, feature_dim: usize, r: &QualityRecord) -> Result<()> {
    let fail = |msg: String| Err(Error::Record { id: r.id.clone(), msg });
    if r.id.is_empty() {
        return Err(Error::InvalidConfig("record with empty id".into()));
    }
    if let Err(msg) = r.features.check() {
        return fail(msg);
    }
    if r.features.dim() != feature_dim {
        return fail(format!(
            "feature dimension {} differs from corpus dimension {feature_dim}",
            r.features.dim()
        ));
    }
    if r.scores.len() != schema.aspects.len() {
        return fail(format!("{} scores for {} aspects", r.scores.len(), schema.aspects.len()));
    }
    let (lo, hi) = schema.range;
    for (v, aspect) in r.scores.iter().zip(&schema.aspects) {
        if !v.is_finite() || *v < lo || *v > hi {
            return fail(format!("score {v} for `{aspect}` outside range [{lo}, {hi}]"));
        }
    }
    match r.split {
        Split::Eval if r.system.is_empty() => fail("eval record needs a system tag".into()),
        Split::Train | Split::Val if r.source.is_empty() => fail("train/val record needs a source tag".into()),
        _ => Ok(()),
    }
}
