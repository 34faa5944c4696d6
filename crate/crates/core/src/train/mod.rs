//! Minibatch training of the quality and domain objectives.

mod adamw;
mod checkpoint;

pub use adamw::{AdamHyper, AdamW};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, DomainMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape};
use crate::data::{batch_iter, Corpus, Split};
use crate::domains::{DomainAssignment, StrategyConfig, StrategyRegistry};
use crate::error::{Error, Result};
use crate::losses::{batch_objective, Batch, LossBreakdown};
use crate::model::{Bound, Mode, ModelConfig, ModelParams};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValLoss {
    /// Quality NLL only.
    #[default]
    Task,
    /// Quality NLL plus the weighted domain loss.
    Total,
}

impl FromStr for ValLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task" => Ok(ValLoss::Task),
            "total" => Ok(ValLoss::Total),
            other => Err(Error::InvalidConfig(format!("unknown validation loss `{other}`"))),
        }
    }
}

impl fmt::Display for ValLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValLoss::Task => "task",
            ValLoss::Total => "total",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// `None` picks the strategy's default.
    pub lambda: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub strategy: StrategyConfig,
    pub seed: u64,
    pub val_loss: ValLoss,
    /// Ramp lambda with `2 / (1 + exp(-10 p)) - 1` over training progress `p`.
    pub lambda_warmup: bool,
    /// `false` leaves the domain branch out of the objective entirely.
    pub adversarial: bool,
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub domain_hidden: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::new(1, 2);
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 0.0,
            lambda: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            strategy: StrategyConfig::default(),
            seed: 0,
            val_loss: ValLoss::Task,
            lambda_warmup: false,
            adversarial: true,
            encoder_hidden: model.encoder_hidden,
            latent_dim: model.latent_dim,
            domain_hidden: model.domain_hidden,
            dropout_rate: model.dropout_rate,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("lambda must be >= 0, got {l}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be > 0".into());
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn model_config(&self, corpus: &Corpus, num_domains: usize) -> ModelConfig {
        ModelConfig {
            input_dim: corpus.feature_dim(),
            encoder_hidden: self.encoder_hidden.clone(),
            latent_dim: self.latent_dim,
            aspects: corpus.schema().aspects.clone(),
            domain_hidden: self.domain_hidden.clone(),
            num_domains,
            dropout_rate: self.dropout_rate,
            seed: self.seed,
        }
    }
}

/// Infer-mode losses over whole splits after one epoch (epoch 0 is the initial model).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

/// Rows `epoch,split,task,adv,total`.
pub fn loss_csv(history: &[EpochLosses]) -> String {
    let mut out = String::from("epoch,split,task,adv,total\n");
    for e in history {
        for (split, l) in [("train", &e.train), ("val", &e.val)] {
            out.push_str(&format!("{},{split},{},{},{}\n", e.epoch, l.task, l.adv, l.total));
        }
    }
    out
}

/// Design matrices and labels of one split.
struct SplitData {
    indices: Vec<usize>,
    batch: Batch,
}

impl SplitData {
    fn new(corpus: &Corpus, assignment: &DomainAssignment, split: Split, labelled: bool) -> Result<Self> {
        let indices = corpus.split_indices(split);
        if indices.is_empty() {
            return Err(Error::InsufficientData(format!("split `{split}` is empty")));
        }
        let (x, y) = corpus.design(&indices);
        let labels = if labelled {
            assignment.labels_for(corpus, &indices)?
        } else {
            vec![0; indices.len()]
        };
        Ok(Self {
            indices,
            batch: Batch { x, y, labels },
        })
    }

    fn take(&self, positions: &[usize]) -> Batch {
        let f = self.batch.x.shape()[1];
        let a = self.batch.y.shape()[1];
        let mut x = Vec::with_capacity(positions.len() * f);
        let mut y = Vec::with_capacity(positions.len() * a);
        let mut labels = Vec::with_capacity(positions.len());
        for &p in positions {
            x.extend_from_slice(self.batch.x.row(p));
            y.extend_from_slice(self.batch.y.row(p));
            labels.push(self.batch.labels[p]);
        }
        Batch {
            x: Array::new(vec![positions.len(), f], x).expect("row widths"),
            y: Array::new(vec![positions.len(), a], y).expect("row widths"),
            labels,
        }
    }
}

fn full_split_loss(
    model: &ModelConfig,
    params: &ModelParams,
    data: &SplitData,
    lambda: f64,
    adversarial: bool,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = Bound::bind(params, &mut tape)?;
    let (_, br) = batch_objective(model, &bound, &mut tape, &data.batch, lambda, adversarial, &mut Mode::Infer)?;
    Ok(br)
}

/// `lambda` scaled by the warm-up ramp at progress `p` in `[0, 1]`.
pub fn warmup_lambda(lambda: f64, p: f64) -> f64 {
    lambda * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
}

/// Labels the corpus and trains a fresh model; returns the best-validation checkpoint.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<Checkpoint> {
    train_with(corpus, config, &StrategyRegistry::with_builtins())
}

pub fn train_with(corpus: &Corpus, config: &TrainConfig, registry: &StrategyRegistry) -> Result<Checkpoint> {
    config.validate()?;
    let strategy = registry.build(&config.strategy)?;
    let assignment = strategy.assign(corpus)?;
    let lambda = config.lambda.unwrap_or_else(|| strategy.default_lambda());
    let model = config.model_config(corpus, assignment.num_domains);
    model.validate()?;

    let train_data = SplitData::new(corpus, &assignment, Split::Train, config.adversarial)?;
    let val_data = SplitData::new(corpus, &assignment, Split::Val, config.adversarial)?;
    let mut position = vec![usize::MAX; corpus.len()];
    for (p, &i) in train_data.indices.iter().enumerate() {
        position[i] = p;
    }

    let mut params = ModelParams::init(&model)?;
    let lens: Vec<usize> = params.named().iter().map(|(_, a)| a.len()).collect();
    let mut opt = AdamW::new(config.hyper(), &lens);

    let record = |epoch: usize, params: &ModelParams| -> Result<EpochLosses> {
        Ok(EpochLosses {
            epoch,
            train: full_split_loss(&model, params, &train_data, lambda, config.adversarial)?,
            val: full_split_loss(&model, params, &val_data, lambda, config.adversarial)?,
        })
    };
    let score = |e: &EpochLosses| match config.val_loss {
        ValLoss::Task => e.val.task,
        ValLoss::Total => e.val.total,
    };

    let mut history = vec![record(0, &params)?];
    let batches_per_epoch = train_data.indices.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch) as f64;
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        let order = batch_iter(corpus, Split::Train, config.batch_size, rng::derive_seed(config.seed, Stream::Shuffle, epoch as u64))?;
        let mut dropout = rng::stream(config.seed, Stream::Dropout, epoch as u64);
        for (b, records) in order.iter().enumerate() {
            let positions: Vec<usize> = records.iter().map(|&i| position[i]).collect();
            let batch = train_data.take(&positions);
            let lambda_now = if config.lambda_warmup {
                let done = ((epoch - 1) * batches_per_epoch + b) as f64;
                warmup_lambda(lambda, done / total_steps)
            } else {
                lambda
            };
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } | Error::NumericalStability(_) => Error::Divergence { epoch, batch: b },
                other => other,
            };
            let mut tape = Tape::new();
            let bound = Bound::bind(&params, &mut tape)?;
            let (nodes, _) = batch_objective(
                &model,
                &bound,
                &mut tape,
                &batch,
                lambda_now,
                config.adversarial,
                &mut Mode::Train(&mut dropout),
            )
            .map_err(diverged)?;
            let grads = tape.backward(nodes.total).map_err(diverged)?;
            let g: Vec<Array> = bound.leaf_ids().into_iter().map(|id| grads.wrt(id)).collect();
            opt.step(&mut params.arrays_mut(), &g).map_err(diverged)?;
        }
        let losses = record(epoch, &params).map_err(|e| match e {
            Error::NonFinite { .. } | Error::NumericalStability(_) => Error::Divergence {
                epoch,
                batch: batches_per_epoch,
            },
            other => other,
        })?;
        let s = score(&losses);
        if best.as_ref().is_none_or(|(_, b, _)| s < *b) {
            best = Some((epoch, s, params.clone()));
        }
        history.push(losses);
    }

    let (best_epoch, _, best_params) = best.expect("epochs >= 1");
    Ok(Checkpoint {
        model,
        train: config.clone(),
        params: best_params,
        best_epoch,
        history,
        domain: DomainMeta::new(&assignment, lambda),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn tiny_corpus() -> Corpus {
        generate_synthetic(&SyntheticConfig {
            feature_dim: 8,
            num_sources: 4,
            clips_per_source: 50,
            eval_systems: 4,
            clips_per_system: 5,
            ..SyntheticConfig::default()
        })
        .unwrap()
        .corpus
    }

    fn tiny_config(lambda: f64) -> TrainConfig {
        TrainConfig {
            epochs: 5,
            batch_size: 16,
            lr: 1e-3,
            lambda: Some(lambda),
            encoder_hidden: vec![16],
            latent_dim: 8,
            domain_hidden: vec![8],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn task_loss_decreases() {
        let ck = train(&tiny_corpus(), &tiny_config(0.0)).unwrap();
        let first = ck.history.first().unwrap().train.task;
        let last = ck.history.last().unwrap().train.task;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn deterministic() {
        let c = tiny_corpus();
        let a = train(&c, &tiny_config(0.5)).unwrap();
        let b = train(&c, &tiny_config(0.5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn best_epoch_is_first_argmin() {
        let ck = train(&tiny_corpus(), &tiny_config(0.5)).unwrap();
        let trained = &ck.history[1..];
        let min = trained.iter().map(|e| e.val.task).fold(f64::INFINITY, f64::min);
        let first = trained.iter().find(|e| e.val.task == min).unwrap().epoch;
        assert_eq!(ck.best_epoch, first);
        assert!(trained.iter().all(|e| ck.history[ck.best_epoch].val.task <= e.val.task));
    }

    #[test]
    fn lambda_zero_matches_ablated_branch_on_quality_path() {
        let c = tiny_corpus();
        let with_branch = train(&c, &tiny_config(0.0)).unwrap();
        let ablated = train(
            &c,
            &TrainConfig {
                adversarial: false,
                ..tiny_config(0.0)
            },
        )
        .unwrap();
        assert_eq!(with_branch.params.encoder, ablated.params.encoder);
        assert_eq!(with_branch.params.quality, ablated.params.quality);
    }

    #[test]
    fn warmup_ramp_endpoints() {
        assert_eq!(warmup_lambda(0.5, 0.0), 0.0);
        assert!((warmup_lambda(0.5, 1.0) - 0.5).abs() < 1e-4);
    }

    #[test]
    fn strategy_default_lambda_applies() {
        let c = tiny_corpus();
        let mut cfg = tiny_config(0.0);
        cfg.lambda = None;
        cfg.epochs = 1;
        assert_eq!(train(&c, &cfg).unwrap().domain.lambda, 0.5);
        cfg.strategy.name = "kmeans".into();
        let ck = train(&c, &cfg).unwrap();
        assert_eq!((ck.domain.lambda, ck.domain.num_domains), (0.1, 8));
    }

    #[test]
    fn invalid_config_rejected() {
        let c = tiny_corpus();
        for cfg in [
            TrainConfig { lr: 0.0, ..tiny_config(0.1) },
            TrainConfig { epochs: 0, ..tiny_config(0.1) },
            TrainConfig { lambda: Some(-1.0), ..tiny_config(0.1) },
        ] {
            assert!(matches!(train(&c, &cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn loss_csv_has_two_rows_per_epoch() {
        let ck = train(&tiny_corpus(), &TrainConfig { epochs: 2, ..tiny_config(0.1) }).unwrap();
        let csv = loss_csv(&ck.history);
        assert_eq!(csv.lines().count(), 1 + 2 * 3);
        assert!(csv.starts_with("epoch,split,task,adv,total\n0,train,"));
    }
}
