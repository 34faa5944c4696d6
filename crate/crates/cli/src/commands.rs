use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::json;

use datqa::autodiff::Fault;
use datqa::data::{generate_synthetic, Corpus, Schema, Split, SyntheticConfig};
use datqa::domains::{StrategyConfig, StrategyRegistry};
use datqa::eval::{
    ablate_k as run_ablation, ablation_csv, compare, evaluate, evaluate_predictions, probe_checkpoint, probe_csv, projection_csv, ErrorKind,
    EvalReport, DEFAULT_K_LIST,
};
use datqa::selfcheck::{run_selfcheck, SelfCheckOptions};
use datqa::train::{load_checkpoint, loss_csv, save_checkpoint, train_with, Checkpoint, TrainConfig, ValLoss};

use crate::manifest::Run;
use crate::{CliError, OutDir};

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>, run: &mut Run) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    run.input(path);
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_corpus(path: &Path, run: &mut Run) -> Result<Corpus, CliError> {
    let corpus = Corpus::load_jsonl(path, Schema::default())?;
    run.input(path);
    Ok(corpus)
}

fn load_ck(path: &Path, run: &mut Run) -> Result<Checkpoint, CliError> {
    let ck = load_checkpoint(path)?;
    run.input(path);
    Ok(ck)
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output corpus path; `run.json` is written beside it.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with synthetic settings, overridden by flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Confound strength between source and the confounded aspect.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    sources: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    clips_per_source: Option<usize>,
    #[arg(long)]
    eval_systems: Option<usize>,
    #[arg(long)]
    clips_per_system: Option<usize>,
    #[arg(long)]
    confounded_aspect: Option<String>,
}

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut run = Run::start("gen-data");
    let mut cfg: SyntheticConfig = read_config(a.config.as_deref(), &mut run)?;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag.clone() { cfg.$field = v; })* };
    }
    set!(rho => rho, sources => num_sources, seed => seed, feature_dim => feature_dim,
        clips_per_source => clips_per_source, eval_systems => eval_systems,
        clips_per_system => clips_per_system, confounded_aspect => confounded_aspect);
    let corpus = generate_synthetic(&cfg)?.corpus;
    let dir = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    run.write(&a.out, corpus.to_jsonl_string())?;
    let path = run.finish(&dir, to_json(&cfg), Some(cfg.seed))?;
    println!("wrote {} records to {} ({})", corpus.len(), a.out.display(), path.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct CorpusOut {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    out: OutDir,
}

pub fn data_export(a: CorpusOut) -> Result<(), CliError> {
    let mut run = Run::start("data export");
    let corpus = load_corpus(&a.corpus, &mut run)?;
    let dir = a.out.create()?;
    run.write(&dir.join("corpus.jsonl"), corpus.to_jsonl_string())?;
    run.finish(dir, json!({ "schema": corpus.schema() }), None)?;
    Ok(())
}

pub fn data_stats(a: CorpusOut) -> Result<(), CliError> {
    let mut run = Run::start("data stats");
    let corpus = load_corpus(&a.corpus, &mut run)?;
    let dir = a.out.create()?;
    let csv = corpus.stats_csv();
    print!("{csv}");
    run.write(&dir.join("stats.csv"), csv)?;
    run.finish(dir, json!({ "schema": corpus.schema() }), None)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct DomainsArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "source")]
    strategy: String,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 6)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long)]
    no_standardize: bool,
    #[command(flatten)]
    out: OutDir,
}

pub fn domains_export(a: DomainsArgs) -> Result<(), CliError> {
    let mut run = Run::start("domains export");
    let cfg = StrategyConfig {
        name: a.strategy,
        k: a.k,
        d: a.d,
        seed: a.seed,
        standardize: !a.no_standardize,
        restarts: a.restarts,
    };
    let strategy = StrategyRegistry::with_builtins().build(&cfg)?;
    let corpus = load_corpus(&a.corpus, &mut run)?;
    let assignment = strategy.assign(&corpus)?;
    let dir = a.out.create()?;
    run.write(&dir.join("domains.csv"), assignment.to_csv(&corpus))?;
    let meta = json!({
        "strategy": to_json(&cfg),
        "num_domains": assignment.num_domains,
        "label_names": assignment.label_names,
        "centroid_hash": assignment.centroid_hash(),
    });
    run.finish(dir, meta, Some(cfg.seed))?;
    println!("{} records labelled into {} domains", assignment.labels.len(), assignment.num_domains);
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// JSON file with training settings, overridden by flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Adversarial weight; defaults per strategy.
    #[arg(long)]
    lambda: Option<f64>,
    /// Domain strategy: source, kmeans or random.
    #[arg(long)]
    strategy: Option<String>,
    /// Number of k-means clusters.
    #[arg(long)]
    k: Option<usize>,
    /// Number of random domains.
    #[arg(long)]
    d: Option<usize>,
    /// Seed for initialization, shuffling, dropout and domain strategies.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Cluster raw pooled features instead of z-scored ones.
    #[arg(long)]
    no_standardize: bool,
    /// Validation loss used for checkpoint selection.
    #[arg(long, value_parser = parse_val_loss)]
    val_loss: Option<ValLoss>,
    #[arg(long)]
    lambda_warmup: bool,
    /// Drop the domain branch from the objective.
    #[arg(long)]
    no_adversarial: bool,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Comma-separated hidden widths of the encoder.
    #[arg(long, value_delimiter = ',')]
    encoder_hidden: Option<Vec<usize>>,
    /// Comma-separated hidden widths of the domain classifier.
    #[arg(long, value_delimiter = ',')]
    domain_hidden: Option<Vec<usize>>,
}

fn parse_val_loss(s: &str) -> Result<ValLoss, String> {
    s.parse().map_err(|e: datqa::Error| e.to_string())
}

impl TrainArgs {
    fn resolve(&self, run: &mut Run) -> Result<TrainConfig, CliError> {
        let mut cfg: TrainConfig = read_config(self.config.as_deref(), run)?;
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),*) => { $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v; })* };
        }
        set!(epochs => epochs, batch_size => batch_size, lr => lr, weight_decay => weight_decay,
            strategy => strategy.name, k => strategy.k, d => strategy.d, restarts => strategy.restarts,
            val_loss => val_loss, dropout => dropout_rate, latent_dim => latent_dim,
            encoder_hidden => encoder_hidden, domain_hidden => domain_hidden);
        if let Some(l) = self.lambda {
            cfg.lambda = Some(l);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.strategy.seed = s;
        }
        if self.no_standardize {
            cfg.strategy.standardize = false;
        }
        if self.lambda_warmup {
            cfg.lambda_warmup = true;
        }
        if self.no_adversarial {
            cfg.adversarial = false;
        }
        cfg.validate()?;
        StrategyRegistry::with_builtins().build(&cfg.strategy)?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainCmdArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    out: OutDir,
}

pub fn train(a: TrainCmdArgs) -> Result<(), CliError> {
    let mut run = Run::start("train");
    let mut cfg = a.train.resolve(&mut run)?;
    let corpus = load_corpus(&a.corpus, &mut run)?;
    let dir = a.out.create()?;
    let ck = train_with(&corpus, &cfg, &StrategyRegistry::with_builtins())?;
    cfg.lambda = Some(ck.domain.lambda);
    let path = dir.join("checkpoint.bin");
    save_checkpoint(&ck, &path)?;
    run.output(&path);
    run.write(&dir.join("losses.csv"), loss_csv(&ck.history))?;
    run.finish(dir, to_json(&cfg), Some(cfg.seed))?;
    println!(
        "best epoch {} (strategy {}, {} domains, lambda {})",
        ck.best_epoch, ck.domain.strategy, ck.domain.num_domains, ck.domain.lambda
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Errors {
    Abs,
    Squared,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// CSV `record_id,<aspect>...` covering every record of the split.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Reference model for paired t-tests.
    #[arg(long, conflicts_with = "reference_predictions")]
    reference_checkpoint: Option<PathBuf>,
    #[arg(long)]
    reference_predictions: Option<PathBuf>,
    /// Per-system error used by the t-test.
    #[arg(long, value_enum, default_value = "abs")]
    errors: Errors,
    #[arg(long, default_value = "eval", value_parser = parse_split)]
    split: Split,
    #[command(flatten)]
    out: OutDir,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: datqa::Error| e.to_string())
}

fn read_predictions(path: &Path, corpus: &Corpus, split: Split, run: &mut Run) -> Result<Vec<Vec<f64>>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    run.input(path);
    let aspects = &corpus.schema().aspects;
    let bad = |line: usize, msg: String| CliError::Core(datqa::Error::Parse { line, msg });
    let mut lines = text.lines().enumerate();
    let header: Vec<&str> = lines.next().map(|(_, l)| l.split(',').map(str::trim).collect()).unwrap_or_default();
    let expected: Vec<&str> = std::iter::once("record_id").chain(aspects.iter().map(String::as_str)).collect();
    if header != expected {
        return Err(bad(1, format!("header must be `{}`", expected.join(","))));
    }
    let mut by_id = std::collections::HashMap::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != expected.len() {
            return Err(bad(n + 1, format!("expected {} columns", expected.len())));
        }
        let values = cells[1..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|e| bad(n + 1, e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        by_id.insert(cells[0].to_string(), values);
    }
    corpus
        .split_indices(split)
        .iter()
        .map(|&i| {
            let id = &corpus.records()[i].id;
            by_id.remove(id).ok_or_else(|| CliError::Usage(format!("{}: no prediction for `{id}`", path.display())))
        })
        .collect()
}

fn report_for(
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    corpus: &Corpus,
    split: Split,
    run: &mut Run,
) -> Result<EvalReport, CliError> {
    match (checkpoint, predictions) {
        (Some(c), _) => {
            let ck = load_ck(c, run)?;
            Ok(evaluate(&ck.model, &ck.params, corpus, split)?)
        }
        (None, Some(p)) => Ok(evaluate_predictions(corpus, split, &read_predictions(p, corpus, split, run)?)?),
        (None, None) => Err(CliError::Usage("one of --checkpoint or --predictions is required".into())),
    }
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut run = Run::start("eval");
    let corpus = load_corpus(&a.corpus, &mut run)?;
    let mut report = report_for(a.checkpoint.as_deref(), a.predictions.as_deref(), &corpus, a.split, &mut run)?;
    let kind = match a.errors {
        Errors::Abs => ErrorKind::Absolute,
        Errors::Squared => ErrorKind::Squared,
    };
    if a.reference_checkpoint.is_some() || a.reference_predictions.is_some() {
        let reference = report_for(
            a.reference_checkpoint.as_deref(),
            a.reference_predictions.as_deref(),
            &corpus,
            a.split,
            &mut run,
        )?;
        compare(&mut report, &reference, kind)?;
    }
    let dir = a.out.create()?;
    let csv = report.to_csv();
    print!("{csv}");
    run.write(&dir.join("eval.csv"), csv)?;
    run.finish(dir, json!({ "split": a.split, "errors": kind.to_string() }), None)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// `name=checkpoint` pair; repeat for each model.
    #[arg(long = "model", required = true, value_parser = parse_named)]
    models: Vec<(String, PathBuf)>,
    /// Seed of the held-out split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutDir,
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(format!("expected name=path, got `{s}`")),
    }
}

pub fn probe(a: ProbeArgs) -> Result<(), CliError> {
    let mut run = Run::start("probe");
    let corpus = load_corpus(&a.corpus, &mut run)?;
    let mut reports = Vec::new();
    for (name, path) in &a.models {
        let ck = load_ck(path, &mut run)?;
        reports.push(probe_checkpoint(name, &ck, &corpus, a.seed)?);
    }
    let dir = a.out.create()?;
    let csv = probe_csv(&reports);
    print!("{csv}");
    run.write(&dir.join("probe.csv"), csv)?;
    let models: Vec<_> = a.models.iter().map(|(n, p)| json!({ "name": n, "path": p })).collect();
    run.finish(dir, json!({ "models": models }), Some(a.seed))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated domain counts.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_K_LIST)]
    ks: Vec<usize>,
    #[arg(long, default_value = "PC")]
    aspect: String,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    out: OutDir,
}

pub fn ablate_k(a: AblateArgs) -> Result<(), CliError> {
    let mut run = Run::start("ablate-k");
    let cfg = a.train.resolve(&mut run)?;
    let corpus = load_corpus(&a.corpus, &mut run)?;
    let dir = a.out.create()?;
    let result = run_ablation(&corpus, &cfg, &a.ks, &a.aspect)?;
    let csv = ablation_csv(&result.rows);
    print!("{csv}");
    for (strategy, mean) in result.mean_delta_srcc() {
        println!("mean delta SRCC {strategy}: {mean:+.4}");
    }
    run.write(&dir.join("ablation.csv"), csv)?;
    run.finish(dir, json!({ "train": to_json(&cfg), "ks": a.ks, "aspect": a.aspect }), Some(cfg.seed))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Aspect whose truth score is written alongside each point.
    #[arg(long, default_value = "PC")]
    aspect: String,
    #[command(flatten)]
    out: OutDir,
}

pub fn project(a: ProjectArgs) -> Result<(), CliError> {
    let mut run = Run::start("project");
    let corpus = load_corpus(&a.corpus, &mut run)?;
    let ck = load_ck(&a.checkpoint, &mut run)?;
    let (pca, csv) = projection_csv(&ck, &corpus, &a.aspect)?;
    if pca.rank_deficient {
        eprintln!("warning: latents span fewer than two dimensions");
    }
    let dir = a.out.create()?;
    run.write(&dir.join("projection.csv"), csv)?;
    run.finish(dir, json!({ "aspect": a.aspect, "variances": pca.variances }), None)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InjectFault {
    GnllGrad,
}

#[derive(Args, Debug)]
pub struct SelfcheckArgs {
    /// Randomized instances per operation.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<InjectFault>,
    #[command(flatten)]
    out: OutDir,
}

pub fn selfcheck(a: SelfcheckArgs) -> Result<(), CliError> {
    let run = Run::start("selfcheck");
    let opts = SelfCheckOptions {
        trials: a.trials,
        seed: a.seed,
        fault: a.inject_fault.map(|InjectFault::GnllGrad| Fault::GnllGradient),
    };
    let report = run_selfcheck(&opts);
    for o in &report.outcomes {
        println!(
            "{} {:<32} err {:.3e} tol {:.0e}",
            if o.passed { "ok  " } else { "FAIL" },
            o.name,
            o.error,
            o.tolerance
        );
    }
    let dir = a.out.create()?;
    let mut run = run;
    run.write(&dir.join("selfcheck.json"), serde_json::to_string_pretty(&report).map_err(datqa::Error::from)? + "\n")?;
    run.finish(dir, json!({ "trials": a.trials, "fault": a.inject_fault.is_some() }), Some(a.seed))?;
    match report.first_failure() {
        None => Ok(()),
        Some(f) => Err(CliError::Failed(format!(
            "{} failed: error {:.3e} exceeds {:.0e}; {}",
            f.name,
            f.error,
            f.tolerance,
            f.counterexample.as_deref().unwrap_or("no counterexample recorded")
        ))),
    }
}
