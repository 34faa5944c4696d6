mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Domain-adversarial training and evaluation of multi-aspect quality predictors.
#[derive(Parser, Debug)]
#[command(name = "datqa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic confounded benchmark as JSON Lines.
    GenData(commands::GenDataArgs),
    /// Corpus export and summary statistics.
    #[command(subcommand)]
    Data(DataCommand),
    /// Domain labelling.
    #[command(subcommand)]
    Domains(DomainsCommand),
    /// Train a predictor and write its checkpoint and loss curves.
    Train(commands::TrainCmdArgs),
    /// System-level MSE, SRCC and optional paired t-tests.
    Eval(commands::EvalArgs),
    /// Linear probes on the latents of one or more checkpoints.
    Probe(commands::ProbeArgs),
    /// Sweep the number of domains for the kmeans and random strategies.
    AblateK(commands::AblateArgs),
    /// Two-dimensional PCA projection of latents.
    Project(commands::ProjectArgs),
    /// Gradient checks and numeric oracles.
    Selfcheck(commands::SelfcheckArgs),
}

#[derive(Subcommand, Debug)]
enum DataCommand {
    /// Validate a corpus and write it back out.
    Export(commands::CorpusOut),
    /// Per-split, per-aspect counts, moments and source confound.
    Stats(commands::CorpusOut),
}

#[derive(Subcommand, Debug)]
enum DomainsCommand {
    /// Write `record_id,domain_label` for every labelled record.
    Export(commands::DomainsArgs),
}

#[derive(Args, Debug)]
pub struct OutDir {
    /// Directory receiving every output and `run.json`.
    #[arg(long)]
    out_dir: PathBuf,
}

impl OutDir {
    pub fn create(&self) -> Result<&Path, CliError> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| CliError::io(&self.out_dir, e))?;
        Ok(&self.out_dir)
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(datqa::Error),
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Core(datqa::Error::File {
            path: path.to_path_buf(),
            source: e,
        })
    }

    fn exit_code(&self) -> u8 {
        use datqa::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
            CliError::Core(e) => match e {
                E::File { .. } | E::InvalidConfig(_) | E::UnknownStrategy { .. } => 2,
                E::Divergence { .. } | E::NonFinite { .. } | E::NumericalStability(_) => 3,
                _ => 1,
            },
        }
    }
}

impl From<datqa::Error> for CliError {
    fn from(e: datqa::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Data(DataCommand::Export(a)) => commands::data_export(a),
        Command::Data(DataCommand::Stats(a)) => commands::data_stats(a),
        Command::Domains(DomainsCommand::Export(a)) => commands::domains_export(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Probe(a) => commands::probe(a),
        Command::AblateK(a) => commands::ablate_k(a),
        Command::Project(a) => commands::project(a),
        Command::Selfcheck(a) => commands::selfcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
