use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use owseg_cli::commands::{self, DumpFormat, Experiment, Outcome, PredictionMode, DEFAULT_BINS};
use owseg_cli::config::ExperimentConfig;
use owseg_cli::error::Result;
use owseg_cli::store::IlMethod;
use owseg_core::openset::ScoringMethod;
use owseg_core::ClassId;

#[derive(Parser)]
#[command(
    name = "owseg",
    version,
    about = "Open-world semantic segmentation of LIDAR point clouds"
)]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true, default_value = "owseg.json")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Real,
    Msp,
    Maxlogit,
    Mcdropout,
}

impl From<Method> for ScoringMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Real => ScoringMethod::Real,
            Method::Msp => ScoringMethod::Msp,
            Method::Maxlogit => ScoringMethod::MaxLogit,
            Method::Mcdropout => ScoringMethod::McDropout,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum IlKind {
    Real,
    Finetune,
    FeatureExtraction,
}

impl From<IlKind> for IlMethod {
    fn from(k: IlKind) -> Self {
        match k {
            IlKind::Real => IlMethod::Real,
            IlKind::Finetune => IlMethod::Finetune,
            IlKind::FeatureExtraction => IlMethod::FeatureExtraction,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Prediction {
    Closed,
    Open,
}

impl From<Prediction> for PredictionMode {
    fn from(p: Prediction) -> Self {
        match p {
            Prediction::Closed => PredictionMode::Closed,
            Prediction::Open => PredictionMode::Open,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Binary,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset, or fingerprint a SemanticKITTI tree.
    GenData,
    /// Train the closed-set model on old-class labels.
    TrainClosed,
    /// Add redundancy classifiers and train the open-set model.
    FinetuneOseg,
    /// Introduce one novel class.
    Il {
        #[arg(long = "class")]
        class: ClassId,
        #[arg(long, value_enum, default_value = "real")]
        method: IlKind,
        /// Stage to start from; defaults to the latest open-set or REAL stage.
        #[arg(long)]
        source: Option<String>,
    },
    /// Evaluate a stage on the validation split.
    Evaluate {
        #[arg(long, default_value = "oseg")]
        stage: String,
        /// Unknown scoring method; omit for segmentation metrics only.
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long, value_enum, default_value = "closed")]
        prediction: Prediction,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
    /// Write per-point scores of a stage on the validation split.
    DumpScores {
        #[arg(long, default_value = "oseg")]
        stage: String,
        #[arg(long, value_enum, default_value = "real")]
        method: Method,
        #[arg(long, value_enum, default_value = "closed")]
        prediction: Prediction,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Write score histograms of every scoring method for plotting.
    PlotData {
        #[arg(long, default_value = "oseg")]
        stage: String,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
}

fn run(cli: Cli) -> Result<Outcome> {
    let cfg = ExperimentConfig::load(&cli.config)?;
    let exp = Experiment::open(cfg)?;
    match cli.command {
        Command::GenData => commands::gen_data(&exp),
        Command::TrainClosed => commands::train_closed(&exp),
        Command::FinetuneOseg => commands::finetune_oseg(&exp),
        Command::Il {
            class,
            method,
            source,
        } => commands::il(&exp, class, method.into(), source.as_deref()),
        Command::Evaluate {
            stage,
            method,
            prediction,
            bins,
        } => commands::evaluate(
            &exp,
            &stage,
            method.map(Into::into),
            prediction.into(),
            bins,
        ),
        Command::DumpScores {
            stage,
            method,
            prediction,
            format,
        } => {
            let format = match format {
                Format::Csv => DumpFormat::Csv,
                Format::Binary => DumpFormat::Binary,
            };
            commands::dump_scores(&exp, &stage, method.into(), prediction.into(), format)
        }
        Command::PlotData { stage, bins } => commands::plot_data(&exp, &stage, bins),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(out) => {
            let status = if out.executed { "done" } else { "up to date" };
            println!("{}: {status}", out.manifest.id);
            for (path, hash) in &out.manifest.outputs {
                println!("  {path} {hash}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
