mod commands;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "xray-triage", version, about = "Chest X-ray triage: training, evaluation and serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightsArg {
    AsWritten,
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpreadArg {
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Filter,
    Classifier,
}

/// Overrides applied on top of a training preset.
#[derive(Debug, Clone, clap::Args)]
pub struct TrainOverrides {
    /// Square network input side in pixels.
    #[arg(long, default_value_t = 224)]
    pub input_size: usize,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the image-validity filter network.
    TrainFilter {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of valid images that gain three quarter-turned negatives.
        #[arg(long, default_value_t = 0.0)]
        negative_fraction: f64,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Train one stage of the dense-block classifier.
    TrainCovid {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = WeightsArg::Inverse)]
        weights_mode: WeightsArg,
        /// Model directory to start from. Stage 2 replaces its head when it
        /// has two classes; without it a fresh network is trained.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drop records this filter model rejects before splitting.
        #[arg(long)]
        clean_with: Option<PathBuf>,
        /// Train only the classifier head.
        #[arg(long)]
        freeze_backbone: bool,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a model over one or more seeded splits.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Retrain from the model's configuration on every run instead of
        /// evaluating the stored weights.
        #[arg(long)]
        retrain: bool,
        #[arg(long, value_enum, default_value_t = SpreadArg::Population)]
        spread: SpreadArg,
        /// Retraining epochs per run (defaults to the preset).
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Write embedding-projector TSV files and a 3-D PCA projection.
    ExportProjector {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the HTTP inference service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        store_dir: PathBuf,
        #[arg(long, default_value_t = triage_service::config::DEFAULT_MAX_UPLOAD_BYTES)]
        max_upload_bytes: usize,
        #[arg(long, default_value_t = triage_service::config::DEFAULT_FILTER_THRESHOLD)]
        threshold: f64,
        /// Keep at most this many results.
        #[arg(long)]
        retention: Option<usize>,
    },
    /// Write a synthetic image set with its manifest.
    SynthData {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
        /// Upright images for the filter task, or per-class counts
        /// `no_finding,lung_opacity,covid19` for the classifier task.
        #[arg(long, value_delimiter = ',', required = true)]
        count: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train small filter and classifier models on synthetic data, laid out
    /// for `serve --model-dir`.
    DemoModels {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        input_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::TrainFilter {
            manifest,
            out,
            seed,
            negative_fraction,
            overrides,
        } => commands::train_filter(&manifest, &out, seed, negative_fraction, &overrides),
        Command::TrainCovid {
            stage,
            manifest,
            weights_mode,
            init,
            out,
            seed,
            clean_with,
            freeze_backbone,
            overrides,
        } => commands::train_covid(&commands::CovidArgs {
            stage,
            manifest,
            weights_mode,
            init,
            out,
            seed,
            clean_with,
            freeze_backbone,
            overrides,
        }),
        Command::Eval {
            manifest,
            model,
            runs,
            out,
            seed,
            retrain,
            spread,
            max_epochs,
            lr,
        } => commands::eval(&commands::EvalArgs {
            manifest,
            model,
            runs,
            out,
            seed,
            retrain,
            spread,
            max_epochs,
            lr,
        }),
        Command::ExportProjector {
            model,
            manifest,
            out,
            split,
            seed,
        } => commands::export_projector(&model, &manifest, &out, split, seed),
        Command::Serve {
            port,
            host,
            model_dir,
            store_dir,
            max_upload_bytes,
            threshold,
            retention,
        } => {
            let mut config = triage_service::ServiceConfig::new(model_dir, store_dir).with_env_override();
            config.max_upload_bytes = max_upload_bytes;
            config.filter_threshold = threshold;
            config.retention = retention;
            commands::serve(config, &host, port)
        }
        Command::SynthData {
            task,
            out,
            count,
            size,
            seed,
        } => commands::synth_data(task, &out, &count, size, seed),
        Command::DemoModels { out, input_size, seed } => commands::demo_models(&out, input_size, seed),
    }
}
