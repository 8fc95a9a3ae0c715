mod commands;
mod data;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use settings::{CommonArgs, SchemeArg, SelectArg, Settings, StandardizeArg};

/// Shared-kernel Gaussian mixture classifiers trained by supervised EM.
#[derive(Parser)]
#[command(name = "skem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.json, history.tsv and report.json.
    Train(CommonArgs),
    /// Score a saved model on labeled data.
    Eval {
        /// Model bundle written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// k-fold cross-validation on --data.
    Cv(CommonArgs),
    /// Accuracy and shared proportion over a grid of K and block arrangements.
    Sweep(CommonArgs),
    /// Run a published benchmark configuration.
    Bench {
        #[arg(value_enum)]
        preset: Preset,
        /// Directory holding rice.csv, ionosphere.csv and mnist/.
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// 10-fold CV, SKEM with K=14.
    Rice,
    /// Randomized 5-fold CV, 2 blocks of 16 features, K=12.
    Ionosphere,
    /// Desk-scale MNIST: 14x14 deskewed images, 36 PCA features, 3x12 blocks.
    Mnist,
    /// Full-size MNIST: 39 PCA features, 3x13 blocks, K=60.
    MnistFull,
}

impl Preset {
    fn settings(self, dir: &Path) -> Settings {
        let d = Settings::default();
        match self {
            Preset::Rice => Settings {
                data: Some(dir.join("rice.csv")),
                k: 14,
                passes: 10,
                init_range: (-1.0, 1.0),
                sigma: 2.0,
                folds: 10,
                trials: 10,
                ..d
            },
            Preset::Ionosphere => Settings {
                data: Some(dir.join("ionosphere.csv")),
                features: Some("3-34".into()),
                k: 12,
                passes: 40,
                init_range: (-1.0, 1.0),
                sigma: 1e5,
                blocks: Some(2),
                folds: 5,
                randomize_folds: true,
                trials: 20,
                ..d
            },
            Preset::Mnist => Settings {
                data: Some(dir.join("mnist/train-images-idx3-ubyte")),
                test: Some(dir.join("mnist/t10k-images-idx3-ubyte")),
                limit: Some(10_000),
                test_limit: Some(2_000),
                deskew: true,
                half: true,
                standardize: StandardizeArg::Image,
                pca: Some(36),
                k: 12,
                blocks: Some(3),
                select: SelectArg::Best,
                out: Some("bench-mnist".into()),
                ..d
            },
            Preset::MnistFull => Settings {
                data: Some(dir.join("mnist/train-images-idx3-ubyte")),
                test: Some(dir.join("mnist/t10k-images-idx3-ubyte")),
                limit: Some(30_000),
                deskew: true,
                standardize: StandardizeArg::Image,
                pca: Some(39),
                k: 60,
                blocks: Some(3),
                scheme: SchemeArg::Seq,
                select: SelectArg::Best,
                out: Some("bench-mnist-full".into()),
                ..d
            },
        }
    }

    /// Published accuracy for this configuration, where one exists.
    fn reference(self) -> Option<f64> {
        match self {
            Preset::Rice => Some(0.950),
            Preset::Ionosphere => Some(0.980),
            Preset::Mnist => None,
            Preset::MnistFull => Some(0.9748),
        }
    }
}

fn init_pool(s: &Settings) -> Result<()> {
    if let Some(n) = s.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let s = Settings::resolve(Settings::default(), &a)?;
            init_pool(&s)?;
            commands::train(&s)?;
        }
        Command::Eval { model, common } => {
            let s = Settings::resolve(Settings::default(), &common)?;
            init_pool(&s)?;
            commands::eval(&s, &model)?;
        }
        Command::Cv(a) => {
            let s = Settings::resolve(Settings::default(), &a)?;
            init_pool(&s)?;
            commands::cv(&s)?;
        }
        Command::Sweep(a) => {
            let s = Settings::resolve(Settings::default(), &a)?;
            init_pool(&s)?;
            commands::sweep(&s)?;
        }
        Command::Bench {
            preset,
            data_dir,
            common,
        } => {
            let s = Settings::resolve(preset.settings(&data_dir), &common)?;
            init_pool(&s)?;
            let got = match preset {
                Preset::Rice | Preset::Ionosphere => commands::cv(&s)?.mean,
                Preset::Mnist | Preset::MnistFull => commands::train(&s)?
                    .test_accuracy
                    .context("benchmark needs test data")?,
            };
            match preset.reference() {
                Some(r) => println!("reference: {r:.4}  measured: {got:.4}"),
                None => println!("measured: {got:.4}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already embed their causes in the message
            let mut msg = String::new();
            for cause in e.chain().map(ToString::to_string) {
                if msg.is_empty() {
                    msg = cause;
                } else if !msg.contains(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            let msg = msg.replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
