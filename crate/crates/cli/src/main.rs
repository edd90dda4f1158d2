use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fsbbt::config::DistillConfig;
use fsbbt::data::DatasetId;
use fsbbt::distill::evaluate;
use fsbbt::experiment::{self, all_combos, parse_combo, TeacherTrainConfig};
use fsbbt::nn::{AdamConfig, Architecture, Classifier};
use fsbbt::teacher::server::serve_teacher;

#[derive(Parser)]
#[command(name = "fsbbt", version, about = "Few-shot distillation from a black-box teacher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher classifier on a full labeled training split.
    TeacherTrain {
        #[arg(long, default_value = "mnist")]
        dataset: String,
        /// Defaults to data/<dataset>.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "lenet5")]
        architecture: String,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a teacher checkpoint over HTTP (`POST /predict`, `GET /info`).
    TeacherServe {
        #[arg(long)]
        port: u16,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 1024)]
        batch_limit: usize,
    },
    /// Run the full distillation pipeline over the configured seeds.
    Distill {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare synthetic source combinations against Standard-KD.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Combos such as `mixup`, `cvae_wd+cvae_ood`; all seven when omitted.
        #[arg(long, num_args = 1..)]
        combos: Vec<String>,
    },
    /// Accuracy as a function of the mixup threshold.
    SweepAlpha {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [0.01, 0.05, 0.1, 0.2])]
        alphas: Vec<f64>,
    },
    /// Test-set accuracy of a classifier checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "mnist")]
        dataset: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn data_dir(dataset: DatasetId, dir: Option<PathBuf>) -> PathBuf {
    dir.unwrap_or_else(|| PathBuf::from("data").join(dataset.as_str()))
}

fn run(cli: Cli) -> fsbbt::Result<()> {
    match cli.command {
        Command::TeacherTrain { dataset, data_dir: dir, architecture, epochs, batch_size, lr, seed, out } => {
            let id = DatasetId::parse(&dataset)?;
            let split = id.load(data_dir(id, dir))?;
            let cfg = TeacherTrainConfig {
                architecture: Architecture::parse(&architecture)?,
                epochs,
                batch_size,
                seed,
                adam: AdamConfig { lr, ..AdamConfig::default() },
            };
            let result = experiment::train_teacher(&split, &cfg)?;
            let echo = serde_json::json!({ "teacher": cfg, "dataset": id, "test_acc": result.test_acc });
            result.model.save(&out, Some(&echo))?;
            println!("teacher test accuracy {:.4}, saved to {}", result.test_acc, out.display());
        }
        Command::TeacherServe { port, checkpoint, host, batch_limit } => {
            let model = Classifier::load(&checkpoint)?;
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| fsbbt::Error::argument(format!("bad address {host}:{port}: {e}")))?;
            let handle = serve_teacher(model, addr, batch_limit)?;
            println!("serving {} on {}", checkpoint.display(), handle.base_url());
            handle.wait();
        }
        Command::Distill { config } => {
            let cfg = DistillConfig::load(&config)?;
            let report = experiment::run_pipeline(&cfg)?;
            for s in &report.summary {
                println!("{:<14} {:.4} +- {:.4} over {} seeds", s.regime, s.mean, s.std, s.accuracies.len());
            }
            println!("report written to {}", cfg.output_dir.display());
        }
        Command::Ablate { config, combos } => {
            let cfg = DistillConfig::load(&config)?;
            let combos = if combos.is_empty() {
                all_combos()
            } else {
                combos.iter().map(|c| parse_combo(c)).collect::<fsbbt::Result<Vec<_>>>()?
            };
            let table = experiment::run_ablation(&cfg, &combos)?;
            for r in table.rows.iter().chain(std::iter::once(&table.reference)) {
                println!("{:<26} {:.4} +- {:.4}", r.combo, r.mean, r.std);
            }
        }
        Command::SweepAlpha { config, alphas } => {
            let cfg = DistillConfig::load(&config)?;
            let res = experiment::sweep_alpha(&cfg, &alphas)?;
            for p in &res.points {
                println!("alpha {:<5} {:.4} +- {:.4}", p.alpha, p.mean, p.std);
            }
            println!("standard_kd {:.4}; plot at {}", res.standard_kd.mean, res.plot.display());
        }
        Command::Eval { checkpoint, dataset, data_dir: dir } => {
            let id = DatasetId::parse(&dataset)?;
            let split = id.load(data_dir(id, dir))?;
            let model = Classifier::load(&checkpoint)?;
            println!("test accuracy {:.4}", evaluate(&model, &split.test)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
