use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crowd_agency::datasets::{generate_dataset, load_manifest, save_manifest, Dataset, Split};
use crowd_agency::evalkit::{emit_curves, evaluate, run_toy, sweep, write_toy_outputs, SweepParam, ToyConfig, ToyScheme};
use crowd_agency::trainer::{labeled_only_baseline, read_epoch_logs, run_training, RunConfig};
use crowd_agency::{Error, Result};

#[derive(Parser)]
#[command(name = "crowd-agency", version, about = "Semi-supervised crowd counting with density agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset manifest. Flags override the `[data]`
    /// section of --config.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of training scenes.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        labeled_ratio: Option<f64>,
        /// uniform, clustered or gradient; all three cycle when omitted.
        #[arg(long)]
        layout: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes config.toml, epochs.csv and the checkpoint into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Existing manifest; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        labeled_only: bool,
    },
    /// Evaluate a checkpoint directory on one split of a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate once per value of one parameter.
    Sweep {
        #[arg(long)]
        param: String,
        /// Comma-separated values; the preset list when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Overlay the epochs.csv curves of several runs.
    Curves {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 2-D feature toy.
    Toy {
        #[arg(long, default_value = "d")]
        scheme: String,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "toy")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn dataset_for(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(p) => load_manifest(p),
        None => generate_dataset(&cfg.data),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "labeled" => Ok(Split::Labeled),
        "unlabeled" => Ok(Split::Unlabeled),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split `{other}`"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, n, labeled_ratio, layout, seed, out } => {
            let mut spec = load_config(config.as_deref())?.data;
            spec.n_train = n.unwrap_or(spec.n_train);
            spec.labeled_ratio = labeled_ratio.unwrap_or(spec.labeled_ratio);
            spec.seed = seed.unwrap_or(spec.seed);
            if let Some(l) = layout {
                spec.layout = Some(l.parse()?);
            }
            let dataset = generate_dataset(&spec)?;
            save_manifest(&dataset, &out)?;
            println!(
                "wrote {} labeled, {} unlabeled, {} test scenes to {}",
                dataset.count(Split::Labeled),
                dataset.count(Split::Unlabeled),
                dataset.count(Split::Test),
                out.display()
            );
        }
        Command::Train { config, out, data, labeled_only } => {
            let cfg = RunConfig::load(&config)?;
            let dataset = dataset_for(&cfg, data.as_deref())?;
            let run = if labeled_only {
                labeled_only_baseline(&dataset, &cfg, Some(&out))?
            } else {
                run_training(&dataset, &cfg, Some(&out))?
            };
            if let Some(last) = run.logs.last() {
                println!(
                    "{} epoch {}: train MAE {:?}, test MAE {:?}, test MSE {:?}",
                    last.run, last.epoch, last.train_mae, last.test_mae, last.test_mse
                );
            }
        }
        Command::Eval { ckpt, data, split } => {
            let dataset = load_manifest(&data)?;
            let r = evaluate(&ckpt, &dataset, parse_split(&split)?)?;
            println!("MAE {:.3}  MSE {:.3}  ({} images)", r.mae, r.mse, r.per_image.len());
        }
        Command::Sweep { param, values, config, out, data } => {
            let param: SweepParam = param.parse()?;
            let values = if values.is_empty() {
                param.preset()
            } else {
                values.iter().map(|v| param.parse_value(v)).collect::<Result<Vec<_>>>()?
            };
            let cfg = RunConfig::load(&config)?;
            let dataset = dataset_for(&cfg, data.as_deref())?;
            let table = sweep(param, &values, &cfg, &dataset, &out)?;
            print!("{}", table.to_markdown());
        }
        Command::Curves { runs, out } => {
            let mut series = Vec::new();
            for dir in &runs {
                let path = if dir.is_dir() { dir.join("epochs.csv") } else { dir.clone() };
                let logs = read_epoch_logs(&path)?;
                let name = logs.first().map(|l| l.run.clone()).unwrap_or_else(|| dir.display().to_string());
                series.push((name, logs));
            }
            emit_curves(&series, &out)?;
            println!("wrote {}", out.join("curves.csv").display());
        }
        Command::Toy { scheme, steps, seed, out } => {
            let scheme: ToyScheme = scheme.parse()?;
            let result = run_toy(&ToyConfig { scheme, steps, seed, ..ToyConfig::default() })?;
            write_toy_outputs(&result, &out)?;
            println!("{}", serde_json::to_string_pretty(&result.metrics)?);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(1);
    }
}
