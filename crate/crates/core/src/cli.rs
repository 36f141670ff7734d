//! Command-line surface: `inject`, `train`, `evaluate`, `sweep`, `report`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::dataset::{NoiseKind, SymmetricConvention};
use crate::error::{Error, Result};
use crate::experiment::{self, SweepSpec};
use crate::manifest;
use crate::noise;
use crate::trainer::Method;

#[derive(Debug, Parser)]
#[command(name = "noisemix", version, about = "Train image classifiers on noisy labels")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corrupt training labels and write a manifest.
    Inject(InjectArgs),
    /// Run a full experiment from a config file.
    Train(TrainArgs),
    /// Re-score a run directory's checkpoints.
    Evaluate(EvaluateArgs),
    /// Run a grid of experiments.
    Sweep(SweepArgs),
    /// Aggregate run directories into a comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    /// Experiment config whose training split is corrupted.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub config: Option<PathBuf>,
    /// Existing manifest whose true labels are corrupted.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub noise: NoiseKind,
    #[arg(long, default_value_t = 0.0)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "uniform_all")]
    pub convention: SymmetricConvention,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output` from the config.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    pub run_dir: PathBuf,
    /// Score this checkpoint alone instead of the last three epochs.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Base config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub noise: Option<NoiseKind>,
    #[arg(long, value_delimiter = ',')]
    pub rates: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',')]
    pub group_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub mixup_head_layers: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub projection_layers: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories or sweep output directories.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn write_or_print(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Error::Config(e.to_string()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Inject(a) => {
            let (header, records) = if let Some(path) = &a.manifest {
                if a.noise == NoiseKind::InstanceDependent {
                    return Err(Error::validation("noise", "instance-dependent noise needs --config (images)"));
                }
                let (h, recs) = manifest::read(path)?;
                let labels: Vec<usize> = recs.iter().map(|r| r.true_label).collect();
                noise::inject_labels(&labels, h.num_classes, a.noise, a.rate, a.convention, a.seed)?
            } else {
                let mut cfg = ExperimentConfig::load(a.config.as_ref().expect("clap requires config or manifest"))?;
                cfg.noise.kind = a.noise;
                cfg.noise.rate = a.rate;
                cfg.noise.seed = a.seed;
                cfg.noise.convention = a.convention;
                cfg.validate()?;
                let data = cfg.load_data()?;
                let noisy = match a.noise {
                    NoiseKind::InstanceDependent => {
                        let mc = cfg.model_config(data.train.num_classes);
                        noise::inject_instance_dependent(&data.train, a.rate, &mc, &cfg.train, &cfg.noise.proxy, a.seed)?
                    }
                    kind => noise::inject_instance_independent(&data.train, kind, a.rate, a.convention, a.seed)?,
                };
                (noisy.manifest, noisy.records)
            };
            manifest::write(&a.out, &header, &records)?;
            println!("{} labels, realized noise rate {:.4} -> {}", records.len(), header.realized_rate, a.out.display());
        }
        Command::Train(a) => {
            let mut cfg = ExperimentConfig::load(&a.config)?;
            if let Some(o) = a.output {
                cfg.output = o;
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            let report = experiment::run_experiment(&cfg)?;
            println!(
                "{}: last-3 average test accuracy {:.2}% (epochs {:?})",
                cfg.output.display(),
                report.evaluation.accuracy_last3_avg,
                report.evaluation.epochs
            );
        }
        Command::Evaluate(a) => {
            let text = match &a.checkpoint {
                Some(ck) => to_json(&experiment::evaluate_checkpoint(&a.run_dir, ck)?)?,
                None => to_json(&experiment::evaluate_run(&a.run_dir)?)?,
            };
            write_or_print(a.out.as_ref(), &text)?;
        }
        Command::Sweep(a) => {
            let base = match &a.config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            let spec = SweepSpec {
                methods: a.methods,
                noise_kind: a.noise,
                rates: a.rates,
                group_sizes: a.group_sizes,
                mixup_head_layers: a.mixup_head_layers,
                projection_layers: a.projection_layers,
                seeds: a.seeds,
            };
            for d in experiment::run_sweep(&base, &spec, &a.out)? {
                println!("{}", d.display());
            }
        }
        Command::Report(a) => {
            let reports: Vec<_> = experiment::collect_reports(&a.dirs)?.into_iter().map(|(_, r)| r).collect();
            let rows = experiment::comparison_rows(&reports);
            print!("{}", experiment::comparison_table(&rows));
            if let Some(p) = &a.csv {
                std::fs::write(p, experiment::comparison_csv(&rows)).map_err(|e| Error::io(p, e))?;
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 success, 2 usage or config, 3 I/O or data, 4 numerical, 5 calibration.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
