//! Config-driven runs: inject, train, evaluate, and the files they leave.
//!
//! Run directory layout:
//!
//! ```text
//! config.snapshot.toml   the resolved experiment config
//! manifest.csv           corruption manifest of the training split
//! metrics.log            one JSON record per epoch
//! checkpoints/           epoch-NNNN.ckpt for the last three epochs, best.ckpt
//! report.json            run summary
//! roc.csv                class,fpr,tpr,threshold (one-vs-rest curves)
//! confusion.csv          confusion matrix of the selected snapshot
//! features.csv           encoder features of the test split (optional)
//! ```

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{ExperimentConfig, LoadedData};
use crate::dataset::{NoiseKind, NoisyDataset};
use crate::error::{Error, Result};
use crate::evaluation::{self, MetricsReport};
use crate::manifest;
use crate::model::Model;
use crate::noise;
use crate::trainer::{self, Control, Method};

pub const CONFIG_FILE: &str = "config.snapshot.toml";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const METRICS_FILE: &str = "metrics.log";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_FILE: &str = "report.json";
pub const ROC_FILE: &str = "roc.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const FEATURES_FILE: &str = "features.csv";
const BEST_CHECKPOINT: &str = "best.ckpt";

/// Last-three-epochs protocol applied to a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    /// Mean test accuracy over the evaluated epochs (three unless the run is
    /// shorter).
    pub accuracy_last3_avg: f64,
    pub epochs: Vec<usize>,
    pub accuracies: Vec<f64>,
    /// Epoch whose metrics are reported: nearest the mean, ties to the latest.
    pub selected_epoch: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub noise_kind: NoiseKind,
    pub noise_rate: f64,
    pub realized_noise_rate: f64,
    pub seed: u64,
    pub group_size: usize,
    pub mixup_head_layers: usize,
    pub projection_layers: usize,
    pub class_names: Vec<String>,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_test_accuracy: Option<f64>,
    pub sigma_mixup: Option<f64>,
    pub sigma_supervised: Option<f64>,
    pub evaluation: EvaluationSummary,
    pub warnings: Vec<String>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io(path))
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

/// Mean over the given snapshots and the one nearest it.
pub fn summarize(snapshots: &[(usize, MetricsReport)]) -> Result<EvaluationSummary> {
    if snapshots.is_empty() || snapshots.len() > 3 {
        return Err(Error::validation("snapshots", format!("expected 1 to 3, got {}", snapshots.len())));
    }
    let reports: Vec<MetricsReport> = snapshots.iter().map(|(_, r)| r.clone()).collect();
    let (mean, selected) = if reports.len() == 3 {
        let s = evaluation::average_last3(&reports)?;
        (s.mean_accuracy, s.selected)
    } else {
        let mean = reports.iter().map(|r| r.accuracy).sum::<f64>() / reports.len() as f64;
        let mut sel = 0;
        for (i, r) in reports.iter().enumerate() {
            if (r.accuracy - mean).abs() <= (reports[sel].accuracy - mean).abs() {
                sel = i;
            }
        }
        (mean, sel)
    };
    Ok(EvaluationSummary {
        accuracy_last3_avg: mean,
        epochs: snapshots.iter().map(|(e, _)| *e).collect(),
        accuracies: reports.iter().map(|r| r.accuracy).collect(),
        selected_epoch: snapshots[selected].0,
        metrics: reports[selected].clone(),
    })
}

fn inject(cfg: &ExperimentConfig, clean: &NoisyDataset) -> Result<NoisyDataset> {
    let n = &cfg.noise;
    match n.kind {
        NoiseKind::InstanceDependent => {
            let model_cfg = cfg.model_config(clean.num_classes);
            noise::inject_instance_dependent(clean, n.rate, &model_cfg, &cfg.train, &n.proxy, n.seed)
        }
        kind => noise::inject_instance_independent(clean, kind, n.rate, n.convention, n.seed),
    }
}

fn roc_rows(model: &Model, test: &NoisyDataset) -> Result<String> {
    let probs = evaluation::predict_probabilities(model, test)?;
    let truth = test.true_labels();
    let mut out = String::from("class,fpr,tpr,threshold\n");
    let classes: Vec<usize> = if test.num_classes == 2 { vec![1] } else { (0..test.num_classes).collect() };
    for c in classes {
        let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        let Ok(curve) = evaluation::roc_curve(&probs.column(c).to_vec(), &positive) else { continue };
        for line in evaluation::roc_to_csv(&curve).lines().skip(1) {
            let _ = writeln!(out, "{c},{line}");
        }
    }
    Ok(out)
}

struct Snapshot {
    epoch: usize,
    report: MetricsReport,
    model: Model,
}

/// Runs inject → train → evaluate and fills the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let dir = cfg.output.clone();
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(io(&ckpt_dir))?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml()?)?;

    let LoadedData { train, test, class_names } = cfg.load_data().map_err(Error::in_stage("ingest"))?;
    let noisy = inject(cfg, &train).map_err(Error::in_stage("inject"))?;
    manifest::write(&dir.join(MANIFEST_FILE), &noisy.manifest, &noisy.records).map_err(Error::in_stage("inject"))?;
    log::info!("injected {} noise: realized rate {:.4}", noisy.manifest.noise_kind, noisy.manifest.realized_rate);

    let model_cfg = cfg.model_config(noisy.num_classes);
    let total = cfg.train.total_epochs();
    let metrics_path = dir.join(METRICS_FILE);
    let mut log_file = File::create(&metrics_path).map_err(io(&metrics_path))?;
    let mut snapshots: Vec<Snapshot> = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let state = trainer::fit(&noisy, &model_cfg, &cfg.train, Some(&test), |state, m| {
        let line = serde_json::to_string(m).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(log_file, "{line}").and_then(|_| log_file.flush()).map_err(io(&metrics_path))?;
        if let Some(acc) = m.test_accuracy {
            if best.is_none_or(|(_, b)| acc > b) {
                best = Some((m.epoch, acc));
                checkpoint::save(&ckpt_dir.join(BEST_CHECKPOINT), state)?;
            }
        }
        if m.epoch + 3 >= total {
            checkpoint::save(&ckpt_dir.join(checkpoint_name(m.epoch)), state)?;
            let report = evaluation::evaluate(&state.model, &test)?;
            snapshots.push(Snapshot { epoch: m.epoch, report, model: state.model.clone() });
        }
        Ok(Control::Continue)
    })
    .map_err(Error::in_stage("train"))?;

    let finish = || -> Result<RunReport> {
        let pairs: Vec<(usize, MetricsReport)> = snapshots.iter().map(|s| (s.epoch, s.report.clone())).collect();
        let evaluation = summarize(&pairs)?;
        let mut warnings = evaluation.metrics.warnings.clone();
        if pairs.len() < 3 {
            warnings.push(format!("run has {} epochs; averaged over {} instead of 3", total, pairs.len()));
        }
        let selected = snapshots.iter().find(|s| s.epoch == evaluation.selected_epoch).expect("selected snapshot");
        write_file(&dir.join(ROC_FILE), roc_rows(&selected.model, &test)?)?;
        write_file(&dir.join(CONFUSION_FILE), evaluation::confusion_to_csv(&evaluation.metrics.confusion, &class_names))?;
        if cfg.export_features {
            evaluation::export_features(&selected.model, &test, &dir.join(FEATURES_FILE))?;
        }
        let last = state.history.last();
        let report = RunReport {
            method: cfg.train.method,
            noise_kind: noisy.manifest.noise_kind,
            noise_rate: noisy.manifest.rate,
            realized_noise_rate: noisy.manifest.realized_rate,
            seed: cfg.train.seed,
            group_size: cfg.train.group_size,
            mixup_head_layers: cfg.model.mixup_head_layers,
            projection_layers: cfg.model.projection_layers,
            class_names: class_names.clone(),
            train_size: noisy.len(),
            test_size: test.len(),
            epochs: state.epoch,
            best_epoch: best.map(|b| b.0),
            best_test_accuracy: best.map(|b| b.1),
            sigma_mixup: last.and_then(|m| m.sigma_mixup),
            sigma_supervised: last.and_then(|m| m.sigma_supervised),
            evaluation,
            warnings,
        };
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
        write_file(&dir.join(REPORT_FILE), json + "\n")?;
        Ok(report)
    };
    finish().map_err(Error::in_stage("evaluate"))
}

fn epoch_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&ckpt_dir).map_err(io(&ckpt_dir))? {
        let path = entry.map_err(io(&ckpt_dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(epoch) = name.strip_prefix("epoch-").and_then(|n| n.strip_suffix(".ckpt")).and_then(|n| n.parse().ok()) {
            out.push((epoch, path));
        }
    }
    out.sort();
    Ok(out)
}

fn run_test_split(dir: &Path) -> Result<NoisyDataset> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    Ok(cfg.load_data()?.test)
}

/// Re-scores a finished run's epoch checkpoints on its test split.
pub fn evaluate_run(dir: &Path) -> Result<EvaluationSummary> {
    let test = run_test_split(dir)?;
    let ckpts = epoch_checkpoints(dir)?;
    if ckpts.is_empty() {
        return Err(Error::Ingest { path: dir.join(CHECKPOINT_DIR), reason: "no epoch checkpoints".into() });
    }
    let mut snapshots = Vec::new();
    for (epoch, path) in ckpts.iter().rev().take(3).rev() {
        let ck = checkpoint::load(path)?;
        snapshots.push((*epoch, evaluation::evaluate(&ck.model, &test)?));
    }
    summarize(&snapshots)
}

/// Scores one checkpoint on the test split of the run that produced it.
pub fn evaluate_checkpoint(dir: &Path, checkpoint_path: &Path) -> Result<MetricsReport> {
    let test = run_test_split(dir)?;
    let ck = checkpoint::load(checkpoint_path)?;
    evaluation::evaluate(&ck.model, &test)
}

/// Grid of runs derived from one base config; empty lists keep the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub methods: Vec<Method>,
    pub noise_kind: Option<NoiseKind>,
    pub rates: Vec<f64>,
    pub group_sizes: Vec<usize>,
    pub mixup_head_layers: Vec<usize>,
    pub projection_layers: Vec<usize>,
    pub seeds: Vec<u64>,
}

fn or_base<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() { vec![base] } else { values.to_vec() }
}

/// Expands the grid into named configs whose outputs live under `out`.
pub fn sweep_configs(base: &ExperimentConfig, spec: &SweepSpec, out: &Path) -> Vec<ExperimentConfig> {
    let kind = spec.noise_kind.unwrap_or(base.noise.kind);
    let mut cfgs = Vec::new();
    for method in or_base(&spec.methods, base.train.method) {
        for rate in or_base(&spec.rates, base.noise.rate) {
            for m in or_base(&spec.group_sizes, base.train.group_size) {
                for heads in or_base(&spec.mixup_head_layers, base.model.mixup_head_layers) {
                    for proj in or_base(&spec.projection_layers, base.model.projection_layers) {
                        for seed in or_base(&spec.seeds, base.train.seed) {
                            let mut c = base.clone();
                            c.train.method = method;
                            c.noise.kind = kind;
                            c.noise.rate = rate;
                            c.train.group_size = m;
                            c.model.mixup_head_layers = heads;
                            c.model.projection_layers = proj;
                            c.train.seed = seed;
                            c.output = out.join(format!("{method}-{kind}-r{rate}-m{m}-h{heads}-p{proj}-s{seed}"));
                            cfgs.push(c);
                        }
                    }
                }
            }
        }
    }
    cfgs
}

pub fn run_sweep(base: &ExperimentConfig, spec: &SweepSpec, out: &Path) -> Result<Vec<PathBuf>> {
    let cfgs = sweep_configs(base, spec, out);
    for c in &cfgs {
        c.validate()?;
    }
    let mut dirs = Vec::new();
    for c in cfgs {
        log::info!("sweep run {}", c.output.display());
        run_experiment(&c)?;
        dirs.push(c.output);
    }
    Ok(dirs)
}

/// Reads `report.json` from each directory, or from its immediate
/// subdirectories when it holds none (a sweep output directory).
pub fn collect_reports(dirs: &[PathBuf]) -> Result<Vec<(PathBuf, RunReport)>> {
    let read = |dir: &Path| -> Result<RunReport> {
        let path = dir.join(REPORT_FILE);
        let text = std::fs::read_to_string(&path).map_err(io(&path))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { kind: "report", path, reason: e.to_string() })
    };
    let mut out = Vec::new();
    for dir in dirs {
        if dir.join(REPORT_FILE).is_file() {
            out.push((dir.clone(), read(dir)?));
            continue;
        }
        let mut subs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(REPORT_FILE).is_file())
            .collect();
        subs.sort();
        if subs.is_empty() {
            return Err(Error::Ingest { path: dir.clone(), reason: "no report.json here or one level below".into() });
        }
        for s in subs {
            let r = read(&s)?;
            out.push((s, r));
        }
    }
    Ok(out)
}

/// One line of the comparison table: runs that differ only in seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub noise_kind: NoiseKind,
    pub noise_rate: f64,
    pub group_size: usize,
    pub mixup_head_layers: usize,
    pub projection_layers: usize,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub auc_mean: Option<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn comparison_rows(reports: &[RunReport]) -> Vec<ComparisonRow> {
    let mut rows: Vec<(ComparisonRow, Vec<&RunReport>)> = Vec::new();
    for r in reports {
        let key = |row: &ComparisonRow| {
            row.method == r.method
                && row.noise_kind == r.noise_kind
                && row.noise_rate == r.noise_rate
                && row.group_size == r.group_size
                && row.mixup_head_layers == r.mixup_head_layers
                && row.projection_layers == r.projection_layers
        };
        match rows.iter_mut().find(|(row, _)| key(row)) {
            Some((_, members)) => members.push(r),
            None => rows.push((
                ComparisonRow {
                    method: r.method,
                    noise_kind: r.noise_kind,
                    noise_rate: r.noise_rate,
                    group_size: r.group_size,
                    mixup_head_layers: r.mixup_head_layers,
                    projection_layers: r.projection_layers,
                    runs: 0,
                    accuracy_mean: 0.0,
                    accuracy_std: 0.0,
                    macro_f1_mean: 0.0,
                    auc_mean: None,
                },
                vec![r],
            )),
        }
    }
    rows.into_iter()
        .map(|(mut row, members)| {
            let acc: Vec<f64> = members.iter().map(|r| r.evaluation.accuracy_last3_avg).collect();
            let f1: Vec<f64> = members.iter().map(|r| r.evaluation.metrics.macro_f1).collect();
            let auc: Option<Vec<f64>> = members.iter().map(|r| r.evaluation.metrics.auc).collect();
            (row.accuracy_mean, row.accuracy_std) = mean_std(&acc);
            row.macro_f1_mean = mean_std(&f1).0;
            row.auc_mean = auc.map(|a| mean_std(&a).0);
            row.runs = members.len();
            row
        })
        .collect()
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("method            noise               rate   M  heads proj runs  acc(last3)       macroF1  AUC\n");
    for r in rows {
        let auc = r.auc_mean.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        let _ = writeln!(
            s,
            "{:<17} {:<19} {:<6} {:<2} {:<5} {:<4} {:<5} {:>6.2} ± {:<6.2} {:>7.2}  {}",
            r.method.to_string(),
            r.noise_kind.to_string(),
            r.noise_rate,
            r.group_size,
            r.mixup_head_layers,
            r.projection_layers,
            r.runs,
            r.accuracy_mean,
            r.accuracy_std,
            r.macro_f1_mean,
            auc
        );
    }
    s
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from(
        "method,noise_kind,noise_rate,group_size,mixup_head_layers,projection_layers,runs,accuracy_mean,accuracy_std,macro_f1_mean,auc_mean\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.noise_kind,
            r.noise_rate,
            r.group_size,
            r.mixup_head_layers,
            r.projection_layers,
            r.runs,
            r.accuracy_mean,
            r.accuracy_std,
            r.macro_f1_mean,
            r.auc_mean.map_or_else(String::new, |a| a.to_string())
        );
    }
    s
}
