//! Experiment configs, single runs and (p, m) sweeps, and their on-disk
//! outputs.
//!
//! Layout under `<output_dir>/<run_name>/`:
//!
//! ```text
//! <seed>/metrics.csv          single run
//! <seed>/summary.json
//! <seed>/teacher_final.json
//! p<p>_m<m>/<seed>/...        sweep cell runs
//! sweep.csv                   sweep aggregate
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{smoothing_report, SmoothingReport};
use crate::error::{Error, Result};
use crate::param_store::{write_atomic, Granularity};
use crate::smoothing::{Method, SmoothingConfig};
use crate::trainers::{
    run_training, AugmentPolicy, DatasetConfig, MetricsLog, PseudoLabelSource, Task,
    TrainRunConfig,
};

/// Environment variable that replaces the config's seed list with one seed.
pub const SEED_ENV: &str = "SMOOTHKIT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    pub p: Vec<f64>,
    pub m: Vec<f64>,
}

/// A fully validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainRunConfig,
    pub output_dir: PathBuf,
    pub run_name: String,
    pub sweep: Option<SweepAxes>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSmoothing {
    method: Option<Method>,
    p: Option<f64>,
    m: Option<f64>,
    granularity: Option<Granularity>,
    include_buffers: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    n: Option<usize>,
    noise: Option<f64>,
    labeled_per_class: Option<usize>,
}

/// On-disk config: everything but `task` is optional.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    task: Task,
    seed: Option<u64>,
    seeds: Option<Vec<u64>>,
    run_name: Option<String>,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    smoothing: RawSmoothing,
    epochs: Option<usize>,
    batch_labeled: Option<usize>,
    ratio: Option<usize>,
    confidence_threshold: Option<f64>,
    unlabeled_weight: Option<f64>,
    pseudo_labels_from: Option<PseudoLabelSource>,
    base_lr: Option<f64>,
    sgd_momentum: Option<f64>,
    weight_decay: Option<f64>,
    warmup_epochs: Option<usize>,
    warmup_factor: Option<f64>,
    probe_size: Option<usize>,
    hidden: Option<Vec<usize>>,
    embedding_dim: Option<usize>,
    #[serde(default)]
    dataset: RawDataset,
    weak: Option<AugmentPolicy>,
    strong: Option<AugmentPolicy>,
    sweep: Option<SweepAxes>,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub p: Option<f64>,
    pub m: Option<f64>,
    pub method: Option<Method>,
    pub granularity: Option<Granularity>,
    pub output_dir: Option<PathBuf>,
    pub run_name: Option<String>,
}

impl RawConfig {
    fn resolve(self) -> ExperimentConfig {
        let mut t = TrainRunConfig::default_for(self.task);
        let s = self.smoothing;
        t.smoothing = SmoothingConfig {
            method: s.method.unwrap_or(t.smoothing.method),
            p: s.p.unwrap_or(t.smoothing.p),
            m: s.m.unwrap_or(t.smoothing.m),
            granularity: s.granularity.unwrap_or(t.smoothing.granularity),
            seed: 0,
            include_buffers: s.include_buffers.unwrap_or(t.smoothing.include_buffers),
        };
        macro_rules! take {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { t.$field = v; } )* };
        }
        take!(
            epochs,
            batch_labeled,
            ratio,
            confidence_threshold,
            unlabeled_weight,
            pseudo_labels_from,
            base_lr,
            sgd_momentum,
            weight_decay,
            warmup_epochs,
            warmup_factor,
            probe_size,
            hidden,
            embedding_dim,
            weak,
            strong
        );
        t.dataset = DatasetConfig {
            n: self.dataset.n.unwrap_or(t.dataset.n),
            noise: self.dataset.noise.unwrap_or(t.dataset.noise),
            labeled_per_class: self.dataset.labeled_per_class.unwrap_or(t.dataset.labeled_per_class),
        };
        let seed = self.seed.unwrap_or(0);
        t.seed = seed;
        ExperimentConfig {
            run_name: self.run_name.unwrap_or_else(|| t.task.as_str().to_string()),
            output_dir: self.output_dir.unwrap_or_else(|| PathBuf::from("runs")),
            seeds: self.seeds.unwrap_or_else(|| vec![seed]),
            sweep: self.sweep,
            train: t,
        }
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &Overrides, env_seed: Option<u64>) {
    if let Some(seed) = o.seed.or(env_seed) {
        cfg.seeds = vec![seed];
        cfg.train.seed = seed;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(p) = o.p {
        cfg.train.smoothing.p = p;
    }
    if let Some(m) = o.m {
        cfg.train.smoothing.m = m;
    }
    if let Some(method) = o.method {
        cfg.train.smoothing.method = method;
    }
    if let Some(g) = o.granularity {
        cfg.train.smoothing.granularity = g;
    }
    if let Some(dir) = &o.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(name) = &o.run_name {
        cfg.run_name = name.clone();
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let safe = !self.run_name.is_empty()
            && self.run_name != "."
            && self.run_name != ".."
            && self
                .run_name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
        if !safe {
            return Err(Error::config(
                "run_name",
                format!("`{}` is not a safe directory name", self.run_name),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        if let Some(sweep) = &self.sweep {
            for (field, values) in [("sweep.p", &sweep.p), ("sweep.m", &sweep.m)] {
                if values.is_empty() {
                    return Err(Error::config(field, "must not be empty"));
                }
                if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::config(field, format!("{bad} is outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    /// Training config for one seed.
    pub fn for_seed(&self, seed: u64) -> TrainRunConfig {
        TrainRunConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_name)
    }
}

/// Parses and validates a JSON config. `env_seed` is the value of
/// [`SEED_ENV`], if set; explicit `overrides.seed` wins over it.
pub fn parse_config_str(
    text: &str,
    overrides: &Overrides,
    env_seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })?;
    let mut cfg = raw.resolve();
    apply_overrides(&mut cfg, overrides, env_seed);
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path, overrides: &Overrides, env_seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, overrides, env_seed)
}

/// Config built from flags alone: task defaults plus overrides.
pub fn config_from_flags(task: Task, overrides: &Overrides, env_seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = serde_json::json!({ "task": task }).to_string();
    parse_config_str(&text, overrides, env_seed)
}

/// Reads [`SEED_ENV`]; an unparsable value is a config error.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub status: String,
    pub seed: u64,
    pub task: Task,
    pub smoothing: SmoothingConfig,
    pub final_teacher_accuracy: Option<f64>,
    pub final_student_accuracy: Option<f64>,
    pub report: Option<SmoothingReport>,
    pub diverged_at_step: Option<u64>,
    pub error: Option<String>,
    pub config: TrainRunConfig,
}

/// Result of one seed's run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub dir: PathBuf,
    pub log: MetricsLog,
    pub final_teacher_accuracy: f64,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Trains one seed and writes its three output files into `dir`.
///
/// On divergence `summary.json` records the failing step before the error is
/// returned.
pub fn run_one(cfg: &TrainRunConfig, dir: &Path) -> Result<RunRecord> {
    ensure_dir(dir)?;
    let mut summary = RunSummary {
        status: "ok".into(),
        seed: cfg.seed,
        task: cfg.task,
        smoothing: cfg.smoothing.with_seed(cfg.seed),
        final_teacher_accuracy: None,
        final_student_accuracy: None,
        report: None,
        diverged_at_step: None,
        error: None,
        config: cfg.clone(),
    };
    let outcome = match run_training(cfg) {
        Ok(o) => o,
        Err(err) => {
            summary.status = "failed".into();
            if let Error::Divergence { step } = err {
                summary.status = "diverged".into();
                summary.diverged_at_step = Some(step);
            }
            summary.error = Some(err.to_string());
            write_json(&dir.join("summary.json"), &summary)?;
            return Err(err);
        }
    };
    write_atomic(&dir.join("metrics.csv"), &outcome.log.to_csv()?)?;
    outcome.teacher.save_snapshot(&dir.join("teacher_final.json"))?;
    summary.final_teacher_accuracy = outcome.log.final_teacher_accuracy();
    summary.final_student_accuracy = outcome.log.final_student_accuracy();
    summary.report = smoothing_report(&outcome.log, None).ok();
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(RunRecord {
        seed: cfg.seed,
        dir: dir.to_path_buf(),
        final_teacher_accuracy: summary.final_teacher_accuracy.unwrap_or(f64::NAN),
        log: outcome.log,
    })
}

/// Runs every seed of `cfg` in order, stopping at the first failure.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    cfg.seeds
        .iter()
        .map(|&seed| run_one(&cfg.for_seed(seed), &cfg.run_dir().join(seed.to_string())))
        .collect()
}

/// One aggregated `(p, m)` cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub p: f64,
    pub m: f64,
    pub runs: usize,
    pub mean_teacher_accuracy: f64,
    pub std_teacher_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<SweepCell>,
    /// Per-cell run records, aligned with `cells`, in seed order.
    pub records: Vec<Vec<RunRecord>>,
}

pub fn cell_dir_name(p: f64, m: f64) -> String {
    format!("p{p}_m{m}")
}

/// Runs the Cartesian product of sweep `p` x `m` x seeds with STS smoothing
/// on up to `jobs` worker threads and writes `sweep.csv`. Output does not
/// depend on `jobs`.
pub fn sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepOutcome> {
    cfg.validate()?;
    let axes = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("sweep", "config has no sweep axes"))?;
    let cells: Vec<(f64, f64)> = axes
        .p
        .iter()
        .flat_map(|&p| axes.m.iter().map(move |&m| (p, m)))
        .collect();
    let tasks: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    let results: Vec<Result<RunRecord>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(c, seed)| {
                let (p, m) = cells[c];
                let mut train = cfg.for_seed(seed);
                train.smoothing.method = Method::Sts;
                train.smoothing.p = p;
                train.smoothing.m = m;
                let dir = cfg.run_dir().join(cell_dir_name(p, m)).join(seed.to_string());
                run_one(&train, &dir)
            })
            .collect()
    });
    let mut records: Vec<Vec<RunRecord>> = vec![Vec::new(); cells.len()];
    for (&(c, _), r) in tasks.iter().zip(results) {
        records[c].push(r?);
    }
    let summary: Vec<SweepCell> = cells
        .iter()
        .zip(&records)
        .map(|(&(p, m), recs)| {
            let accs: Vec<f64> = recs.iter().map(|r| r.final_teacher_accuracy).collect();
            let (mean, std) = mean_std(&accs);
            SweepCell {
                p,
                m,
                runs: accs.len(),
                mean_teacher_accuracy: mean,
                std_teacher_accuracy: std,
            }
        })
        .collect();
    write_sweep_csv(&cfg.run_dir().join("sweep.csv"), &summary)?;
    Ok(SweepOutcome {
        cells: summary,
        records,
    })
}

/// Mean and sample standard deviation (zero for a single value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write_sweep_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for cell in cells {
        w.serialize(cell).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_metrics(dir: &Path) -> Result<MetricsLog> {
    let path = dir.join("metrics.csv");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    MetricsLog::from_csv(&bytes)
}

/// Smoothing report for the run in `dir`, optionally against `baseline`.
pub fn report(dir: &Path, baseline: Option<&Path>) -> Result<SmoothingReport> {
    let log = read_metrics(dir)?;
    let base = baseline.map(read_metrics).transpose()?;
    smoothing_report(&log, base.as_ref())
}
