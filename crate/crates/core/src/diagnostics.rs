//! Smoothing diagnostics: how much the teacher moves between adjacent
//! epochs, both in parameter space and in what it outputs on a fixed probe
//! set, plus a Monte Carlo estimate of the expected update.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::param_store::ParamStore;
use crate::smoothing::{smooth_step, SmoothingConfig, StepIndex};
use crate::tinynn::Matrix;
use crate::trainers::MetricsLog;

/// Teacher state captured at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub teacher_params: ParamStore,
    /// Teacher output on the run's fixed probe inputs, one row per probe point.
    pub probe_outputs: Matrix,
}

fn need_two(snapshots: &[EpochSnapshot]) -> Result<()> {
    if snapshots.len() < 2 {
        return Err(Error::config("snapshots", "need at least two snapshots"));
    }
    Ok(())
}

/// `(epoch_k, mse(params_k, params_{k-1}))` for each adjacent pair.
pub fn param_mse_series(snapshots: &[EpochSnapshot]) -> Result<Vec<(usize, f64)>> {
    need_two(snapshots)?;
    snapshots
        .windows(2)
        .map(|w| Ok((w[1].epoch, w[1].teacher_params.mse(&w[0].teacher_params)?)))
        .collect()
}

/// `(epoch_k, mean squared difference of probe outputs)` for each adjacent
/// pair.
pub fn signal_mse_series(snapshots: &[EpochSnapshot]) -> Result<Vec<(usize, f64)>> {
    need_two(snapshots)?;
    snapshots
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0].probe_outputs, &w[1].probe_outputs);
            if a.rows() != b.rows() || a.cols() != b.cols() {
                return Err(Error::Shape(format!(
                    "probe outputs {}x{} vs {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                )));
            }
            let n = a.data().len().max(1) as f64;
            let sum: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Ok((w[1].epoch, sum / n))
        })
        .collect()
}

/// Per-scalar mean and standard error of `trials` independent smoothing
/// outcomes.
#[derive(Debug, Clone)]
pub struct MonteCarloUpdate {
    pub mean: ParamStore,
    /// Sample standard deviation divided by `sqrt(trials)`; zero when
    /// `trials == 1`.
    pub std_error: ParamStore,
    pub trials: u64,
}

/// Applies `smooth_step` to `trials` fresh clones of `teacher` with draw
/// indices `0..trials` and summarizes the outcomes element-wise.
pub fn monte_carlo_update(
    teacher: &ParamStore,
    student: &ParamStore,
    cfg: &SmoothingConfig,
    trials: u64,
) -> Result<MonteCarloUpdate> {
    if trials == 0 {
        return Err(Error::config("trials", "must be at least 1"));
    }
    teacher.check_congruent(student)?;
    let mut sum = teacher.zeros_like();
    let mut sum_sq = teacher.zeros_like();
    for t in 0..trials {
        let mut outcome = teacher.clone();
        smooth_step(cfg, &mut outcome, student, StepIndex(t))?;
        for ((s, q), o) in sum
            .units_mut()
            .iter_mut()
            .zip(sum_sq.units_mut().iter_mut())
            .zip(outcome.units())
        {
            for ((s, q), &v) in s.data.iter_mut().zip(q.data.iter_mut()).zip(&o.data) {
                *s += v;
                *q += v * v;
            }
        }
    }
    let n = trials as f64;
    let mut mean = sum;
    let mut std_error = sum_sq;
    for (m, e) in mean.units_mut().iter_mut().zip(std_error.units_mut().iter_mut()) {
        for (mv, ev) in m.data.iter_mut().zip(e.data.iter_mut()) {
            *mv /= n;
            *ev = if trials > 1 {
                let var = ((*ev - n * *mv * *mv) / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            } else {
                0.0
            };
        }
    }
    Ok(MonteCarloUpdate {
        mean,
        std_error,
        trials,
    })
}

/// Element-wise mean of `trials` independent `smooth_step` outcomes.
pub fn monte_carlo_mean_update(
    teacher: &ParamStore,
    student: &ParamStore,
    cfg: &SmoothingConfig,
    trials: u64,
) -> Result<ParamStore> {
    monte_carlo_update(teacher, student, cfg, trials).map(|u| u.mean)
}

/// Mean of the values whose epoch lies in `[from, to]`.
pub fn mean_over_epochs(series: &[(usize, f64)], from: usize, to: usize) -> Option<f64> {
    let window: Vec<f64> = series
        .iter()
        .filter(|(e, _)| (from..=to).contains(e))
        .map(|&(_, v)| v)
        .collect();
    if window.is_empty() {
        None
    } else {
        Some(window.iter().sum::<f64>() / window.len() as f64)
    }
}

/// Least-squares slope of `ln(value)` against epoch over `[from, to]`.
/// Zero values are skipped. `None` with fewer than two usable points.
pub fn log_slope(series: &[(usize, f64)], from: usize, to: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|&&(e, v)| (from..=to).contains(&e) && v > 0.0)
        .map(|&(e, v)| (e as f64, v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothingReport {
    pub epochs: usize,
    pub mean_param_mse: f64,
    pub mean_signal_mse: f64,
    /// Baseline mean over this run's mean; above 1 means this run's teacher
    /// moves less than the baseline's.
    pub param_mse_ratio: Option<f64>,
    pub signal_mse_ratio: Option<f64>,
    pub param_log_slope: Option<f64>,
    pub signal_log_slope: Option<f64>,
}

fn ratio(baseline: f64, run: f64) -> f64 {
    if baseline == run {
        1.0
    } else {
        baseline / run
    }
}

/// Summarizes the adjacent-epoch MSE series of a run, optionally against a
/// paired baseline run.
pub fn smoothing_report(log: &MetricsLog, baseline: Option<&MetricsLog>) -> Result<SmoothingReport> {
    let param = log.param_mse_series();
    let signal = log.signal_mse_series();
    if param.is_empty() {
        return Err(Error::config("log", "no epoch-level diagnostics in log"));
    }
    let last = param.iter().map(|p| p.0).max().unwrap_or(0);
    let mean = |s: &[(usize, f64)]| mean_over_epochs(s, 0, usize::MAX).unwrap_or(0.0);
    let mean_param_mse = mean(&param);
    let mean_signal_mse = mean(&signal);
    let (param_mse_ratio, signal_mse_ratio) = match baseline {
        Some(b) => {
            let bp = b.param_mse_series();
            if bp.is_empty() {
                return Err(Error::config("baseline", "no epoch-level diagnostics in baseline log"));
            }
            (
                Some(ratio(mean(&bp), mean_param_mse)),
                Some(ratio(mean(&b.signal_mse_series()), mean_signal_mse)),
            )
        }
        None => (None, None),
    };
    Ok(SmoothingReport {
        epochs: last,
        mean_param_mse,
        mean_signal_mse,
        param_mse_ratio,
        signal_mse_ratio,
        param_log_slope: log_slope(&param, 0, usize::MAX),
        signal_log_slope: log_slope(&signal, 0, usize::MAX),
    })
}
