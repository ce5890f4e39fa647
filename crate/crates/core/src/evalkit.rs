//! Velocity and distance errors over GNSS-free horizons, with naive
//! baselines.
//!
//! A horizon window starting at second `w` is seeded with the true speed
//! at `w` and compared with the truth on the grid `w, w+1, .., w+H`.
//! Velocity errors are taken at every grid point; the distance error is
//! the difference of the trapezoid-rule integrals over the window.

use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::featkit::preintegrate;
use crate::geom::{euler_to_matrix, gravity_ref, EulerAngles};
use crate::models::{infer_autoregressive, DvseModel};
use crate::simkit::{atomic_write, ImuStream, TrajectoryRecord, SAMPLES_PER_SECOND};
use crate::{Error, Result};

pub const REPORT_VERSION: &str = "dvse-report/1";
pub const DEFAULT_HORIZONS: [usize; 2] = [30, 60];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub method: String,
    pub horizon: usize,
    pub vel_mae: f64,
    pub vel_p80: f64,
    pub dist_mae: f64,
    pub dist_p80: f64,
    pub n_windows: usize,
    /// Trajectories too short for this horizon.
    pub skipped: usize,
}

/// Errors of one horizon window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowErrors {
    pub velocity: Vec<f64>,
    pub distance: f64,
}

/// `pred` and `truth` hold speeds on the same 1 s grid, start point included.
pub fn window_errors(pred: &[f64], truth: &[f64]) -> Result<WindowErrors> {
    if pred.len() != truth.len() || pred.len() < 2 {
        return Err(Error::invalid(format!(
            "series lengths {} and {} differ or are shorter than 2",
            pred.len(),
            truth.len()
        )));
    }
    let velocity = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    Ok(WindowErrors {
        velocity,
        distance: (trapezoid(pred) - trapezoid(truth)).abs(),
    })
}

/// Integral of a 1 s-spaced series.
pub fn trapezoid(v: &[f64]) -> f64 {
    v.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum()
}

/// Nearest-rank percentile: the `ceil(q·n)`-th smallest value.
pub fn percentile_nearest_rank(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("percentile level must lie in (0, 1], got {q}")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    // guard against q·n landing a hair above an integer
    let rank = ((q * v.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(v[rank.min(v.len()) - 1])
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Aggregates window errors into a report row.
pub fn summarize(method: &str, horizon: usize, windows: &[WindowErrors], skipped: usize) -> Result<HorizonReport> {
    if windows.is_empty() {
        return Err(Error::invalid(format!("no {horizon} s windows to evaluate for {method}")));
    }
    let vel: Vec<f64> = windows.iter().flat_map(|w| w.velocity.iter().copied()).collect();
    let dist: Vec<f64> = windows.iter().map(|w| w.distance).collect();
    Ok(HorizonReport {
        method: method.to_string(),
        horizon,
        vel_mae: mean(&vel),
        vel_p80: percentile_nearest_rank(&vel, 0.8)?,
        dist_mae: mean(&dist),
        dist_p80: percentile_nearest_rank(&dist, 0.8)?,
        n_windows: windows.len(),
        skipped,
    })
}

/// Non-overlapping window starts (or every `stride_s` seconds) fitting in
/// `duration_s`.
pub fn horizon_starts(duration_s: usize, horizon: usize, stride_s: Option<usize>) -> Vec<usize> {
    if horizon == 0 || duration_s < horizon {
        return Vec::new();
    }
    (0..=duration_s - horizon).step_by(stride_s.unwrap_or(horizon).max(1)).collect()
}

/// Speed predictors under evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    Model(&'a DvseModel),
    RawIntegration { use_true_pose: bool },
    ConstantVelocity,
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Model(_) => "dvse",
            Method::RawIntegration { use_true_pose: true } => "raw_integration_true_pose",
            Method::RawIntegration { use_true_pose: false } => "raw_integration",
            Method::ConstantVelocity => "constant_velocity",
        }
    }

    /// Speeds at seconds `w..=w+h` (seed included) of a trajectory.
    pub fn predict(&self, rec: &TrajectoryRecord, w: usize, h: usize) -> Result<Vec<f64>> {
        let v0 = rec.truth_speed[w];
        let imu = rec.imu.slice_seconds(w, h);
        let tail = match self {
            Method::Model(m) => infer_autoregressive(m, &imu, v0)?,
            Method::RawIntegration { use_true_pose } => {
                let poses = use_true_pose.then(|| &rec.truth_pose[w..w + h]);
                raw_integration(&imu, poses, v0)?
            }
            Method::ConstantVelocity => vec![v0; h],
        };
        if tail.len() != h {
            return Err(Error::invalid(format!("predictor returned {} of {h} seconds", tail.len())));
        }
        let mut out = Vec::with_capacity(h + 1);
        out.push(v0);
        out.extend(tail);
        Ok(out)
    }
}

/// Runs one method over every horizon window of every trajectory.
pub fn evaluate_method(
    method: Method<'_>,
    trajectories: &[&TrajectoryRecord],
    horizons: &[usize],
    stride_s: Option<usize>,
) -> Result<Vec<HorizonReport>> {
    let mut reports = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let mut windows = Vec::new();
        let mut skipped = 0;
        for rec in trajectories {
            let starts = horizon_starts(rec.duration_s(), h, stride_s);
            if starts.is_empty() {
                warn!("{} is shorter than the {h} s horizon; skipped", rec.meta.id);
                skipped += 1;
                continue;
            }
            for w in starts {
                let pred = method.predict(rec, w, h)?;
                windows.push(window_errors(&pred, &rec.truth_speed[w..=w + h])?);
            }
        }
        reports.push(summarize(method.name(), h, &windows, skipped)?);
    }
    Ok(reports)
}

/// Evaluates a trained model at the given horizons.
pub fn evaluate(model: &DvseModel, trajectories: &[&TrajectoryRecord], horizons: &[usize]) -> Result<Vec<HorizonReport>> {
    evaluate_method(Method::Model(model), trajectories, horizons, None)
}

/// Integrates the forward component of the accelerometer, second by
/// second, from `v0`. `poses` (one per second) rotates each second's
/// pre-integration into the vehicle frame; `None` uses the identity.
pub fn raw_integration(imu: &ImuStream, poses: Option<&[EulerAngles]>, v0: f64) -> Result<Vec<f64>> {
    let secs = imu.seconds();
    if let Some(p) = poses {
        if p.len() < secs {
            return Err(Error::invalid(format!("{} poses for {secs} seconds", p.len())));
        }
    }
    let mut v = v0;
    let mut out = Vec::with_capacity(secs);
    for k in 0..secs {
        let acc = &imu.accel[k * SAMPLES_PER_SECOND..(k + 1) * SAMPLES_PER_SECOND];
        let i = preintegrate(acc)?;
        let rotated = match poses {
            Some(p) => euler_to_matrix(p[k])? * i,
            None => i,
        };
        // gravity over one second
        let dv = rotated - gravity_ref();
        v += dv.y;
        out.push(v);
    }
    Ok(out)
}

/// Whole-trajectory integration baseline seeded with the true initial speed.
pub fn baseline_raw_integration(rec: &TrajectoryRecord, use_true_pose: bool) -> Result<Vec<f64>> {
    let poses = use_true_pose.then_some(&rec.truth_pose[..]);
    let mut out = vec![rec.truth_speed[0]];
    out.extend(raw_integration(&rec.imu, poses, rec.truth_speed[0])?);
    Ok(out)
}

/// Holds the true initial speed for the whole trajectory.
pub fn baseline_constant_velocity(rec: &TrajectoryRecord) -> Vec<f64> {
    vec![rec.truth_speed[0]; rec.duration_s() + 1]
}

/// Whole-trajectory series for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySeries {
    pub id: String,
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
    pub baseline: Vec<f64>,
}

/// Model prediction over a whole trajectory against the constant-velocity
/// baseline.
pub fn trajectory_series(model: &DvseModel, rec: &TrajectoryRecord) -> Result<TrajectorySeries> {
    let v0 = rec.truth_speed[0];
    let mut pred = vec![v0];
    pred.extend(infer_autoregressive(model, &rec.imu, v0)?);
    let n = pred.len().min(rec.truth_speed.len());
    pred.truncate(n);
    Ok(TrajectorySeries {
        id: rec.meta.id.clone(),
        truth: rec.truth_speed[..n].to_vec(),
        pred,
        baseline: baseline_constant_velocity(rec)[..n].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub version: String,
    pub reports: Vec<HorizonReport>,
}

/// Writes `report.json`, `report.csv` and `series/<id>/series.csv` under `dir`.
pub fn report_emit(reports: &[HorizonReport], series: &[TrajectorySeries], dir: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::invalid("nothing to report"));
    }
    let file = ReportFile {
        version: REPORT_VERSION.to_string(),
        reports: reports.to_vec(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string()))?;
    let csv = reports_csv(reports)?;
    let series_csv: Vec<(String, String)> = series.iter().map(|s| Ok((s.id.clone(), series_to_csv(s)?))).collect::<Result<_>>()?;

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    atomic_write(&dir.join("report.json"), json.as_bytes())?;
    atomic_write(&dir.join("report.csv"), csv.as_bytes())?;
    for (id, body) in series_csv {
        let d = dir.join("series").join(id);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        atomic_write(&d.join("series.csv"), body.as_bytes())?;
    }
    Ok(())
}

fn csv_error(e: impl std::fmt::Display) -> Error {
    Error::Parse(e.to_string())
}

pub fn reports_csv(reports: &[HorizonReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "horizon", "vel_mae", "vel_p80", "dist_mae", "dist_p80"]).map_err(csv_error)?;
    for r in reports {
        w.write_record([
            r.method.clone(),
            r.horizon.to_string(),
            r.vel_mae.to_string(),
            r.vel_p80.to_string(),
            r.dist_mae.to_string(),
            r.dist_p80.to_string(),
        ])
        .map_err(csv_error)?;
    }
    String::from_utf8(w.into_inner().map_err(csv_error)?).map_err(csv_error)
}

fn series_to_csv(s: &TrajectorySeries) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "truth", "pred", "baseline"]).map_err(csv_error)?;
    for k in 0..s.pred.len() {
        w.write_record([k.to_string(), s.truth[k].to_string(), s.pred[k].to_string(), s.baseline[k].to_string()])
            .map_err(csv_error)?;
    }
    String::from_utf8(w.into_inner().map_err(csv_error)?).map_err(csv_error)
}

pub fn read_report(path: &Path) -> Result<ReportFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ReportFile = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if file.version != REPORT_VERSION {
        return Err(Error::Parse(format!(
            "{}: report version `{}`, expected `{REPORT_VERSION}`",
            path.display(),
            file.version
        )));
    }
    Ok(file)
}
