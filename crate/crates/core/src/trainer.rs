//! Splits, rotation augmentation, the delay-tolerant loss, and the training loop.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::featkit::{extract_features, preintegrate, FeatureFrame, Normalizer, FRAME_FEATURES};
use crate::geom::{random_rotation, rotate, AngleRanges, Rotation3, Vec3};
use crate::models::{dvse_forward, DvseModel, DvseNets, ModelConfig, WindowBatch, WindowMeta, WINDOW_S};
use crate::nncore::{cosine_lr, ema_decay, ema_update, Adam, EarlyStopping, Graph, ParameterStore, Tensor, Var};
use crate::simkit::{derive_seed, TrajectoryRecord, SAMPLES_PER_SECOND};
use crate::{Error, Result};

/// Training windows start this many samples after a whole second, so each
/// step's pre-integration spans the interval between two GNSS speed ticks.
pub const PHASE_OFFSET_SAMPLES: usize = SAMPLES_PER_SECOND / 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Traditional,
    Trajectory,
}

/// A training window: trajectory index and start second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowRef {
    pub trajectory: usize,
    pub start_s: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub seed: u64,
    pub train: Vec<WindowRef>,
    pub val: Vec<WindowRef>,
    pub test: Vec<WindowRef>,
    /// Whole trajectories held out (trajectory mode only).
    pub test_trajectories: Vec<usize>,
}

/// Start seconds of the training windows of a trajectory lasting
/// `duration_s`. A window at `s0` needs GNSS ticks up to `s0 + T + 1`.
pub fn window_starts(duration_s: usize, stride_s: usize) -> Vec<usize> {
    if duration_s < WINDOW_S + 1 || stride_s == 0 {
        return Vec::new();
    }
    (0..=duration_s - WINDOW_S - 1).step_by(stride_s).collect()
}

fn catalog(durations: &[usize], stride_s: usize) -> Vec<WindowRef> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(trajectory, &d)| window_starts(d, stride_s).into_iter().map(move |start_s| WindowRef { trajectory, start_s }))
        .collect()
}

/// Deterministic train/val/test assignment.
///
/// Traditional mode pools every window and cuts 70/10/20. Trajectory mode
/// holds out 20% of the trajectories for test and cuts the remaining
/// windows 80/20 into train and validation.
pub fn split(durations: &[usize], mode: SplitMode, stride_s: usize, seed: u64) -> Result<SplitPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5b17));
    match mode {
        SplitMode::Traditional => {
            let mut all = catalog(durations, stride_s);
            all.shuffle(&mut rng);
            let n = all.len();
            let n_train = n * 7 / 10;
            let n_val = n / 10;
            let test = all.split_off(n_train + n_val);
            let val = all.split_off(n_train);
            Ok(SplitPlan {
                mode,
                seed,
                train: all,
                val,
                test,
                test_trajectories: Vec::new(),
            })
        }
        SplitMode::Trajectory => {
            let n = durations.len();
            if n < 5 {
                return Err(Error::invalid(format!(
                    "trajectory split needs at least 5 trajectories, got {n}"
                )));
            }
            let mut ids: Vec<usize> = (0..n).collect();
            ids.shuffle(&mut rng);
            let n_test = (n as f64 * 0.2).round() as usize;
            let mut test_trajectories = ids[..n_test].to_vec();
            test_trajectories.sort_unstable();
            let all = catalog(durations, stride_s);
            let (test, mut rest): (Vec<_>, Vec<_>) = all.into_iter().partition(|w| test_trajectories.contains(&w.trajectory));
            rest.shuffle(&mut rng);
            let n_train = rest.len() * 8 / 10;
            let val = rest.split_off(n_train);
            Ok(SplitPlan {
                mode,
                seed,
                train: rest,
                val,
                test,
                test_trajectories,
            })
        }
    }
}

/// Raw samples and supervision of one training window.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindow {
    pub accel: Vec<Vec3>,
    pub gyro: Vec<Vec3>,
    pub v_ref: f64,
    pub dv_target: Vec<f64>,
    pub meta: WindowMeta,
}

/// Cuts the window at `start_s` out of a trajectory.
///
/// Step `t` covers IMU time `[s0 + t + 0.5, s0 + t + 1.5)`, its target is
/// `gnss(s0 + t + 2) - gnss(s0 + t + 1)`, and the reference speed is
/// `gnss(s0 + 1)`.
pub fn cut_window(rec: &TrajectoryRecord, w: WindowRef) -> Result<RawWindow> {
    let s0 = w.start_s;
    let a = s0 * SAMPLES_PER_SECOND + PHASE_OFFSET_SAMPLES;
    let b = a + WINDOW_S * SAMPLES_PER_SECOND;
    if b > rec.imu.len() || s0 + WINDOW_S + 1 > rec.gnss.speed.len() {
        return Err(Error::invalid(format!(
            "trajectory {} is too short for a window at {s0} s",
            rec.meta.id
        )));
    }
    let v_ref = rec.gnss.at(s0 + 1);
    let dv_target: Vec<f64> = (0..WINDOW_S).map(|t| rec.gnss.at(s0 + t + 2) - rec.gnss.at(s0 + t + 1)).collect();
    // targets must telescope back to the GNSS track
    let mut v = v_ref;
    for (t, dv) in dv_target.iter().enumerate() {
        v += dv;
        let want = rec.gnss.at(s0 + t + 2);
        if (v - want).abs() > 1e-9 * (1.0 + want.abs()) {
            return Err(Error::invalid(format!(
                "inconsistent speed targets in {} at {}",
                rec.meta.id,
                s0 + t + 2
            )));
        }
    }
    Ok(RawWindow {
        accel: rec.imu.accel[a..b].to_vec(),
        gyro: rec.imu.gyro[a..b].to_vec(),
        v_ref,
        dv_target,
        meta: WindowMeta {
            trajectory: w.trajectory,
            start_s: s0 as f64 + 0.5,
        },
    })
}

pub fn cut_windows(records: &[TrajectoryRecord], refs: &[WindowRef]) -> Result<Vec<RawWindow>> {
    refs.iter().map(|w| cut_window(&records[w.trajectory], *w)).collect()
}

/// Rotates every accelerometer and gyroscope sample of every window by
/// one rotation drawn for the whole batch.
pub fn augment_batch<R: rand::Rng + ?Sized>(windows: &[RawWindow], ranges: &AngleRanges, rng: &mut R) -> Result<(Vec<RawWindow>, Rotation3)> {
    let (_, r) = random_rotation(rng, ranges)?;
    Ok((rotate_windows(windows, &r), r))
}

pub fn rotate_windows(windows: &[RawWindow], r: &Rotation3) -> Vec<RawWindow> {
    windows
        .iter()
        .map(|w| RawWindow {
            accel: w.accel.iter().map(|a| rotate(r, *a)).collect(),
            gyro: w.gyro.iter().map(|a| rotate(r, *a)).collect(),
            ..w.clone()
        })
        .collect()
}

/// Feature frames and pre-integrations of each second of a window.
pub fn window_frames(w: &RawWindow) -> Result<(Vec<FeatureFrame>, Vec<Vec3>)> {
    let mut frames = Vec::with_capacity(WINDOW_S);
    let mut preints = Vec::with_capacity(WINDOW_S);
    for (t, (acc, gyr)) in w
        .accel
        .chunks_exact(SAMPLES_PER_SECOND)
        .zip(w.gyro.chunks_exact(SAMPLES_PER_SECOND))
        .enumerate()
    {
        frames.push(FeatureFrame {
            acc_feats: extract_features(acc)?,
            gyro_feats: extract_features(gyr)?,
            t,
        });
        preints.push(preintegrate(acc)?);
    }
    Ok((frames, preints))
}

/// Builds model inputs for a set of windows.
pub fn assemble_batch(windows: &[RawWindow], normalizer: &Normalizer) -> Result<WindowBatch> {
    let n = windows.len();
    let steps = windows.first().map_or(0, |w| w.dv_target.len());
    let mut feats = Vec::with_capacity(n * steps * FRAME_FEATURES);
    let mut preint = Vec::with_capacity(n * steps * 3);
    let mut dv = Vec::with_capacity(n * steps);
    for w in windows {
        let (frames, pre) = window_frames(w)?;
        if frames.len() != steps || w.dv_target.len() != steps {
            return Err(Error::invalid("windows in a batch differ in length"));
        }
        for f in &frames {
            feats.extend(normalizer.apply(f));
        }
        preint.extend(pre.iter().flat_map(|p| p.to_array()));
        dv.extend_from_slice(&w.dv_target);
    }
    let batch = WindowBatch {
        features: Tensor::new(vec![n, steps, FRAME_FEATURES], feats)?,
        preint: Tensor::new(vec![n, steps, 3], preint)?,
        v_ref: windows.iter().map(|w| w.v_ref).collect(),
        dv_target: Tensor::new(vec![n, steps], dv)?,
        meta: windows.iter().map(|w| w.meta).collect(),
    };
    batch.validate()?;
    Ok(batch)
}

/// Fits feature statistics on the un-augmented frames of `windows`.
pub fn fit_normalizer(windows: &[RawWindow]) -> Result<Normalizer> {
    let mut frames = Vec::with_capacity(windows.len() * WINDOW_S);
    for w in windows {
        frames.extend(window_frames(w)?.0);
    }
    Normalizer::fit(&frames)
}

/// `λ · SmoothL1(Δv̂, Δv) + (1 - λ) · SmoothL1(Σ Δv̂, Σ Δv)` with prefix
/// sums along time.
pub fn compute_loss(g: &mut Graph<'_>, dv_hat: Var, dv_target: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("loss weight must lie in [0, 1], got {lambda}")));
    }
    let l_dv = g.smooth_l1(dv_hat, dv_target)?;
    let cx = g.cumsum_last(dv_hat);
    let cy = g.cumsum_last(dv_target);
    let l_v = g.smooth_l1(cx, cy)?;
    let a = g.scale(l_dv, lambda);
    let b = g.scale(l_v, 1.0 - lambda);
    g.add(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Aligned,
    Shifted,
}

/// Minimum of the aligned loss on steps `2..T` and the loss pairing
/// predictions `1..T-1` with targets `2..T` (1-based).
///
/// Returns the chosen loss node (gradients flow through it alone) and the
/// branch. Ties go to the aligned branch.
pub fn loss_match(g: &mut Graph<'_>, dv_hat: Var, dv_target: Var, lambda: f64) -> Result<(Var, Branch)> {
    let s = g.shape(dv_hat).to_vec();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::invalid(format!("loss matching needs at least 2 steps, got shape {s:?}")));
    }
    if g.shape(dv_target) != &s[..] {
        return Err(Error::shape("loss_match", &s, g.shape(dv_target)));
    }
    let t = s[1];
    let y = g.slice_last(dv_target, 1, t - 1)?;
    let x_aligned = g.slice_last(dv_hat, 1, t - 1)?;
    let x_shifted = g.slice_last(dv_hat, 0, t - 1)?;
    let aligned = compute_loss(g, x_aligned, y, lambda)?;
    let shifted = compute_loss(g, x_shifted, y, lambda)?;
    if g.value(shifted).item() < g.value(aligned).item() {
        Ok((shifted, Branch::Shifted))
    } else {
        Ok((aligned, Branch::Aligned))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Schedule length in optimizer steps; defaults to the whole run.
    pub t_max: Option<u64>,
    pub eta_min: f64,
    pub ema_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub lambda: f64,
    pub augmentation: bool,
    pub augment_ranges: AngleRanges,
    pub loss_matching: bool,
    pub split: SplitMode,
    pub window_stride_s: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 1e-3,
            t_max: None,
            eta_min: 1e-5,
            ema_decay: 0.999,
            max_epochs: 60,
            patience: 10,
            min_delta: 1e-4,
            lambda: 0.7,
            augmentation: true,
            augment_ranges: AngleRanges::FULL,
            loss_matching: true,
            split: SplitMode::Trajectory,
            window_stride_s: WINDOW_S,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.window_stride_s == 0 {
            return Err(Error::invalid("batch_size, max_epochs and window_stride_s must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay)));
        }
        if !(self.lr > 0.0 && self.eta_min >= 0.0 && self.eta_min <= self.lr) {
            return Err(Error::invalid("need lr > 0 and 0 <= eta_min <= lr"));
        }
        self.augment_ranges.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub matched_branch_fraction: f64,
}

/// Appends one JSON line per epoch.
pub fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(m).map_err(|e| Error::Parse(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub branch: Branch,
}

/// Forward, loss and gradients for one batch.
pub fn batch_gradients(
    nets: &DvseNets,
    params: &ParameterStore,
    batch: &WindowBatch,
    lambda: f64,
    loss_matching: bool,
) -> Result<(StepOutcome, std::collections::BTreeMap<String, Vec<f64>>)> {
    let mut g = Graph::with_params(params);
    let out = dvse_forward(&mut g, nets, &batch.features, &batch.preint, &batch.v_ref, None)?;
    let target = g.constant(batch.dv_target.clone());
    let (loss, branch) = if loss_matching {
        loss_match(&mut g, out.dv_hat, target, lambda)?
    } else {
        (compute_loss(&mut g, out.dv_hat, target, lambda)?, Branch::Aligned)
    };
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::invalid("training loss became non-finite"));
    }
    g.backward(loss)?;
    let mut grads = g.param_grads();
    for name in params.names() {
        grads.entry(name.clone()).or_insert_with(|| vec![0.0; params.get(name).unwrap().numel()]);
    }
    Ok((StepOutcome { loss: value, branch }, grads))
}

/// Loss of `params` on a batch without gradients.
pub fn batch_loss(nets: &DvseNets, params: &ParameterStore, batch: &WindowBatch, lambda: f64, loss_matching: bool) -> Result<StepOutcome> {
    let mut g = Graph::inference(params);
    let out = dvse_forward(&mut g, nets, &batch.features, &batch.preint, &batch.v_ref, None)?;
    let target = g.constant(batch.dv_target.clone());
    let (loss, branch) = if loss_matching {
        loss_match(&mut g, out.dv_hat, target, lambda)?
    } else {
        (compute_loss(&mut g, out.dv_hat, target, lambda)?, Branch::Aligned)
    };
    Ok(StepOutcome {
        loss: g.value(loss).item(),
        branch,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Averaged weights from the best validation epoch.
    pub model: DvseModel,
    pub metrics: Vec<EpochMetrics>,
    pub plan: SplitPlan,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

fn batches<T>(items: &[T], size: usize) -> impl Iterator<Item = &[T]> {
    items.chunks(size)
}

/// Trains on the train partition of `records`, validating on the val
/// partition after every epoch with the averaged weights.
///
/// `on_epoch` sees each epoch's metrics as soon as they are known.
pub fn train(
    records: &[TrajectoryRecord],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let durations: Vec<usize> = records.iter().map(TrajectoryRecord::duration_s).collect();
    let plan = split(&durations, cfg.split, cfg.window_stride_s, cfg.seed)?;
    if plan.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let train_windows = cut_windows(records, &plan.train)?;
    let val_windows = cut_windows(records, &plan.val)?;
    let normalizer = fit_normalizer(&train_windows)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let (nets, mut params) = DvseNets::init(model_cfg, &mut init_rng)?;
    let mut shadow = params.clone();
    let mut adam = Adam::new();

    let val_batches: Vec<WindowBatch> = batches(&val_windows, cfg.batch_size)
        .map(|w| assemble_batch(w, &normalizer))
        .collect::<Result<_>>()?;

    let per_epoch = train_windows.len().div_ceil(cfg.batch_size) as u64;
    let t_max = cfg.t_max.unwrap_or(per_epoch * cfg.max_epochs as u64);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut best = shadow.clone();
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut step: u64 = 0;

    for epoch in 0..cfg.max_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut n_seen, mut shifted, mut n_batches) = (0.0, 0usize, 0usize, 0usize);
        let mut lr = cfg.lr;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let chosen: Vec<RawWindow> = idx.iter().map(|&i| train_windows[i].clone()).collect();
            let chosen = if cfg.augmentation {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, 2 + epoch as u64 * 1_000_003), b as u64));
                augment_batch(&chosen, &cfg.augment_ranges, &mut rng)?.0
            } else {
                chosen
            };
            let batch = assemble_batch(&chosen, &normalizer)?;
            let (outcome, grads) = batch_gradients(&nets, &params, &batch, cfg.lambda, cfg.loss_matching)?;
            lr = cosine_lr(step, t_max, cfg.lr, cfg.eta_min);
            adam.step(&mut params, &grads, lr)?;
            ema_update(&mut shadow, &params, ema_decay(cfg.ema_decay, step))?;
            step += 1;
            loss_sum += outcome.loss * batch.len() as f64;
            n_seen += batch.len();
            n_batches += 1;
            if outcome.branch == Branch::Shifted {
                shifted += 1;
            }
        }
        let val_loss = if val_batches.is_empty() {
            f64::NAN
        } else {
            let mut total = 0.0;
            let mut count = 0;
            for batch in &val_batches {
                total += batch_loss(&nets, &shadow, batch, cfg.lambda, cfg.loss_matching)?.loss * batch.len() as f64;
                count += batch.len();
            }
            total / count as f64
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / n_seen as f64,
            val_loss,
            lr,
            matched_branch_fraction: shifted as f64 / n_batches as f64,
        };
        info!(
            "epoch {} train {:.5} val {:.5} lr {:.2e} shifted {:.2}",
            m.epoch, m.train_loss, m.val_loss, m.lr, m.matched_branch_fraction
        );
        on_epoch(&m)?;
        metrics.push(m);
        // without validation data the latest average is kept
        let improved = if val_loss.is_nan() { true } else { stopper.observe(epoch + 1, val_loss) };
        if improved {
            best = shadow.clone();
        }
        if stopper.should_stop() {
            debug!("early stop after epoch {}", epoch + 1);
            break;
        }
    }
    let epochs_run = metrics.len();
    let (best_val_loss, best_epoch) = if stopper.best.is_finite() {
        (stopper.best, stopper.best_epoch)
    } else {
        (f64::NAN, epochs_run)
    };
    Ok(TrainOutcome {
        model: DvseModel::from_parts(model_cfg.clone(), best, normalizer)?,
        metrics,
        plan,
        best_val_loss,
        best_epoch,
        epochs_run,
    })
}
