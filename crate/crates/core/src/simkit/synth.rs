//! Phone-frame IMU and GNSS synthesis from a ground-truth profile.
//!
//! The accelerometer model is inverted: given the vehicle's linear
//! acceleration `a_v = [v * yaw_rate, dv/dt, 0]` on a flat road and the
//! phone-to-vehicle rotation `R`, the phone measures
//! `Rᵀ (a_v + g) + bias(t) + white + vibration`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::profile::{SpeedProfile, DT, SAMPLES_PER_SECOND};
use crate::geom::{euler_to_matrix, gravity_ref, rotate, EulerAngles, Vec3};
use crate::{Error, Result};

/// Sensor disturbance parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Initial accelerometer bias, m/s², phone frame.
    pub accel_bias: Vec3,
    /// Gyroscope bias, rad/s, phone frame.
    pub gyro_bias: Vec3,
    pub accel_white_sigma: f64,
    pub gyro_white_sigma: f64,
    /// Accelerometer bias random walk, m/s² per √s.
    pub bias_walk_sigma: f64,
    /// Amplitude of the vehicle-vertical vibration sinusoid, m/s².
    pub vibration_amp: f64,
    pub vibration_hz: f64,
}

impl NoiseConfig {
    pub const ZERO: NoiseConfig = NoiseConfig {
        accel_bias: Vec3::ZERO,
        gyro_bias: Vec3::ZERO,
        accel_white_sigma: 0.0,
        gyro_white_sigma: 0.0,
        bias_walk_sigma: 0.0,
        vibration_amp: 0.0,
        vibration_hz: 0.0,
    };

    /// Default white-noise, walk and vibration levels with zero bias. Bias is
    /// drawn per trajectory by [`super::NoisePolicy::Default`].
    pub fn default_levels() -> Self {
        NoiseConfig {
            accel_bias: Vec3::ZERO,
            gyro_bias: Vec3::ZERO,
            accel_white_sigma: 0.05,
            gyro_white_sigma: 0.002,
            bias_walk_sigma: 0.002,
            vibration_amp: 0.2,
            vibration_hz: 13.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sig = [
            self.accel_white_sigma,
            self.gyro_white_sigma,
            self.bias_walk_sigma,
            self.vibration_amp,
            self.vibration_hz,
        ];
        if sig.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("noise sigmas, amplitude and frequency must be finite and >= 0"));
        }
        if !(self.accel_bias.is_finite() && self.gyro_bias.is_finite()) {
            return Err(Error::invalid("noise biases must be finite"));
        }
        Ok(())
    }
}

/// Phone-frame IMU samples at 50 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuStream {
    pub t: Vec<f64>,
    pub accel: Vec<Vec3>,
    pub gyro: Vec<Vec3>,
}

impl ImuStream {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Whole seconds covered.
    pub fn seconds(&self) -> usize {
        self.len() / SAMPLES_PER_SECOND
    }

    /// Sub-stream of whole seconds `[start, start + len)`.
    pub fn slice_seconds(&self, start: usize, len: usize) -> ImuStream {
        let a = start * SAMPLES_PER_SECOND;
        let b = ((start + len) * SAMPLES_PER_SECOND).min(self.len());
        ImuStream {
            t: self.t[a..b].to_vec(),
            accel: self.accel[a..b].to_vec(),
            gyro: self.gyro[a..b].to_vec(),
        }
    }

    /// Checks the 50 Hz timing and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        if self.accel.len() != self.t.len() || self.gyro.len() != self.t.len() {
            return Err(Error::invalid("IMU stream columns have different lengths"));
        }
        for w in self.t.windows(2) {
            if ((w[1] - w[0]) - DT).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "IMU timestamps {} -> {} are not 50 Hz",
                    w[0], w[1]
                )));
            }
        }
        if !(self.accel.iter().all(|v| v.is_finite()) && self.gyro.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("IMU stream contains non-finite samples"));
        }
        Ok(())
    }
}

/// Per-second GNSS speed ticks at `t = 1, 2, ..`.
#[derive(Debug, Clone, PartialEq)]
pub struct GnssStream {
    pub t: Vec<f64>,
    pub speed: Vec<f64>,
    pub delay_s: u32,
    pub sigma: f64,
}

impl GnssStream {
    /// Speed reported at whole second `k >= 1`.
    pub fn at(&self, k: usize) -> f64 {
        self.speed[k - 1]
    }
}

/// Phone mounting over time: an initial pose and an optional single step change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSchedule {
    pub initial: EulerAngles,
    /// `(time_s, new_pose)`; the new pose applies from `time_s` onward.
    pub change: Option<(f64, EulerAngles)>,
}

impl PoseSchedule {
    pub fn fixed(pose: EulerAngles) -> Self {
        PoseSchedule {
            initial: pose,
            change: None,
        }
    }

    pub fn at(&self, t: f64) -> EulerAngles {
        match self.change {
            Some((tc, p)) if t >= tc => p,
            _ => self.initial,
        }
    }
}

pub fn synth_imu(profile: &SpeedProfile, pose: EulerAngles, noise: &NoiseConfig, seed: u64) -> Result<ImuStream> {
    synth_imu_scheduled(profile, &PoseSchedule::fixed(pose), noise, seed)
}

/// Synthesizes phone-frame accelerometer and gyroscope samples.
pub fn synth_imu_scheduled(
    profile: &SpeedProfile,
    poses: &PoseSchedule,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<ImuStream> {
    noise.validate()?;
    let n = profile.n_samples();
    if profile.fwd_speed.len() != n + 1 || profile.yaw_rate.len() != n + 1 {
        return Err(Error::invalid("speed profile length does not match its duration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = 2.0 * PI * rng.random::<f64>();
    let g = gravity_ref();

    let initial_r = euler_to_matrix(poses.initial)?.transpose();
    let changed_r = match poses.change {
        Some((_, p)) => Some(euler_to_matrix(p)?.transpose()),
        None => None,
    };
    let mut bias = noise.accel_bias;
    let walk = noise.bias_walk_sigma * DT.sqrt();

    let mut out = ImuStream {
        t: Vec::with_capacity(n),
        accel: Vec::with_capacity(n),
        gyro: Vec::with_capacity(n),
    };
    for i in 0..n {
        let t = i as f64 * DT;
        // phone <- vehicle
        let rt = match (poses.change, changed_r) {
            (Some((tc, _)), Some(r)) if t >= tc => r,
            _ => initial_r,
        };
        let v = profile.fwd_speed[i];
        let w = profile.yaw_rate[i];
        let a_vehicle = Vec3::new(v * w, profile.accel(i), 0.0);

        let vib = noise.vibration_amp * (2.0 * PI * noise.vibration_hz * t + phase).sin();
        let white_a = Vec3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)).scale(noise.accel_white_sigma);
        let white_g = Vec3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)).scale(noise.gyro_white_sigma);
        let step = Vec3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)).scale(walk);

        let accel = rotate(&rt, a_vehicle + g + Vec3::new(0.0, 0.0, vib)) + bias + white_a;
        let gyro = rotate(&rt, Vec3::new(0.0, 0.0, w)) + noise.gyro_bias + white_g;
        bias = bias + step;

        out.t.push(t);
        out.accel.push(accel);
        out.gyro.push(gyro);
    }
    Ok(out)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Per-second GNSS speed: displacement over the preceding second plus
/// Gaussian noise, clamped at zero. With a 1 s delay the tick at `t` carries
/// the value computed for `t - 1` (and the first tick reports 0).
pub fn synth_gnss(profile: &SpeedProfile, delay_s: u32, sigma: f64, seed: u64) -> Result<GnssStream> {
    if delay_s > 1 {
        return Err(Error::invalid(format!("GNSS delay {delay_s} s not in {{0, 1}}")));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!("GNSS sigma {sigma} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let secs = profile.duration_s;
    let raw: Vec<f64> = (1..=secs)
        .map(|k| {
            let a = (k - 1) * SAMPLES_PER_SECOND;
            // trapezoid is exact for the piecewise-linear profile
            let disp: f64 = (a..a + SAMPLES_PER_SECOND)
                .map(|i| 0.5 * (profile.fwd_speed[i] + profile.fwd_speed[i + 1]) * profile.dt)
                .sum();
            (disp + sigma * gauss(&mut rng)).max(0.0)
        })
        .collect();
    let speed = match delay_s {
        0 => raw,
        _ => std::iter::once(0.0).chain(raw[..secs - 1].iter().copied()).collect(),
    };
    Ok(GnssStream {
        t: (1..=secs).map(|k| k as f64).collect(),
        speed,
        delay_s,
        sigma,
    })
}
