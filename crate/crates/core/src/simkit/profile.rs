//! Ground-truth vehicle motion: piecewise maneuver sequences sampled at 50 Hz.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// IMU sample period, seconds.
pub const DT: f64 = 0.02;
/// IMU samples per second.
pub const SAMPLES_PER_SECOND: usize = 50;
/// Hard bound on longitudinal acceleration magnitude, m/s².
pub const MAX_ACCEL: f64 = 6.0;
/// Shortest profile the generator accepts, seconds.
pub const MIN_DURATION_S: usize = 20;

/// One scripted maneuver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    /// Standstill. Only meaningful at zero speed; at speed it behaves as cruise.
    Idle { duration_s: f64 },
    /// Constant acceleration (m/s²), capped at the configured top speed.
    Accelerate { accel: f64, duration_s: f64 },
    Cruise { duration_s: f64 },
    /// Constant deceleration magnitude (m/s²); stops at zero speed.
    Brake { decel: f64, duration_s: f64 },
    /// Constant-speed turn at the given yaw rate (rad/s).
    Turn { yaw_rate: f64, duration_s: f64 },
}

impl Segment {
    fn duration(&self) -> f64 {
        match *self {
            Segment::Idle { duration_s }
            | Segment::Accelerate { duration_s, .. }
            | Segment::Cruise { duration_s }
            | Segment::Brake { duration_s, .. }
            | Segment::Turn { duration_s, .. } => duration_s,
        }
    }
}

/// Maneuver generator settings. When `script` is set the listed segments are
/// played in order and the remainder of the profile holds the final speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManeuverConfig {
    pub script: Option<Vec<Segment>>,
    pub max_speed: f64,
    pub accel_range: [f64; 2],
    pub brake_range: [f64; 2],
    pub idle_range_s: [f64; 2],
    pub segment_range_s: [f64; 2],
    pub turn_rate_range: [f64; 2],
    pub max_lateral_accel: f64,
    /// Probability that a brake segment runs to a full stop.
    pub stop_probability: f64,
}

impl Default for ManeuverConfig {
    fn default() -> Self {
        ManeuverConfig {
            script: None,
            max_speed: 30.0,
            accel_range: [0.6, 2.0],
            brake_range: [1.5, 3.5],
            idle_range_s: [2.0, 8.0],
            segment_range_s: [3.0, 12.0],
            turn_rate_range: [0.05, 0.3],
            max_lateral_accel: 3.0,
            stop_probability: 0.3,
        }
    }
}

impl ManeuverConfig {
    pub fn scripted(script: Vec<Segment>) -> Self {
        ManeuverConfig {
            script: Some(script),
            ..ManeuverConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let ok_range = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= 0.0;
        if !(ok_range(self.accel_range)
            && ok_range(self.brake_range)
            && ok_range(self.idle_range_s)
            && ok_range(self.segment_range_s)
            && ok_range(self.turn_rate_range))
        {
            return Err(Error::invalid("maneuver ranges must be finite, non-negative and ordered"));
        }
        if self.accel_range[1] > MAX_ACCEL || self.brake_range[1] > MAX_ACCEL {
            return Err(Error::invalid(format!(
                "maneuver accelerations must stay within {MAX_ACCEL} m/s^2"
            )));
        }
        if self.segment_range_s[0] <= 0.0 || self.max_speed <= 0.0 {
            return Err(Error::invalid("segment durations and max_speed must be positive"));
        }
        if let Some(script) = &self.script {
            for s in script {
                let bad_rate = match *s {
                    Segment::Accelerate { accel, .. } => !(0.0..=MAX_ACCEL).contains(&accel),
                    Segment::Brake { decel, .. } => !(0.0..=MAX_ACCEL).contains(&decel),
                    Segment::Turn { yaw_rate, .. } => !yaw_rate.is_finite(),
                    _ => false,
                };
                if bad_rate || !(s.duration() >= 0.0) {
                    return Err(Error::invalid(format!("invalid scripted segment {s:?}")));
                }
            }
        }
        Ok(())
    }
}

/// Forward speed and yaw rate at 50 Hz over `duration_s` whole seconds.
///
/// Both series hold `duration_s * 50 + 1` points so that the speed at the
/// end of the last second is available; the acceleration applied during
/// sample `i` is `(fwd_speed[i + 1] - fwd_speed[i]) / DT`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedProfile {
    pub dt: f64,
    pub fwd_speed: Vec<f64>,
    pub yaw_rate: Vec<f64>,
    pub duration_s: usize,
}

impl SpeedProfile {
    pub fn n_samples(&self) -> usize {
        self.duration_s * SAMPLES_PER_SECOND
    }

    /// Longitudinal acceleration during sample `i`.
    pub fn accel(&self, i: usize) -> f64 {
        (self.fwd_speed[i + 1] - self.fwd_speed[i]) / self.dt
    }

    /// Speed at whole second `k` (`0..=duration_s`).
    pub fn speed_at_second(&self, k: usize) -> f64 {
        self.fwd_speed[k * SAMPLES_PER_SECOND]
    }

    /// Constant-speed profile, used by tests and examples.
    pub fn constant(speed: f64, duration_s: usize) -> Self {
        let n = duration_s * SAMPLES_PER_SECOND + 1;
        SpeedProfile {
            dt: DT,
            fwd_speed: vec![speed; n],
            yaw_rate: vec![0.0; n],
            duration_s,
        }
    }

    /// Speed given as a closure of time, zero yaw rate.
    pub fn from_fn(duration_s: usize, f: impl Fn(f64) -> f64) -> Self {
        let n = duration_s * SAMPLES_PER_SECOND + 1;
        let fwd_speed = (0..n).map(|i| f(i as f64 * DT)).collect();
        SpeedProfile {
            dt: DT,
            fwd_speed,
            yaw_rate: vec![0.0; n],
            duration_s,
        }
    }
}

struct Builder {
    speed: Vec<f64>,
    yaw: Vec<f64>,
    total: usize,
    max_speed: f64,
}

impl Builder {
    fn done(&self) -> bool {
        self.speed.len() > self.total
    }

    fn current(&self) -> f64 {
        *self.speed.last().expect("builder starts with one sample")
    }

    /// Plays one segment. Returns the number of ticks emitted.
    fn play(&mut self, seg: Segment) -> usize {
        let ticks = (seg.duration() / DT).round() as usize;
        let mut emitted = 0;
        for _ in 0..ticks {
            if self.done() {
                break;
            }
            let v = self.current();
            let (next, yaw) = match seg {
                Segment::Idle { .. } if v == 0.0 => (0.0, 0.0),
                Segment::Idle { .. } | Segment::Cruise { .. } => (v, 0.0),
                Segment::Accelerate { accel, .. } => ((v + accel * DT).min(self.max_speed.max(v)), 0.0),
                Segment::Brake { decel, .. } => ((v - decel * DT).max(0.0), 0.0),
                Segment::Turn { yaw_rate, .. } => (v, if v > 0.0 { yaw_rate } else { 0.0 }),
            };
            // yaw[i] applies to sample i, which starts at speed v
            *self.yaw.last_mut().unwrap() = yaw;
            self.speed.push(next);
            self.yaw.push(0.0);
            emitted += 1;
        }
        emitted
    }
}

/// Generates a ground-truth profile. Deterministic in `(seed, cfg)`.
pub fn gen_speed_profile(seed: u64, duration_s: usize, cfg: &ManeuverConfig) -> Result<SpeedProfile> {
    if duration_s < MIN_DURATION_S {
        return Err(Error::invalid(format!(
            "profile duration {duration_s} s is shorter than {MIN_DURATION_S} s"
        )));
    }
    cfg.validate()?;
    let total = duration_s * SAMPLES_PER_SECOND;
    let mut b = Builder {
        speed: Vec::with_capacity(total + 1),
        yaw: Vec::with_capacity(total + 1),
        total,
        max_speed: cfg.max_speed,
    };
    b.speed.push(0.0);
    b.yaw.push(0.0);

    if let Some(script) = &cfg.script {
        for &seg in script {
            b.play(seg);
        }
        while !b.done() {
            b.play(Segment::Cruise { duration_s: duration_s as f64 });
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uni = |rng: &mut ChaCha8Rng, r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.random::<f64>();
        b.play(Segment::Idle {
            duration_s: uni(&mut rng, cfg.idle_range_s),
        });
        while !b.done() {
            let v = b.current();
            let dur = uni(&mut rng, cfg.segment_range_s);
            let seg = if v == 0.0 {
                if rng.random::<f64>() < 0.25 {
                    Segment::Idle {
                        duration_s: uni(&mut rng, cfg.idle_range_s),
                    }
                } else {
                    Segment::Accelerate {
                        accel: uni(&mut rng, cfg.accel_range),
                        duration_s: dur,
                    }
                }
            } else {
                let near_top = v > 0.85 * cfg.max_speed;
                let pick = rng.random::<f64>();
                if pick < 0.3 && !near_top {
                    Segment::Accelerate {
                        accel: uni(&mut rng, cfg.accel_range),
                        duration_s: dur,
                    }
                } else if pick < 0.5 {
                    Segment::Cruise { duration_s: dur }
                } else if pick < 0.75 {
                    let decel = uni(&mut rng, cfg.brake_range);
                    let duration_s = if rng.random::<f64>() < cfg.stop_probability {
                        v / decel + DT
                    } else {
                        dur.min(0.6 * v / decel)
                    };
                    Segment::Brake { decel, duration_s }
                } else {
                    let mag = uni(&mut rng, cfg.turn_rate_range).min(cfg.max_lateral_accel / v);
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    Segment::Turn {
                        yaw_rate: sign * mag,
                        duration_s: dur,
                    }
                }
            };
            if b.play(seg) == 0 && !b.done() {
                // zero-length draw (e.g. a tiny brake); force progress
                b.play(Segment::Cruise { duration_s: DT });
            }
        }
    }

    b.speed.truncate(total + 1);
    b.yaw.truncate(total + 1);
    Ok(SpeedProfile {
        dt: DT,
        fwd_speed: b.speed,
        yaw_rate: b.yaw,
        duration_s,
    })
}
