//! Per-second windowing, time-domain features and accelerometer pre-integration.

use serde::{Deserialize, Serialize};

use crate::geom::Vec3;
use crate::simkit::{ImuStream, DT, SAMPLES_PER_SECOND};
use crate::{Error, Result};

/// Features per axis, in layout order.
pub const FEATURE_NAMES: [&str; 6] = ["std", "max", "min", "rms", "skewness", "kurtosis"];
/// Features per sensor (3 axes × 6).
pub const SENSOR_FEATURES: usize = 18;
/// Features per second (accelerometer then gyroscope).
pub const FRAME_FEATURES: usize = 36;
/// Identifies the feature layout; stored in checkpoints.
pub const FEATURE_LAYOUT: &str = "axis-major/std,max,min,rms,skew,kurt/pop-moments/v1";

const M2_FLOOR: f64 = 1e-12;

/// One second of 50 Hz samples.
#[derive(Debug, Clone, Copy)]
pub struct ImuWindow<'a> {
    pub second: usize,
    pub accel: &'a [Vec3],
    pub gyro: &'a [Vec3],
}

/// Consecutive non-overlapping 1 s windows; a trailing partial second is dropped.
pub fn window_1s(stream: &ImuStream) -> Vec<ImuWindow<'_>> {
    stream
        .accel
        .chunks_exact(SAMPLES_PER_SECOND)
        .zip(stream.gyro.chunks_exact(SAMPLES_PER_SECOND))
        .enumerate()
        .map(|(second, (accel, gyro))| ImuWindow { second, accel, gyro })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub acc_feats: [f64; SENSOR_FEATURES],
    pub gyro_feats: [f64; SENSOR_FEATURES],
    pub t: usize,
}

impl FeatureFrame {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(FRAME_FEATURES);
        v.extend_from_slice(&self.acc_feats);
        v.extend_from_slice(&self.gyro_feats);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreIntegration {
    pub i: Vec3,
    pub t: usize,
}

fn check_len(n: usize) -> Result<()> {
    if n != SAMPLES_PER_SECOND {
        return Err(Error::invalid(format!(
            "window has {n} samples, expected {SAMPLES_PER_SECOND}"
        )));
    }
    Ok(())
}

// Values are sorted first so every statistic is independent of sample order,
// bit for bit.
fn axis_features(mut xs: Vec<f64>) -> [f64; 6] {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4, mut sq) = (0.0, 0.0, 0.0, 0.0);
    for &x in &xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
        sq += x * x;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let (skew, kurt) = if m2 < M2_FLOOR {
        (0.0, 0.0)
    } else {
        (m3 / m2.powf(1.5), m4 / (m2 * m2))
    };
    [m2.sqrt(), xs[xs.len() - 1], xs[0], (sq / n).sqrt(), skew, kurt]
}

/// Six features per axis, axis-major: `[x: std,max,min,rms,skew,kurt, y: .., z: ..]`.
pub fn extract_features(window: &[Vec3]) -> Result<[f64; SENSOR_FEATURES]> {
    check_len(window.len())?;
    let mut out = [0.0; SENSOR_FEATURES];
    for axis in 0..3 {
        let xs = window.iter().map(|v| v.to_array()[axis]).collect();
        out[axis * 6..axis * 6 + 6].copy_from_slice(&axis_features(xs));
    }
    Ok(out)
}

/// Left-Riemann integral of one second of acceleration, m/s.
pub fn preintegrate(window: &[Vec3]) -> Result<Vec3> {
    check_len(window.len())?;
    Ok(window.iter().fold(Vec3::ZERO, |acc, a| acc + a.scale(DT)))
}

pub fn frame_for(w: &ImuWindow<'_>) -> Result<FeatureFrame> {
    Ok(FeatureFrame {
        acc_feats: extract_features(w.accel)?,
        gyro_feats: extract_features(w.gyro)?,
        t: w.second,
    })
}

/// Feature frames and pre-integrations for every whole second of a stream.
pub fn per_second(stream: &ImuStream) -> Result<(Vec<FeatureFrame>, Vec<PreIntegration>)> {
    let windows = window_1s(stream);
    let mut frames = Vec::with_capacity(windows.len());
    let mut preints = Vec::with_capacity(windows.len());
    for w in &windows {
        frames.push(frame_for(w)?);
        preints.push(PreIntegration {
            i: preintegrate(w.accel)?,
            t: w.second,
        });
    }
    Ok((frames, preints))
}

/// Per-dimension standardization fitted on training frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub const MIN_STD: f64 = 1e-6;

    pub fn fit(frames: &[FeatureFrame]) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::invalid(format!(
                "normalizer needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let rows: Vec<Vec<f64>> = frames.iter().map(FeatureFrame::to_vec).collect();
        Ok(Self::fit_rows(&rows))
    }

    fn fit_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len() as f64;
        let dims = rows[0].len();
        let mut mean = vec![0.0; dims];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dims];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        Normalizer { mean, std }
    }

    /// Identity transform of the given width.
    pub fn identity(dims: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dims],
            std: vec![1.0; dims],
        }
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_slice(&self, x: &[f64], out: &mut [f64]) {
        for (k, (o, v)) in out.iter_mut().zip(x).enumerate() {
            *o = (v - self.mean[k]) / self.std[k].max(Self::MIN_STD);
        }
    }

    pub fn apply(&self, frame: &FeatureFrame) -> Vec<f64> {
        let x = frame.to_vec();
        let mut out = vec![0.0; x.len()];
        self.apply_slice(&x, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{euler_to_matrix, rotate, EulerAngles};

    fn axis_window(xs: &[f64]) -> Vec<Vec3> {
        xs.iter().map(|&x| Vec3::new(x, 0.0, 0.0)).collect()
    }

    fn stream(n: usize) -> ImuStream {
        ImuStream {
            t: (0..n).map(|i| i as f64 * DT).collect(),
            accel: vec![Vec3::ZERO; n],
            gyro: vec![Vec3::ZERO; n],
        }
    }

    // Independent reference: mean via pairwise sums, central moments from
    // explicit powers.
    fn oracle(xs: &[f64]) -> [f64; 6] {
        let n = xs.len() as f64;
        let mean = xs.iter().map(|x| x / n).sum::<f64>();
        let m = |k: i32| xs.iter().map(|x| (x - mean).powi(k)).sum::<f64>() / n;
        let (m2, m3, m4) = (m(2), m(3), m(4));
        let rms = (xs.iter().map(|x| x.powi(2)).sum::<f64>() / n).sqrt();
        let max = xs.iter().cloned().fold(f64::MIN, f64::max);
        let min = xs.iter().cloned().fold(f64::MAX, f64::min);
        [m2.sqrt(), max, min, rms, m3 / m2.powf(1.5), m4 / (m2 * m2)]
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_1s(&stream(500)).len(), 10);
        assert_eq!(window_1s(&stream(520)).len(), 10);
        assert_eq!(window_1s(&stream(49)).len(), 0);
    }

    #[test]
    fn constant_axis_uses_guard() {
        let f = extract_features(&axis_window(&[2.0; 50])).unwrap();
        assert_eq!(&f[0..6], &[0.0, 2.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn alternating_axis() {
        let xs: Vec<f64> = (0..50).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let f = extract_features(&axis_window(&xs)).unwrap();
        assert_eq!(&f[0..6], &[1.0, 1.0, -1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn ramp_matches_moment_oracle() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let f = extract_features(&axis_window(&xs)).unwrap();
        let o = oracle(&xs);
        for k in 0..6 {
            assert!((f[k] - o[k]).abs() <= 1e-12, "{}: {} vs {}", FEATURE_NAMES[k], f[k], o[k]);
        }
        // y and z axes are all-zero
        assert_eq!(&f[6..12], &[0.0; 6]);
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(matches!(extract_features(&[Vec3::ZERO; 49]), Err(Error::InvalidArgument(_))));
        assert!(preintegrate(&[Vec3::ZERO; 51]).is_err());
    }

    #[test]
    fn preintegration_examples() {
        let i = preintegrate(&[Vec3::new(0.0, 1.0, 9.81); 50]).unwrap();
        assert!(i.max_abs_diff(Vec3::new(0.0, 1.0, 9.81)) <= 1e-12);
        assert_eq!(preintegrate(&[Vec3::ZERO; 50]).unwrap(), Vec3::ZERO);
        let ramp: Vec<Vec3> = (0..50).map(|i| Vec3::new(0.0, 0.02 * i as f64, 0.0)).collect();
        assert!((preintegrate(&ramp).unwrap().y - 0.49).abs() <= 1e-12);
    }

    #[test]
    fn normalizer_examples() {
        let c = FeatureFrame {
            acc_feats: [1.5; 18],
            gyro_feats: [-0.25; 18],
            t: 0,
        };
        let n = Normalizer::fit(&[c.clone(), c.clone(), c.clone()]).unwrap();
        assert!(n.apply(&c).iter().all(|&v| v == 0.0));

        assert!(Normalizer::fit(&[]).is_err());
        assert!(Normalizer::fit(&[c]).is_err());
    }

    #[test]
    fn normalizer_standardizes_fit_set() {
        let frames: Vec<FeatureFrame> = (0..40)
            .map(|k| {
                let mut a = [0.0; 18];
                let mut g = [0.0; 18];
                for d in 0..18 {
                    a[d] = ((k * 7 + d * 3) % 11) as f64 * 0.3 - d as f64;
                    g[d] = if d == 4 { 5.0 } else { (k as f64).sin() * (d + 1) as f64 };
                }
                FeatureFrame { acc_feats: a, gyro_feats: g, t: k }
            })
            .collect();
        let n = Normalizer::fit(&frames).unwrap();
        let out: Vec<Vec<f64>> = frames.iter().map(|f| n.apply(f)).collect();
        for d in 0..FRAME_FEATURES {
            let mean = out.iter().map(|r| r[d]).sum::<f64>() / 40.0;
            let sd = (out.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / 40.0).sqrt();
            assert!(mean.abs() <= 1e-9);
            if n.std[d] > 0.0 {
                assert!((sd - 1.0).abs() <= 1e-6);
            } else {
                assert!(out.iter().all(|r| r[d] == 0.0));
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn window() -> impl Strategy<Value = Vec<Vec3>> {
            prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64), 50)
                .prop_map(|v| v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect())
        }

        proptest! {
            #[test]
            fn features_ignore_order(w in window()) {
                let mut r = w.clone();
                r.reverse();
                prop_assert_eq!(extract_features(&w).unwrap(), extract_features(&r).unwrap());
            }

            #[test]
            fn rms_dominates_std(w in window()) {
                let f = extract_features(&w).unwrap();
                for a in 0..3 {
                    prop_assert!(f[a * 6 + 3].powi(2) >= f[a * 6].powi(2) - 1e-12);
                }
            }

            #[test]
            fn preintegration_is_linear(a in window(), b in window()) {
                let sum: Vec<Vec3> = a.iter().zip(&b).map(|(x, y)| *x + *y).collect();
                let lhs = preintegrate(&sum).unwrap();
                let rhs = preintegrate(&a).unwrap() + preintegrate(&b).unwrap();
                prop_assert!(lhs.max_abs_diff(rhs) <= 1e-12);
            }

            #[test]
            fn preintegration_commutes_with_rotation(w in window(), al in -3.1..3.1f64, be in -3.1..3.1f64, ga in -3.1..3.1f64) {
                let r = euler_to_matrix(EulerAngles::new(al, be, ga).unwrap()).unwrap();
                let rotated: Vec<Vec3> = w.iter().map(|v| rotate(&r, *v)).collect();
                let lhs = preintegrate(&rotated).unwrap();
                let rhs = rotate(&r, preintegrate(&w).unwrap());
                prop_assert!(lhs.max_abs_diff(rhs) <= 1e-9);
            }
        }
    }
}
