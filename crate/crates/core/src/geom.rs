//! Rotation mathematics shared by the simulator, augmentation and the
//! motion-transformation network.
//!
//! Euler angles follow one fixed convention: `R = Rx(alpha) * Ry(beta) *
//! Rz(gamma)`, applied to column vectors. The resulting matrix maps
//! phone-frame vectors into the vehicle frame.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Standard gravity reference in the world frame, m/s².
pub const GRAVITY: f64 = 9.81;

/// Three-component real vector (m/s², rad/s or m/s depending on context).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn max_abs_diff(self, o: Vec3) -> f64 {
        (self.x - o.x)
            .abs()
            .max((self.y - o.y).abs())
            .max((self.z - o.z).abs())
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Gravity reference `[0, 0, 9.81]`.
pub fn gravity_ref() -> Vec3 {
    Vec3::new(0.0, 0.0, GRAVITY)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the upper edge from rounding.
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Rotation angles about x, y and z, radians, each kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl EulerAngles {
    pub const ZERO: EulerAngles = EulerAngles {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    };

    /// Builds canonical angles, wrapping each into `(-pi, pi]`.
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite() && gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite Euler angles ({alpha}, {beta}, {gamma})"
            )));
        }
        Ok(EulerAngles {
            alpha: wrap_angle(alpha),
            beta: wrap_angle(beta),
            gamma: wrap_angle(gamma),
        })
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }
}

/// 3×3 rotation matrix; `m[row][col]`, row = output axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation3 {
    pub m: [[f64; 3]; 3],
}

impl Rotation3 {
    pub const IDENTITY: Rotation3 = Rotation3 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn about_x(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Rotation3 {
            m: [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        }
    }

    pub fn about_y(b: f64) -> Self {
        let (s, c) = b.sin_cos();
        Rotation3 {
            m: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        }
    }

    pub fn about_z(g: f64) -> Self {
        let (s, c) = g.sin_cos();
        Rotation3 {
            m: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn transpose(&self) -> Rotation3 {
        let m = &self.m;
        Rotation3 {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::from_array(self.m[i])
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// `max |(RᵀR − I)_ij|`.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = self.transpose() * *self;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((rtr.m[i][j] - target).abs());
            }
        }
        worst
    }
}

impl Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, o: Rotation3) -> Rotation3 {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.m[i][0] * o.m[0][j] + self.m[i][1] * o.m[1][j] + self.m[i][2] * o.m[2][j];
            }
        }
        Rotation3 { m }
    }
}

impl Mul<Vec3> for Rotation3 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        rotate(&self, v)
    }
}

/// `Rx(alpha) * Ry(beta) * Rz(gamma)`.
pub fn euler_to_matrix(angles: EulerAngles) -> Result<Rotation3> {
    let EulerAngles { alpha, beta, gamma } = angles;
    if !(alpha.is_finite() && beta.is_finite() && gamma.is_finite()) {
        return Err(Error::invalid("non-finite Euler angles"));
    }
    Ok(Rotation3::about_x(alpha) * Rotation3::about_y(beta) * Rotation3::about_z(gamma))
}

/// Second row of `euler_to_matrix`, i.e. the vehicle forward axis expressed
/// in phone coordinates. Projecting a phone-frame vector onto it gives the
/// forward component after rotation.
pub fn forward_row(angles: [f64; 3]) -> Vec3 {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sg, cg) = angles[2].sin_cos();
    Vec3::new(sa * sb * cg + ca * sg, ca * cg - sa * sb * sg, -sa * cb)
}

pub fn rotate(r: &Rotation3, v: Vec3) -> Vec3 {
    Vec3::new(
        r.m[0][0] * v.x + r.m[0][1] * v.y + r.m[0][2] * v.z,
        r.m[1][0] * v.x + r.m[1][1] * v.y + r.m[1][2] * v.z,
        r.m[2][0] * v.x + r.m[2][1] * v.y + r.m[2][2] * v.z,
    )
}

/// Inclusive sampling interval per Euler angle, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRanges {
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
    pub gamma: [f64; 2],
}

impl AngleRanges {
    pub const FULL: AngleRanges = AngleRanges {
        alpha: [-PI, PI],
        beta: [-PI, PI],
        gamma: [-PI, PI],
    };

    pub const ZERO: AngleRanges = AngleRanges {
        alpha: [0.0, 0.0],
        beta: [0.0, 0.0],
        gamma: [0.0, 0.0],
    };

    pub fn uniform(lo: f64, hi: f64) -> Self {
        AngleRanges {
            alpha: [lo, hi],
            beta: [lo, hi],
            gamma: [lo, hi],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::invalid(format!(
                    "angle range for {name} is [{lo}, {hi}]; need finite lo <= hi"
                )));
            }
        }
        Ok(())
    }
}

impl Default for AngleRanges {
    fn default() -> Self {
        AngleRanges::FULL
    }
}

/// Draws each Euler angle uniformly from its range and builds the matrix.
pub fn random_rotation<R: Rng + ?Sized>(
    rng: &mut R,
    ranges: &AngleRanges,
) -> Result<(EulerAngles, Rotation3)> {
    ranges.validate()?;
    let mut draw = |[lo, hi]: [f64; 2]| lo + (hi - lo) * rng.random::<f64>();
    let alpha = draw(ranges.alpha);
    let beta = draw(ranges.beta);
    let gamma = draw(ranges.gamma);
    let angles = EulerAngles::new(alpha, beta, gamma)?;
    let r = euler_to_matrix(angles)?;
    Ok((angles, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Generic dense product, written independently of `Rotation3`.
    fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    fn oracle(a: f64, b: f64, g: f64) -> [[f64; 3]; 3] {
        let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
        let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
        let rz = [[g.cos(), -g.sin(), 0.0], [g.sin(), g.cos(), 0.0], [0.0, 0.0, 1.0]];
        matmul(&matmul(&rx, &ry), &rz)
    }

    #[test]
    fn zero_angles_give_identity() {
        let r = euler_to_matrix(EulerAngles::ZERO).unwrap();
        assert_eq!(r, Rotation3::IDENTITY);
    }

    #[test]
    fn quarter_turn_about_x() {
        let r = euler_to_matrix(EulerAngles::new(PI / 2.0, 0.0, 0.0).unwrap()).unwrap();
        let want = [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((r.m[i][j] - want[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mixed_angles_match_three_factor_oracle() {
        let r = euler_to_matrix(EulerAngles::new(0.3, -0.2, 0.1).unwrap()).unwrap();
        let o = oracle(0.3, -0.2, 0.1);
        for i in 0..3 {
            for j in 0..3 {
                assert!((r.m[i][j] - o[i][j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_angles_rejected() {
        assert!(EulerAngles::new(f64::NAN, 0.0, 0.0).is_err());
        let bad = EulerAngles {
            alpha: 0.0,
            beta: f64::INFINITY,
            gamma: 0.0,
        };
        assert!(matches!(euler_to_matrix(bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rotate_examples() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(rotate(&Rotation3::IDENTITY, v), v);
        let out = rotate(&Rotation3::about_x(PI / 2.0), Vec3::new(0.0, 1.0, 0.0));
        assert!(out.max_abs_diff(Vec3::new(0.0, 0.0, 1.0)) < 1e-15);

        let r = euler_to_matrix(EulerAngles::new(0.3, -0.2, 0.1).unwrap()).unwrap();
        let o = oracle(0.3, -0.2, 0.1);
        let g = [0.0, 0.0, 9.81];
        let want: Vec<f64> = (0..3).map(|i| (0..3).map(|k| o[i][k] * g[k]).sum()).collect();
        let got = rotate(&r, gravity_ref());
        assert!(got.max_abs_diff(Vec3::new(want[0], want[1], want[2])) <= 1e-12);
    }

    #[test]
    fn forward_row_matches_matrix_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (a, r) = random_rotation(&mut rng, &AngleRanges::FULL).unwrap();
            let f = forward_row(a.to_array());
            assert!(f.max_abs_diff(r.row(1)) < 1e-14);
        }
    }

    #[test]
    fn gravity_reference() {
        assert_eq!(gravity_ref(), Vec3::new(0.0, 0.0, 9.81));
        assert_eq!(gravity_ref().norm(), 9.81);
        assert_eq!(rotate(&Rotation3::IDENTITY, gravity_ref()), gravity_ref());
    }

    #[test]
    fn planar_rotation_keeps_forward_axis_level() {
        for k in 0..64 {
            let g = -PI + k as f64 * 0.1;
            let r = euler_to_matrix(EulerAngles::new(0.0, 0.0, g).unwrap()).unwrap();
            let u = rotate(&r, Vec3::new(0.0, 1.0, 0.0));
            assert!(u.z.abs() <= 1e-12);
        }
    }

    #[test]
    fn random_rotation_degenerate_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (a, r) = random_rotation(&mut rng, &AngleRanges::ZERO).unwrap();
        assert_eq!(a, EulerAngles::ZERO);
        assert_eq!(r, Rotation3::IDENTITY);

        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let a1 = random_rotation(&mut r1, &AngleRanges::FULL).unwrap().0;
            let a2 = random_rotation(&mut r2, &AngleRanges::FULL).unwrap().0;
            assert_eq!(a1, a2);
        }
    }

    #[test]
    fn random_rotation_rejects_inverted_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ranges = AngleRanges::FULL;
        ranges.beta = [1.0, -1.0];
        assert!(matches!(
            random_rotation(&mut rng, &ranges),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn uniform_gamma_sample_mean_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| random_rotation(&mut rng, &AngleRanges::FULL).unwrap().0.gamma)
            .sum::<f64>()
            / n as f64;
        // sd of the mean for U(-pi, pi) is pi/sqrt(3n) ~ 0.018; 3 sd ~ 0.055
        assert!(mean.abs() <= 0.06, "mean {mean}");
    }

    #[test]
    fn wrap_is_canonical() {
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]

            #[test]
            fn euler_matrix_is_rotation(a in -PI..PI, b in -PI..PI, g in -PI..PI) {
                let r = euler_to_matrix(EulerAngles::new(a, b, g).unwrap()).unwrap();
                prop_assert!(r.orthonormality_error() <= 1e-9);
                prop_assert!((r.determinant() - 1.0).abs() <= 1e-9);
            }

            #[test]
            fn rotate_preserves_norm(a in -PI..PI, b in -PI..PI, g in -PI..PI,
                                     x in -50.0..50.0f64, y in -50.0..50.0f64, z in -50.0..50.0f64) {
                let r = euler_to_matrix(EulerAngles::new(a, b, g).unwrap()).unwrap();
                let v = Vec3::new(x, y, z);
                let n = v.norm();
                prop_assert!((rotate(&r, v).norm() - n).abs() <= 1e-9 * n.max(1e-12));
            }
        }
    }
}
