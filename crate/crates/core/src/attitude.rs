//! Quaternion algebra and kinematic propagation.
//!
//! Quaternions are stored scalar-first, `(s, x, y, z)`, and act on vectors
//! as active body-to-inertial rotations: `v_inertial = q ⊗ v_body ⊗ q*`.
//! Every constructor and operation that returns a [`Quaternion`] leaves it
//! at unit norm.

use std::fmt;
use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `|‖axis‖ − 1|` and `|‖q‖ − 1|` for inputs that claim to be unit.
pub const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MathError {
    #[error("axis is not unit norm (norm = {0})")]
    NonUnitAxis(f64),
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("quaternion is not unit norm (norm = {0})")]
    NonUnitQuaternion(f64),
    #[error("non-finite component")]
    NonFinite,
}

/// Plain 3-vector. Units depend on context (rad/s, N·m, ...).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    pub const X: Vec3 = Vec3 { x: 1.0, y: 0.0, z: 0.0 };
    pub const Y: Vec3 = Vec3 { x: 0.0, y: 1.0, z: 0.0 };
    pub const Z: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 1.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Componentwise product, used for diagonal inertia tensors.
    pub fn hadamard(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn div_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x / o.x, self.y / o.y, self.z / o.z)
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Vec3 {
        Vec3::new(f(self.x), f(self.y), f(self.z))
    }

    pub fn max_abs(self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn normalized(self) -> Result<Vec3, MathError> {
        if !self.is_finite() {
            return Err(MathError::NonFinite);
        }
        let n = self.norm();
        if n == 0.0 {
            return Err(MathError::ZeroNorm);
        }
        Ok(self * (1.0 / n))
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
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

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }
}

/// Rotation of `theta` radians about a unit `axis`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle {
    axis: Vec3,
    theta: f64,
}

impl AxisAngle {
    pub fn new(axis: Vec3, theta: f64) -> Result<Self, MathError> {
        if !axis.is_finite() || !theta.is_finite() {
            return Err(MathError::NonFinite);
        }
        let n = axis.norm();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(MathError::NonUnitAxis(n));
        }
        Ok(Self { axis, theta })
    }

    pub fn axis(&self) -> Vec3 {
        self.axis
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
}

/// Unit quaternion, scalar-first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quaternion {
    s: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { s: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes an arbitrary finite, nonzero 4-vector.
    pub fn normalize(s: f64, x: f64, y: f64, z: f64) -> Result<Self, MathError> {
        if !(s.is_finite() && x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(MathError::NonFinite);
        }
        let n = (s * s + x * x + y * y + z * z).sqrt();
        if n == 0.0 {
            return Err(MathError::ZeroNorm);
        }
        Ok(Self { s: s / n, x: x / n, y: y / n, z: z / n })
    }

    /// Accepts components already at unit norm within `tol`, then renormalizes.
    pub fn from_unit_with_tolerance(c: [f64; 4], tol: f64) -> Result<Self, MathError> {
        if c.iter().any(|v| !v.is_finite()) {
            return Err(MathError::NonFinite);
        }
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > tol {
            return Err(MathError::NonUnitQuaternion(n));
        }
        Self::normalize(c[0], c[1], c[2], c[3])
    }

    pub fn from_unit(c: [f64; 4]) -> Result<Self, MathError> {
        Self::from_unit_with_tolerance(c, UNIT_TOLERANCE)
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn vector(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.s, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn from_axis_angle(aa: &AxisAngle) -> Self {
        let (sin, cos) = (0.5 * aa.theta).sin_cos();
        let v = aa.axis * sin;
        Self::normalize(cos, v.x, v.y, v.z).expect("unit axis gives nonzero quaternion")
    }

    /// Canonical axis-angle form with `theta ∈ [0, π]`. The identity maps to
    /// `theta = 0` about the z axis.
    pub fn to_axis_angle(&self) -> AxisAngle {
        let q = self.canonical();
        let v = q.vector();
        let sin_half = v.norm();
        let theta = 2.0 * sin_half.atan2(q.s);
        let axis = if sin_half > 0.0 { v * (1.0 / sin_half) } else { Vec3::Z };
        AxisAngle { axis, theta }
    }

    pub fn conjugate(&self) -> Self {
        Self { s: self.s, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Representative of the same rotation with non-negative scalar part.
    pub fn canonical(&self) -> Self {
        if self.s < 0.0 {
            Self { s: -self.s, x: -self.x, y: -self.y, z: -self.z }
        } else {
            *self
        }
    }

    pub fn negated(&self) -> Self {
        Self { s: -self.s, x: -self.x, y: -self.y, z: -self.z }
    }

    fn hamilton(a: &Self, b: &Self) -> [f64; 4] {
        [
            a.s * b.s - a.x * b.x - a.y * b.y - a.z * b.z,
            a.s * b.x + a.x * b.s + a.y * b.z - a.z * b.y,
            a.s * b.y - a.x * b.z + a.y * b.s + a.z * b.x,
            a.s * b.z + a.x * b.y - a.y * b.x + a.z * b.s,
        ]
    }

    /// Hamilton product `self ⊗ other`: rotation `other` followed by `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let [s, x, y, z] = Self::hamilton(self, other);
        Self::normalize(s, x, y, z).expect("product of unit quaternions is nonzero")
    }

    /// Rotation taking `self` to `target`, i.e. `target ⊗ self*`, canonicalized.
    pub fn error_to(&self, target: &Self) -> Self {
        target.compose(&self.conjugate()).canonical()
    }

    /// Rotation angle between two attitudes in `[0, π]`; invariant under `q → −q`.
    pub fn angular_distance(&self, other: &Self) -> f64 {
        let dot = self.s * other.s + self.x * other.x + self.y * other.y + self.z * other.z;
        2.0 * dot.abs().clamp(-1.0, 1.0).acos()
    }

    pub fn rotate_vector(&self, v: Vec3) -> Vec3 {
        let u = self.vector();
        let t = u.cross(v) * 2.0;
        v + t * self.s + u.cross(t)
    }

    /// First-order step `q ← [I + ½ Ω(ω) dt] q` followed by renormalization.
    pub fn propagate(&self, omega: Vec3, dt: f64) -> Self {
        if omega == Vec3::ZERO {
            return *self;
        }
        let dq = OmegaMatrix::new(omega).apply(self.to_array());
        let k = 0.5 * dt;
        Self::normalize(
            self.s + k * dq[0],
            self.x + k * dq[1],
            self.y + k * dq[2],
            self.z + k * dq[3],
        )
        .unwrap_or(*self)
    }
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, rhs: Quaternion) -> Quaternion {
        self.compose(&rhs)
    }
}

impl TryFrom<[f64; 4]> for Quaternion {
    type Error = MathError;
    fn try_from(c: [f64; 4]) -> Result<Self, MathError> {
        Quaternion::from_unit(c)
    }
}

impl From<Quaternion> for [f64; 4] {
    fn from(q: Quaternion) -> Self {
        q.to_array()
    }
}

impl fmt::Display for Quaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.s, self.x, self.y, self.z)
    }
}

/// Angle between `body_axis` (rotated into the inertial frame by `q`) and `target_dir`.
pub fn axis_alignment_angle(q: &Quaternion, body_axis: Vec3, target_dir: Vec3) -> Result<f64, MathError> {
    let b = body_axis.normalized()?;
    let t = target_dir.normalized()?;
    Ok(q.rotate_vector(b).dot(t).clamp(-1.0, 1.0).acos())
}

/// Kinematic matrix with `q̇ = ½ Ω(ω) q` for body rates `ω`, skew-symmetric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaMatrix(pub [[f64; 4]; 4]);

impl OmegaMatrix {
    pub fn new(w: Vec3) -> Self {
        OmegaMatrix([
            [0.0, -w.x, -w.y, -w.z],
            [w.x, 0.0, w.z, -w.y],
            [w.y, -w.z, 0.0, w.x],
            [w.z, w.y, -w.x, 0.0],
        ])
    }

    pub fn apply(&self, q: [f64; 4]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (row, o) in self.0.iter().zip(out.iter_mut()) {
            *o = row.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut t = [[0.0; 4]; 4];
        for (i, row) in self.0.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                t[j][i] = *v;
            }
        }
        OmegaMatrix(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn about_z(theta: f64) -> Quaternion {
        Quaternion::from_axis_angle(&AxisAngle::new(Vec3::Z, theta).unwrap())
    }

    fn close(a: [f64; 4], b: [f64; 4], tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn axis_angle_examples() {
        assert_eq!(about_z(0.0).to_array(), [1.0, 0.0, 0.0, 0.0]);
        assert!(close(about_z(PI).to_array(), [0.0, 0.0, 0.0, 1.0], 1e-15));
        let h = 0.5f64.sqrt();
        assert!(close(about_z(FRAC_PI_2).to_array(), [h, 0.0, 0.0, h], 1e-15));
    }

    #[test]
    fn non_unit_axis_rejected() {
        assert!(matches!(AxisAngle::new(Vec3::new(1.0, 1.0, 0.0), 0.3), Err(MathError::NonUnitAxis(_))));
        assert!(matches!(AxisAngle::new(Vec3::new(f64::NAN, 0.0, 0.0), 0.3), Err(MathError::NonFinite)));
    }

    #[test]
    fn multiply_examples() {
        let q = Quaternion::normalize(0.3, -0.2, 0.9, 0.1).unwrap();
        assert!(close((Quaternion::IDENTITY * q).to_array(), q.to_array(), 1e-15));
        assert!(close((q * q.conjugate()).to_array(), [1.0, 0.0, 0.0, 0.0], 1e-15));
        let two = about_z(FRAC_PI_2) * about_z(FRAC_PI_2);
        assert!(close(two.to_array(), [0.0, 0.0, 0.0, 1.0], 1e-15));
    }

    #[test]
    fn conjugate_examples() {
        assert_eq!(Quaternion::IDENTITY.conjugate().to_array(), [1.0, 0.0, 0.0, 0.0]);
        let flip = Quaternion::from_unit([0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(flip.conjugate().to_array(), [0.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn error_examples() {
        let q = Quaternion::normalize(0.1, 0.7, -0.2, 0.4).unwrap();
        assert!(close(q.error_to(&q).to_array(), [1.0, 0.0, 0.0, 0.0], 1e-15));
        let flip = Quaternion::from_unit([0.0, 0.0, 0.0, 1.0]).unwrap();
        let e = Quaternion::IDENTITY.error_to(&flip).to_array();
        assert!(close(e, [0.0, 0.0, 0.0, 1.0], 1e-15) || close(e, [0.0, 0.0, 0.0, -1.0], 1e-15));
        // π/2 about −z.
        let e = about_z(FRAC_PI_2).error_to(&Quaternion::IDENTITY);
        let h = 0.5f64.sqrt();
        assert!(close(e.to_array(), [h, 0.0, 0.0, -h], 1e-15));
        assert!(e.s() >= 0.0);
    }

    #[test]
    fn angular_distance_examples() {
        let q = Quaternion::normalize(0.3, 0.1, 0.5, -0.2).unwrap();
        assert!(q.angular_distance(&q) < 1e-7);
        let flip = about_z(PI);
        assert!((Quaternion::IDENTITY.angular_distance(&flip) - PI).abs() < 1e-12);
        assert!((Quaternion::IDENTITY.angular_distance(&about_z(FRAC_PI_2)) - FRAC_PI_2).abs() < 1e-12);
        assert_eq!(q.angular_distance(&q.negated()), q.angular_distance(&q));
    }

    #[test]
    fn rotate_vector_examples() {
        assert_eq!(Quaternion::IDENTITY.rotate_vector(Vec3::X), Vec3::X);
        let v = about_z(PI).rotate_vector(Vec3::X);
        assert!((v - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-15);
        let v = about_z(FRAC_PI_2).rotate_vector(Vec3::X);
        assert!((v - Vec3::Y).norm() < 1e-15);
    }

    #[test]
    fn alignment_examples() {
        let id = Quaternion::IDENTITY;
        assert_eq!(axis_alignment_angle(&id, Vec3::X, Vec3::X).unwrap(), 0.0);
        assert!((axis_alignment_angle(&id, Vec3::X, -Vec3::X).unwrap() - PI).abs() < 1e-15);
        let a = axis_alignment_angle(&about_z(FRAC_PI_2), Vec3::X, Vec3::X).unwrap();
        assert!((a - FRAC_PI_2).abs() < 1e-12);
        assert_eq!(axis_alignment_angle(&id, Vec3::ZERO, Vec3::X), Err(MathError::ZeroNorm));
    }

    #[test]
    fn omega_matrix_examples() {
        assert_eq!(OmegaMatrix::new(Vec3::ZERO).0, [[0.0; 4]; 4]);
        let m = OmegaMatrix::new(Vec3::new(0.3, -1.2, 0.7));
        let t = m.transpose();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(t.0[i][j], -m.0[i][j]);
            }
        }
        let dq = OmegaMatrix::new(Vec3::new(0.0, 0.0, 0.01)).apply([1.0, 0.0, 0.0, 0.0]);
        let half: Vec<f64> = dq.iter().map(|v| 0.5 * v).collect();
        assert!(close([half[0], half[1], half[2], half[3]], [0.0, 0.0, 0.0, 0.005], 1e-18));
    }

    #[test]
    fn propagate_examples() {
        let q = Quaternion::normalize(0.2, 0.4, -0.1, 0.8).unwrap();
        assert_eq!(q.propagate(Vec3::ZERO, 0.37), q);
        let p = Quaternion::IDENTITY.propagate(Vec3::new(0.0, 0.0, 0.01), 0.5);
        // (1, 0, 0, 0.0025) / sqrt(1 + 0.0025²)
        let n = (1.0f64 + 0.0025 * 0.0025).sqrt();
        assert!(close(p.to_array(), [1.0 / n, 0.0, 0.0, 0.0025 / n], 1e-15));
        assert!((p.s() - 0.9999969).abs() < 1e-7);
    }

    #[test]
    fn full_turn_returns_to_start() {
        let w = 0.05;
        let dt = 0.01;
        let steps = (2.0 * PI / (w * dt)).round() as usize;
        let mut q = Quaternion::IDENTITY;
        for _ in 0..steps {
            q = q.propagate(Vec3::new(0.0, 0.0, w), dt);
        }
        assert!(q.angular_distance(&Quaternion::IDENTITY) < 1e-3);
    }

    #[test]
    fn propagation_error_is_at_least_first_order() {
        // Single step versus a 1000x finer reference.
        let q0 = Quaternion::normalize(0.9, 0.1, -0.3, 0.2).unwrap();
        let w = Vec3::new(0.04, -0.07, 0.03);
        let err = |dt: f64| {
            let coarse = q0.propagate(w, dt);
            let mut fine = q0;
            for _ in 0..1000 {
                fine = fine.propagate(w, dt / 1000.0);
            }
            coarse.angular_distance(&fine)
        };
        let dts = [4.0, 2.0, 1.0, 0.5];
        let errs: Vec<f64> = dts.iter().map(|&d| err(d)).collect();
        for (e, d) in errs.iter().zip(dts.iter()) {
            assert!(*e <= 1e-3 * d, "error {e} at dt {d}");
        }
        for pair in errs.windows(2) {
            assert!(pair[0] / pair[1] >= 2.0, "{errs:?}");
        }
    }

    fn unit_quat() -> impl Strategy<Value = Quaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(a, b, c, d)| a * a + b * b + c * c + d * d > 1e-3)
            .prop_map(|(a, b, c, d)| Quaternion::normalize(a, b, c, d).unwrap())
    }

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn operations_stay_unit(a in unit_quat(), b in unit_quat(), w in vec3(), dt in 1e-3..2.0f64) {
            for q in [a * b, a.conjugate(), a.error_to(&b), a.propagate(w * 0.1, dt), a.canonical()] {
                prop_assert!((q.norm() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn composition_matches_sequential_rotation(a in unit_quat(), b in unit_quat(), v in vec3()) {
            let lhs = (a * b).rotate_vector(v);
            let rhs = a.rotate_vector(b.rotate_vector(v));
            prop_assert!((lhs - rhs).max_abs() <= 1e-9 * (1.0 + v.norm()));
        }

        #[test]
        fn rotation_preserves_norm(a in unit_quat(), v in vec3()) {
            prop_assert!((a.rotate_vector(v).norm() - v.norm()).abs() <= 1e-12 * (1.0 + v.norm()));
        }

        #[test]
        fn double_cover_distance(a in unit_quat()) {
            prop_assert_eq!(a.angular_distance(&a.negated()), a.angular_distance(&a));
        }

        #[test]
        fn axis_angle_round_trip(ax in vec3(), theta in 1e-3..(PI - 1e-3)) {
            prop_assume!(ax.norm() > 1e-2);
            let axis = ax.normalized().unwrap();
            let q = Quaternion::from_axis_angle(&AxisAngle::new(axis, theta).unwrap());
            let back = q.to_axis_angle();
            prop_assert!((back.theta() - theta).abs() <= 1e-7);
            prop_assert!((back.axis() - axis).max_abs() <= 1e-7);
        }
    }
}
