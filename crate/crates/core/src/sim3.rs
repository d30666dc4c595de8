//! Sim(3) similarity transforms and the sim(3) exponential / logarithm maps.
//!
//! A [`Sim3`] is stored as `(R, t, s)` and acts on points as `x ↦ s·R·x + t`.
//! Tangent vectors are ordered `(ρ, φ, σ)`:
//! - `ρ`: translational part,
//! - `φ`: rotation vector (axis · angle, radians),
//! - `σ`: log-scale.
//!
//! The matching 4×4 algebra element is `[[Φ + σI, ρ], [0, 0]]` with `Φ = [φ]×`.
//! Jacobians elsewhere in the crate use the right-perturbation convention
//! `g ← g · exp(δ)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::LazyLock;

use nalgebra::{Matrix3, Rotation3, SMatrix, SVector, Vector3};
use thiserror::Error;

pub type Vector7 = SVector<f64, 7>;
pub type Matrix7 = SMatrix<f64, 7, 7>;

/// Rotations whose angle exceeds `π − NEAR_PI_MARGIN` have no usable logarithm.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

/// Below this value of `max(|σ|, θ)` the `W` matrix is evaluated by its power
/// series instead of the closed form.
const W_SERIES_RADIUS: f64 = 0.5;
const W_SERIES_TERMS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum Sim3Error {
    #[error("rotation angle {angle} rad is too close to π for a stable logarithm")]
    RotationNearPi { angle: f64 },
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
}

/// Skew-symmetric matrix `[v]×` such that `[v]× w = v × w`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] for a skew-symmetric matrix.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula.
pub fn exp_so3(phi: &Vector3<f64>) -> Rotation3<f64> {
    let theta_sq = phi.norm_squared();
    let theta = theta_sq.sqrt();
    let (a, b) = if theta < 1e-4 {
        (
            1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0,
            0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    };
    let k = hat(phi);
    Rotation3::from_matrix_unchecked(Matrix3::identity() + k * a + k * k * b)
}

/// Rotation vector of `r`, with the angle in `[0, π − NEAR_PI_MARGIN]`.
pub fn log_so3(r: &Rotation3<f64>) -> Result<Vector3<f64>, Sim3Error> {
    let m = r.matrix();
    let cos = 0.5 * (m.trace() - 1.0);
    let axis_sin = 0.5 * vee(&(m - m.transpose()));
    let sin = axis_sin.norm();
    let theta = sin.atan2(cos);
    if theta > PI - NEAR_PI_MARGIN {
        return Err(Sim3Error::RotationNearPi { angle: theta });
    }
    if theta < 1e-4 {
        let t2 = theta * theta;
        return Ok(axis_sin * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0));
    }
    if theta < PI - 1e-2 {
        return Ok(axis_sin * (theta / sin));
    }
    // Near π the antisymmetric part vanishes; recover the axis from
    // (R + Rᵀ)/2 − cosθ·I = (1 − cosθ)·a·aᵀ and take the sign from sinθ·a.
    let one_minus_cos = 1.0 - cos;
    let sym = 0.5 * (m + m.transpose()) - Matrix3::identity() * cos;
    let k = (0..3)
        .max_by(|&i, &j| sym[(i, i)].total_cmp(&sym[(j, j)]))
        .unwrap_or(0);
    let mut axis: Vector3<f64> = sym.column(k).into_owned() / (sym[(k, k)] * one_minus_cos).sqrt();
    axis /= axis.norm();
    if axis.dot(&axis_sin) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// `expm1(σ)/σ`, continuous at zero.
fn expm1_over(sigma: f64) -> f64 {
    if sigma.abs() < 1e-5 {
        1.0 + sigma / 2.0 + sigma * sigma / 6.0 + sigma * sigma * sigma / 24.0
    } else {
        sigma.exp_m1() / sigma
    }
}

/// `W(φ, σ) = ∫₀¹ e^{uσ} exp(u[φ]×) du`, the matrix with `t = W·ρ` in `exp`.
pub fn w_matrix(phi: &Vector3<f64>, sigma: f64) -> Matrix3<f64> {
    let theta = phi.norm();
    if sigma.abs().max(theta) < W_SERIES_RADIUS {
        w_matrix_series(phi, sigma)
    } else {
        w_matrix_closed(phi, sigma)
    }
}

/// Power series `Σ Mⁿ/(n+1)!` with `M = σI + [φ]×`.
pub(crate) fn w_matrix_series(phi: &Vector3<f64>, sigma: f64) -> Matrix3<f64> {
    let m = Matrix3::identity() * sigma + hat(phi);
    let mut term = Matrix3::identity();
    let mut w = term;
    for n in 1..=W_SERIES_TERMS {
        term = term * m / (n + 1) as f64;
        w += term;
    }
    w
}

pub(crate) fn w_matrix_closed(phi: &Vector3<f64>, sigma: f64) -> Matrix3<f64> {
    let theta_sq = phi.norm_squared();
    let theta = theta_sq.sqrt();
    let a = expm1_over(sigma);
    let (b, c) = if theta < 1e-6 {
        // θ → 0 limits; only reached here with |σ| ≥ W_SERIES_RADIUS.
        let es = sigma.exp();
        let s2 = sigma * sigma;
        (
            ((sigma - 1.0) * es + 1.0) / s2,
            (es * (s2 - 2.0 * sigma + 2.0) - 2.0) / (2.0 * s2 * sigma),
        )
    } else {
        // ∫ e^{σu} e^{iθu} du = (e^{σ+iθ} − 1)/(σ + iθ) = c2 + i·c1
        let es = sigma.exp();
        let (sin, cos) = theta.sin_cos();
        let denom = sigma * sigma + theta_sq;
        let c1 = (es * sin * sigma - (es * cos - 1.0) * theta) / denom;
        let c2 = ((es * cos - 1.0) * sigma + es * sin * theta) / denom;
        (c1 / theta, (a - c2) / theta_sq)
    };
    let k = hat(phi);
    Matrix3::identity() * a + k * b + k * k * c
}

/// An element of the Lie algebra sim(3), ordered `(ρ, φ, σ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tangent7 {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
    pub sigma: f64,
}

impl Tangent7 {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>, sigma: f64) -> Self {
        Self { rho, phi, sigma }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros(), 0.0)
    }

    pub fn from_vector(v: &Vector7) -> Self {
        Self::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
            v[6],
        )
    }

    pub fn to_vector(&self) -> Vector7 {
        Vector7::from_column_slice(&[
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z, self.sigma,
        ])
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }

    pub fn norm_inf(&self) -> f64 {
        self.to_vector().amax()
    }

    pub fn exp(&self) -> Sim3 {
        Sim3::exp(self)
    }

    /// Right Jacobian `J_r(ξ) = ∫₀¹ Ad(exp(−uξ)) du`, so that
    /// `exp(ξ + δ) ≈ exp(ξ)·exp(J_r(ξ)·δ)`.
    ///
    /// The integrand is entire in `u`; Gauss–Legendre quadrature with 24 nodes
    /// is exact to double precision for the angles and scales met in practice.
    pub fn right_jacobian(&self) -> Matrix7 {
        let neg = -self.to_vector();
        let mut acc = Matrix7::zeros();
        for &(node, weight) in GAUSS_LEGENDRE.iter() {
            let g = Tangent7::from_vector(&(neg * node)).exp();
            acc += g.adjoint() * weight;
        }
        acc
    }
}

impl fmt::Display for Tangent7 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[rho=({:.6}, {:.6}, {:.6}), phi=({:.6}, {:.6}, {:.6}), sigma={:.6}]",
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z, self.sigma
        )
    }
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
static GAUSS_LEGENDRE: LazyLock<Vec<(f64, f64)>> = LazyLock::new(|| gauss_legendre_unit(24));

fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut deriv = 1.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(x) and P_n'(x).
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            deriv = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / deriv;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * deriv * deriv);
        out.push((0.5 * (x + 1.0), 0.5 * w));
    }
    out
}

/// A similarity transform `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    rotation: Rotation3<f64>,
    translation: Vector3<f64>,
    scale: f64,
}

impl Default for Sim3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3 {
    /// Panics if `scale` is not positive and finite.
    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>, scale: f64) -> Self {
        Self::try_new(rotation, translation, scale).expect("invalid Sim3 scale")
    }

    pub fn try_new(
        rotation: Rotation3<f64>,
        translation: Vector3<f64>,
        scale: f64,
    ) -> Result<Self, Sim3Error> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Sim3Error::InvalidScale(scale));
        }
        Ok(Self {
            rotation,
            translation,
            scale,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    /// A rigid transform (scale 1).
    pub fn from_rigid(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(rotation, translation, 1.0)
    }

    pub fn from_scale(scale: f64) -> Self {
        Self::new(Rotation3::identity(), Vector3::zeros(), scale)
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn with_scale(&self, scale: f64) -> Self {
        Self::new(self.rotation, self.translation, scale)
    }

    /// `self ∘ other`: acts as `self(other(x))`.
    pub fn compose(&self, other: &Sim3) -> Sim3 {
        Sim3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
            scale: self.scale * other.scale,
        }
    }

    pub fn inverse(&self) -> Sim3 {
        let rt = self.rotation.inverse();
        let inv_s = 1.0 / self.scale;
        Sim3 {
            rotation: rt,
            translation: -(rt * self.translation) * inv_s,
            scale: inv_s,
        }
    }

    pub fn act(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    pub fn exp(xi: &Tangent7) -> Sim3 {
        let w = w_matrix(&xi.phi, xi.sigma);
        Sim3 {
            rotation: exp_so3(&xi.phi),
            translation: w * xi.rho,
            scale: xi.sigma.exp(),
        }
    }

    pub fn log(&self) -> Result<Tangent7, Sim3Error> {
        let phi = log_so3(&self.rotation)?;
        let sigma = self.scale.ln();
        let w = w_matrix(&phi, sigma);
        // W is invertible whenever θ < π.
        let rho = w
            .lu()
            .solve(&self.translation)
            .ok_or(Sim3Error::RotationNearPi { angle: phi.norm() })?;
        Ok(Tangent7::new(rho, phi, sigma))
    }

    /// Adjoint `Ad_g` with `exp(Ad_g ξ) = g·exp(ξ)·g⁻¹`:
    ///
    /// ```text
    /// [ sR  [t]×R  −t ]
    /// [ 0     R     0 ]
    /// [ 0     0     1 ]
    /// ```
    pub fn adjoint(&self) -> Matrix7 {
        let r = self.rotation.matrix();
        let mut ad = Matrix7::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r * self.scale));
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&self.translation) * r));
        ad.fixed_view_mut::<3, 1>(0, 6).copy_from(&(-self.translation));
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
        ad[(6, 6)] = 1.0;
        ad
    }

    /// Right-multiplicative update `self · exp(δ)`, re-orthonormalising the rotation.
    pub fn retract(&self, delta: &Tangent7) -> Sim3 {
        let mut out = self.compose(&delta.exp());
        out.rotation.renormalize();
        out
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }
}

impl fmt::Display for Sim3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&self.rotation);
        write!(
            f,
            "Sim3(t=[{:.6}, {:.6}, {:.6}], q=[{:.6}, {:.6}, {:.6}, {:.6}], s={:.6})",
            self.translation.x,
            self.translation.y,
            self.translation.z,
            q.i,
            q.j,
            q.k,
            q.w,
            self.scale
        )
    }
}

impl std::ops::Mul for Sim3 {
    type Output = Sim3;

    fn mul(self, rhs: Sim3) -> Sim3 {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&Sim3> for &Sim3 {
    type Output = Sim3;

    fn mul(self, rhs: &Sim3) -> Sim3 {
        self.compose(rhs)
    }
}
