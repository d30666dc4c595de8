//! Two-view frontend outputs and the training-loss terms defined over them.
//!
//! Relative poses follow one convention throughout the crate: `T_ij` maps a
//! point expressed in camera `i` into camera `j`, i.e. `P_j = R·P_i + t`.
//!
//! The losses here are evaluation-only scalars. They take predicted and
//! ground-truth quantities and never differentiate anything.

use nalgebra::{Matrix3, Rotation3, Vector3, SVD};
use thiserror::Error;

use crate::sim3::{vee, Sim3};

/// Weight of the log-confidence regulariser in the pointmap loss.
pub const ALPHA_POINT: f64 = 0.2;
/// Weight of the log-confidence regulariser in the pose loss.
pub const ALPHA_POSE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TwoViewError {
    #[error("pointmap has no valid pixels")]
    EmptyPointmap,
    #[error("confidence {value} at pixel {index} is not positive")]
    NonPositiveConfidence { index: usize, value: f64 },
    #[error("normalizer must be positive, got {0}")]
    NonPositiveNormalizer(f64),
    #[error("pose confidence must be in (0, 1] for the log term, got {0}")]
    ZeroConfidence(f64),
    #[error("matrix has {0} vanishing singular values; nearest rotation is not unique")]
    DegenerateMatrix(usize),
    #[error("grid dimensions do not match: {0}")]
    DimensionMismatch(String),
    #[error("pixel ({x}, {y}) is outside a {width}x{height} grid")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("relative pose confidence must lie in [0, 1], got {0}")]
    InvalidConfidence(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Pixel coordinate: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub x: usize,
    pub y: usize,
}

impl Pixel {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

/// Per-view grid of local 3D points with confidences and a validity mask.
///
/// Storage is row-major. Confidences must be finite and non-negative; losses
/// that take logarithms additionally require them to be positive where valid.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPointmap {
    width: usize,
    height: usize,
    points: Vec<Vector3<f64>>,
    confidence: Vec<f64>,
    valid: Vec<bool>,
}

impl LocalPointmap {
    pub fn new(
        width: usize,
        height: usize,
        points: Vec<Vector3<f64>>,
        confidence: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self, TwoViewError> {
        let n = width * height;
        if points.len() != n || confidence.len() != n || valid.len() != n {
            return Err(TwoViewError::DimensionMismatch(format!(
                "{width}x{height} grid with {} points, {} confidences, {} mask entries",
                points.len(),
                confidence.len(),
                valid.len()
            )));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(TwoViewError::NonFinite("points"));
        }
        if let Some((index, &value)) = confidence
            .iter()
            .enumerate()
            .find(|(_, c)| !(c.is_finite() && **c >= 0.0))
        {
            return Err(TwoViewError::NonPositiveConfidence { index, value });
        }
        Ok(Self {
            width,
            height,
            points,
            confidence,
            valid,
        })
    }

    /// A `n×1` pointmap with every pixel valid.
    pub fn from_points(points: Vec<Vector3<f64>>, confidence: Vec<f64>) -> Result<Self, TwoViewError> {
        let n = points.len();
        Self::new(n, 1, points, confidence, vec![true; n])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn index(&self, pixel: Pixel) -> Result<usize, TwoViewError> {
        if pixel.x >= self.width || pixel.y >= self.height {
            return Err(TwoViewError::OutOfBounds {
                x: pixel.x,
                y: pixel.y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(pixel.y * self.width + pixel.x)
    }

    pub fn same_shape(&self, other: &LocalPointmap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// `(point, confidence)` over valid pixels, in storage order.
    pub fn valid_entries(&self) -> impl Iterator<Item = (usize, &Vector3<f64>, f64)> + '_ {
        self.points
            .iter()
            .zip(&self.confidence)
            .zip(&self.valid)
            .enumerate()
            .filter(|(_, (_, v))| **v)
            .map(|(i, ((p, c), _))| (i, p, *c))
    }

    /// Copy with every point multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| p * factor).collect(),
            ..self.clone()
        }
    }

    pub fn set_confidence(&mut self, index: usize, value: f64) {
        self.confidence[index] = value;
    }

    pub fn set_valid(&mut self, index: usize, valid: bool) {
        self.valid[index] = valid;
    }
}

/// Relative rigid transform `T_ij` (frame `i` into frame `j`) with a confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    transform: Sim3,
    confidence: f64,
}

impl RelativePose {
    pub fn new(
        rotation: Rotation3<f64>,
        translation: Vector3<f64>,
        confidence: f64,
    ) -> Result<Self, TwoViewError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(TwoViewError::InvalidConfidence(confidence));
        }
        Ok(Self {
            transform: Sim3::from_rigid(rotation, translation),
            confidence,
        })
    }

    pub fn identity() -> Self {
        Self {
            transform: Sim3::identity(),
            confidence: 1.0,
        }
    }

    /// Drops the scale of `transform`.
    pub fn from_sim3(transform: &Sim3, confidence: f64) -> Result<Self, TwoViewError> {
        Self::new(*transform.rotation(), *transform.translation(), confidence)
    }

    pub fn transform(&self) -> &Sim3 {
        &self.transform
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        self.transform.rotation()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        self.transform.translation()
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    /// `T_ji` with the same confidence.
    pub fn inverse(&self) -> Self {
        Self {
            transform: self.transform.inverse(),
            confidence: self.confidence,
        }
    }
}

/// Ground-truth pixel correspondences from view `i` into view `j`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Correspondence {
    pub pairs: Vec<(Pixel, Pixel)>,
}

/// Nearest rotation in Frobenius norm: `U·diag(1, 1, det(UVᵀ))·Vᵀ`.
pub fn svd_orthogonalize(m: &Matrix3<f64>) -> Result<Rotation3<f64>, TwoViewError> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(TwoViewError::NonFinite("matrix"));
    }
    let svd = SVD::new(*m, true, true);
    let vanishing = svd.singular_values.iter().filter(|s| **s < 1e-12).count();
    if vanishing >= 2 {
        return Err(TwoViewError::DegenerateMatrix(vanishing));
    }
    let mut u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    if (u * v_t).determinant() < 0.0 {
        // Flip the singular vector belonging to the smallest singular value.
        let k = svd.singular_values.imin();
        let col = -u.column(k);
        u.set_column(k, &col);
    }
    Ok(Rotation3::from_matrix_unchecked(u * v_t))
}

/// Mean distance to the origin over valid pixels.
pub fn pointmap_norm_factor(pm: &LocalPointmap) -> Result<f64, TwoViewError> {
    masked_norm_factor(pm, pm.valid())
}

fn masked_norm_factor(pm: &LocalPointmap, mask: &[bool]) -> Result<f64, TwoViewError> {
    let (sum, count) = pm
        .points()
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold((0.0, 0usize), |(s, c), (p, _)| (s + p.norm(), c + 1));
    if count == 0 {
        return Err(TwoViewError::EmptyPointmap);
    }
    Ok(sum / count as f64)
}

/// Confidence-weighted pointmap regression loss over both views of a pair.
///
/// For each view the sum runs over pixels valid in the ground truth; the
/// normalisers of prediction and ground truth are both taken over that set.
/// Confidence comes from the prediction.
pub fn pointmap_loss(
    pred: [&LocalPointmap; 2],
    gt: [&LocalPointmap; 2],
    point_conf_weight: f64,
) -> Result<f64, TwoViewError> {
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        if !p.same_shape(g) {
            return Err(TwoViewError::DimensionMismatch(format!(
                "prediction {}x{} vs ground truth {}x{}",
                p.width(),
                p.height(),
                g.width(),
                g.height()
            )));
        }
        let mask = g.valid();
        let pred_norm = masked_norm_factor(p, mask)?;
        let ref_norm = masked_norm_factor(g, mask)?;
        if pred_norm <= 0.0 {
            return Err(TwoViewError::NonPositiveNormalizer(pred_norm));
        }
        if ref_norm <= 0.0 {
            return Err(TwoViewError::NonPositiveNormalizer(ref_norm));
        }
        for (i, gp, _) in g.valid_entries() {
            let w = p.confidence()[i];
            if w <= 0.0 {
                return Err(TwoViewError::NonPositiveConfidence { index: i, value: w });
            }
            let diff = (gp / ref_norm - p.points()[i] / pred_norm) * w;
            total += diff.norm() - point_conf_weight * w.ln();
        }
    }
    Ok(total)
}

/// Geodesic angle `arccos((tr(R⁻¹R̂) − 1)/2)` between two rotations, in `[0, π]`.
///
/// Evaluated as `atan2(sin θ, cos θ)` with `sin θ` taken from the
/// antisymmetric part: identical on SO(3), but without the `√ε` error that
/// `arccos` has next to 0 and π. The cosine is clamped to `[−1, 1]`.
pub fn rotation_loss(r: &Rotation3<f64>, r_gt: &Rotation3<f64>) -> f64 {
    let rel = r.inverse() * r_gt;
    let m = rel.matrix();
    let cos = (0.5 * (m.trace() - 1.0)).clamp(-1.0, 1.0);
    let sin = vee(&(m - m.transpose())).norm() * 0.5;
    sin.atan2(cos)
}

/// `‖t/pred_norm − t_gt/ref_norm‖²`.
pub fn translation_loss(
    t: &Vector3<f64>,
    t_gt: &Vector3<f64>,
    pred_norm: f64,
    ref_norm: f64,
) -> Result<f64, TwoViewError> {
    if !(pred_norm > 0.0) {
        return Err(TwoViewError::NonPositiveNormalizer(pred_norm));
    }
    if !(ref_norm > 0.0) {
        return Err(TwoViewError::NonPositiveNormalizer(ref_norm));
    }
    Ok((t / pred_norm - t_gt / ref_norm).norm_squared())
}

/// Cycle term penalising `T_ij·T_ji ≠ I`; the translation part uses unit normalisers.
pub fn identity_loss(forward: &RelativePose, backward: &RelativePose) -> f64 {
    let r = forward.rotation() * backward.rotation();
    let t = forward.rotation() * backward.translation() + forward.translation();
    rotation_loss(&r, &Rotation3::identity()) + t.norm_squared()
}

/// Confidence-weighted relative pose loss `w·(L_R + L_t + L_id) − α·ln w`.
pub fn pose_loss(
    pred: &RelativePose,
    gt: &Sim3,
    pred_norm: f64,
    ref_norm: f64,
    reverse_pred: &RelativePose,
    pose_conf_weight: f64,
) -> Result<f64, TwoViewError> {
    let w = pred.confidence();
    if !(w > 0.0) {
        return Err(TwoViewError::ZeroConfidence(w));
    }
    let rot_term = rotation_loss(pred.rotation(), gt.rotation());
    let trans_term = translation_loss(pred.translation(), gt.translation(), pred_norm, ref_norm)?;
    let cycle_term = identity_loss(pred, reverse_pred);
    Ok(w * (rot_term + trans_term + cycle_term) - pose_conf_weight * w.ln())
}

/// `Σ_x ‖T_ij·P_i(x) − P_j(C_ij(x))‖ / pred_norm` over the given correspondences.
pub fn geometric_consistency_loss(
    pm_i: &LocalPointmap,
    pm_j: &LocalPointmap,
    forward: &RelativePose,
    corr: &Correspondence,
    pred_norm: f64,
) -> Result<f64, TwoViewError> {
    if !(pred_norm > 0.0) {
        return Err(TwoViewError::NonPositiveNormalizer(pred_norm));
    }
    let mut sum = 0.0;
    for &(src, dst) in &corr.pairs {
        let a = forward.transform().act(&pm_i.points()[pm_i.index(src)?]);
        let b = pm_j.points()[pm_j.index(dst)?];
        sum += (a - b).norm();
    }
    Ok(sum / pred_norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub pointmap: f64,
    pub pose: f64,
    pub geometric: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pointmap: f64,
    pub pose: f64,
    pub geometric: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pointmap: 1.0,
            pose: 1.0,
            geometric: 1.0,
        }
    }
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    weights.pointmap * parts.pointmap + weights.pose * parts.pose + weights.geometric * parts.geometric
}
