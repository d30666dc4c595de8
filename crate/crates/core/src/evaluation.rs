//! Trajectory and reconstruction accuracy metrics.

use std::fmt;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Isometry3, Matrix3, Quaternion, Translation3, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim3::Sim3;

/// Default timestamp association tolerance, seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;
/// Clouds smaller than this use brute-force nearest neighbours.
pub const BRUTE_FORCE_BELOW: usize = 2000;
/// Accepted deviation of a quaternion's norm from 1 before normalising.
const QUATERNION_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("need at least 3 non-collinear correspondences for alignment")]
    DegenerateConfiguration,
    #[error("point sets have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no timestamps could be associated")]
    NoAssociations,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("timestamps must be strictly increasing (entry {index})")]
    NonIncreasingTimestamps { index: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown alignment {0:?} (expected sim3, se3, or none)")]
    UnknownAlignment(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    stamps: Vec<f64>,
    poses: Vec<Isometry3<f64>>,
}

impl Trajectory {
    pub fn new(stamps: Vec<f64>, poses: Vec<Isometry3<f64>>) -> Result<Self, EvalError> {
        if stamps.len() != poses.len() {
            return Err(EvalError::LengthMismatch(stamps.len(), poses.len()));
        }
        if let Some(index) = stamps.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(EvalError::NonIncreasingTimestamps { index: index + 1 });
        }
        Ok(Self { stamps, poses })
    }

    /// Drops the scale of each pose.
    pub fn from_sim3(stamps: Vec<f64>, poses: &[Sim3]) -> Result<Self, EvalError> {
        let poses = poses
            .iter()
            .map(|p| {
                Isometry3::from_parts(
                    Translation3::from(*p.translation()),
                    UnitQuaternion::from_rotation_matrix(p.rotation()),
                )
            })
            .collect();
        Self::new(stamps, poses)
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn stamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn poses(&self) -> &[Isometry3<f64>] {
        &self.poses
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation.vector).collect()
    }

    /// Applies `g` to every pose (`g · pose`, scale acting on translations).
    pub fn transformed(&self, g: &Sim3) -> Self {
        let q = UnitQuaternion::from_rotation_matrix(g.rotation());
        let poses = self
            .poses
            .iter()
            .map(|p| {
                Isometry3::from_parts(Translation3::from(g.act(&p.translation.vector)), q * p.rotation)
            })
            .collect();
        Self {
            stamps: self.stamps.clone(),
            poses,
        }
    }
}

/// Writes `timestamp tx ty tz qx qy qz qw` lines.
pub fn write_tum(traj: &Trajectory) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, p) in traj.stamps.iter().zip(&traj.poses) {
        let v = p.translation.vector;
        let q = p.rotation.quaternion();
        s.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            t, v.x, v.y, v.z, q.i, q.j, q.k, q.w
        ));
    }
    s
}

pub fn read_tum(text: &str) -> Result<Trajectory, EvalError> {
    let mut stamps = Vec::new();
    let mut poses = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Parse { line, message };
        let f: Vec<&str> = body.split_whitespace().collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", f.len())));
        }
        let mut v = [0.0; 8];
        for (slot, word) in v.iter_mut().zip(&f) {
            *slot = word
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("bad number '{word}'")))?;
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        let norm = q.norm();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            return Err(err(format!("quaternion norm {norm} is not 1")));
        }
        if let Some(&prev) = stamps.last() {
            if !(v[0] > prev) {
                return Err(err(format!("timestamp {} does not increase", v[0])));
            }
        }
        stamps.push(v[0]);
        poses.push(Isometry3::from_parts(
            Translation3::new(v[1], v[2], v[3]),
            UnitQuaternion::from_quaternion(q),
        ));
    }
    Trajectory::new(stamps, poses)
}

/// Least-squares `g` minimising `Σ‖ref_k − g·est_k‖²`; scale fixed to 1
/// unless `with_scale`.
pub fn umeyama_align(est: &[Vector3<f64>], reference: &[Vector3<f64>], with_scale: bool) -> Result<Sim3, EvalError> {
    if est.len() != reference.len() {
        return Err(EvalError::LengthMismatch(est.len(), reference.len()));
    }
    let n = est.len();
    if n < 3 {
        return Err(EvalError::DegenerateConfiguration);
    }
    let inv_n = 1.0 / n as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_r = reference.iter().sum::<Vector3<f64>>() * inv_n;
    let mut cov = Matrix3::zeros();
    let mut spread_e = Matrix3::zeros();
    let mut spread_r = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let de = e - mu_e;
        let dr = r - mu_r;
        cov += dr * de.transpose();
        spread_e += de * de.transpose();
        spread_r += dr * dr.transpose();
        var_e += de.norm_squared();
    }
    cov *= inv_n;
    var_e *= inv_n;
    for spread in [spread_e, spread_r] {
        let sv = spread.symmetric_eigenvalues();
        let mut sorted = [sv[0], sv[1], sv[2]];
        sorted.sort_by(|a, b| b.total_cmp(a));
        if !(sorted[0] > 0.0) || sorted[1] <= 1e-12 * sorted[0] {
            return Err(EvalError::DegenerateConfiguration);
        }
    }
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(EvalError::DegenerateConfiguration)?;
    let v_t = svd.v_t.ok_or(EvalError::DegenerateConfiguration)?;
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // Flip the axis of the smallest singular value.
        let (k, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        d[(k, k)] = -1.0;
    }
    let r = u * d * v_t;
    let s = if with_scale {
        let trace: f64 = (0..3).map(|k| svd.singular_values[k] * d[(k, k)]).sum();
        trace / var_e
    } else {
        1.0
    };
    let t = mu_r - r * mu_e * s;
    Sim3::try_new(nalgebra::Rotation3::from_matrix_unchecked(r), t, s).map_err(|_| EvalError::DegenerateConfiguration)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    #[default]
    Sim3,
    Se3,
    None,
}

impl std::str::FromStr for Alignment {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim3" => Ok(Alignment::Sim3),
            "se3" => Ok(Alignment::Se3),
            "none" => Ok(Alignment::None),
            other => Err(EvalError::UnknownAlignment(other.to_string())),
        }
    }
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alignment::Sim3 => "sim3",
            Alignment::Se3 => "se3",
            Alignment::None => "none",
        })
    }
}

/// One-to-one greedy association of nearest timestamps within `tolerance`,
/// as `(est index, ref index)` pairs sorted by estimate index.
pub fn associate(est: &[f64], reference: &[f64], tolerance: f64) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (i, &t) in est.iter().enumerate() {
        let k = reference.partition_point(|&r| r < t);
        for j in [k.wrapping_sub(1), k] {
            if let Some(&r) = reference.get(j) {
                let dt = (r - t).abs();
                if dt <= tolerance {
                    candidates.push((dt, i, j));
                }
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_e = vec![false; est.len()];
    let mut used_r = vec![false; reference.len()];
    let mut out = Vec::new();
    for (_, i, j) in candidates {
        if !used_e[i] && !used_r[j] {
            used_e[i] = true;
            used_r[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    pub matches: Vec<(usize, usize)>,
    /// Applied to the estimate before measuring.
    pub alignment: Sim3,
    /// Per-match translational error, aligned.
    pub errors: Vec<f64>,
}

pub fn ate(est: &Trajectory, reference: &Trajectory, align: Alignment, tolerance: f64) -> Result<AteResult, EvalError> {
    let matches = associate(&est.stamps, &reference.stamps, tolerance);
    if matches.is_empty() {
        return Err(EvalError::NoAssociations);
    }
    let e: Vec<Vector3<f64>> = matches.iter().map(|&(i, _)| est.poses[i].translation.vector).collect();
    let r: Vec<Vector3<f64>> = matches.iter().map(|&(_, j)| reference.poses[j].translation.vector).collect();
    let alignment = match align {
        Alignment::Sim3 => umeyama_align(&e, &r, true)?,
        Alignment::Se3 => umeyama_align(&e, &r, false)?,
        Alignment::None => Sim3::identity(),
    };
    let errors: Vec<f64> = e.iter().zip(&r).map(|(e, r)| (alignment.act(e) - r).norm()).collect();
    let rmse = (errors.iter().map(|x| x * x).sum::<f64>() / errors.len() as f64).sqrt();
    Ok(AteResult {
        rmse,
        matches,
        alignment,
        errors,
    })
}

/// ATE RMSE with the default association tolerance.
pub fn ate_rmse(est: &Trajectory, reference: &Trajectory, align: Alignment) -> Result<f64, EvalError> {
    ate(est, reference, align, ASSOCIATION_TOLERANCE).map(|r| r.rmse)
}

/// Distance from each query point to its nearest neighbour in `cloud`.
pub fn nearest_distances(queries: &[Vector3<f64>], cloud: &[Vector3<f64>]) -> Vec<f64> {
    if cloud.is_empty() {
        return vec![f64::INFINITY; queries.len()];
    }
    if cloud.len() < BRUTE_FORCE_BELOW {
        return queries
            .par_iter()
            .map(|q| cloud.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
            .collect();
    }
    let entries: Vec<[f64; 3]> = cloud.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree = ImmutableKdTree::new_from_slice(&entries).expect("finite points");
    queries
        .par_iter()
        .map(|q| {
            tree.query(&[q.x, q.y, q.z])
                .nearest_one::<SquaredEuclidean<f64>>()
                .execute()
                .distance
                .sqrt()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceStatistic {
    #[default]
    Rmse,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionMetrics {
    /// Fused-to-reference nearest distances.
    pub accuracy: f64,
    /// Reference-to-fused nearest distances.
    pub completeness: f64,
    /// Mean of accuracy and completeness.
    pub chamfer: f64,
}

fn summarize(d: &[f64], stat: DistanceStatistic) -> f64 {
    let n = d.len() as f64;
    match stat {
        DistanceStatistic::Rmse => (d.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
        DistanceStatistic::Mean => d.iter().sum::<f64>() / n,
    }
}

/// Both clouds must already share a frame.
pub fn reconstruction_metrics(
    fused: &[Vector3<f64>],
    reference: &[Vector3<f64>],
    stat: DistanceStatistic,
) -> Result<ReconstructionMetrics, EvalError> {
    if fused.is_empty() || reference.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let accuracy = summarize(&nearest_distances(fused, reference), stat);
    let completeness = summarize(&nearest_distances(reference, fused), stat);
    Ok(ReconstructionMetrics {
        accuracy,
        completeness,
        chamfer: 0.5 * (accuracy + completeness),
    })
}
