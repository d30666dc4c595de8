//! Deterministic synthetic stand-in for a two-view network frontend.
//!
//! A [`Scene`] holds world landmarks and a camera trajectory. For a pair of
//! views, [`simulate_pair`] emits what the network would: one pointmap per view
//! (in that view's camera frame), the relative pose `T_ij` mapping frame `i`
//! into frame `j`, and a confidence. Both pointmaps and the translation of
//! `T_ij` share one random per-pass scale factor.
//!
//! A view's pointmap always covers the same landmarks (every landmark visible
//! from that view, in id order), so pointmaps of one view from different passes
//! share a grid and can be compared pixel by pixel.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim3::{exp_so3, Sim3};
use crate::two_view::{Correspondence, LocalPointmap, Pixel, RelativePose};

/// Minimum number of landmarks per view and per co-visible pair.
pub const MIN_OBSERVATIONS: usize = 8;

const MIN_DEPTH: f64 = 0.5;
const MAX_DEPTH: f64 = 6.0;
const TAN_HALF_FOV_X: f64 = 0.75;
const TAN_HALF_FOV_Y: f64 = 0.6;
const FRAME_INTERVAL: f64 = 0.1;

// RNG stream ids kept apart from pass ids, which start at 0.
const SCENE_STREAM: u64 = u64::MAX;
const LOOP_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrontendError {
    #[error("need at least {MIN_OBSERVATIONS} landmarks, got {0}")]
    InsufficientLandmarks(usize),
    #[error("need at least 2 views, got {0}")]
    InsufficientViews(usize),
    #[error("views {0} and {1} share {2} landmarks, need {MIN_OBSERVATIONS}")]
    InsufficientOverlap(usize, usize, usize),
    #[error("view {0} is not in the scene")]
    UnknownView(usize),
    #[error("a pair needs two distinct views, got {0} twice")]
    SameView(usize),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Circle,
    FigureEight,
    Corridor,
    RandomWalk,
}

impl std::str::FromStr for Preset {
    type Err = FrontendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "circle" => Ok(Preset::Circle),
            "figure-eight" => Ok(Preset::FigureEight),
            "corridor" => Ok(Preset::Corridor),
            "random-walk" => Ok(Preset::RandomWalk),
            other => Err(FrontendError::UnknownPreset(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub id: usize,
    /// World-from-camera, scale 1.
    pub pose: Sim3,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub landmarks: Vec<Vector3<f64>>,
    pub views: Vec<View>,
    /// Sorted landmark ids visible from each view.
    visible: Vec<Vec<usize>>,
}

impl Scene {
    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn visible(&self, view: usize) -> &[usize] {
        &self.visible[view]
    }

    /// Ground-truth `T_ij`, mapping camera-`i` coordinates into camera `j`.
    pub fn true_relative(&self, i: usize, j: usize) -> Sim3 {
        self.views[j].pose.inverse() * self.views[i].pose
    }

    /// Landmark ids visible from both views, in increasing order.
    pub fn covisible(&self, i: usize, j: usize) -> Vec<usize> {
        let (a, b) = (&self.visible[i], &self.visible[j]);
        let (mut x, mut y) = (0, 0);
        let mut out = Vec::new();
        while x < a.len() && y < b.len() {
            match a[x].cmp(&b[y]) {
                std::cmp::Ordering::Less => x += 1,
                std::cmp::Ordering::Greater => y += 1,
                std::cmp::Ordering::Equal => {
                    out.push(a[x]);
                    x += 1;
                    y += 1;
                }
            }
        }
        out
    }

    fn check_view(&self, v: usize) -> Result<(), FrontendError> {
        if v < self.views.len() {
            Ok(())
        } else {
            Err(FrontendError::UnknownView(v))
        }
    }
}

fn in_frustum(pose: &Sim3, x: &Vector3<f64>) -> bool {
    let p = pose.inverse().act(x);
    p.z >= MIN_DEPTH
        && p.z <= MAX_DEPTH
        && p.x.abs() <= TAN_HALF_FOV_X * p.z
        && p.y.abs() <= TAN_HALF_FOV_Y * p.z
}

fn sample_in_frustum(rng: &mut impl Rng, pose: &Sim3) -> Vector3<f64> {
    let z = rng.random_range(MIN_DEPTH + 0.5..MAX_DEPTH - 0.5);
    let x = rng.random_range(-0.9..0.9) * TAN_HALF_FOV_X * z;
    let y = rng.random_range(-0.9..0.9) * TAN_HALF_FOV_Y * z;
    pose.act(&Vector3::new(x, y, z))
}

/// Camera at `position` with optical axis along `forward`; world z is up and
/// the camera y axis points down.
fn look_along(position: Vector3<f64>, forward: Vector3<f64>) -> Sim3 {
    let z = forward.normalize();
    let down = -Vector3::z();
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    let m = nalgebra::Matrix3::from_columns(&[x, y, z]);
    Sim3::from_rigid(Rotation3::from_matrix_unchecked(m), position)
}

fn trajectory(preset: Preset, n: usize, rng: &mut impl Rng) -> Vec<Sim3> {
    let tau = std::f64::consts::TAU;
    match preset {
        Preset::Circle => {
            let radius = 4.0;
            (0..n)
                .map(|k| {
                    let a = tau * k as f64 / n as f64;
                    let p = Vector3::new(radius * a.cos(), radius * a.sin(), 0.2 * (2.0 * a).sin());
                    let target = Vector3::new(0.0, 0.0, 0.3 * (3.0 * a).cos());
                    look_along(p, target - p)
                })
                .collect()
        }
        Preset::FigureEight => {
            let a = 4.0;
            (0..n)
                .map(|k| {
                    let t = tau * k as f64 / n as f64;
                    let p = Vector3::new(a * t.sin(), a * t.sin() * t.cos(), 0.2 * (3.0 * t).sin());
                    let d = Vector3::new(t.cos(), (2.0 * t).cos(), 0.1);
                    look_along(p, d)
                })
                .collect()
        }
        Preset::Corridor => (0..n)
            .map(|k| {
                let p = Vector3::new(0.5 * k as f64, 0.1 * (0.3 * k as f64).sin(), 0.0);
                look_along(p, Vector3::new(1.0, 0.15 * (0.2 * k as f64).cos(), 0.0))
            })
            .collect(),
        Preset::RandomWalk => {
            let mut heading: f64 = rng.random_range(0.0..tau);
            let mut p = Vector3::zeros();
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(look_along(p, Vector3::new(heading.cos(), heading.sin(), 0.0)));
                heading += rng.random_range(-0.25..0.25);
                p += 0.4 * Vector3::new(heading.cos(), heading.sin(), 0.0);
                p.z = 0.2 * rng.random_range(-1.0..1.0);
            }
            out
        }
    }
}

/// Builds a scene whose landmarks all lie inside some camera's field of view.
///
/// Landmark `k` is sampled in the frustum of view `k mod num_views`; views that
/// still see fewer than [`MIN_OBSERVATIONS`] landmarks get extra ones, so the
/// final landmark count can exceed `num_landmarks`.
pub fn generate_scene(
    preset: Preset,
    num_views: usize,
    num_landmarks: usize,
    seed: u64,
) -> Result<Scene, FrontendError> {
    if num_views < 2 {
        return Err(FrontendError::InsufficientViews(num_views));
    }
    if num_landmarks < MIN_OBSERVATIONS {
        return Err(FrontendError::InsufficientLandmarks(num_landmarks));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SCENE_STREAM);
    let poses = trajectory(preset, num_views, &mut rng);
    let mut landmarks: Vec<Vector3<f64>> = (0..num_landmarks)
        .map(|k| sample_in_frustum(&mut rng, &poses[k % num_views]))
        .collect();
    for pose in &poses {
        let seen = landmarks.iter().filter(|x| in_frustum(pose, x)).count();
        for _ in seen..MIN_OBSERVATIONS {
            landmarks.push(sample_in_frustum(&mut rng, pose));
        }
    }
    let visible = poses
        .iter()
        .map(|pose| {
            landmarks
                .iter()
                .enumerate()
                .filter(|(_, x)| in_frustum(pose, x))
                .map(|(k, _)| k)
                .collect()
        })
        .collect();
    let views = poses
        .into_iter()
        .enumerate()
        .map(|(id, pose)| View {
            id,
            pose,
            timestamp: id as f64 * FRAME_INTERVAL,
        })
        .collect();
    Ok(Scene {
        landmarks,
        views,
        visible,
    })
}

/// Maps an injected pose error to a confidence `exp(−error/β)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceModel {
    pub beta: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        Self { beta: 0.5 }
    }
}

impl ConfidenceModel {
    pub fn confidence(&self, error: f64) -> f64 {
        (-error / self.beta).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Per-axis rotation noise, radians.
    pub sigma_rot: f64,
    /// Per-axis translation noise as a fraction of the baseline length.
    pub sigma_trans: f64,
    /// Standard deviation of the log per-pass scale.
    pub sigma_scale: f64,
    /// Per-axis point noise, scene units.
    pub sigma_point: f64,
    pub loop_false_positive_rate: f64,
    pub confidence_model: ConfidenceModel,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_rot: 1f64.to_radians(),
            sigma_trans: 0.01,
            sigma_scale: 0.02,
            sigma_point: 0.002,
            loop_false_positive_rate: 0.0,
            confidence_model: ConfidenceModel::default(),
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self {
            sigma_rot: 0.0,
            sigma_trans: 0.0,
            sigma_scale: 0.0,
            sigma_point: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FrontendError> {
        let sigmas = [
            ("sigma_rot", self.sigma_rot),
            ("sigma_trans", self.sigma_trans),
            ("sigma_scale", self.sigma_scale),
            ("sigma_point", self.sigma_point),
        ];
        for (name, v) in sigmas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FrontendError::InvalidNoise(format!("{name} = {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.loop_false_positive_rate) {
            return Err(FrontendError::InvalidNoise(format!(
                "loop_false_positive_rate = {}",
                self.loop_false_positive_rate
            )));
        }
        if !(self.confidence_model.beta > 0.0) {
            return Err(FrontendError::InvalidNoise(format!(
                "confidence beta = {}",
                self.confidence_model.beta
            )));
        }
        Ok(())
    }

    /// Every sigma multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            sigma_rot: self.sigma_rot * factor,
            sigma_trans: self.sigma_trans * factor,
            sigma_scale: self.sigma_scale * factor,
            sigma_point: self.sigma_point * factor,
            ..*self
        }
    }

    fn pass_rng(&self, pass_id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(pass_id);
        rng
    }
}

/// One simulated forward pass on views `(view_i, view_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMeasurement {
    pub view_i: usize,
    pub view_j: usize,
    pub pointmap_i: LocalPointmap,
    pub pointmap_j: LocalPointmap,
    /// `T_ij`: camera-`i` coordinates into camera `j`, in this pass's scale.
    pub relative_pose: RelativePose,
    pub pass_id: u64,
}

/// What the simulator injected; for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTruth {
    /// Factor applied to both pointmaps and to the translation.
    pub scale: f64,
    /// Rotation error norm plus relative translation error norm.
    pub pose_error: f64,
    /// Co-visible landmarks as pixel pairs between the two pointmaps.
    pub correspondence: Correspondence,
}

fn gaussian(rng: &mut impl Rng, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    let d = Normal::new(0.0, sigma).expect("finite sigma");
    Vector3::new(d.sample(rng), d.sample(rng), d.sample(rng))
}

fn random_direction(rng: &mut impl Rng) -> Vector3<f64> {
    let v: [f64; 3] = UnitSphere.sample(rng);
    Vector3::from(v)
}

fn local_pointmap(
    scene: &Scene,
    view: usize,
    scale: f64,
    covisible: &[usize],
    confidence: f64,
    sigma_point: f64,
    rng: &mut impl Rng,
) -> LocalPointmap {
    let to_cam = scene.views[view].pose.inverse();
    let ids = scene.visible(view);
    let mut points = Vec::with_capacity(ids.len());
    let mut conf = Vec::with_capacity(ids.len());
    for &k in ids {
        points.push(to_cam.act(&scene.landmarks[k]) * scale + gaussian(rng, sigma_point));
        let shared = covisible.binary_search(&k).is_ok();
        let gain = if shared { 2.0 } else { 1.0 };
        conf.push(1.0 + gain * confidence * rng.random_range(0.5..1.0));
    }
    LocalPointmap::from_points(points, conf).expect("finite simulated points")
}

fn correspondence(scene: &Scene, i: usize, j: usize, shared: &[usize]) -> Correspondence {
    let pos = |view: usize, k: usize| scene.visible(view).binary_search(&k).expect("visible");
    Correspondence {
        pairs: shared
            .iter()
            .map(|&k| (Pixel::new(pos(i, k), 0), Pixel::new(pos(j, k), 0)))
            .collect(),
    }
}

/// Relative-pose perturbation: rotation and translation error vectors.
struct PoseError {
    rotation: Vector3<f64>,
    translation: Vector3<f64>,
}

fn emit(
    scene: &Scene,
    i: usize,
    j: usize,
    noise: &NoiseModel,
    pass_id: u64,
    rng: &mut ChaCha8Rng,
    err: PoseError,
) -> (PairMeasurement, PairTruth) {
    let scale = if noise.sigma_scale > 0.0 {
        Normal::new(0.0, noise.sigma_scale)
            .expect("finite sigma")
            .sample(rng)
            .exp()
    } else {
        1.0
    };
    let truth = scene.true_relative(i, j);
    let t = *truth.translation();
    let baseline = t.norm().max(1e-12);
    let pose_error = err.rotation.norm() + err.translation.norm() / baseline;
    let confidence = noise.confidence_model.confidence(pose_error);
    let rotation = exp_so3(&err.rotation) * truth.rotation();
    let translation = (t + err.translation) * scale;
    let relative_pose = RelativePose::new(rotation, translation, confidence).expect("confidence in [0,1]");

    let shared = scene.covisible(i, j);
    let pointmap_i = local_pointmap(scene, i, scale, &shared, confidence, noise.sigma_point, rng);
    let pointmap_j = local_pointmap(scene, j, scale, &shared, confidence, noise.sigma_point, rng);
    let m = PairMeasurement {
        view_i: i,
        view_j: j,
        pointmap_i,
        pointmap_j,
        relative_pose,
        pass_id,
    };
    let truth = PairTruth {
        scale,
        pose_error,
        correspondence: correspondence(scene, i, j, &shared),
    };
    (m, truth)
}

fn check_pair(scene: &Scene, i: usize, j: usize, noise: &NoiseModel) -> Result<(), FrontendError> {
    scene.check_view(i)?;
    scene.check_view(j)?;
    if i == j {
        return Err(FrontendError::SameView(i));
    }
    noise.validate()
}

/// Simulates one forward pass on an overlapping pair. Deterministic in
/// `(scene, noise, pass_id)`.
pub fn simulate_pair(
    scene: &Scene,
    view_i: usize,
    view_j: usize,
    noise: &NoiseModel,
    pass_id: u64,
) -> Result<(PairMeasurement, PairTruth), FrontendError> {
    check_pair(scene, view_i, view_j, noise)?;
    let shared = scene.covisible(view_i, view_j).len();
    if shared < MIN_OBSERVATIONS {
        return Err(FrontendError::InsufficientOverlap(view_i, view_j, shared));
    }
    let mut rng = noise.pass_rng(pass_id);
    let baseline = scene.true_relative(view_i, view_j).translation().norm();
    let err = PoseError {
        rotation: gaussian(&mut rng, noise.sigma_rot),
        translation: gaussian(&mut rng, noise.sigma_trans * baseline),
    };
    Ok(emit(scene, view_i, view_j, noise, pass_id, &mut rng, err))
}

/// Simulates a forward pass on a wrongly matched pair: the predicted pose is
/// off by a rotation of 0.4–1.2 rad and a translation error of 0.5–1.5
/// baselines. No overlap is required.
pub fn simulate_false_loop(
    scene: &Scene,
    view_i: usize,
    view_j: usize,
    noise: &NoiseModel,
    pass_id: u64,
) -> Result<(PairMeasurement, PairTruth), FrontendError> {
    check_pair(scene, view_i, view_j, noise)?;
    let mut rng = noise.pass_rng(pass_id);
    let baseline = scene.true_relative(view_i, view_j).translation().norm().max(0.1);
    let angle = rng.random_range(0.4..1.2);
    let rotation = random_direction(&mut rng) * angle;
    let translation = random_direction(&mut rng) * baseline * rng.random_range(0.5..1.5);
    Ok(emit(
        scene,
        view_i,
        view_j,
        noise,
        pass_id,
        &mut rng,
        PoseError {
            rotation,
            translation,
        },
    ))
}

/// Proximity rule that defines a true loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopProposal {
    pub max_distance: f64,
    /// Maximum relative rotation angle, radians.
    pub max_angle: f64,
    pub min_index_gap: usize,
}

impl Default for LoopProposal {
    fn default() -> Self {
        Self {
            max_distance: 1.3,
            max_angle: 0.6,
            min_index_gap: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopCandidate {
    pub view_i: usize,
    pub view_j: usize,
    /// Ground-truth label, for evaluation only.
    pub is_true_loop: bool,
}

impl LoopProposal {
    pub fn is_proximate(&self, scene: &Scene, i: usize, j: usize) -> bool {
        let rel = scene.true_relative(i, j);
        let a = *scene.views[i].pose.translation();
        let b = *scene.views[j].pose.translation();
        (a - b).norm() <= self.max_distance && rel.rotation_angle() <= self.max_angle
    }
}

/// Emulates a place-recognition front end. True loops are proximate pairs at
/// least `min_index_gap` apart that share enough landmarks; for each one, a
/// false candidate drawn from non-proximate distant pairs is added with
/// probability `loop_false_positive_rate`.
pub fn propose_loops(scene: &Scene, noise: &NoiseModel, proposal: &LoopProposal) -> Vec<LoopCandidate> {
    let n = scene.num_views();
    let mut out = Vec::new();
    for j in 0..n {
        for i in 0..j.saturating_sub(proposal.min_index_gap.saturating_sub(1)) {
            if j - i >= proposal.min_index_gap
                && proposal.is_proximate(scene, i, j)
                && scene.covisible(i, j).len() >= MIN_OBSERVATIONS
            {
                out.push(LoopCandidate {
                    view_i: i,
                    view_j: j,
                    is_true_loop: true,
                });
            }
        }
    }
    let rate = noise.loop_false_positive_rate;
    if rate <= 0.0 || n <= proposal.min_index_gap {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(LOOP_STREAM);
    let mut false_loops = Vec::new();
    for _ in 0..out.len() {
        if !rng.random_bool(rate) {
            continue;
        }
        for _ in 0..1000 {
            let i = rng.random_range(0..n - proposal.min_index_gap);
            let j = rng.random_range(i + proposal.min_index_gap..n);
            let taken = false_loops
                .iter()
                .any(|c: &LoopCandidate| c.view_i == i && c.view_j == j);
            if !taken && !proposal.is_proximate(scene, i, j) {
                false_loops.push(LoopCandidate {
                    view_i: i,
                    view_j: j,
                    is_true_loop: false,
                });
                break;
            }
        }
    }
    out.extend(false_loops);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scale::relative_scale;
    use crate::two_view::geometric_consistency_loss;

    #[test]
    fn scenes_are_deterministic() {
        for preset in [Preset::Circle, Preset::FigureEight, Preset::Corridor, Preset::RandomWalk] {
            let a = generate_scene(preset, 100, 300, 0).unwrap();
            let b = generate_scene(preset, 100, 300, 0).unwrap();
            assert_eq!(a, b);
            assert!(a.views.windows(2).all(|w| w[1].timestamp > w[0].timestamp));
            for v in 0..a.num_views() {
                assert!(a.visible(v).len() >= MIN_OBSERVATIONS, "{preset:?} view {v}");
            }
        }
        let c = generate_scene(Preset::Circle, 100, 300, 1).unwrap();
        assert_ne!(c, generate_scene(Preset::Circle, 100, 300, 0).unwrap());
    }

    #[test]
    fn scene_preconditions() {
        assert_eq!(
            generate_scene(Preset::Circle, 10, 7, 0),
            Err(FrontendError::InsufficientLandmarks(7))
        );
        assert!(generate_scene(Preset::Circle, 1, 50, 0).is_err());
    }

    #[test]
    fn poses_are_rotations() {
        let s = generate_scene(Preset::FigureEight, 40, 100, 3).unwrap();
        for v in &s.views {
            let r = v.pose.rotation().matrix();
            assert!((r.transpose() * r - nalgebra::Matrix3::identity()).norm() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn circle_closes_on_itself() {
        let s = generate_scene(Preset::Circle, 100, 300, 0).unwrap();
        let circumference = std::f64::consts::TAU * 4.0;
        let d = (s.views[0].pose.translation() - s.views[99].pose.translation()).norm();
        assert!(d < 0.05 * circumference);
        let loops = propose_loops(&s, &NoiseModel::zero(), &LoopProposal::default());
        assert!(loops.iter().any(|c| c.view_j - c.view_i > 50));
    }

    #[test]
    fn corridor_has_no_revisits() {
        let n = 80;
        let s = generate_scene(Preset::Corridor, n, 300, 0).unwrap();
        let rule = LoopProposal::default();
        for i in 0..n {
            for j in i + n / 2 + 1..n {
                let d = (s.views[i].pose.translation() - s.views[j].pose.translation()).norm();
                assert!(d > rule.max_distance);
            }
        }
        assert!(propose_loops(&s, &NoiseModel::zero(), &rule).is_empty());
    }

    #[test]
    fn zero_noise_pair_is_exact_and_consistent() {
        let s = generate_scene(Preset::Circle, 30, 200, 2).unwrap();
        let (m, truth) = simulate_pair(&s, 3, 5, &NoiseModel::zero(), 7).unwrap();
        assert_eq!(truth.scale, 1.0);
        assert_eq!(m.relative_pose.confidence(), 1.0);
        let gt = s.true_relative(3, 5);
        assert_eq!(m.relative_pose.rotation(), gt.rotation());
        assert_eq!(m.relative_pose.translation(), gt.translation());
        let l = geometric_consistency_loss(&m.pointmap_i, &m.pointmap_j, &m.relative_pose, &truth.correspondence, 1.0)
            .unwrap();
        assert!(l < 1e-12, "{l}");
    }

    #[test]
    fn per_pass_scale_is_shared() {
        let s = generate_scene(Preset::Circle, 30, 200, 2).unwrap();
        let noise = NoiseModel {
            sigma_scale: 0.2,
            ..NoiseModel::zero()
        };
        let (m, truth) = simulate_pair(&s, 4, 6, &noise, 11).unwrap();
        assert!((truth.scale - 1.0).abs() > 1e-6);
        // Scaled pose still explains the scaled pointmaps exactly.
        let l = geometric_consistency_loss(&m.pointmap_i, &m.pointmap_j, &m.relative_pose, &truth.correspondence, 1.0)
            .unwrap();
        assert!(l < 1e-10, "{l}");
        let gt_i = s.views[4].pose.inverse();
        for (k, &id) in s.visible(4).iter().enumerate() {
            let p = gt_i.act(&s.landmarks[id]) * truth.scale;
            assert!((m.pointmap_i.points()[k] - p).norm() < 1e-12);
        }
    }

    #[test]
    fn injected_scale_ratio_is_recoverable() {
        let s = generate_scene(Preset::Circle, 30, 200, 5).unwrap();
        let noise = NoiseModel {
            sigma_scale: 0.02,
            ..NoiseModel::zero()
        };
        let (a, ta) = simulate_pair(&s, 4, 5, &noise, 1).unwrap();
        let (b, tb) = simulate_pair(&s, 4, 6, &noise, 2).unwrap();
        let s_ab = relative_scale(&a.pointmap_i, &b.pointmap_i).unwrap();
        assert!((s_ab - ta.scale / tb.scale).abs() < 1e-6);
    }

    #[test]
    fn measurements_are_deterministic() {
        let s = generate_scene(Preset::Circle, 30, 200, 5).unwrap();
        let noise = NoiseModel::default();
        let a = simulate_pair(&s, 1, 2, &noise, 9).unwrap();
        let b = simulate_pair(&s, 1, 2, &noise, 9).unwrap();
        assert_eq!(a, b);
        let c = simulate_pair(&s, 1, 2, &noise, 10).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn false_loops_score_below_threshold() {
        let s = generate_scene(Preset::Circle, 60, 300, 1).unwrap();
        let noise = NoiseModel::default();
        for pass in 0..200 {
            let (m, _) = simulate_false_loop(&s, 0, 30, &noise, pass).unwrap();
            assert!(m.relative_pose.confidence() < 0.75);
        }
        let mut above = 0;
        for pass in 0..200 {
            let (m, _) = simulate_pair(&s, 10, 11, &noise, pass).unwrap();
            above += (m.relative_pose.confidence() > 0.75) as usize;
        }
        assert!(above >= 190, "{above}");
    }

    #[test]
    fn overlap_is_required() {
        let s = generate_scene(Preset::Corridor, 60, 200, 1).unwrap();
        assert!(matches!(
            simulate_pair(&s, 0, 59, &NoiseModel::zero(), 0),
            Err(FrontendError::InsufficientOverlap(0, 59, _))
        ));
        assert!(simulate_false_loop(&s, 0, 59, &NoiseModel::zero(), 0).is_ok());
        assert_eq!(
            simulate_pair(&s, 0, 60, &NoiseModel::zero(), 0),
            Err(FrontendError::UnknownView(60))
        );
    }

    #[test]
    fn false_candidate_rate() {
        // Per-candidate Bernoulli draws: mean over seeds should sit near rate·true.
        let s = generate_scene(Preset::Circle, 200, 400, 0).unwrap();
        let rule = LoopProposal {
            max_distance: 2.0,
            max_angle: 1.0,
            min_index_gap: 10,
        };
        let trues = propose_loops(&s, &NoiseModel::zero(), &rule).len();
        assert!(trues >= 20, "{trues}");
        let mut total = 0usize;
        for seed in 0..100 {
            let noise = NoiseModel {
                loop_false_positive_rate: 0.5,
                seed,
                ..NoiseModel::zero()
            };
            let c = propose_loops(&s, &noise, &rule);
            let f = c.iter().filter(|c| !c.is_true_loop).count();
            for cand in c.iter().filter(|c| !c.is_true_loop) {
                assert!(!rule.is_proximate(&s, cand.view_i, cand.view_j));
            }
            total += f;
        }
        let expected = 0.5 * trues as f64 * 100.0;
        let sd = (0.25 * trues as f64 * 100.0).sqrt();
        assert!((total as f64 - expected).abs() < 4.0 * sd, "{total} vs {expected}");
    }
}
