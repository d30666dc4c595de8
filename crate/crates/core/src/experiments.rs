//! Scenario-driven pipeline runs and ablations on synthetic scenes.
//!
//! A run generates a scene, simulates the neighbour passes and loop
//! candidates, builds and optimizes the graph for the chosen variant, fuses
//! the cloud, and scores trajectory and reconstruction against ground truth.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error as ThisError;

use crate::evaluation::{
    ate, reconstruction_metrics, write_tum, Alignment, AteResult, DistanceStatistic, ReconstructionMetrics,
    Trajectory, ASSOCIATION_TOLERANCE,
};
use crate::frontend::{
    generate_scene, propose_loops, simulate_false_loop, simulate_pair, LoopProposal, NoiseModel, PairMeasurement,
    Preset, Scene,
};
use crate::fusion::{fuse, transform_pointmap, FusedPoint, Reduction};
use crate::optimizer::{optimize, optimize_problem, Factor, LmConfig, OptimizeReport};
use crate::pose_graph::{neighbor_pairs, GraphConfig, LoopDecision, PoseGraph};
use crate::scale::relative_scale;
use crate::sim3::Sim3;
use crate::two_view::LocalPointmap;
use crate::Error;

#[derive(Debug, ThisError)]
pub enum ExperimentError {
    #[error("unknown variant {0:?} (expected full, no_pgo, no_loops, single_node, or no_loop_filtering)")]
    UnknownVariant(String),
    #[error("unknown loop mode {0:?} (expected batch or incremental)")]
    UnknownLoopMode(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("no measurement covers consecutive views {0} and {1}")]
    MissingOdometry(usize, usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Chains consecutive relative poses without optimization.
    NoPgo,
    NoLoops,
    /// One node per view; pass scales are averaged per view.
    SingleNode,
    /// Accepts every loop candidate.
    NoLoopFiltering,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoPgo,
        Variant::NoLoops,
        Variant::SingleNode,
        Variant::NoLoopFiltering,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPgo => "no_pgo",
            Variant::NoLoops => "no_loops",
            Variant::SingleNode => "single_node",
            Variant::NoLoopFiltering => "no_loop_filtering",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ExperimentError::UnknownVariant(s.to_string()))
    }
}

/// When the graph is optimized relative to loop insertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopMode {
    /// Once, after every loop has been inserted.
    #[default]
    Batch,
    /// After the odometry passes and again after each accepted loop.
    Incremental,
}

impl std::str::FromStr for LoopMode {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch" => Ok(LoopMode::Batch),
            "incremental" => Ok(LoopMode::Incremental),
            other => Err(ExperimentError::UnknownLoopMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSettings {
    pub preset: Preset,
    pub num_views: usize,
    pub num_landmarks: usize,
}

impl Default for SceneSettings {
    fn default() -> Self {
        Self {
            preset: Preset::Circle,
            num_views: 60,
            num_landmarks: 600,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopSettings {
    pub enabled: bool,
    pub mode: LoopMode,
    pub proposal: LoopProposal,
}

impl Default for LoopSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: LoopMode::Batch,
            proposal: LoopProposal::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSettings {
    pub reduction: Reduction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub align: Alignment,
    pub statistic: DistanceStatistic,
    /// Timestamp association tolerance, seconds.
    pub tolerance: f64,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            align: Alignment::Sim3,
            statistic: DistanceStatistic::Rmse,
            tolerance: ASSOCIATION_TOLERANCE,
        }
    }
}

/// Complete description of a run. `seed` drives the scene and all noise;
/// `noise.seed` is overwritten by it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub variant: Variant,
    pub scene: SceneSettings,
    pub noise: NoiseModel,
    pub graph: GraphConfig,
    pub loops: LoopSettings,
    pub optimizer: LmConfig,
    pub fusion: FusionSettings,
    pub evaluation: EvaluationSettings,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ExperimentError::Scenario(e.to_string()))?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Scenario(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| ExperimentError::Scenario(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..*self }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.noise.validate()?;
        self.graph.validate()?;
        self.optimizer.validate()?;
        if !(self.evaluation.tolerance >= 0.0) {
            return Err(ExperimentError::Scenario(format!(
                "evaluation.tolerance = {} must be non-negative",
                self.evaluation.tolerance
            ))
            .into());
        }
        Ok(())
    }

    fn seeded_noise(&self) -> NoiseModel {
        NoiseModel {
            seed: self.seed,
            ..self.noise
        }
    }
}

/// Outcome of one loop candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopRecord {
    pub view_i: usize,
    pub view_j: usize,
    pub is_true_loop: bool,
    pub confidence: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub estimate: Trajectory,
    pub ground_truth: Trajectory,
    pub ate: AteResult,
    /// One report per optimization call, in order.
    pub reports: Vec<OptimizeReport>,
    pub cloud: Vec<FusedPoint>,
    pub reconstruction: ReconstructionMetrics,
    pub loops: Vec<LoopRecord>,
    /// Absent for the variants that do not build the multi-node graph.
    pub graph: Option<PoseGraph>,
}

impl RunResult {
    pub fn loop_edges(&self) -> usize {
        self.loops.iter().filter(|l| l.accepted).count()
    }

    pub fn iterations(&self) -> usize {
        self.reports.iter().map(|r| r.iterations).sum()
    }

    /// `key=value` lines.
    pub fn metrics(&self) -> String {
        let false_accepted = self.loops.iter().filter(|l| l.accepted && !l.is_true_loop).count();
        let final_cost = self.reports.last().map_or(0.0, |r| r.final_cost);
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        line("variant", self.variant.to_string());
        line("seed", self.seed.to_string());
        line("ate_rmse", format!("{:.9}", self.ate.rmse));
        line("matched", self.ate.matches.len().to_string());
        line("accuracy", format!("{:.9}", self.reconstruction.accuracy));
        line("completeness", format!("{:.9}", self.reconstruction.completeness));
        line("chamfer", format!("{:.9}", self.reconstruction.chamfer));
        line("points", self.cloud.len().to_string());
        line("loop_candidates", self.loops.len().to_string());
        line("loop_edges", self.loop_edges().to_string());
        line("false_loops_accepted", false_accepted.to_string());
        line("iterations", self.iterations().to_string());
        line("final_cost", format!("{final_cost:e}"));
        s
    }

    /// Optimizer reports followed by a loop summary.
    pub fn report(&self) -> String {
        let mut s = String::new();
        if self.reports.is_empty() {
            s.push_str("optimization disabled\n");
        }
        for (k, r) in self.reports.iter().enumerate() {
            s.push_str(&format!("optimization {k}\n{r}\n"));
        }
        for l in &self.loops {
            s.push_str(&format!(
                "loop {} {} confidence={:.6} {}\n",
                l.view_i,
                l.view_j,
                l.confidence,
                if l.accepted { "accepted" } else { "rejected" }
            ));
        }
        s.push_str(&format!("loop_edges={}\n", self.loop_edges()));
        s
    }
}

/// Measurements shared by every variant of one seed.
struct Simulated {
    scene: Scene,
    odometry: Vec<PairMeasurement>,
    candidates: Vec<(PairMeasurement, bool)>,
}

fn simulate(scenario: &Scenario) -> Result<Simulated, Error> {
    let sc = &scenario.scene;
    let scene = generate_scene(sc.preset, sc.num_views, sc.num_landmarks, scenario.seed)?;
    let noise = scenario.seeded_noise();
    let mut pass_id = 0u64;
    let mut odometry = Vec::new();
    for (i, j) in neighbor_pairs(scene.num_views(), scenario.graph.neighbors) {
        odometry.push(simulate_pair(&scene, i, j, &noise, pass_id)?.0);
        pass_id += 1;
    }
    let mut candidates = Vec::new();
    for c in propose_loops(&scene, &noise, &scenario.loops.proposal) {
        let m = if c.is_true_loop {
            simulate_pair(&scene, c.view_i, c.view_j, &noise, pass_id)?.0
        } else {
            simulate_false_loop(&scene, c.view_i, c.view_j, &noise, pass_id)?.0
        };
        candidates.push((m, c.is_true_loop));
        pass_id += 1;
    }
    Ok(Simulated {
        scene,
        odometry,
        candidates,
    })
}

fn uses_loops(scenario: &Scenario) -> bool {
    scenario.loops.enabled && !matches!(scenario.variant, Variant::NoLoops | Variant::NoPgo)
}

/// Runs `scenario` for its own seed and variant.
pub fn run_pipeline(scenario: &Scenario) -> Result<RunResult, Error> {
    scenario.validate()?;
    let sim = simulate(scenario)?;
    let (poses, cloud, reports, loops, graph) = match scenario.variant {
        Variant::Full | Variant::NoLoops | Variant::NoLoopFiltering => run_graph(scenario, &sim)?,
        Variant::NoPgo => run_chain(&sim)?,
        Variant::SingleNode => run_single_node(scenario, &sim)?,
    };
    let stamps: Vec<f64> = sim.scene.views.iter().map(|v| v.timestamp).collect();
    let truth: Vec<Sim3> = sim.scene.views.iter().map(|v| v.pose).collect();
    let estimate = Trajectory::from_sim3(stamps.clone(), &poses)?;
    let ground_truth = Trajectory::from_sim3(stamps, &truth)?;
    let ev = &scenario.evaluation;
    let ate = ate(&estimate, &ground_truth, ev.align, ev.tolerance)?;
    let aligned: Vec<Vector3<f64>> = cloud.iter().map(|p| ate.alignment.act(&p.position)).collect();
    let reconstruction = reconstruction_metrics(&aligned, &sim.scene.landmarks, ev.statistic)?;
    Ok(RunResult {
        variant: scenario.variant,
        seed: scenario.seed,
        estimate,
        ground_truth,
        ate,
        reports,
        cloud,
        reconstruction,
        loops,
        graph,
    })
}

type VariantOutput = (
    Vec<Sim3>,
    Vec<FusedPoint>,
    Vec<OptimizeReport>,
    Vec<LoopRecord>,
    Option<PoseGraph>,
);

fn run_graph(scenario: &Scenario, sim: &Simulated) -> Result<VariantOutput, Error> {
    let mut graph = PoseGraph::new(scenario.graph)?;
    let mut used: Vec<PairMeasurement> = Vec::new();
    for m in &sim.odometry {
        graph.ingest_pair(m)?;
        used.push(m.clone());
    }
    let incremental = scenario.loops.mode == LoopMode::Incremental;
    let mut reports = Vec::new();
    if incremental {
        reports.push(optimize(&mut graph, &scenario.optimizer)?);
    }
    let mut loops = Vec::new();
    if uses_loops(scenario) {
        for (m, is_true_loop) in &sim.candidates {
            let accepted = if scenario.variant == Variant::NoLoopFiltering {
                graph.insert_loop(m)?;
                true
            } else {
                graph.try_close_loop(m, scenario.graph.loop_threshold)? == LoopDecision::Accepted
            };
            loops.push(loop_record(m, *is_true_loop, accepted));
            if accepted {
                used.push(m.clone());
                if incremental {
                    reports.push(optimize(&mut graph, &scenario.optimizer)?);
                }
            }
        }
    }
    if !incremental {
        reports.push(optimize(&mut graph, &scenario.optimizer)?);
    }
    let cloud = fuse(&graph, &used, scenario.fusion.reduction)?;
    let poses = (0..sim.scene.num_views())
        .map(|v| graph.hub(v).map(|n| n.pose))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| ExperimentError::Scenario("a view has no node".into()))?;
    Ok((poses, cloud, reports, loops, Some(graph)))
}

fn loop_record(m: &PairMeasurement, is_true_loop: bool, accepted: bool) -> LoopRecord {
    LoopRecord {
        view_i: m.view_i,
        view_j: m.view_j,
        is_true_loop,
        confidence: m.relative_pose.confidence(),
        accepted,
    }
}

fn odometry_between<'a>(sim: &'a Simulated, i: usize) -> Result<&'a PairMeasurement, ExperimentError> {
    sim.odometry
        .iter()
        .find(|m| m.view_i == i && m.view_j == i + 1)
        .ok_or(ExperimentError::MissingOdometry(i, i + 1))
}

/// Accumulates the first measurement of each consecutive pair.
fn run_chain(sim: &Simulated) -> Result<VariantOutput, Error> {
    let n = sim.scene.num_views();
    let mut poses = vec![Sim3::identity()];
    let mut cloud = Vec::new();
    for i in 0..n - 1 {
        let m = odometry_between(sim, i)?;
        let next = poses[i] * m.relative_pose.transform().inverse();
        cloud.extend(transform_pointmap(&m.pointmap_i, &poses[i], i));
        if i + 1 == n - 1 {
            cloud.extend(transform_pointmap(&m.pointmap_j, &next, i + 1));
        }
        poses.push(next);
    }
    Ok((poses, cloud, Vec::new(), Vec::new(), None))
}

/// Factor for one pass between single-node views, with the translation
/// rescaled from the pass's units to the mean of the two views' units.
fn single_node_factor(scenario: &Scenario, m: &PairMeasurement, a_i: f64, a_j: f64) -> Factor {
    let t = m.relative_pose.transform();
    let measurement = Sim3::new(*t.rotation(), t.translation() * (a_i * a_j).sqrt(), 1.0);
    Factor {
        from: m.view_i,
        to: m.view_j,
        measurement,
        information: scenario.graph.information.pose(m.relative_pose.confidence()),
    }
}

fn run_single_node(scenario: &Scenario, sim: &Simulated) -> Result<VariantOutput, Error> {
    let n = sim.scene.num_views();
    let mut used: Vec<&PairMeasurement> = sim.odometry.iter().collect();
    let mut loops = Vec::new();
    if uses_loops(scenario) {
        for (m, is_true_loop) in &sim.candidates {
            let accepted = m.relative_pose.confidence() > scenario.graph.loop_threshold;
            loops.push(loop_record(m, *is_true_loop, accepted));
            if accepted {
                used.push(m);
            }
        }
    }

    // Every pass's pointmap of a view, scaled against the view's first one.
    let mut per_view: Vec<Vec<(usize, &LocalPointmap, f64)>> = vec![Vec::new(); n];
    for (k, m) in used.iter().enumerate() {
        for (view, pm) in [(m.view_i, &m.pointmap_i), (m.view_j, &m.pointmap_j)] {
            let ratio = match per_view[view].first() {
                Some((_, first, _)) => relative_scale(first, pm).map_err(|source| {
                    crate::pose_graph::GraphError::Scale { view, source }
                })?,
                None => 1.0,
            };
            per_view[view].push((k, pm, ratio));
        }
    }
    // factor[k][side]: converts pass k's units to the view's geometric-mean units.
    let mut factor = vec![[1.0f64; 2]; used.len()];
    for (view, entries) in per_view.iter().enumerate() {
        let log_mean = entries.iter().map(|e| e.2.ln()).sum::<f64>() / entries.len().max(1) as f64;
        for &(k, _, ratio) in entries {
            let side = if used[k].view_i == view { 0 } else { 1 };
            factor[k][side] = ratio / log_mean.exp();
        }
    }

    let factors: Vec<Factor> = used
        .iter()
        .zip(&factor)
        .map(|(m, f)| single_node_factor(scenario, m, f[0], f[1]))
        .collect();
    let mut poses = vec![Sim3::identity(); n];
    let mut known = vec![false; n];
    known[0] = true;
    for f in &factors {
        if known[f.from] && !known[f.to] {
            poses[f.to] = poses[f.from] * f.measurement.inverse();
            known[f.to] = true;
        }
    }
    let mut reports = Vec::new();
    if scenario.loops.mode == LoopMode::Incremental {
        let odometry = &factors[..sim.odometry.len()];
        reports.push(optimize_problem(&mut poses, odometry, 0, &scenario.optimizer)?);
        for end in sim.odometry.len() + 1..=factors.len() {
            reports.push(optimize_problem(&mut poses, &factors[..end], 0, &scenario.optimizer)?);
        }
    } else {
        reports.push(optimize_problem(&mut poses, &factors, 0, &scenario.optimizer)?);
    }

    let mut cloud = Vec::new();
    for (view, entries) in per_view.iter().enumerate() {
        let best = entries
            .iter()
            .map(|&(k, pm, _)| {
                let side = if used[k].view_i == view { 0 } else { 1 };
                (scenario.fusion.reduction.apply(pm), pm, factor[k][side])
            })
            .fold(None, |acc: Option<(f64, &LocalPointmap, f64)>, e| match acc {
                Some(a) if a.0 >= e.0 => Some(a),
                _ => Some(e),
            });
        if let Some((_, pm, f)) = best {
            cloud.extend(transform_pointmap(&pm.scaled(f), &poses[view], view));
        }
    }
    Ok((poses, cloud, reports, loops, None))
}

/// Per-seed runs of one variant.
#[derive(Debug, Clone)]
pub struct Ablation {
    pub variant: Variant,
    pub runs: Vec<RunResult>,
}

impl Ablation {
    pub fn ate_values(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.ate.rmse).collect()
    }

    pub fn median_ate(&self) -> f64 {
        median(&self.ate_values())
    }

    pub fn mean_ate(&self) -> f64 {
        let v = self.ate_values();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Median of `values`; NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Runs `variant` of `scenario` once per seed, in parallel. Results keep the
/// order of `seeds`.
pub fn run_ablation(scenario: &Scenario, variant: Variant, seeds: &[u64]) -> Result<Ablation, Error> {
    let runs = seeds
        .par_iter()
        .map(|&seed| run_pipeline(&scenario.with_variant(variant).with_seed(seed)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Ablation { variant, runs })
}

/// Fixed seed list `0..count`.
pub fn default_seeds(count: u64) -> Vec<u64> {
    (0..count).collect()
}

/// Writes `summary.csv`, `statistics.csv`, `xy_<variant>.csv` for every
/// variant, and one aligned estimate per run as `traj_<variant>_<seed>.txt`.
pub fn emit_plot_data(ablations: &[Ablation], dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    let mut summary = String::from("variant,seed,ate_rmse,matched,loop_edges,iterations,chamfer\n");
    let mut stats = String::from("variant,seeds,median_ate,mean_ate,min_ate,max_ate\n");
    for a in ablations {
        for r in &a.runs {
            summary.push_str(&format!(
                "{},{},{:.9},{},{},{},{:.9}\n",
                a.variant,
                r.seed,
                r.ate.rmse,
                r.ate.matches.len(),
                r.loop_edges(),
                r.iterations(),
                r.reconstruction.chamfer
            ));
        }
        if !a.runs.is_empty() {
            let v = a.ate_values();
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            stats.push_str(&format!(
                "{},{},{:.9},{:.9},{:.9},{:.9}\n",
                a.variant,
                v.len(),
                a.median_ate(),
                a.mean_ate(),
                min,
                max
            ));
        }
    }
    fs::write(dir.join("summary.csv"), summary)?;
    fs::write(dir.join("statistics.csv"), stats)?;

    for variant in Variant::ALL {
        let mut xy = String::from("seed,timestamp,x_est,y_est,x_ref,y_ref,error\n");
        for r in ablations.iter().filter(|a| a.variant == variant).flat_map(|a| &a.runs) {
            let aligned = r.estimate.transformed(&r.ate.alignment);
            let est = aligned.positions();
            let reference = r.ground_truth.positions();
            for (&(i, j), e) in r.ate.matches.iter().zip(&r.ate.errors) {
                xy.push_str(&format!(
                    "{},{:.6},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                    r.seed,
                    r.estimate.stamps()[i],
                    est[i].x,
                    est[i].y,
                    reference[j].x,
                    reference[j].y,
                    e
                ));
            }
            fs::write(dir.join(format!("traj_{variant}_{}.txt", r.seed)), write_tum(&aligned))?;
        }
        fs::write(dir.join(format!("xy_{variant}.csv")), xy)?;
    }
    Ok(())
}
