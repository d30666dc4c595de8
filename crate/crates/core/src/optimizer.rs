//! Levenberg–Marquardt over Sim(3) node poses.
//!
//! Minimises `Σ_e r_eᵀ Ω_e r_e` with `r_e = log(E_e · v_from⁻¹ · v_to)`.
//! Updates are right-multiplicative, `v ← v · exp(δ)`, and one anchor node is
//! held fixed to remove the global Sim(3) gauge freedom.
//!
//! With `r = log(E·A⁻¹·B)`:
//!
//! ```text
//! ∂r/∂δ_B =  J_r(r)⁻¹
//! ∂r/∂δ_A = −J_r(r)⁻¹ · Ad(B⁻¹·A)
//! ```

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose_graph::PoseGraph;
use crate::sim3::{Matrix7, Sim3, Sim3Error, Tangent7, Vector7};

/// Damping above this is treated as a failed solve.
const MAX_DAMPING: f64 = 1e16;
/// Edge count above which linearization runs on the thread pool.
const PARALLEL_EDGES: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizeError {
    #[error("normal equations stayed singular; damping tried: {damping_history:?}")]
    SingularNormalEquations { damping_history: Vec<f64> },
    #[error("{unreachable} node(s) are not connected to the anchor")]
    DisconnectedGraph { unreachable: usize },
    #[error("problem has no nodes")]
    Empty,
    #[error("anchor {anchor} is out of range for {nodes} nodes")]
    BadAnchor { anchor: usize, nodes: usize },
    #[error("edge {edge} references node {node}, but there are {nodes} nodes")]
    BadEdge { edge: usize, node: usize, nodes: usize },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Stop once the weighted residual norm `√(Σ rᵀΩr)` falls below this.
    pub residual_tolerance: f64,
    /// Stop once the largest step component falls below this.
    pub step_tolerance: f64,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub relative_decrease_tolerance: f64,
    /// Problems with fewer nodes use a dense factorization.
    pub dense_below: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 0.1,
            residual_tolerance: 1e-10,
            step_tolerance: 1e-10,
            relative_decrease_tolerance: 1e-12,
            dense_below: 50,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        for (name, v) in [
            ("initial_damping", self.initial_damping),
            ("damping_up", self.damping_up),
            ("damping_down", self.damping_down),
            ("residual_tolerance", self.residual_tolerance),
            ("step_tolerance", self.step_tolerance),
            ("relative_decrease_tolerance", self.relative_decrease_tolerance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(OptimizeError::InvalidConfig(format!("{name} = {v} must be positive")));
            }
        }
        if self.max_iterations == 0 {
            return Err(OptimizeError::InvalidConfig("max_iterations must be positive".into()));
        }
        if self.damping_up <= 1.0 || self.damping_down >= 1.0 {
            return Err(OptimizeError::InvalidConfig(
                "damping_up must exceed 1 and damping_down must be below 1".into(),
            ));
        }
        Ok(())
    }
}

/// A relative constraint between two nodes, by index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Factor {
    pub from: usize,
    pub to: usize,
    pub measurement: Sim3,
    pub information: Matrix7,
}

/// `log(E · v_from⁻¹ · v_to)`.
pub fn edge_residual(measurement: &Sim3, v_from: &Sim3, v_to: &Sim3) -> Result<Tangent7, Sim3Error> {
    (measurement * &(v_from.inverse() * *v_to)).log()
}

/// Residual and its Jacobians with respect to right perturbations of `v_from`
/// and `v_to`.
pub fn edge_jacobians(
    measurement: &Sim3,
    v_from: &Sim3,
    v_to: &Sim3,
) -> Result<(Tangent7, Matrix7, Matrix7), Sim3Error> {
    let r = edge_residual(measurement, v_from, v_to)?;
    let jr = r.right_jacobian();
    let jr_inv = jr.try_inverse().ok_or(Sim3Error::RotationNearPi {
        angle: r.phi.norm(),
    })?;
    let j_from = -jr_inv * (v_to.inverse() * *v_from).adjoint();
    Ok((r, j_from, jr_inv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ResidualTolerance,
    StepTolerance,
    RelativeDecrease,
    MaxIterations,
    /// Damping grew past its limit without finding a cheaper step.
    NoImprovement,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::ResidualTolerance => "residual_tolerance",
            Termination::StepTolerance => "step_tolerance",
            Termination::RelativeDecrease => "relative_decrease",
            Termination::MaxIterations => "max_iterations",
            Termination::NoImprovement => "no_improvement",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cost after this iteration.
    pub cost: f64,
    /// Damping used for the accepted (or last tried) step.
    pub damping: f64,
    pub step_norm: f64,
    pub rejected_steps: usize,
    pub skipped_edges: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
    pub trace: Vec<IterationRecord>,
    /// Edges skipped (near-π rotation) at the final estimate.
    pub skipped_edges: Vec<usize>,
}

impl fmt::Display for OptimizeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "iteration=0 cost={:e}", self.initial_cost)?;
        for r in &self.trace {
            writeln!(
                f,
                "iteration={} cost={:e} damping={:e} step={:e} rejected={} skipped_edges={}",
                r.iteration, r.cost, r.damping, r.step_norm, r.rejected_steps, r.skipped_edges
            )?;
        }
        writeln!(
            f,
            "termination={} iterations={} initial_cost={:e} final_cost={:e} skipped_edges={}",
            self.termination,
            self.iterations,
            self.initial_cost,
            self.final_cost,
            self.skipped_edges.len()
        )
    }
}

struct Linearized {
    r: Vector7,
    j_from: Matrix7,
    j_to: Matrix7,
}

fn cost_of(poses: &[Sim3], factors: &[Factor]) -> (f64, Vec<usize>) {
    let mut cost = 0.0;
    let mut skipped = Vec::new();
    for (k, f) in factors.iter().enumerate() {
        match edge_residual(&f.measurement, &poses[f.from], &poses[f.to]) {
            Ok(r) => {
                let r = r.to_vector();
                cost += (r.transpose() * f.information * r)[0];
            }
            Err(_) => skipped.push(k),
        }
    }
    (cost, skipped)
}

fn linearize(poses: &[Sim3], factors: &[Factor]) -> Vec<Option<Linearized>> {
    let one = |f: &Factor| {
        edge_jacobians(&f.measurement, &poses[f.from], &poses[f.to])
            .ok()
            .map(|(r, j_from, j_to)| Linearized {
                r: r.to_vector(),
                j_from,
                j_to,
            })
    };
    if factors.len() >= PARALLEL_EDGES {
        factors.par_iter().map(one).collect()
    } else {
        factors.iter().map(one).collect()
    }
}

/// Block-sparse normal equations `H δ = −g` over the free nodes.
struct Normal {
    /// Free-variable slot per node; `None` for the anchor.
    slot: Vec<Option<usize>>,
    blocks: std::collections::BTreeMap<(usize, usize), Matrix7>,
    g: DVector<f64>,
}

impl Normal {
    fn dim(&self) -> usize {
        self.g.len()
    }

    fn build(slot: &[Option<usize>], factors: &[Factor], lin: &[Option<Linearized>]) -> Self {
        let n = slot.len();
        let slot = slot.to_vec();
        let mut blocks = std::collections::BTreeMap::new();
        let mut g = DVector::zeros(7 * (n - 1));
        for (f, l) in factors.iter().zip(lin) {
            let Some(l) = l else { continue };
            let ends = [(slot[f.from], &l.j_from), (slot[f.to], &l.j_to)];
            let weighted_r = f.information * l.r;
            for &(a, ja) in &ends {
                let Some(a) = a else { continue };
                let jt_info = ja.transpose() * f.information;
                let mut seg = g.fixed_rows_mut::<7>(7 * a);
                seg += ja.transpose() * weighted_r;
                for &(b, jb) in &ends {
                    let Some(b) = b else { continue };
                    *blocks.entry((a, b)).or_insert_with(Matrix7::zeros) += jt_info * jb;
                }
            }
        }
        Self { slot, blocks, g }
    }

    fn damped_diagonal(&self, lambda: f64) -> Vec<f64> {
        vec![lambda; self.dim()]
    }

    fn solve_dense(&self, lambda: f64) -> Option<DVector<f64>> {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for (&(a, b), m) in &self.blocks {
            h.view_mut((7 * a, 7 * b), (7, 7)).copy_from(m);
        }
        for (k, d) in self.damped_diagonal(lambda).into_iter().enumerate() {
            h[(k, k)] += d;
        }
        h.cholesky().map(|c| c.solve(&(-&self.g)))
    }

    fn solve_sparse(&self, lambda: f64) -> Option<DVector<f64>> {
        let n = self.dim();
        let mut coo = CooMatrix::new(n, n);
        for (&(a, b), m) in &self.blocks {
            for i in 0..7 {
                for j in 0..7 {
                    let v = m[(i, j)];
                    if v != 0.0 || (a == b && i == j) {
                        coo.push(7 * a + i, 7 * b + j, v);
                    }
                }
            }
        }
        for (k, d) in self.damped_diagonal(lambda).into_iter().enumerate() {
            coo.push(k, k, d);
        }
        let csc = CscMatrix::from(&coo);
        let chol = CscCholesky::factor(&csc).ok()?;
        let rhs = DMatrix::from_column_slice(n, 1, (-&self.g).as_slice());
        let x = chol.solve(&rhs);
        let x = DVector::from_column_slice(x.as_slice());
        x.iter().all(|v| v.is_finite()).then_some(x)
    }
}

/// Free-variable slot per node from a reverse Cuthill-McKee ordering of the
/// node graph, which keeps the Cholesky factor narrow. The anchor gets none.
fn reverse_cuthill_mckee(n: usize, anchor: usize, factors: &[Factor]) -> Vec<Option<usize>> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for f in factors {
        if f.from != f.to && f.from != anchor && f.to != anchor {
            adj[f.from].push(f.to);
            adj[f.to].push(f.from);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
        a.dedup();
    }
    let mut seen = vec![false; n];
    seen[anchor] = true;
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&k| (adj[k].len(), k));
    for &start in &by_degree {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut next: Vec<usize> = adj[u].iter().copied().filter(|&v| !seen[v]).collect();
            next.sort_by_key(|&v| (adj[v].len(), v));
            for v in next {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    let mut slot = vec![None; n];
    for (k, &node) in order.iter().rev().enumerate() {
        slot[node] = Some(k);
    }
    slot
}

fn check_problem(poses: &[Sim3], factors: &[Factor], anchor: usize) -> Result<(), OptimizeError> {
    let n = poses.len();
    if n == 0 {
        return Err(OptimizeError::Empty);
    }
    if anchor >= n {
        return Err(OptimizeError::BadAnchor { anchor, nodes: n });
    }
    let mut adj = vec![Vec::new(); n];
    for (k, f) in factors.iter().enumerate() {
        for node in [f.from, f.to] {
            if node >= n {
                return Err(OptimizeError::BadEdge { edge: k, node, nodes: n });
            }
        }
        adj[f.from].push(f.to);
        adj[f.to].push(f.from);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![anchor];
    seen[anchor] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    let unreachable = seen.iter().filter(|s| !**s).count();
    if unreachable > 0 {
        return Err(OptimizeError::DisconnectedGraph { unreachable });
    }
    Ok(())
}

/// Runs LM on `poses` in place; `poses[anchor]` never changes.
pub fn optimize_problem(
    poses: &mut [Sim3],
    factors: &[Factor],
    anchor: usize,
    config: &LmConfig,
) -> Result<OptimizeReport, OptimizeError> {
    config.validate()?;
    check_problem(poses, factors, anchor)?;
    let n = poses.len();
    let (initial_cost, mut skipped) = cost_of(poses, factors);
    let mut cost = initial_cost;
    let mut trace = Vec::new();
    let mut lambda = config.initial_damping;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    let slot = reverse_cuthill_mckee(n, anchor, factors);

    if n == 1 || cost.sqrt() <= config.residual_tolerance {
        termination = Termination::ResidualTolerance;
    } else {
        for iteration in 1..=config.max_iterations {
            iterations = iteration;
            let lin = linearize(poses, factors);
            let normal = Normal::build(&slot, factors, &lin);
            let mut rejected = 0;
            let mut history = Vec::new();
            let mut solved_once = false;
            let outcome = loop {
                let solution = if n < config.dense_below {
                    normal.solve_dense(lambda)
                } else {
                    normal.solve_sparse(lambda)
                };
                match solution {
                    Some(delta) => {
                        solved_once = true;
                        let step_norm = delta.amax();
                        if step_norm < config.step_tolerance {
                            break Some((Termination::StepTolerance, step_norm, None));
                        }
                        let candidate: Vec<Sim3> = poses
                            .iter()
                            .zip(&normal.slot)
                            .map(|(p, s)| match s {
                                Some(s) => {
                                    let d = Vector7::from_column_slice(&delta.as_slice()[7 * s..7 * s + 7]);
                                    p.retract(&Tangent7::from_vector(&d))
                                }
                                None => *p,
                            })
                            .collect();
                        let (new_cost, new_skipped) = cost_of(&candidate, factors);
                        if new_cost < cost {
                            break Some((Termination::MaxIterations, step_norm, Some((candidate, new_cost, new_skipped))));
                        }
                        rejected += 1;
                    }
                    None => history.push(lambda),
                }
                lambda *= config.damping_up;
                if lambda > MAX_DAMPING {
                    if !solved_once {
                        return Err(OptimizeError::SingularNormalEquations {
                            damping_history: history,
                        });
                    }
                    break None;
                }
            };
            let Some((reason, step_norm, accepted)) = outcome else {
                termination = Termination::NoImprovement;
                trace.push(IterationRecord {
                    iteration,
                    cost,
                    damping: MAX_DAMPING,
                    step_norm: 0.0,
                    rejected_steps: rejected,
                    skipped_edges: skipped.len(),
                });
                break;
            };
            let Some((candidate, new_cost, new_skipped)) = accepted else {
                termination = reason;
                trace.push(IterationRecord {
                    iteration,
                    cost,
                    damping: lambda,
                    step_norm,
                    rejected_steps: rejected,
                    skipped_edges: skipped.len(),
                });
                break;
            };
            poses.copy_from_slice(&candidate);
            let decrease = cost - new_cost;
            let old_cost = cost;
            cost = new_cost;
            skipped = new_skipped;
            trace.push(IterationRecord {
                iteration,
                cost,
                damping: lambda,
                step_norm,
                rejected_steps: rejected,
                skipped_edges: skipped.len(),
            });
            lambda = (lambda * config.damping_down).max(1e-15);
            if cost.sqrt() <= config.residual_tolerance {
                termination = Termination::ResidualTolerance;
                break;
            }
            if step_norm < config.step_tolerance {
                termination = Termination::StepTolerance;
                break;
            }
            if decrease <= config.relative_decrease_tolerance * old_cost {
                termination = Termination::RelativeDecrease;
                break;
            }
        }
    }
    let skipped_set: BTreeSet<usize> = skipped.into_iter().collect();
    Ok(OptimizeReport {
        iterations,
        initial_cost,
        final_cost: cost,
        termination,
        trace,
        skipped_edges: skipped_set.into_iter().collect(),
    })
}

/// Factors of `graph` in node-index form.
pub fn graph_factors(graph: &PoseGraph) -> Vec<Factor> {
    graph
        .edges()
        .iter()
        .map(|e| Factor {
            from: graph.node_index(e.from).expect("edge endpoint exists"),
            to: graph.node_index(e.to).expect("edge endpoint exists"),
            measurement: e.measurement,
            information: e.information,
        })
        .collect()
}

/// Optimizes every node of `graph` with its anchor held fixed.
pub fn optimize(graph: &mut PoseGraph, config: &LmConfig) -> Result<OptimizeReport, OptimizeError> {
    let anchor = graph.anchor().ok_or(OptimizeError::Empty)?;
    if let Some(bad) = graph
        .edges()
        .iter()
        .find(|e| graph.node_index(e.from).is_none() || graph.node_index(e.to).is_none())
    {
        let missing = if graph.node_index(bad.from).is_none() { bad.from } else { bad.to };
        return Err(OptimizeError::InvalidConfig(format!("edge references missing node {missing}")));
    }
    let factors = graph_factors(graph);
    let mut poses: Vec<Sim3> = graph.nodes().iter().map(|n| n.pose).collect();
    let report = optimize_problem(&mut poses, &factors, anchor, config)?;
    for (k, p) in poses.into_iter().enumerate() {
        graph.set_pose(k, p);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim3::exp_so3;
    use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tangent(rng: &mut impl Rng, scale: f64) -> Tangent7 {
        let v = Vector7::from_fn(|_, _| rng.random_range(-1.0..1.0) * scale);
        Tangent7::from_vector(&v)
    }

    fn rand_sim3(rng: &mut impl Rng) -> Sim3 {
        let mut t = rand_tangent(rng, 1.0);
        t.phi *= 1.5;
        t.sigma *= 0.5;
        t.rho *= 3.0;
        t.exp()
    }

    fn to_matrix(t: &Sim3) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(t.rotation().matrix() * t.scale()));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(t.translation());
        m
    }

    /// Matrix exponential by scaling and squaring of a Taylor series.
    fn expm(a: &Matrix4<f64>) -> Matrix4<f64> {
        let squarings = (a.norm().max(1e-300).log2().ceil().max(0.0) as i32) + 4;
        let b = a / 2f64.powi(squarings);
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..30 {
            term = term * b / k as f64;
            sum += term;
        }
        for _ in 0..squarings {
            sum = sum * sum;
        }
        sum
    }

    fn algebra(rho: &Vector3<f64>, phi: &Vector3<f64>, sigma: f64) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        let h = Matrix3::new(0.0, -phi.z, phi.y, phi.z, 0.0, -phi.x, -phi.y, phi.x, 0.0);
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(h + Matrix3::identity() * sigma));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(rho);
        m
    }

    /// Residual through 4×4 matrices and a generic matrix exponential.
    fn residual_oracle(e: &Sim3, a: &Sim3, b: &Sim3) -> Vector7 {
        let m = to_matrix(e) * to_matrix(a).try_inverse().unwrap() * to_matrix(b);
        let sr = m.fixed_view::<3, 3>(0, 0).into_owned();
        let s = sr.determinant().cbrt();
        let rot = Rotation3::from_matrix_unchecked(sr / s);
        let phi = rot.scaled_axis();
        let sigma = s.ln();
        let mut w = Matrix3::zeros();
        for k in 0..3 {
            let ek = Vector3::ith(k, 1.0);
            let x = expm(&algebra(&ek, &phi, sigma));
            w.set_column(k, &x.fixed_view::<3, 1>(0, 3).into_owned());
        }
        let rho = w.lu().solve(&m.fixed_view::<3, 1>(0, 3).into_owned()).unwrap();
        Vector7::from_column_slice(&[rho.x, rho.y, rho.z, phi.x, phi.y, phi.z, sigma])
    }

    #[test]
    fn residual_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_sim3(&mut rng);
        let b = rand_sim3(&mut rng);
        let e = (a.inverse() * b).inverse();
        assert!(edge_residual(&e, &a, &b).unwrap().norm_inf() < 1e-12);
        assert_eq!(edge_residual(&Sim3::identity(), &a, &a).unwrap().norm_inf(), 0.0);
        for _ in 0..100 {
            let (e, a, b) = (rand_sim3(&mut rng), rand_sim3(&mut rng), rand_sim3(&mut rng));
            let Ok(r) = edge_residual(&e, &a, &b) else { continue };
            if r.phi.norm() > 3.0 {
                continue;
            }
            let o = residual_oracle(&e, &a, &b);
            assert!((r.to_vector() - o).amax() < 1e-10, "{}", (r.to_vector() - o).amax());
        }
    }

    fn finite_difference(e: &Sim3, a: &Sim3, b: &Sim3, wrt_from: bool) -> Matrix7 {
        let h = 1e-6;
        let mut j = Matrix7::zeros();
        for k in 0..7 {
            let d = Tangent7::from_vector(&Vector7::ith(k, h));
            let m = Tangent7::from_vector(&Vector7::ith(k, -h));
            let (rp, rm) = if wrt_from {
                (edge_residual(e, &(*a * d.exp()), b), edge_residual(e, &(*a * m.exp()), b))
            } else {
                (edge_residual(e, a, &(*b * d.exp())), edge_residual(e, a, &(*b * m.exp())))
            };
            j.set_column(k, &((rp.unwrap().to_vector() - rm.unwrap().to_vector()) / (2.0 * h)));
        }
        j
    }

    #[test]
    fn jacobians_at_identity() {
        let i = Sim3::identity();
        let (_, jf, jt) = edge_jacobians(&i, &i, &i).unwrap();
        assert!((jf + Matrix7::identity()).amax() < 1e-14);
        assert!((jt - Matrix7::identity()).amax() < 1e-14);
        assert!((finite_difference(&i, &i, &i, true) - jf).amax() < 1e-8);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let a = rand_sim3(&mut rng);
            let b = rand_sim3(&mut rng);
            // Keep residuals moderate, as at an optimizer iterate.
            let e = (a.inverse() * b).inverse() * rand_tangent(&mut rng, 0.5).exp();
            let (_, jf, jt) = edge_jacobians(&e, &a, &b).unwrap();
            worst = worst.max((finite_difference(&e, &a, &b, true) - jf).amax());
            worst = worst.max((finite_difference(&e, &a, &b, false) - jt).amax());
        }
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn linearization_has_second_order_remainder() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (e, a, b) = (rand_sim3(&mut rng), rand_sim3(&mut rng), rand_sim3(&mut rng));
            let e = (a.inverse() * b).inverse() * e.log().map(|t| Tangent7::from_vector(&(t.to_vector() * 0.1)).exp()).unwrap();
            let (r, jf, jt) = edge_jacobians(&e, &a, &b).unwrap();
            let d = Tangent7::from_vector(&(rand_tangent(&mut rng, 1.0).to_vector().normalize() * 1e-4));
            let ra = edge_residual(&e, &(a * d.exp()), &b).unwrap().to_vector();
            let rb = edge_residual(&e, &a, &(b * d.exp())).unwrap().to_vector();
            assert!((ra - r.to_vector() - jf * d.to_vector()).norm() < 1e-7);
            assert!((rb - r.to_vector() - jt * d.to_vector()).norm() < 1e-7);
        }
    }

    #[test]
    fn residuals_are_gauge_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (e, a, b, g) = (rand_sim3(&mut rng), rand_sim3(&mut rng), rand_sim3(&mut rng), rand_sim3(&mut rng));
            let Ok(r) = edge_residual(&e, &a, &b) else { continue };
            let rg = edge_residual(&e, &(g * a), &(g * b)).unwrap();
            assert!((r.to_vector() - rg.to_vector()).amax() < 1e-9);
        }
    }

    /// Ring of `n` nodes with exact measurements; returns (truth, factors).
    fn ring(n: usize, rng: &mut impl Rng) -> (Vec<Sim3>, Vec<Factor>) {
        let truth: Vec<Sim3> = (0..n)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / n as f64;
                Sim3::new(
                    exp_so3(&Vector3::new(0.0, 0.0, a)),
                    Vector3::new(3.0 * a.cos(), 3.0 * a.sin(), 0.1 * k as f64 % 0.3),
                    (0.2 * rng.random_range(-1.0..1.0f64)).exp(),
                )
            })
            .collect();
        let mut factors = Vec::new();
        for k in 0..n {
            for step in [1, 2] {
                if k + step >= n && step == 2 {
                    continue;
                }
                let j = (k + step) % n;
                factors.push(Factor {
                    from: k,
                    to: j,
                    measurement: (truth[k].inverse() * truth[j]).inverse(),
                    information: Matrix7::identity() * rng.random_range(0.5..2.0),
                });
            }
        }
        (truth, factors)
    }

    fn perturbed(truth: &[Sim3], rng: &mut impl Rng, size: f64) -> Vec<Sim3> {
        truth
            .iter()
            .enumerate()
            .map(|(k, p)| if k == 0 { *p } else { p.retract(&rand_tangent(rng, size)) })
            .collect()
    }

    #[test]
    fn converges_on_consistent_ring() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [10, 80] {
            let (truth, factors) = ring(n, &mut rng);
            let mut poses = perturbed(&truth, &mut rng, 0.05);
            let report = optimize_problem(&mut poses, &factors, 0, &LmConfig::default()).unwrap();
            assert!(report.final_cost < 1e-12, "{report}");
            assert!(report.iterations <= 5, "{report}");
            for (p, t) in poses.iter().zip(&truth) {
                assert!((p.inverse() * *t).log().unwrap().norm_inf() < 1e-7);
            }
            assert!(report.trace.windows(2).all(|w| w[1].cost <= w[0].cost));
            assert_eq!(poses[0], truth[0]);
        }
    }

    #[test]
    fn fixed_point_takes_no_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (truth, factors) = ring(12, &mut rng);
        let mut poses = truth.clone();
        let report = optimize_problem(&mut poses, &factors, 0, &LmConfig::default()).unwrap();
        assert!(report.iterations <= 1);
        assert_eq!(poses, truth);
    }

    #[test]
    fn noisy_problem_monotone_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (truth, mut factors) = ring(60, &mut rng);
        for f in &mut factors {
            f.measurement = f.measurement * rand_tangent(&mut rng, 0.02).exp();
        }
        let start = perturbed(&truth, &mut rng, 0.05);
        let mut a = start.clone();
        let ra = optimize_problem(&mut a, &factors, 0, &LmConfig::default()).unwrap();
        assert!(ra.final_cost <= ra.initial_cost);
        assert!(ra.trace.windows(2).all(|w| w[1].cost <= w[0].cost));
        let scaled: Vec<Factor> = factors
            .iter()
            .map(|f| Factor {
                information: f.information * 10.0,
                ..*f
            })
            .collect();
        let mut b = start;
        optimize_problem(&mut b, &scaled, 0, &LmConfig::default()).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p.inverse() * *q).log().unwrap().norm_inf() < 1e-8);
        }
    }

    #[test]
    fn dense_and_sparse_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (truth, mut factors) = ring(30, &mut rng);
        for f in &mut factors {
            f.measurement = f.measurement * rand_tangent(&mut rng, 0.02).exp();
        }
        let start = perturbed(&truth, &mut rng, 0.05);
        let (mut a, mut b) = (start.clone(), start);
        let dense = LmConfig { dense_below: usize::MAX, ..LmConfig::default() };
        let sparse = LmConfig { dense_below: 0, ..LmConfig::default() };
        optimize_problem(&mut a, &factors, 3, &dense).unwrap();
        optimize_problem(&mut b, &factors, 3, &sparse).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p.inverse() * *q).log().unwrap().norm_inf() < 1e-9);
        }
    }

    #[test]
    fn disconnected_and_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut truth, factors) = ring(6, &mut rng);
        truth.push(Sim3::identity());
        assert_eq!(
            optimize_problem(&mut truth, &factors, 0, &LmConfig::default()),
            Err(OptimizeError::DisconnectedGraph { unreachable: 1 })
        );
        assert!(matches!(
            optimize_problem(&mut truth, &factors, 99, &LmConfig::default()),
            Err(OptimizeError::BadAnchor { .. })
        ));
        assert_eq!(optimize_problem(&mut [], &[], 0, &LmConfig::default()), Err(OptimizeError::Empty));
    }

    #[test]
    fn near_pi_edges_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (truth, mut factors) = ring(8, &mut rng);
        let flip = Sim3::from_rigid(exp_so3(&Vector3::new(std::f64::consts::PI, 0.0, 0.0)), Vector3::zeros());
        factors[3].measurement = flip * factors[3].measurement;
        let mut poses = truth.clone();
        let report = optimize_problem(&mut poses, &factors, 0, &LmConfig::default()).unwrap();
        assert_eq!(report.skipped_edges, vec![3]);
    }

    #[test]
    fn chain_of_500_is_fast() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 500;
        let truth: Vec<Sim3> = (0..n)
            .map(|k| Sim3::from_rigid(exp_so3(&Vector3::new(0.0, 0.0, 0.01 * k as f64)), Vector3::new(k as f64 * 0.3, 0.0, 0.0)))
            .collect();
        let factors: Vec<Factor> = (1..n)
            .map(|k| Factor {
                from: k - 1,
                to: k,
                measurement: (truth[k - 1].inverse() * truth[k]).inverse() * rand_tangent(&mut rng, 0.01).exp(),
                information: Matrix7::identity(),
            })
            .collect();
        let mut poses = perturbed(&truth, &mut rng, 0.02);
        let t = std::time::Instant::now();
        let report = optimize_problem(&mut poses, &factors, 0, &LmConfig::default()).unwrap();
        assert!(t.elapsed().as_secs_f64() < 1.0, "{:?}", t.elapsed());
        assert!(report.final_cost < 1e-12, "{report}");
    }

    #[test]
    fn report_text_has_one_line_per_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (truth, factors) = ring(10, &mut rng);
        let mut poses = perturbed(&truth, &mut rng, 0.05);
        let report = optimize_problem(&mut poses, &factors, 0, &LmConfig::default()).unwrap();
        let text = report.to_string();
        assert_eq!(text.lines().count(), report.trace.len() + 2);
        assert!(text.lines().last().unwrap().starts_with("termination="));
    }
}
