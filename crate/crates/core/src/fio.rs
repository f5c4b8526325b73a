//! Feasible intervention optimization (FIO).
//!
//! A `change(A = a*)` query is answered by searching over the noise values of
//! the strict ancestors of `A`. The target's own noise is never a free
//! variable: it is recovered by inverting `A`'s mechanism at the candidate
//! parents, so `A = a*` holds exactly at every iterate. The objective is
//!
//! ```text
//! distance(an(A)*, an(A)) + w_ε · Σ_{j ∈ AN(A)} penalty(u*_j)
//! ```
//!
//! where the penalty vanishes exactly on the box `ε < F(u*_j) < 1 - ε`.
//! Feasibility is always judged on the CDFs, strictly.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::{DistanceKind, StandardizationStats};
use crate::graph::{GraphError, VariableId};
use crate::mechanism::{Mechanism, MechanismError};
use crate::naturalness::{NaturalnessError, NaturalnessMeasure};
use crate::noise::NoiseDistribution;
use crate::scm::{Assignment, Intervention, NoiseAssignment, Scm, ScmError};

/// Standard deviation of the restart jitter added to the factual noise.
pub const JITTER_STD: f64 = 0.5;
/// Early stopping: stop once the best loss improved by less than
/// [`EARLY_STOP_TOL`] over this many steps.
pub const EARLY_STOP_WINDOW: u64 = 500;
pub const EARLY_STOP_TOL: f64 = 1e-12;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const SNAP_PASSES: usize = 3;
// compass search after the optimizer: initial and final step, evaluation cap
const POLISH_START: f64 = 0.25;
const POLISH_MIN: f64 = 1e-10;
const POLISH_BUDGET: usize = 20_000;
const TRACK_ITERS: usize = 6;

#[derive(Debug, Error)]
pub enum FioError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error("`{0}` is fixed by an intervention and cannot be changed or backtracked through")]
    ConstantMechanism(VariableId),
    #[error("no standardization stats for `{0}`")]
    MissingStats(VariableId),
    #[error("free noise must cover exactly the strict ancestors of the target; offending `{0}`")]
    FreeNoise(VariableId),
    #[error("result is infeasible; no LBF intervention exists")]
    NotFeasible,
}

impl From<NaturalnessError> for FioError {
    fn from(e: NaturalnessError) -> Self {
        FioError::InvalidConfig(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay fixed at zero.
    #[default]
    AdaptiveMoment,
    PlainGd,
}

/// Space in which the ε-box penalty is measured.
///
/// Both choices vanish on exactly the same set. `Cdf` is the literal penalty
/// `max(ε - F(u), 0) + max(F(u) - 1 + ε, 0)`; its slope is `pdf(u)`, which is
/// almost flat for noise far in the tails. `Noise` measures the violation as
/// the distance from `u` to `[F⁻¹(ε), F⁻¹(1 - ε)]`, with unit slope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PenaltySpace {
    #[default]
    Noise,
    Cdf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FioConfig {
    pub epsilon: f64,
    pub w_epsilon: f64,
    pub learning_rate: f64,
    pub steps: u64,
    pub optimizer: OptimizerKind,
    pub restarts: u32,
    pub seed: u64,
    /// Standardized change above which an ancestor joins the LBF set.
    pub change_tolerance: f64,
    pub inversion_tolerance: f64,
    pub distance: DistanceKind,
    pub measure: NaturalnessMeasure,
    pub penalty_space: PenaltySpace,
}

impl Default for FioConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            w_epsilon: 1e4,
            learning_rate: 1e-3,
            steps: 50_000,
            optimizer: OptimizerKind::AdaptiveMoment,
            restarts: 1,
            seed: 0,
            change_tolerance: 1e-6,
            inversion_tolerance: 1e-8,
            distance: DistanceKind::EndogenousL1,
            measure: NaturalnessMeasure::ConditionalCdf,
            penalty_space: PenaltySpace::Noise,
        }
    }
}

impl FioConfig {
    pub fn validate(&self) -> Result<(), FioError> {
        self.measure.check_epsilon(self.epsilon)?;
        let positive = [
            ("w_epsilon", self.w_epsilon),
            ("learning_rate", self.learning_rate),
            ("change_tolerance", self.change_tolerance),
            ("inversion_tolerance", self.inversion_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FioError::InvalidConfig(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.restarts == 0 {
            return Err(FioError::InvalidConfig("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRequest {
    pub target: VariableId,
    pub value: f64,
}

impl ChangeRequest {
    pub fn new(target: impl Into<VariableId>, value: f64) -> Self {
        Self { target: target.into(), value }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FioStatus {
    Feasible,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FioResult {
    pub status: FioStatus,
    /// The LBF set `C` with its values `c*`; always contains the target.
    pub lbf_targets: BTreeMap<VariableId, f64>,
    pub cf_ancestors: Assignment,
    pub cf_noise: NoiseAssignment,
    pub distance: f64,
    pub penalty_residual: f64,
    pub inversion_residual: f64,
    pub per_variable_cdf: BTreeMap<VariableId, f64>,
    pub steps_used: u64,
}

impl FioResult {
    pub fn is_feasible(&self) -> bool {
        self.status == FioStatus::Feasible
    }
}

/// Value and gradient of the FIO objective at one free-noise point.
#[derive(Debug, Clone, PartialEq)]
pub struct FioLoss {
    pub loss: f64,
    pub distance: f64,
    /// Already multiplied by `w_epsilon`.
    pub penalty: f64,
    pub gradient: NoiseAssignment,
    /// Target noise derived by inversion.
    pub u_target: f64,
}

/// Objective of one FIO query, compiled to dense positions over `AN(A)`.
/// Position `m = an.len() - 1` is the target; `0..m` are the free variables.
struct Problem<'a> {
    an: Vec<usize>,
    mechs: Vec<&'a Mechanism>,
    parents: Vec<Vec<usize>>,
    v0: Vec<f64>,
    u0: Vec<f64>,
    g0: Vec<f64>,
    sigma: Vec<f64>,
    weight: Vec<f64>,
    a0: f64,
    a_star: f64,
    eps_cdf: f64,
    q_lo: f64,
    q_hi: f64,
    w_eps: f64,
    distance: DistanceKind,
    penalty_space: PenaltySpace,
    measure: NaturalnessMeasure,
    epsilon: f64,
    inversion_tolerance: f64,
    change_tolerance: f64,
}

#[derive(Default)]
struct Workspace {
    v: Vec<f64>,
    slots: Vec<Vec<f64>>,
    pa: Vec<f64>,
    du: Vec<f64>,
    adj_v: Vec<f64>,
    adj_tape: Vec<f64>,
    grad_pa: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Eval {
    loss: f64,
    distance: f64,
    penalty: f64,
    u_target: f64,
}

/// Shared setup for [`solve`], [`fio_loss`] and the oracle: factual values,
/// abducted factual noise and the validated target index.
pub(crate) struct Query {
    pub values: Vec<f64>,
    pub noise: Vec<f64>,
    pub target: usize,
}

pub(crate) fn prepare(scm: &Scm, evidence: &Assignment, change: &ChangeRequest) -> Result<Query, FioError> {
    let target = scm.graph().index_of(&change.target)?;
    let values = scm.indexed_values(evidence)?;
    let noise = scm.abduct_indexed(&values);
    Ok(Query { values, noise, target })
}

impl<'a> Problem<'a> {
    fn new(
        scm: &'a Scm,
        q: &Query,
        a_star: f64,
        stats: &StandardizationStats,
        cfg: &FioConfig,
    ) -> Result<Self, FioError> {
        let g = scm.graph();
        let an = g.ancestor_indices(&[q.target]);
        debug_assert_eq!(an.last(), Some(&q.target));
        let mut pos = vec![usize::MAX; g.len()];
        for (k, &i) in an.iter().enumerate() {
            pos[i] = k;
        }
        let weights = g.descendant_weight_vec();
        let mut mechs = Vec::with_capacity(an.len());
        let mut parents = Vec::with_capacity(an.len());
        let mut sigma = Vec::with_capacity(an.len());
        let mut g0 = Vec::with_capacity(an.len());
        let mut noise_kind = None;
        for &i in &an {
            let m = scm
                .mechanism(i)
                .structural()
                .ok_or_else(|| FioError::ConstantMechanism(g.node(i).clone()))?;
            if *noise_kind.get_or_insert(m.noise()) != m.noise() {
                return Err(FioError::InvalidConfig("mixed noise families in AN(A)".into()));
            }
            let ps: Vec<usize> = g.parent_indices(i).iter().map(|&p| pos[p]).collect();
            let pa: Vec<f64> = g.parent_indices(i).iter().map(|&p| q.values[p]).collect();
            g0.push(m.tape().eval(&pa));
            parents.push(ps);
            mechs.push(m);
            sigma.push(stats.std(g.node(i)).map_err(|_| FioError::MissingStats(g.node(i).clone()))?);
        }
        let noise = noise_kind.unwrap_or(NoiseDistribution::StandardNormal);
        let eps_cdf = cfg.measure.cdf_threshold(noise, cfg.epsilon);
        Ok(Self {
            v0: an.iter().map(|&i| q.values[i]).collect(),
            u0: an.iter().map(|&i| q.noise[i]).collect(),
            weight: an.iter().map(|&i| f64::from(weights[i])).collect(),
            a0: q.values[q.target],
            an,
            mechs,
            parents,
            g0,
            sigma,
            a_star,
            eps_cdf,
            q_lo: noise.quantile(eps_cdf),
            q_hi: noise.quantile(1.0 - eps_cdf),
            w_eps: cfg.w_epsilon,
            distance: cfg.distance,
            penalty_space: cfg.penalty_space,
            measure: cfg.measure,
            epsilon: cfg.epsilon,
            inversion_tolerance: cfg.inversion_tolerance,
            change_tolerance: cfg.change_tolerance,
        })
    }

    fn free(&self) -> usize {
        self.an.len() - 1
    }

    fn workspace(&self) -> Workspace {
        Workspace {
            v: vec![0.0; self.an.len()],
            slots: vec![Vec::new(); self.an.len()],
            du: vec![0.0; self.an.len()],
            adj_v: vec![0.0; self.an.len()],
            ..Workspace::default()
        }
    }

    fn noise_of(&self, k: usize) -> NoiseDistribution {
        self.mechs[k].noise()
    }

    /// Penalty value and its derivative in `u`.
    fn penalty(&self, k: usize, u: f64) -> (f64, f64) {
        match self.penalty_space {
            PenaltySpace::Noise => {
                if u < self.q_lo {
                    (self.w_eps * (self.q_lo - u), -self.w_eps)
                } else if u > self.q_hi {
                    (self.w_eps * (u - self.q_hi), self.w_eps)
                } else {
                    (0.0, 0.0)
                }
            }
            PenaltySpace::Cdf => {
                let n = self.noise_of(k);
                let f = n.cdf(u);
                if f < self.eps_cdf {
                    (self.w_eps * (self.eps_cdf - f), -self.w_eps * n.pdf(u))
                } else if f > 1.0 - self.eps_cdf {
                    (self.w_eps * (f - 1.0 + self.eps_cdf), self.w_eps * n.pdf(u))
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }

    /// Mechanism-distance summand and its derivative in `u`.
    fn mech_term(&self, k: usize, u: f64) -> (f64, f64) {
        let n = self.noise_of(k);
        let diff = n.cdf(u) - n.cdf(self.u0[k]);
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        (self.weight[k] * diff.abs(), self.weight[k] * sign * n.pdf(u))
    }

    /// Forward pass; fills `ws.v`, `ws.slots` and `ws.du`.
    fn forward(&self, x: &[f64], ws: &mut Workspace) -> Eval {
        let m = self.free();
        let mut distance = 0.0;
        let mut penalty = 0.0;
        let mut u_target = 0.0;
        for k in 0..=m {
            ws.pa.clear();
            ws.pa.extend(self.parents[k].iter().map(|&p| ws.v[p]));
            let g = self.mechs[k].tape().eval_with(&ws.pa, &mut ws.slots[k]);
            let s = self.mechs[k].scale();
            // written as an offset from the factual point so the factual noise
            // reproduces the factual values exactly
            let u = if k < m {
                ws.v[k] = self.v0[k] + (g - self.g0[k]) + s * (x[k] - self.u0[k]);
                if self.distance == DistanceKind::EndogenousL1 {
                    distance += (ws.v[k] - self.v0[k]).abs() / self.sigma[k];
                }
                x[k]
            } else {
                ws.v[k] = self.a_star;
                u_target = self.u0[k] + ((self.a_star - self.a0) - (g - self.g0[k])) / s;
                if self.distance == DistanceKind::EndogenousL1 {
                    distance += (self.a_star - self.a0).abs() / self.sigma[k];
                }
                u_target
            };
            let (p, dp) = self.penalty(k, u);
            penalty += p;
            ws.du[k] = dp;
            if self.distance == DistanceKind::MechanismCdf {
                let (d, dd) = self.mech_term(k, u);
                distance += d;
                ws.du[k] += dd;
            }
        }
        Eval { loss: distance + penalty, distance, penalty, u_target }
    }

    /// Reverse sweep after [`Problem::forward`]; writes `d loss / d x` into `grad`.
    fn backward(&self, ws: &mut Workspace, grad: &mut [f64]) {
        let m = self.free();
        for k in 0..m {
            ws.adj_v[k] = if self.distance == DistanceKind::EndogenousL1 {
                let d = ws.v[k] - self.v0[k];
                if d > 0.0 {
                    1.0 / self.sigma[k]
                } else if d < 0.0 {
                    -1.0 / self.sigma[k]
                } else {
                    0.0
                }
            } else {
                0.0
            };
        }
        let push = |k: usize, seed: f64, ws: &mut Workspace| {
            if seed == 0.0 || self.parents[k].is_empty() {
                return;
            }
            ws.grad_pa.clear();
            ws.grad_pa.resize(self.parents[k].len(), 0.0);
            self.mechs[k].tape().accumulate_grad(&ws.slots[k], seed, &mut ws.adj_tape, &mut ws.grad_pa);
            for (i, &p) in self.parents[k].iter().enumerate() {
                ws.adj_v[p] += ws.grad_pa[i];
            }
        };
        // u*_A = const - g_A(pa) / s_A
        let seed = -ws.du[m] / self.mechs[m].scale();
        push(m, seed, ws);
        for k in (0..m).rev() {
            grad[k] = ws.adj_v[k] * self.mechs[k].scale() + ws.du[k];
            let a = ws.adj_v[k];
            push(k, a, ws);
        }
    }

    fn eval_grad(&self, x: &[f64], ws: &mut Workspace, grad: &mut [f64]) -> Eval {
        let e = self.forward(x, ws);
        self.backward(ws, grad);
        e
    }

    /// Strict ε-naturalness of every noise value in the current forward pass.
    fn natural(&self, x: &[f64], u_target: f64) -> bool {
        let m = self.free();
        (0..=m).all(|k| {
            let u = if k < m { x[k] } else { u_target };
            self.measure.score_noise(self.noise_of(k), u) > self.epsilon
        })
    }

    fn cdf_residual(&self, k: usize, u: f64) -> f64 {
        let f = self.noise_of(k).cdf(u);
        (self.eps_cdf - f).max(0.0) + (f - 1.0 + self.eps_cdf).max(0.0)
    }

    fn feasible_at(&self, x: &[f64], u_target: f64) -> bool {
        let m = self.free();
        self.natural(x, u_target)
            && (0..=m).all(|k| self.cdf_residual(k, if k < m { x[k] } else { u_target }) == 0.0)
    }
}

/// Best iterate seen so far, ranked by (feasible, distance) and, among
/// infeasible iterates, by loss.
struct Best {
    feasible: Option<(f64, Vec<f64>)>,
    fallback: (f64, Vec<f64>),
}

impl Best {
    fn new(x: &[f64]) -> Self {
        Self { feasible: None, fallback: (f64::INFINITY, x.to_vec()) }
    }

    fn consider(&mut self, p: &Problem<'_>, x: &[f64], e: &Eval) {
        if e.loss < self.fallback.0 {
            self.fallback = (e.loss, x.to_vec());
        }
        let better = self.feasible.as_ref().is_none_or(|(d, _)| e.distance < *d);
        if better && e.penalty == 0.0 && p.feasible_at(x, e.u_target) {
            self.feasible = Some((e.distance, x.to_vec()));
        }
    }

    fn point(&self) -> (bool, &[f64]) {
        match &self.feasible {
            Some((_, x)) => (true, x),
            None => (false, &self.fallback.1),
        }
    }
}

/// Runs the optimizer from `x`; returns the number of steps taken.
fn optimize(p: &Problem<'_>, x: &mut [f64], cfg: &FioConfig, best: &mut Best, ws: &mut Workspace) -> u64 {
    let n = x.len();
    let mut grad = vec![0.0; n];
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let (mut b1t, mut b2t) = (1.0, 1.0);
    let mut e = p.eval_grad(x, ws, &mut grad);
    best.consider(p, x, &e);
    let mut best_loss = e.loss;
    let mut checkpoint = best_loss;
    let mut steps = 0;
    while steps < cfg.steps {
        let stuck = grad.iter().all(|&g| g == 0.0)
            && (cfg.optimizer == OptimizerKind::PlainGd || m1.iter().all(|&v| v == 0.0));
        if stuck {
            break;
        }
        match cfg.optimizer {
            OptimizerKind::AdaptiveMoment => {
                b1t *= BETA1;
                b2t *= BETA2;
                for i in 0..n {
                    m1[i] = BETA1 * m1[i] + (1.0 - BETA1) * grad[i];
                    m2[i] = BETA2 * m2[i] + (1.0 - BETA2) * grad[i] * grad[i];
                    let mhat = m1[i] / (1.0 - b1t);
                    let vhat = m2[i] / (1.0 - b2t);
                    x[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }
            OptimizerKind::PlainGd => {
                for i in 0..n {
                    x[i] -= cfg.learning_rate * grad[i];
                }
            }
        }
        steps += 1;
        e = p.eval_grad(x, ws, &mut grad);
        best.consider(p, x, &e);
        best_loss = best_loss.min(e.loss);
        if steps % EARLY_STOP_WINDOW == 0 {
            if checkpoint - best_loss < EARLY_STOP_TOL {
                break;
            }
            checkpoint = best_loss;
        }
    }
    steps
}

/// Noise that generates the free values `v` exactly, in the offset form
/// used by [`Problem::forward`].
fn noise_for_values(p: &Problem<'_>, v: &[f64], ws: &mut Workspace) -> Vec<f64> {
    (0..p.free())
        .map(|k| {
            ws.pa.clear();
            ws.pa.extend(p.parents[k].iter().map(|&q| v[q]));
            let g = p.mechs[k].tape().eval(&ws.pa);
            p.u0[k] + ((v[k] - p.v0[k]) - (g - p.g0[k])) / p.mechs[k].scale()
        })
        .collect()
}

/// Moves `w[j]` by Newton steps until the derived target noise is back at
/// `u_goal`, so a move of another value slides along the target's level set.
fn track_target(p: &Problem<'_>, w: &mut [f64], j: usize, u_goal: f64, ws: &mut Workspace) -> Option<Vec<f64>> {
    let h = 1e-7 * p.sigma[j];
    for _ in 0..TRACK_ITERS {
        let x = noise_for_values(p, w, ws);
        let r = p.forward(&x, ws).u_target - u_goal;
        if r.abs() <= 1e-14 * (1.0 + u_goal.abs()) {
            return Some(x);
        }
        w[j] += h;
        let shifted = p.forward(&noise_for_values(p, w, ws), ws).u_target - u_goal;
        w[j] -= h;
        let slope = (shifted - r) / h;
        if !(slope.abs() > 0.0 && slope.is_finite()) {
            return None;
        }
        w[j] -= r / slope;
    }
    Some(noise_for_values(p, w, ws))
}

/// Derivative-free descent on the distance inside the feasible set. Polls
/// each free coordinate in noise space, in standardized value space with the
/// other values held, and in value space with a second value repairing the
/// target noise. A poll is taken only when it stays feasible and strictly
/// lowers the distance; the step halves after a failed sweep.
fn polish(p: &Problem<'_>, x: &mut Vec<f64>, ws: &mut Workspace) {
    let m = p.free();
    let mut e = p.forward(x, ws);
    let mut v = ws.v[..m].to_vec();
    let mut step = POLISH_START;
    let mut evals = 0;
    while step > POLISH_MIN && evals < POLISH_BUDGET {
        let mut improved = false;
        for k in 0..m {
            for dir in [1.0, -1.0] {
                // None: noise axis; Some(k): value axis; Some(j): value axis repaired by j
                for partner in std::iter::once(None).chain((0..m).map(Some)) {
                    let cand = match partner {
                        None => {
                            let mut c = x.clone();
                            c[k] += dir * step;
                            c
                        }
                        Some(j) => {
                            let mut w = v.clone();
                            w[k] += dir * step * p.sigma[k];
                            if j == k {
                                noise_for_values(p, &w, ws)
                            } else {
                                match track_target(p, &mut w, j, e.u_target, ws) {
                                    Some(c) => c,
                                    None => continue,
                                }
                            }
                        }
                    };
                    evals += 1;
                    let c = p.forward(&cand, ws);
                    if c.penalty == 0.0 && c.distance < e.distance && p.feasible_at(&cand, c.u_target) {
                        *x = cand;
                        e = c;
                        v.copy_from_slice(&ws.v[..m]);
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
}

/// Greedily resets free coordinates to their factual noise, or to the noise
/// that restores their factual value, whenever that keeps the point feasible
/// and does not increase the distance.
fn snap(p: &Problem<'_>, x: &mut [f64], ws: &mut Workspace) {
    let mut e = p.forward(x, ws);
    for _ in 0..SNAP_PASSES {
        let mut changed = false;
        for k in 0..p.free() {
            p.forward(x, ws);
            let pa: Vec<f64> = p.parents[k].iter().map(|&q| ws.v[q]).collect();
            let g = p.mechs[k].tape().eval(&pa);
            let keep_value = p.u0[k] - (g - p.g0[k]) / p.mechs[k].scale();
            for cand in [p.u0[k], keep_value] {
                if cand == x[k] {
                    continue;
                }
                let old = std::mem::replace(&mut x[k], cand);
                let c = p.forward(x, ws);
                if c.penalty == 0.0 && c.distance <= e.distance && p.feasible_at(x, c.u_target) {
                    e = c;
                    changed = true;
                } else {
                    x[k] = old;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Loss and gradient at `free_noise`, which must cover exactly the strict
/// ancestors of the target.
pub fn fio_loss(
    scm: &Scm,
    evidence: &Assignment,
    change: &ChangeRequest,
    free_noise: &NoiseAssignment,
    stats: &StandardizationStats,
    cfg: &FioConfig,
) -> Result<FioLoss, FioError> {
    let q = prepare(scm, evidence, change)?;
    let p = Problem::new(scm, &q, change.value, stats, cfg)?;
    let g = scm.graph();
    let free_ids: Vec<&VariableId> = p.an[..p.free()].iter().map(|&i| g.node(i)).collect();
    if let Some(extra) = free_noise.keys().find(|k| !free_ids.contains(k)) {
        return Err(FioError::FreeNoise(extra.clone()));
    }
    let x = free_ids
        .iter()
        .map(|id| free_noise.get(id).ok_or_else(|| FioError::FreeNoise((*id).clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut ws = p.workspace();
    let mut grad = vec![0.0; x.len()];
    let e = p.eval_grad(&x, &mut ws, &mut grad);
    Ok(FioLoss {
        loss: e.loss,
        distance: e.distance,
        penalty: e.penalty,
        gradient: free_ids.into_iter().cloned().zip(grad).collect(),
        u_target: e.u_target,
    })
}

/// Solves one `change(A = a*)` query. Solver failures come back as
/// `Infeasible` results; errors are reserved for bad inputs.
pub fn solve(
    scm: &Scm,
    evidence: &Assignment,
    change: &ChangeRequest,
    stats: &StandardizationStats,
    cfg: &FioConfig,
) -> Result<FioResult, FioError> {
    cfg.validate()?;
    let q = prepare(scm, evidence, change)?;
    let p = Problem::new(scm, &q, change.value, stats, cfg)?;
    let m = p.free();
    let mut ws = p.workspace();
    let mut steps_used = 0;
    let mut chosen: Option<(bool, f64, Vec<f64>)> = None;
    for r in 0..cfg.restarts {
        let mut x = p.u0[..m].to_vec();
        if r > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(u64::from(r));
            for xi in &mut x {
                let z: f64 = StandardNormal.sample(&mut rng);
                *xi += JITTER_STD * z;
            }
        }
        let mut best = Best::new(&x);
        if m > 0 {
            steps_used += optimize(&p, &mut x, cfg, &mut best, &mut ws);
        } else {
            let e = p.forward(&x, &mut ws);
            best.consider(&p, &x, &e);
        }
        let (feasible, bx) = best.point();
        let mut bx = bx.to_vec();
        if feasible {
            polish(&p, &mut bx, &mut ws);
            snap(&p, &mut bx, &mut ws);
        }
        let e = p.forward(&bx, &mut ws);
        let rank = if feasible { e.distance } else { e.loss };
        let replace = match &chosen {
            None => true,
            Some((f, d, _)) => (feasible && !f) || (feasible == *f && rank < *d),
        };
        if replace {
            chosen = Some((feasible, rank, bx));
        }
    }
    let (_, _, x) = chosen.expect("at least one restart");
    let mut result = finalize(scm, &q, &p, &x, &mut ws, false);
    if !result.is_feasible() {
        let pinned = finalize(scm, &q, &p, &x, &mut ws, true);
        if pinned.is_feasible() {
            result = pinned;
        }
    }
    result.steps_used = steps_used;
    Ok(result)
}

/// Turns an optimizer point into a result. Ancestors that moved by more than
/// the change tolerance join the LBF set, then the intervention is replayed
/// on the factual world and every free variable whose replayed value misses
/// the optimized one joins as well. With `pin_all` every ancestor is set.
fn finalize(scm: &Scm, q: &Query, p: &Problem<'_>, x: &[f64], ws: &mut Workspace, pin_all: bool) -> FioResult {
    let m = p.free();
    p.forward(x, ws);
    let v_star = ws.v.clone();
    let tol = |k: usize, a: f64, b: f64| (a - b).abs() / p.sigma[k] > p.change_tolerance;
    let mut in_c: Vec<bool> = (0..=m)
        .map(|k| k == m || pin_all || tol(k, v_star[k], p.v0[k]))
        .collect();
    let replayed = loop {
        let fixed: Vec<(usize, f64)> =
            (0..=m).filter(|&k| in_c[k]).map(|k| (p.an[k], v_star[k])).collect();
        let world = scm.counterfactual_indexed(&q.values, &q.noise, &fixed);
        let mut grew = false;
        for k in 0..m {
            if !in_c[k] && tol(k, world[p.an[k]], v_star[k]) {
                in_c[k] = true;
                grew = true;
            }
        }
        if !grew {
            break world;
        }
    };

    let g = scm.graph();
    let mut r = vec![0.0; m + 1];
    let mut u = vec![0.0; m + 1];
    let mut inversion_residual = 0.0;
    for k in 0..=m {
        r[k] = replayed[p.an[k]];
        let pa: Vec<f64> = p.parents[k].iter().map(|&j| r[j]).collect();
        let loc = p.mechs[k].tape().eval(&pa);
        u[k] = (r[k] - loc) / p.mechs[k].scale();
        if k == m {
            inversion_residual = (p.a_star - (loc + p.mechs[k].scale() * u[k])).abs();
        }
    }
    let distance = match p.distance {
        DistanceKind::EndogenousL1 => (0..=m).map(|k| (r[k] - p.v0[k]).abs() / p.sigma[k]).sum(),
        DistanceKind::MechanismCdf => (0..=m).map(|k| p.mech_term(k, u[k]).0).sum(),
    };
    let penalty_residual: f64 = (0..=m).map(|k| p.cdf_residual(k, u[k])).sum();
    let natural = p.natural(&u[..m], u[m]);
    let feasible = penalty_residual == 0.0 && natural && inversion_residual <= p.inversion_tolerance;
    let id = |k: usize| g.node(p.an[k]).clone();
    FioResult {
        status: if feasible { FioStatus::Feasible } else { FioStatus::Infeasible },
        lbf_targets: (0..=m).filter(|&k| in_c[k]).map(|k| (id(k), r[k])).collect(),
        cf_ancestors: (0..=m).map(|k| (id(k), r[k])).collect(),
        cf_noise: (0..=m).map(|k| (id(k), u[k])).collect(),
        distance,
        penalty_residual,
        inversion_residual,
        per_variable_cdf: (0..=m).map(|k| (id(k), p.noise_of(k).cdf(u[k]))).collect(),
        steps_used: 0,
    }
}

/// The LBF intervention `do(C = c*)` of a feasible result.
pub fn extract_lbf(result: &FioResult) -> Result<Intervention, FioError> {
    if !result.is_feasible() {
        return Err(FioError::NotFeasible);
    }
    Intervention::new(result.lbf_targets.clone()).map_err(FioError::from)
}
