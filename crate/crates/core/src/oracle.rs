//! Exhaustive grid reference for small FIO problems.
//!
//! The grid spans the strict-ancestor noise box `[F⁻¹(ε), F⁻¹(1 - ε)]`,
//! shrunk by `1e-12` on both sides. Each grid point is checked with the
//! public mechanism and naturalness APIs only, sharing no code with the
//! solver's compiled objective.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::{endogenous_l1, mechanism_cdf_distance, DistanceKind, StandardizationStats};
use crate::fio::{ChangeRequest, FioConfig, FioError, FioResult, FioStatus};
use crate::graph::VariableId;
use crate::naturalness::{local_naturalness, NaturalnessError};
use crate::scm::{Assignment, NoiseAssignment, Scm};

const BOX_SHRINK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("{got} free dimensions exceed the oracle limit of {max}")]
    TooManyDimensions { got: usize, max: usize },
    #[error("grid resolution must be odd and at least 3, got {0}")]
    BadResolution(usize),
    #[error(transparent)]
    Fio(#[from] FioError),
    #[error(transparent)]
    Naturalness(#[from] NaturalnessError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub resolution: usize,
    pub max_dims: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { resolution: 401, max_dims: 3 }
    }
}

/// Oracle answer plus the slack of its grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub result: FioResult,
    /// Sum over axes of the largest distance jump between adjacent feasible
    /// grid points; the minimizer's distance is within this of the grid optimum.
    pub cell_bound: f64,
    pub feasible_points: usize,
}

/// See [`grid_search`].
pub fn grid_solve(
    scm: &Scm,
    evidence: &Assignment,
    change: &ChangeRequest,
    stats: &StandardizationStats,
    cfg: &FioConfig,
    grid: &GridSpec,
) -> Result<FioResult, OracleError> {
    Ok(grid_search(scm, evidence, change, stats, cfg, grid)?.result)
}

struct Point {
    feasible: bool,
    distance: f64,
}

pub fn grid_search(
    scm: &Scm,
    evidence: &Assignment,
    change: &ChangeRequest,
    stats: &StandardizationStats,
    cfg: &FioConfig,
    grid: &GridSpec,
) -> Result<GridOutcome, OracleError> {
    cfg.validate()?;
    if grid.resolution < 3 || grid.resolution.is_multiple_of(2) {
        return Err(OracleError::BadResolution(grid.resolution));
    }
    let g = scm.graph();
    let target = g.index_of(&change.target).map_err(FioError::from)?;
    let an: Vec<usize> = g.ancestor_indices(&[target]);
    let free: Vec<usize> = an.iter().copied().filter(|&i| i != target).collect();
    if free.len() > grid.max_dims {
        return Err(OracleError::TooManyDimensions { got: free.len(), max: grid.max_dims });
    }
    let factual = scm.abduct(evidence).map_err(FioError::from)?;
    let an_ids: Vec<VariableId> = an.iter().map(|&i| g.node(i).clone()).collect();
    let an_factual: Assignment = an_ids.iter().map(|id| (id.clone(), evidence[id])).collect();
    let u_factual: NoiseAssignment = an_ids.iter().map(|id| (id.clone(), factual[id])).collect();
    let weights = g.descendant_weights();
    let mut noises = std::collections::BTreeMap::new();
    for &i in &an {
        let m = scm.structural(i).map_err(FioError::from)?;
        noises.insert(g.node(i).clone(), m.noise());
    }
    let eps_cdf = match noises.values().next() {
        Some(n) => cfg.measure.cdf_threshold(*n, cfg.epsilon),
        None => cfg.epsilon,
    };

    let axes: Vec<Vec<f64>> = free
        .iter()
        .map(|&i| {
            let n = noises[g.node(i)];
            let lo = n.quantile(eps_cdf) + BOX_SHRINK;
            let hi = n.quantile(1.0 - eps_cdf) - BOX_SHRINK;
            let step = (hi - lo) / (grid.resolution - 1) as f64;
            (0..grid.resolution).map(|k| lo + step * k as f64).collect()
        })
        .collect();

    let eval = |x: &[f64]| -> Result<(Point, Assignment, NoiseAssignment), OracleError> {
        let mut values = Assignment::new();
        let mut noise = NoiseAssignment::new();
        let mut natural = true;
        for &i in &an {
            let id = g.node(i);
            let m = scm.structural(i).map_err(FioError::from)?;
            let pa: Vec<f64> = g.parent_indices(i).iter().map(|&p| values[g.node(p)]).collect();
            let (v, u) = if i == target {
                let u = m.inverse(&pa, change.value).map_err(FioError::from)?;
                (change.value, u)
            } else {
                let k = free.iter().position(|&f| f == i).expect("free ancestor");
                (m.forward(&pa, x[k]).map_err(FioError::from)?, x[k])
            };
            let f = m.noise().cdf(u);
            natural &= f > eps_cdf && f < 1.0 - eps_cdf;
            natural &= local_naturalness(cfg.measure, m, v, &pa)? > cfg.epsilon;
            values.insert(id.clone(), v);
            noise.insert(id.clone(), u);
        }
        let distance = match cfg.distance {
            DistanceKind::EndogenousL1 => endogenous_l1(&an_factual, &values, stats),
            DistanceKind::MechanismCdf => mechanism_cdf_distance(&u_factual, &noise, &weights, &noises),
        }
        .map_err(|e| FioError::InvalidConfig(e.to_string()))?;
        Ok((Point { feasible: natural, distance }, values, noise))
    };

    let dims = free.len();
    let total = grid.resolution.pow(dims as u32);
    let strides: Vec<usize> = (0..dims).map(|d| grid.resolution.pow((dims - 1 - d) as u32)).collect();
    let ring_len = strides.first().copied().unwrap_or(1);
    // distances of the last `ring_len` grid points, enough to reach the
    // previous neighbour along every axis
    let mut ring: Vec<Option<f64>> = vec![None; ring_len];
    let mut jumps = vec![0.0f64; dims];
    let mut x = vec![0.0; dims];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut feasible_points = 0;
    for flat in 0..total {
        for d in 0..dims {
            x[d] = axes[d][(flat / strides[d]) % grid.resolution];
        }
        let (p, _, _) = eval(&x)?;
        let here = p.feasible.then_some(p.distance);
        if let Some(dist) = here {
            feasible_points += 1;
            if best.as_ref().is_none_or(|(b, _)| dist < *b) {
                best = Some((dist, x.clone()));
            }
            for d in 0..dims {
                if (flat / strides[d]) % grid.resolution > 0 {
                    if let Some(prev) = ring[(flat - strides[d]) % ring_len] {
                        jumps[d] = jumps[d].max((dist - prev).abs());
                    }
                }
            }
        }
        ring[flat % ring_len] = here;
    }
    let cell_bound: f64 = jumps.iter().sum();

    let (status, x) = match best {
        Some((_, x)) => (FioStatus::Feasible, x),
        // report the factual-nearest grid point's diagnostics
        None => (
            FioStatus::Infeasible,
            free.iter()
                .enumerate()
                .map(|(k, &i)| {
                    let u0 = factual[g.node(i)];
                    axes[k].iter().copied().min_by(|a, b| (a - u0).abs().total_cmp(&(b - u0).abs())).expect("axis")
                })
                .collect(),
        ),
    };
    let (p, values, noise) = eval(&x)?;
    let target_id = g.node(target).clone();
    let mut lbf = std::collections::BTreeMap::new();
    for (k, &i) in free.iter().enumerate() {
        let id = g.node(i);
        let moved = (values[id] - evidence[id]).abs() / stats.std(id).map_err(|_| FioError::MissingStats(id.clone()))?;
        if moved > cfg.change_tolerance || x[k] != factual[id] {
            lbf.insert(id.clone(), values[id]);
        }
    }
    lbf.insert(target_id.clone(), change.value);
    let penalty_residual = noise
        .iter()
        .map(|(id, u)| {
            let f = noises[id].cdf(u);
            (eps_cdf - f).max(0.0) + (f - 1.0 + eps_cdf).max(0.0)
        })
        .sum();
    let tm = scm.structural(target).map_err(FioError::from)?;
    let pa: Vec<f64> = g.parent_indices(target).iter().map(|&q| values[g.node(q)]).collect();
    let inversion_residual = (change.value - tm.forward(&pa, noise[&target_id]).map_err(FioError::from)?).abs();
    Ok(GridOutcome {
        result: FioResult {
            status,
            lbf_targets: lbf,
            per_variable_cdf: noise.iter().map(|(id, u)| (id.clone(), noises[id].cdf(u))).collect(),
            cf_ancestors: values,
            cf_noise: noise,
            distance: p.distance,
            penalty_residual,
            inversion_residual,
            steps_used: 0,
        },
        cell_bound,
        feasible_points,
    })
}
