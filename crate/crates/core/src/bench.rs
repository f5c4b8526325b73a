//! Toy dataset generation and the MAE / ε-ablation harness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::distance::StandardizationStats;
use crate::engine::{natural_cf, nonbacktracking_cf};
use crate::fio::{extract_lbf, ChangeRequest, FioConfig, FioError, FioResult};
use crate::graph::VariableId;
use crate::naturalness::{is_epsilon_natural, NaturalnessError};
use crate::scm::{Scm, ScmError};
use crate::toys;

/// Offset between the train and test seeds of [`gen_toy`].
pub const TEST_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no toy {0}; expected 1..=4")]
    UnknownToy(usize),
    #[error("fitted and true SCMs have different graphs")]
    GraphMismatch,
    #[error("test set is empty")]
    EmptyTest,
    #[error("epsilon list must be nonempty and strictly increasing")]
    EpsilonOrder,
    #[error(transparent)]
    Fio(#[from] FioError),
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Naturalness(#[from] NaturalnessError),
}

/// Ground truth plus disjoint train and test samples of toy `k`.
pub fn gen_toy(k: usize, n: usize, seed: u64) -> Result<(Scm, Dataset, Dataset), BenchError> {
    let eqs = toys::toy_equations(k).ok_or(BenchError::UnknownToy(k))?;
    let scm = Scm::from_equations(eqs)?;
    let train = scm.sample(n, seed).with_provenance(format!("toy{k}/train"), seed);
    let test_seed = seed.wrapping_add(TEST_SEED_OFFSET);
    let test = scm.sample(n, test_seed).with_provenance(format!("toy{k}/test"), test_seed);
    Ok((scm, train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMae {
    pub variable: VariableId,
    /// `None` when no query was feasible.
    pub nonbacktracking_mae: Option<f64>,
    pub natural_mae: Option<f64>,
}

/// Natural feasibility (NC) against ε-naturalness of the non-backtracking
/// point under the fitted model (NB).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossTab {
    pub nc1_nb1: usize,
    pub nc1_nb0: usize,
    pub nc0_nb1: usize,
    pub nc0_nb0: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub row: usize,
    pub a_star: f64,
    pub fio: FioResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub change_target: VariableId,
    pub outcomes: Vec<OutcomeMae>,
    pub total: usize,
    pub feasible: usize,
    pub infeasible: usize,
    pub cross_tab: CrossTab,
    /// Largest `|A* - a*|` over every returned counterfactual.
    pub max_target_residual: f64,
    pub config: FioConfig,
    pub seed: u64,
    /// Every infeasible natural query, in row order.
    pub audit: Vec<AuditEntry>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    /// Aligned plain-text summary, one line per outcome variable.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "change({})  eps={:e}  feasible {}/{}", self.change_target, self.config.epsilon, self.feasible, self.total);
        let _ = writeln!(s, "{:<10} {:>12} {:>12}", "outcome", "NB MAE", "Ours MAE");
        for o in &self.outcomes {
            let _ = writeln!(s, "{:<10} {:>12} {:>12}", o.variable.as_str(), fmt(o.nonbacktracking_mae), fmt(o.natural_mae));
        }
        let c = &self.cross_tab;
        let _ = writeln!(s, "NC/NB   NB=1   NB=0");
        let _ = writeln!(s, "NC=1 {:>6} {:>6}", c.nc1_nb1, c.nc1_nb0);
        let _ = writeln!(s, "NC=0 {:>6} {:>6}", c.nc0_nb1, c.nc0_nb0);
        s
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        c += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + c
}

struct RowOutcome {
    a_star: f64,
    fio: FioResult,
    nb_natural: bool,
    natural_err: Option<Vec<f64>>,
    nonbacktracking_err: Vec<f64>,
    target_residual: f64,
}

fn same_graph(a: &Scm, b: &Scm) -> bool {
    let (ga, gb) = (a.graph(), b.graph());
    ga.nodes() == gb.nodes() && (0..ga.len()).all(|i| ga.parent_indices(i) == gb.parent_indices(i))
}

/// Row `i`'s counterfactual value, drawn uniformly from the test column of
/// the target with its own generator stream.
fn draw_a_star(test: &Dataset, col: usize, seed: u64, row: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    test.row(rng.random_range(0..test.n_rows()))[col]
}

#[allow(clippy::too_many_arguments)]
fn run_row(
    true_scm: &Scm,
    fitted: &Scm,
    test: &Dataset,
    row: usize,
    a_col: usize,
    target: &VariableId,
    outcome_idx: &[usize],
    stats: &StandardizationStats,
    cfg: &FioConfig,
    seed: u64,
) -> Result<RowOutcome, BenchError> {
    let evidence = test.row_assignment(row);
    let a_star = draw_a_star(test, a_col, seed, row);
    let change = ChangeRequest { target: target.clone(), value: a_star };
    let g = true_scm.graph();

    let natural = natural_cf(fitted, &evidence, &change, stats, cfg)?;
    let fio = natural.fio.expect("natural answers carry their FIO result");
    let mut residual = (fio.cf_ancestors[target] - a_star).abs();
    let natural_err = match &natural.point {
        Some(pred) => {
            let truth = true_scm.counterfactual(&evidence, &extract_lbf(&fio)?)?;
            residual = residual.max((pred[target] - a_star).abs()).max((truth[target] - a_star).abs());
            Some(outcome_idx.iter().map(|&j| (pred[g.node(j)] - truth[g.node(j)]).abs()).collect())
        }
        None => None,
    };

    let nb = nonbacktracking_cf(fitted, &evidence, &change)?.point.expect("do() always yields a point");
    let nb_truth = nonbacktracking_cf(true_scm, &evidence, &change)?.point.expect("do() always yields a point");
    residual = residual.max((nb[target] - a_star).abs()).max((nb_truth[target] - a_star).abs());
    let targets = BTreeSet::from([target.clone()]);
    let nb_natural = is_epsilon_natural(fitted, &nb, &targets, cfg.measure, cfg.epsilon)?;
    Ok(RowOutcome {
        a_star,
        fio,
        nb_natural,
        natural_err,
        nonbacktracking_err: outcome_idx.iter().map(|&j| (nb[g.node(j)] - nb_truth[g.node(j)]).abs()).collect(),
        target_residual: residual,
    })
}

/// MAE of natural and non-backtracking counterfactuals predicted by `fitted`
/// against ground truth from `true_scm`, over test rows whose natural query
/// is feasible. The natural ground truth applies the solver's LBF
/// intervention to the true model; the non-backtracking one applies
/// `do(A = a*)`. Both methods share each row's `a*`.
#[allow(clippy::too_many_arguments)]
pub fn run_mae(
    true_scm: &Scm,
    fitted: &Scm,
    test: &Dataset,
    change_target: &VariableId,
    outcomes: &[VariableId],
    stats: &StandardizationStats,
    cfg: &FioConfig,
    seed: u64,
) -> Result<BenchReport, BenchError> {
    if !same_graph(true_scm, fitted) {
        return Err(BenchError::GraphMismatch);
    }
    if test.n_rows() == 0 {
        return Err(BenchError::EmptyTest);
    }
    cfg.validate()?;
    let g = true_scm.graph();
    g.index_of(change_target).map_err(FioError::from)?;
    let a_col = test.column_index(change_target)?;
    let outcome_idx = outcomes
        .iter()
        .map(|o| g.index_of(o).map_err(FioError::from))
        .collect::<Result<Vec<_>, _>>()?;

    let rows: Vec<RowOutcome> = (0..test.n_rows())
        .into_par_iter()
        .map(|r| run_row(true_scm, fitted, test, r, a_col, change_target, &outcome_idx, stats, cfg, seed))
        .collect::<Result<_, _>>()?;

    let mut cross_tab = CrossTab::default();
    let mut audit = Vec::new();
    let mut max_target_residual: f64 = 0.0;
    for (i, r) in rows.iter().enumerate() {
        let nc = r.natural_err.is_some();
        match (nc, r.nb_natural) {
            (true, true) => cross_tab.nc1_nb1 += 1,
            (true, false) => cross_tab.nc1_nb0 += 1,
            (false, true) => cross_tab.nc0_nb1 += 1,
            (false, false) => cross_tab.nc0_nb0 += 1,
        }
        if !nc {
            audit.push(AuditEntry { row: i, a_star: r.a_star, fio: r.fio.clone() });
        }
        max_target_residual = max_target_residual.max(r.target_residual);
    }
    let feasible = rows.iter().filter(|r| r.natural_err.is_some()).count();
    let mean = |k: usize, natural: bool| -> Option<f64> {
        if feasible == 0 {
            return None;
        }
        let errs = rows.iter().filter_map(|r| {
            r.natural_err.as_ref().map(|e| if natural { e[k] } else { r.nonbacktracking_err[k] })
        });
        Some(compensated_sum(errs) / feasible as f64)
    };
    let outcomes = outcomes
        .iter()
        .enumerate()
        .map(|(k, v)| OutcomeMae { variable: v.clone(), nonbacktracking_mae: mean(k, false), natural_mae: mean(k, true) })
        .collect();
    Ok(BenchReport {
        change_target: change_target.clone(),
        outcomes,
        total: rows.len(),
        feasible,
        infeasible: rows.len() - feasible,
        cross_tab,
        max_target_residual,
        config: cfg.clone(),
        seed,
        audit,
    })
}

/// One [`run_mae`] report per ε, all on the same queries.
#[allow(clippy::too_many_arguments)]
pub fn ablate_epsilon(
    true_scm: &Scm,
    fitted: &Scm,
    test: &Dataset,
    change_target: &VariableId,
    outcomes: &[VariableId],
    eps_list: &[f64],
    stats: &StandardizationStats,
    cfg: &FioConfig,
    seed: u64,
) -> Result<Vec<(f64, BenchReport)>, BenchError> {
    if eps_list.is_empty() || eps_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BenchError::EpsilonOrder);
    }
    eps_list
        .iter()
        .map(|&epsilon| {
            let c = FioConfig { epsilon, ..cfg.clone() };
            Ok((epsilon, run_mae(true_scm, fitted, test, change_target, outcomes, stats, &c, seed)?))
        })
        .collect()
}

/// `(ε, report)` pairs as a JSON object keyed by the formatted ε.
pub fn ablation_json(reports: &[(f64, BenchReport)]) -> String {
    let map: BTreeMap<String, &BenchReport> = reports.iter().map(|(e, r)| (format!("{e:e}"), r)).collect();
    serde_json::to_string_pretty(&map).expect("reports always serialize")
}
