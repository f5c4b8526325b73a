//! End-to-end counterfactual queries.

use serde::{Deserialize, Serialize};

use crate::distance::StandardizationStats;
use crate::fio::{extract_lbf, solve, ChangeRequest, FioConfig, FioError, FioResult};
use crate::scm::{Assignment, Intervention, Scm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterfactualKind {
    NonBacktracking,
    Natural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualAnswer {
    pub kind: CounterfactualKind,
    /// The counterfactual world; absent for infeasible natural queries.
    pub point: Option<Assignment>,
    pub fio: Option<FioResult>,
}

/// Pearl's three steps: abduct, `do(A = a*)`, predict.
pub fn nonbacktracking_cf(
    scm: &Scm,
    evidence: &Assignment,
    change: &ChangeRequest,
) -> Result<CounterfactualAnswer, FioError> {
    let iv = Intervention::single(change.target.clone(), change.value);
    Ok(CounterfactualAnswer {
        kind: CounterfactualKind::NonBacktracking,
        point: Some(scm.counterfactual(evidence, &iv)?),
        fio: None,
    })
}

/// Solves for the LBF intervention and, when feasible, predicts under it.
/// Noise outside the LBF set stays at its abducted factual value.
pub fn natural_cf(
    scm: &Scm,
    evidence: &Assignment,
    change: &ChangeRequest,
    stats: &StandardizationStats,
    cfg: &FioConfig,
) -> Result<CounterfactualAnswer, FioError> {
    let fio = solve(scm, evidence, change, stats, cfg)?;
    let point = match extract_lbf(&fio) {
        Ok(iv) => Some(scm.counterfactual(evidence, &iv)?),
        Err(FioError::NotFeasible) => None,
        Err(e) => return Err(e),
    };
    Ok(CounterfactualAnswer { kind: CounterfactualKind::Natural, point, fio: Some(fio) })
}
