//! Local and global naturalness scores and the ε-natural predicate.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, VariableId};
use crate::mechanism::{Mechanism, MechanismError};
use crate::noise::NoiseDistribution;
use crate::scm::{Assignment, NodeMechanism, Scm};

#[derive(Debug, Error)]
pub enum NaturalnessError {
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("`{0}` is fixed by an intervention; naturalness is undefined")]
    ConstantMechanism(VariableId),
    #[error("no value for `{0}`")]
    MissingValue(VariableId),
    #[error("epsilon {epsilon} outside {range} for {measure}")]
    InvalidEpsilon { epsilon: f64, measure: &'static str, range: &'static str },
}

/// How naturally a value is generated by its local mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NaturalnessMeasure {
    /// `p(v | pa) · exp(H(V | pa))`, scale-free density.
    EntropyNormalized,
    /// `min(F(u), 1 - F(u))` on the abducted noise.
    ExogenousCdf,
    /// `min(F(v | pa), 1 - F(v | pa))`.
    #[default]
    ConditionalCdf,
}

impl NaturalnessMeasure {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "entropy_normalized" => Some(Self::EntropyNormalized),
            "exogenous_cdf" => Some(Self::ExogenousCdf),
            "conditional_cdf" => Some(Self::ConditionalCdf),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::EntropyNormalized => "entropy_normalized",
            Self::ExogenousCdf => "exogenous_cdf",
            Self::ConditionalCdf => "conditional_cdf",
        }
    }

    pub fn is_cdf(&self) -> bool {
        !matches!(self, Self::EntropyNormalized)
    }

    /// Rejects thresholds outside the measure's score range.
    pub fn check_epsilon(&self, epsilon: f64) -> Result<(), NaturalnessError> {
        let (ok, range) = match self {
            Self::EntropyNormalized => (epsilon > 0.0 && epsilon < 0.5f64.exp(), "(0, e^0.5)"),
            _ => (epsilon > 0.0 && epsilon < 0.5, "(0, 0.5)"),
        };
        if ok {
            Ok(())
        } else {
            Err(NaturalnessError::InvalidEpsilon { epsilon, measure: self.name(), range })
        }
    }

    /// Score of noise value `u` for an additive-noise mechanism. Every
    /// measure here depends on the value only through its abducted noise.
    pub fn score_noise(&self, noise: NoiseDistribution, u: f64) -> f64 {
        match self {
            Self::EntropyNormalized => (noise.ln_pdf(u) + noise.entropy()).exp(),
            Self::ExogenousCdf | Self::ConditionalCdf => {
                let f = noise.cdf(u);
                f.min(1.0 - f)
            }
        }
    }

    /// CDF threshold `ε'` such that `score > ε` iff `min(F, 1 - F) > ε'`.
    ///
    /// For the entropy-normalized score with standard normal noise,
    /// `score = exp(1/2 - u²/2)`, so `score > ε` iff `|u| < sqrt(1 - 2 ln ε)`.
    pub fn cdf_threshold(&self, noise: NoiseDistribution, epsilon: f64) -> f64 {
        match self {
            Self::ExogenousCdf | Self::ConditionalCdf => epsilon,
            Self::EntropyNormalized => match noise {
                NoiseDistribution::StandardNormal => noise.cdf(-(1.0 - 2.0 * epsilon.ln()).sqrt()),
            },
        }
    }
}

/// Local naturalness of `v` generated from parents `pa`.
pub fn local_naturalness(
    measure: NaturalnessMeasure,
    mech: &Mechanism,
    v: f64,
    pa: &[f64],
) -> Result<f64, NaturalnessError> {
    Ok(match measure {
        NaturalnessMeasure::EntropyNormalized => {
            let (h, ln_p) = mech.conditional_entropy_and_logdensity(v, pa)?;
            (ln_p + h).exp()
        }
        NaturalnessMeasure::ExogenousCdf => {
            let f = mech.noise().cdf(mech.inverse(pa, v)?);
            f.min(1.0 - f)
        }
        NaturalnessMeasure::ConditionalCdf => {
            let f = mech.conditional_cdf(v, pa)?;
            f.min(1.0 - f)
        }
    })
}

/// Local scores of every variable of `AN(targets)`.
pub fn local_scores(
    scm: &Scm,
    point: &Assignment,
    targets: &BTreeSet<VariableId>,
    measure: NaturalnessMeasure,
) -> Result<BTreeMap<VariableId, f64>, NaturalnessError> {
    let g = scm.graph();
    let an = g.ancestors_including(targets)?;
    let mut out = BTreeMap::new();
    for id in an {
        let i = g.index_of(&id)?;
        let mech = match scm.mechanism(i) {
            NodeMechanism::Structural(m) => m,
            NodeMechanism::Fixed(_) => return Err(NaturalnessError::ConstantMechanism(id)),
        };
        let value = |j: usize| {
            let pid = g.node(j);
            point.get(pid).ok_or_else(|| NaturalnessError::MissingValue(pid.clone()))
        };
        let pa = g.parent_indices(i).iter().map(|&p| value(p)).collect::<Result<Vec<_>, _>>()?;
        let score = local_naturalness(measure, mech, value(i)?, &pa)?;
        out.insert(id, score);
    }
    Ok(out)
}

/// Smallest local score over `AN(targets)`.
pub fn global_naturalness(
    scm: &Scm,
    point: &Assignment,
    targets: &BTreeSet<VariableId>,
    measure: NaturalnessMeasure,
) -> Result<f64, NaturalnessError> {
    Ok(local_scores(scm, point, targets, measure)?
        .into_values()
        .fold(f64::INFINITY, f64::min))
}

/// `global_naturalness > epsilon`, strictly.
pub fn is_epsilon_natural(
    scm: &Scm,
    point: &Assignment,
    targets: &BTreeSet<VariableId>,
    measure: NaturalnessMeasure,
    epsilon: f64,
) -> Result<bool, NaturalnessError> {
    measure.check_epsilon(epsilon)?;
    Ok(global_naturalness(scm, point, targets, measure)? > epsilon)
}
