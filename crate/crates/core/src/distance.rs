//! Backtracking distances: standardized L1 on values and weighted CDF distance on noise.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::VariableId;
use crate::noise::NoiseDistribution;
use crate::scm::{Assignment, NoiseAssignment};

/// Floor below which a standard deviation counts as zero.
pub const MIN_STD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DistanceError {
    #[error("no entry for `{0}`")]
    MissingVariable(VariableId),
    #[error("standard deviation of `{0}` is zero")]
    ZeroStd(VariableId),
    #[error("mean and std maps cover different variables")]
    KeyMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    EndogenousL1,
    MechanismCdf,
}

impl DistanceKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "endogenous_l1" => Some(Self::EndogenousL1),
            "mechanism_cdf" => Some(Self::MechanismCdf),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::EndogenousL1 => "endogenous_l1",
            Self::MechanismCdf => "mechanism_cdf",
        }
    }
}

/// Per-variable location and scale used to standardize distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    mean: BTreeMap<VariableId, f64>,
    std: BTreeMap<VariableId, f64>,
}

impl StandardizationStats {
    pub fn new(mean: BTreeMap<VariableId, f64>, std: BTreeMap<VariableId, f64>) -> Result<Self, DistanceError> {
        if !mean.keys().eq(std.keys()) {
            return Err(DistanceError::KeyMismatch);
        }
        for (k, &s) in &std {
            if !(s >= MIN_STD && s.is_finite()) {
                return Err(DistanceError::ZeroStd(k.clone()));
            }
        }
        Ok(Self { mean, std })
    }

    /// Unit stats (mean 0, std 1) for the given variables.
    pub fn unit<'a>(vars: impl IntoIterator<Item = &'a VariableId>) -> Self {
        let ids: Vec<VariableId> = vars.into_iter().cloned().collect();
        Self {
            mean: ids.iter().map(|k| (k.clone(), 0.0)).collect(),
            std: ids.into_iter().map(|k| (k, 1.0)).collect(),
        }
    }

    pub fn means(&self) -> &BTreeMap<VariableId, f64> {
        &self.mean
    }

    pub fn stds(&self) -> &BTreeMap<VariableId, f64> {
        &self.std
    }

    pub fn mean(&self, id: &VariableId) -> Result<f64, DistanceError> {
        self.mean.get(id).copied().ok_or_else(|| DistanceError::MissingVariable(id.clone()))
    }

    pub fn std(&self, id: &VariableId) -> Result<f64, DistanceError> {
        self.std.get(id).copied().ok_or_else(|| DistanceError::MissingVariable(id.clone()))
    }
}

/// `Σ_j |v*_j - v_j| / σ_j` over the variables of `an`.
pub fn endogenous_l1(
    an: &Assignment,
    an_star: &Assignment,
    stats: &StandardizationStats,
) -> Result<f64, DistanceError> {
    if let Some(extra) = an_star.keys().find(|k| !an.contains(k)) {
        return Err(DistanceError::MissingVariable(extra.clone()));
    }
    let mut total = 0.0;
    for (id, v) in an.iter() {
        let v_star = an_star.get(id).ok_or_else(|| DistanceError::MissingVariable(id.clone()))?;
        total += (v_star - v).abs() / stats.std(id)?;
    }
    Ok(total)
}

/// `Σ_j w_j |F_j(u_j) - F_j(u*_j)|` over the variables of `u`.
pub fn mechanism_cdf_distance(
    u: &NoiseAssignment,
    u_star: &NoiseAssignment,
    weights: &BTreeMap<VariableId, u32>,
    noise: &BTreeMap<VariableId, NoiseDistribution>,
) -> Result<f64, DistanceError> {
    if let Some(extra) = u_star.keys().find(|k| !u.contains(k)) {
        return Err(DistanceError::MissingVariable(extra.clone()));
    }
    let mut total = 0.0;
    for (id, a) in u.iter() {
        let missing = || DistanceError::MissingVariable(id.clone());
        let b = u_star.get(id).ok_or_else(missing)?;
        let w = *weights.get(id).ok_or_else(missing)?;
        let f = noise.get(id).ok_or_else(missing)?;
        total += f64::from(w) * (f.cdf(a) - f.cdf(b)).abs();
    }
    Ok(total)
}
