//! Fitting location-scale SCMs from data and a known graph.
//!
//! Each variable gets `v = m(pa) + s·u`, with `m` a ridge fit on a polynomial
//! (optionally sinusoidal) basis of its parents and `s` the residual standard
//! deviation. The fitted mechanisms are written out as ordinary expressions,
//! so a fitted model serializes to the same spec file as a hand-written one.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::distance::{StandardizationStats, MIN_STD};
use crate::graph::{CausalGraph, VariableId};
use crate::mechanism::{Mechanism, MechanismError};
use crate::noise::NoiseDistribution;
use crate::scm::{NodeMechanism, Scm, ScmError};

/// Minimum rows per basis feature.
pub const ROWS_PER_FEATURE: usize = 10;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("design for `{0}` is rank deficient")]
    RankDeficient(VariableId),
    #[error("{rows} rows are too few for `{variable}` ({needed} needed)")]
    InsufficientData { variable: VariableId, rows: usize, needed: usize },
    #[error("standard deviation of `{0}` is zero")]
    ZeroStd(VariableId),
    #[error("invalid fit config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("fitted mechanism for `{variable}` failed to parse: {source}")]
    Mechanism { variable: VariableId, source: MechanismError },
    #[error(transparent)]
    Scm(#[from] ScmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Highest total degree of the polynomial monomials.
    pub degree: u32,
    /// Each frequency `ω` adds `sin(ω p)` and `sin(ω p + π/2)` per parent `p`.
    pub sin_frequencies: Vec<f64>,
    pub ridge: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { degree: 3, sin_frequencies: Vec::new(), ridge: 1e-6 }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        if self.degree < 1 {
            return Err(EstimatorError::InvalidConfig("degree must be at least 1".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(EstimatorError::InvalidConfig(format!("ridge must be nonnegative, got {}", self.ridge)));
        }
        if self.sin_frequencies.iter().any(|w| !(w.is_finite() && *w != 0.0)) {
            return Err(EstimatorError::InvalidConfig("sin frequencies must be finite and nonzero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Feature {
    /// Exponent per parent.
    Monomial(Vec<u32>),
    Sin { parent: usize, omega: f64, phase: bool },
}

impl Feature {
    fn eval(&self, pa: &[f64]) -> f64 {
        match self {
            Feature::Monomial(e) => pa.iter().zip(e).map(|(x, &k)| x.powi(k as i32)).product(),
            Feature::Sin { parent, omega, phase } => {
                let a = omega * pa[*parent] + if *phase { 0.5 * std::f64::consts::PI } else { 0.0 };
                a.sin()
            }
        }
    }

    fn expr(&self, names: &[&str]) -> String {
        match self {
            Feature::Monomial(e) => {
                let mut parts = Vec::new();
                for (name, &k) in names.iter().zip(e) {
                    parts.extend(std::iter::repeat_n(*name, k as usize));
                }
                parts.join("*")
            }
            Feature::Sin { parent, omega, phase } => {
                if *phase {
                    format!("sin({omega:?}*{} + 0.5*pi)", names[*parent])
                } else {
                    format!("sin({omega:?}*{})", names[*parent])
                }
            }
        }
    }
}

/// Monomials of total degree `1..=degree` in graded lexicographic order.
fn monomials(n_parents: usize, degree: u32) -> Vec<Vec<u32>> {
    fn rec(i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if i + 1 == cur.len() {
            cur[i] = left;
            out.push(cur.clone());
            return;
        }
        for k in (0..=left).rev() {
            cur[i] = k;
            rec(i + 1, left - k, cur, out);
        }
    }
    let mut out = Vec::new();
    if n_parents == 0 {
        return out;
    }
    for d in 1..=degree {
        let mut cur = vec![0; n_parents];
        rec(0, d, &mut cur, &mut out);
    }
    out
}

fn basis(n_parents: usize, cfg: &FitConfig) -> Vec<Feature> {
    let mut f: Vec<Feature> = monomials(n_parents, cfg.degree).into_iter().map(Feature::Monomial).collect();
    for &omega in &cfg.sin_frequencies {
        for parent in 0..n_parents {
            for phase in [false, true] {
                f.push(Feature::Sin { parent, omega, phase });
            }
        }
    }
    f
}

fn signed_term(coef: f64, body: &str, first: bool) -> String {
    let mag = coef.abs();
    let sign = if coef < 0.0 { "-" } else { "+" };
    match (first, body.is_empty()) {
        (true, true) => format!("{coef:?}"),
        (true, false) => format!("{coef:?}*{body}"),
        (false, true) => format!(" {sign} {mag:?}"),
        (false, false) => format!(" {sign} {mag:?}*{body}"),
    }
}

fn fit_one(
    data: &Dataset,
    graph: &CausalGraph,
    node: usize,
    cfg: &FitConfig,
) -> Result<Mechanism, EstimatorError> {
    let id = graph.node(node);
    let y_col = data.column_index(id)?;
    let parents: Vec<VariableId> = graph.parent_indices(node).iter().map(|&p| graph.node(p).clone()).collect();
    let p_cols = parents.iter().map(|p| data.column_index(p)).collect::<Result<Vec<_>, _>>()?;
    let names: Vec<&str> = parents.iter().map(VariableId::as_str).collect();
    let features = basis(parents.len(), cfg);
    let n = data.n_rows();
    let needed = (ROWS_PER_FEATURE * features.len()).max(2);
    if n < needed {
        return Err(EstimatorError::InsufficientData { variable: id.clone(), rows: n, needed });
    }
    let nf = n as f64;
    let y: Vec<f64> = data.column(y_col).collect();
    let y_mean = y.iter().sum::<f64>() / nf;

    let mut coefs = vec![0.0; features.len()];
    let mut intercept = y_mean;
    if !features.is_empty() {
        let mut pa = vec![0.0; parents.len()];
        let raw = DMatrix::from_fn(n, features.len(), |r, c| {
            for (k, &j) in p_cols.iter().enumerate() {
                pa[k] = data.row(r)[j];
            }
            features[c].eval(&pa)
        });
        let mut mu = vec![0.0; features.len()];
        let mut sd = vec![0.0; features.len()];
        for c in 0..features.len() {
            let col = raw.column(c);
            mu[c] = col.sum() / nf;
            sd[c] = (col.iter().map(|v| (v - mu[c]) * (v - mu[c])).sum::<f64>() / nf).sqrt();
            if !(sd[c] > MIN_STD) {
                return Err(EstimatorError::RankDeficient(id.clone()));
            }
        }
        let z = DMatrix::from_fn(n, features.len(), |r, c| (raw[(r, c)] - mu[c]) / sd[c]);
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
        let mut gram = z.transpose() * &z / nf;
        for c in 0..features.len() {
            gram[(c, c)] += cfg.ridge;
        }
        let rhs = z.transpose() * yc / nf;
        let beta = gram
            .cholesky()
            .ok_or_else(|| EstimatorError::RankDeficient(id.clone()))?
            .solve(&rhs);
        for c in 0..features.len() {
            coefs[c] = beta[c] / sd[c];
            intercept -= coefs[c] * mu[c];
        }
    }

    let mut location = signed_term(intercept, "", true);
    for (f, &c) in features.iter().zip(&coefs) {
        location.push_str(&signed_term(c, &f.expr(&names), false));
    }
    let parse = |text: &str| {
        Mechanism::parse(text, &parents, NoiseDistribution::StandardNormal)
            .map_err(|source| EstimatorError::Mechanism { variable: id.clone(), source })
    };
    // residuals through the parsed expression, so `s` matches the model exactly
    let probe = parse(&format!("{location} + u"))?;
    let mut pa = vec![0.0; parents.len()];
    let mut slots = Vec::new();
    let mut ss = 0.0;
    for r in 0..n {
        for (k, &j) in p_cols.iter().enumerate() {
            pa[k] = data.row(r)[j];
        }
        let e = y[r] - probe.tape().eval_with(&pa, &mut slots);
        ss += e * e;
    }
    let s = (ss / nf).sqrt();
    if !(s > MIN_STD) {
        return Err(EstimatorError::ZeroStd(id.clone()));
    }
    parse(&format!("{location} + {s:?}*u"))
}

/// Fits one location-scale mechanism per node of `graph`.
pub fn fit_location_scale(data: &Dataset, graph: &CausalGraph, cfg: &FitConfig) -> Result<Scm, EstimatorError> {
    cfg.validate()?;
    let mechanisms = (0..graph.len())
        .into_par_iter()
        .map(|i| fit_one(data, graph, i, cfg).map(NodeMechanism::Structural))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Scm::new(graph.clone(), mechanisms)?)
}

/// Per-column mean and population standard deviation.
pub fn column_stats(data: &Dataset) -> Result<StandardizationStats, EstimatorError> {
    let n = data.n_rows();
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for (j, id) in data.columns().iter().enumerate() {
        if n < 2 {
            return Err(EstimatorError::InsufficientData { variable: id.clone(), rows: n, needed: 2 });
        }
        let m = data.column(j).sum::<f64>() / n as f64;
        let s = (data.column(j).map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
        if !(s >= MIN_STD) {
            return Err(EstimatorError::ZeroStd(id.clone()));
        }
        mean.insert(id.clone(), m);
        std.insert(id.clone(), s);
    }
    StandardizationStats::new(mean, std).map_err(|e| match e {
        crate::distance::DistanceError::ZeroStd(v) => EstimatorError::ZeroStd(v),
        other => EstimatorError::InvalidConfig(other.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toys::toy_scm;
    use approx::assert_abs_diff_eq;

    fn id(s: &str) -> VariableId {
        VariableId::from(s)
    }

    #[test]
    fn monomial_order() {
        assert_eq!(monomials(2, 2), vec![vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]);
        assert_eq!(monomials(1, 3).len(), 3);
        assert_eq!(monomials(2, 3).len(), 9);
        assert!(monomials(0, 3).is_empty());
    }

    #[test]
    fn recovers_linear_coefficient() {
        let truth = Scm::from_equations(&[("x", &[], "u"), ("v", &["x"], "2*x + u")]).unwrap();
        let data = truth.sample(10_000, 3);
        let fit = fit_location_scale(&data, truth.graph(), &FitConfig { degree: 1, ..FitConfig::default() }).unwrap();
        let m = fit.structural(1).unwrap();
        let slope = m.location(&[1.0]).unwrap() - m.location(&[0.0]).unwrap();
        assert_abs_diff_eq!(slope, 2.0, epsilon = 0.05);
        assert_abs_diff_eq!(m.scale(), 1.0, epsilon = 0.05);
    }

    #[test]
    fn root_is_mean_and_std() {
        let scm = toy_scm(1);
        let data = scm.sample(5000, 1);
        let fit = fit_location_scale(&data, scm.graph(), &FitConfig::default()).unwrap();
        let stats = column_stats(&data).unwrap();
        let root = fit.structural(0).unwrap();
        assert_abs_diff_eq!(root.location(&[]).unwrap(), stats.mean(&id("n1")).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(root.scale(), stats.std(&id("n1")).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn toy1_n2_recovered() {
        let scm = toy_scm(1);
        let data = scm.sample(10_000, 0);
        let fit = fit_location_scale(&data, scm.graph(), &FitConfig::default()).unwrap();
        let m = fit.structural(1).unwrap();
        // linear coefficient = derivative at 0
        let h = 1e-4;
        let d = (m.location(&[h]).unwrap() - m.location(&[-h]).unwrap()) / (2.0 * h);
        assert_abs_diff_eq!(d, -1.0, epsilon = 0.05);
        assert_abs_diff_eq!(m.scale(), 1.0 / 3.0, epsilon = 0.02);
        let stats = column_stats(&data).unwrap();
        assert_abs_diff_eq!(stats.std(&id("n1")).unwrap(), 1.0, epsilon = 0.03);
    }

    #[test]
    fn fitted_model_round_trips_through_spec_file() {
        let scm = toy_scm(3);
        let data = scm.sample(2000, 5);
        let cfg = FitConfig { sin_frequencies: vec![0.5, 1.25], ..FitConfig::default() };
        let fit = fit_location_scale(&data, scm.graph(), &cfg).unwrap();
        let (back, _) = Scm::from_spec_str(&fit.to_spec_string(None)).unwrap();
        assert_eq!(back, fit);
        let u = [0.3, -1.2, 0.7, 2.0];
        let v = fit.evaluate_indexed(&u);
        let back_u = fit.abduct_indexed(&v);
        for (a, b) in u.iter().zip(&back_u) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn errors() {
        let mut d = Dataset::new(vec![id("a")]).unwrap();
        d.push_row(&[0.0]).unwrap();
        d.push_row(&[2.0]).unwrap();
        let s = column_stats(&d).unwrap();
        assert_eq!(s.mean(&id("a")).unwrap(), 1.0);
        assert_eq!(s.std(&id("a")).unwrap(), 1.0);

        let mut c = Dataset::new(vec![id("a")]).unwrap();
        for _ in 0..5 {
            c.push_row(&[3.0]).unwrap();
        }
        assert!(matches!(column_stats(&c), Err(EstimatorError::ZeroStd(_))));

        let scm = toy_scm(1);
        let small = scm.sample(50, 0);
        assert!(matches!(
            fit_location_scale(&small, scm.graph(), &FitConfig::default()),
            Err(EstimatorError::InsufficientData { .. })
        ));

        let g = CausalGraph::new(vec![id("a"), id("b")], [(id("b"), vec![id("a")])]).unwrap();
        let mut k = Dataset::new(vec![id("a"), id("b")]).unwrap();
        for i in 0..100 {
            k.push_row(&[1.0, i as f64]).unwrap();
        }
        assert!(matches!(
            fit_one(&k, &g, 1, &FitConfig { degree: 1, ..FitConfig::default() }),
            Err(EstimatorError::RankDeficient(_))
        ));
        assert!(FitConfig { degree: 0, ..FitConfig::default() }.validate().is_err());
    }
}
