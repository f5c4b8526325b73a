//! Assembled structural causal models: evaluation, abduction, sampling and surgery.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::distance::StandardizationStats;
use crate::graph::{CausalGraph, GraphError, VariableId};
use crate::mechanism::{Mechanism, MechanismError};
use crate::noise::NoiseDistribution;

/// Default half-width, in standardized units, of the acceptance band used by
/// [`Scm::complete_partial_evidence`].
pub const DEFAULT_EVIDENCE_BAND: f64 = 0.05;
/// Default cap on ancestral draws for partial-evidence completion.
pub const DEFAULT_REJECTION_BUDGET: u64 = 1_000_000;

const PILOT_DRAWS: usize = 2000;
const PILOT_SEED_SALT: u64 = 0x5e_ed0f_9117;

#[derive(Debug, Error)]
pub enum ScmError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("mechanism of `{variable}`: {source}")]
    Mechanism { variable: VariableId, source: MechanismError },
    #[error("no noise value for `{0}`")]
    MissingNoise(VariableId),
    #[error("no value for `{0}`")]
    MissingValue(VariableId),
    #[error("`{0}` is fixed by an intervention and has no generative mechanism")]
    ConstantMechanism(VariableId),
    #[error("intervention must target at least one variable")]
    EmptyIntervention,
    #[error("partial evidence not matched within {draws} draws")]
    RejectionBudgetExceeded { draws: u64 },
    #[error("invalid SCM spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

macro_rules! value_map {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(BTreeMap<VariableId, f64>);

        impl $name {
            pub fn new() -> Self {
                Self::default()
            }

            pub fn insert(&mut self, id: VariableId, value: f64) -> Option<f64> {
                self.0.insert(id, value)
            }

            pub fn get(&self, id: &VariableId) -> Option<f64> {
                self.0.get(id).copied()
            }

            pub fn contains(&self, id: &VariableId) -> bool {
                self.0.contains_key(id)
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn iter(&self) -> impl Iterator<Item = (&VariableId, f64)> {
                self.0.iter().map(|(k, v)| (k, *v))
            }

            pub fn keys(&self) -> impl Iterator<Item = &VariableId> {
                self.0.keys()
            }

            pub fn as_map(&self) -> &BTreeMap<VariableId, f64> {
                &self.0
            }
        }

        impl FromIterator<(VariableId, f64)> for $name {
            fn from_iter<I: IntoIterator<Item = (VariableId, f64)>>(iter: I) -> Self {
                Self(iter.into_iter().collect())
            }
        }

        impl std::ops::Index<&VariableId> for $name {
            type Output = f64;
            fn index(&self, id: &VariableId) -> &f64 {
                &self.0[id]
            }
        }
    };
}

value_map!(
    /// Values of endogenous variables.
    Assignment
);
value_map!(
    /// One exogenous noise value per endogenous variable.
    NoiseAssignment
);

/// Hard intervention: each target's mechanism is replaced by a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub targets: BTreeMap<VariableId, f64>,
}

impl Intervention {
    pub fn new(targets: BTreeMap<VariableId, f64>) -> Result<Self, ScmError> {
        if targets.is_empty() {
            return Err(ScmError::EmptyIntervention);
        }
        Ok(Self { targets })
    }

    pub fn single(target: VariableId, value: f64) -> Self {
        Self { targets: BTreeMap::from([(target, value)]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeMechanism {
    Structural(Mechanism),
    Fixed(f64),
}

impl NodeMechanism {
    pub fn structural(&self) -> Option<&Mechanism> {
        match self {
            NodeMechanism::Structural(m) => Some(m),
            NodeMechanism::Fixed(_) => None,
        }
    }
}

/// Graph plus one mechanism per node. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Scm {
    graph: CausalGraph,
    mechanisms: Vec<NodeMechanism>,
}

impl Scm {
    /// `mechanisms` is indexed like `graph.nodes()`.
    pub fn new(graph: CausalGraph, mechanisms: Vec<NodeMechanism>) -> Result<Self, ScmError> {
        if mechanisms.len() != graph.len() {
            return Err(ScmError::Spec(format!(
                "{} mechanisms for {} variables",
                mechanisms.len(),
                graph.len()
            )));
        }
        for (i, m) in mechanisms.iter().enumerate() {
            let expected: Vec<VariableId> =
                graph.parent_indices(i).iter().map(|&p| graph.node(p).clone()).collect();
            match m {
                NodeMechanism::Structural(mech) if mech.parents() != expected.as_slice() => {
                    return Err(ScmError::Spec(format!(
                        "mechanism parents of `{}` do not match the graph",
                        graph.node(i)
                    )));
                }
                NodeMechanism::Fixed(_) if !expected.is_empty() => {
                    return Err(ScmError::Spec(format!(
                        "fixed variable `{}` cannot have parents",
                        graph.node(i)
                    )));
                }
                _ => {}
            }
        }
        Ok(Self { graph, mechanisms })
    }

    /// Builds an SCM from `(name, parents, expression)` triples in declaration order,
    /// all with standard normal noise.
    pub fn from_equations(eqs: &[(&str, &[&str], &str)]) -> Result<Self, ScmError> {
        let nodes = eqs
            .iter()
            .map(|(n, _, _)| VariableId::new(*n))
            .collect::<Result<Vec<_>, _>>()?;
        let parents: Vec<(VariableId, Vec<VariableId>)> = eqs
            .iter()
            .map(|(n, ps, _)| (VariableId::from(*n), ps.iter().map(|&p| VariableId::from(p)).collect()))
            .collect();
        let graph = CausalGraph::new(nodes, parents.clone())?;
        let mechanisms = eqs
            .iter()
            .zip(&parents)
            .map(|((_, _, text), (id, ps))| {
                Mechanism::parse(text, ps, NoiseDistribution::StandardNormal)
                    .map(NodeMechanism::Structural)
                    .map_err(|source| ScmError::Mechanism { variable: id.clone(), source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(graph, mechanisms)
    }

    pub fn graph(&self) -> &CausalGraph {
        &self.graph
    }

    pub fn mechanism(&self, idx: usize) -> &NodeMechanism {
        &self.mechanisms[idx]
    }

    pub fn mechanism_of(&self, id: &VariableId) -> Result<&NodeMechanism, ScmError> {
        Ok(&self.mechanisms[self.graph.index_of(id)?])
    }

    pub fn structural(&self, idx: usize) -> Result<&Mechanism, ScmError> {
        self.mechanisms[idx]
            .structural()
            .ok_or_else(|| ScmError::ConstantMechanism(self.graph.node(idx).clone()))
    }


    /// Node-indexed forward pass; `noise[i]` is ignored for fixed nodes.
    pub fn evaluate_indexed(&self, noise: &[f64]) -> Vec<f64> {
        let mut values = vec![0.0; self.graph.len()];
        let mut pa = Vec::new();
        let mut slots = Vec::new();
        for &i in self.graph.topo_indices() {
            values[i] = match &self.mechanisms[i] {
                NodeMechanism::Fixed(c) => *c,
                NodeMechanism::Structural(m) => {
                    pa.clear();
                    pa.extend(self.graph.parent_indices(i).iter().map(|&p| values[p]));
                    m.tape().eval_with(&pa, &mut slots) + m.scale() * noise[i]
                }
            };
        }
        values
    }

    /// Node-indexed abduction; fixed nodes get noise 0.
    pub fn abduct_indexed(&self, values: &[f64]) -> Vec<f64> {
        let mut slots = Vec::new();
        let mut pa = Vec::new();
        (0..self.graph.len())
            .map(|i| match &self.mechanisms[i] {
                NodeMechanism::Fixed(_) => 0.0,
                NodeMechanism::Structural(m) => {
                    pa.clear();
                    pa.extend(self.graph.parent_indices(i).iter().map(|&p| values[p]));
                    (values[i] - m.tape().eval_with(&pa, &mut slots)) / m.scale()
                }
            })
            .collect()
    }

    pub fn evaluate(&self, noise: &NoiseAssignment) -> Result<Assignment, ScmError> {
        let u = self
            .graph
            .nodes()
            .iter()
            .zip(&self.mechanisms)
            .map(|(id, m)| match m {
                NodeMechanism::Fixed(_) => Ok(0.0),
                NodeMechanism::Structural(_) => noise.get(id).ok_or_else(|| ScmError::MissingNoise(id.clone())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.to_assignment(&self.evaluate_indexed(&u)))
    }

    /// Recovers the noise of every generative node from a full data point.
    pub fn abduct(&self, point: &Assignment) -> Result<NoiseAssignment, ScmError> {
        let values = self.indexed_values(point)?;
        let u = self.abduct_indexed(&values);
        Ok(self
            .graph
            .nodes()
            .iter()
            .enumerate()
            .filter(|(i, _)| self.mechanisms[*i].structural().is_some())
            .map(|(i, id)| (id.clone(), u[i]))
            .collect())
    }

    pub fn indexed_values(&self, point: &Assignment) -> Result<Vec<f64>, ScmError> {
        self.graph
            .nodes()
            .iter()
            .map(|id| point.get(id).ok_or_else(|| ScmError::MissingValue(id.clone())))
            .collect()
    }

    pub fn to_assignment(&self, values: &[f64]) -> Assignment {
        self.graph.nodes().iter().cloned().zip(values.iter().copied()).collect()
    }

    /// Ancestral sampling. Node `i` draws its noise from stream `i` of a
    /// ChaCha8 generator seeded with `seed`, so adding rows never perturbs
    /// earlier ones and columns never share randomness.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut sampler = NoiseSampler::new(self, seed);
        let mut ds = Dataset::new(self.graph.nodes().to_vec())
            .expect("graph nodes are unique")
            .with_provenance("ancestral", seed);
        let mut u = vec![0.0; self.graph.len()];
        for _ in 0..n {
            sampler.draw(&mut u);
            ds.push_row(&self.evaluate_indexed(&u)).expect("row width matches graph");
        }
        ds
    }

    /// Counterfactual world of the factual point `factual` (with abducted
    /// `noise`) under the hard interventions `fixed`. Nodes whose parents all
    /// keep their factual values keep their own factual value bit-for-bit;
    /// every other node is recomputed from its mechanism and factual noise.
    pub fn counterfactual_indexed(&self, factual: &[f64], noise: &[f64], fixed: &[(usize, f64)]) -> Vec<f64> {
        let mut values = factual.to_vec();
        let mut forced = vec![None; self.graph.len()];
        for &(i, v) in fixed {
            forced[i] = Some(v);
        }
        let mut pa = Vec::new();
        let mut slots = Vec::new();
        for &i in self.graph.topo_indices() {
            if let Some(v) = forced[i] {
                values[i] = v;
                continue;
            }
            let ps = self.graph.parent_indices(i);
            if ps.iter().all(|&p| values[p].to_bits() == factual[p].to_bits()) {
                continue;
            }
            values[i] = match &self.mechanisms[i] {
                NodeMechanism::Fixed(c) => *c,
                NodeMechanism::Structural(m) => {
                    pa.clear();
                    pa.extend(ps.iter().map(|&p| values[p]));
                    m.tape().eval_with(&pa, &mut slots) + m.scale() * noise[i]
                }
            };
        }
        values
    }

    /// Abduction, intervention and prediction on a full factual point.
    pub fn counterfactual(&self, factual: &Assignment, iv: &Intervention) -> Result<Assignment, ScmError> {
        let values = self.indexed_values(factual)?;
        let noise = self.abduct_indexed(&values);
        let fixed = iv
            .targets
            .iter()
            .map(|(id, &v)| Ok((self.graph.index_of(id)?, v)))
            .collect::<Result<Vec<_>, ScmError>>()?;
        Ok(self.to_assignment(&self.counterfactual_indexed(&values, &noise, &fixed)))
    }

    /// Mutilated model: targets become constants and lose their parents.
    pub fn intervene(&self, iv: &Intervention) -> Result<Scm, ScmError> {
        if iv.targets.is_empty() {
            return Err(ScmError::EmptyIntervention);
        }
        let mut idx = Vec::with_capacity(iv.targets.len());
        let mut mechanisms = self.mechanisms.clone();
        for (id, &value) in &iv.targets {
            let i = self.graph.index_of(id)?;
            mechanisms[i] = NodeMechanism::Fixed(value);
            idx.push(i);
        }
        Ok(Scm { graph: self.graph.mutilate(&idx), mechanisms })
    }

    /// Draws one full point consistent with `partial` by banded rejection
    /// sampling; see [`Scm::complete_partial_evidence_with_budget`].
    pub fn complete_partial_evidence(
        &self,
        partial: &Assignment,
        seed: u64,
        tolerance_band: f64,
    ) -> Result<Assignment, ScmError> {
        self.complete_partial_evidence_with_budget(partial, seed, tolerance_band, DEFAULT_REJECTION_BUDGET)
    }

    /// Ancestral-samples until every evidenced variable lies within
    /// `tolerance_band` standard deviations of its evidence, then overwrites
    /// the evidenced coordinates exactly. Standard deviations come from a
    /// seeded pilot sample of the model itself.
    pub fn complete_partial_evidence_with_budget(
        &self,
        partial: &Assignment,
        seed: u64,
        tolerance_band: f64,
        max_draws: u64,
    ) -> Result<Assignment, ScmError> {
        let mut evidence: Vec<(usize, f64)> = Vec::with_capacity(partial.len());
        for (id, v) in partial.iter() {
            evidence.push((self.graph.index_of(id)?, v));
        }
        if evidence.len() == self.graph.len() {
            return Ok(partial.clone());
        }

        let pilot = self.sample(PILOT_DRAWS, seed ^ PILOT_SEED_SALT);
        let std: Vec<f64> = (0..self.graph.len())
            .map(|j| {
                let n = pilot.n_rows() as f64;
                let mean = pilot.column(j).sum::<f64>() / n;
                let var = pilot.column(j).map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                // constant columns (fixed nodes) fall back to raw units
                if var > 0.0 { var.sqrt() } else { 1.0 }
            })
            .collect();

        let mut sampler = NoiseSampler::new(self, seed);
        let mut u = vec![0.0; self.graph.len()];
        for _ in 0..max_draws {
            sampler.draw(&mut u);
            let mut values = self.evaluate_indexed(&u);
            if evidence
                .iter()
                .all(|&(j, e)| ((values[j] - e) / std[j]).abs() <= tolerance_band)
            {
                for &(j, e) in &evidence {
                    values[j] = e;
                }
                return Ok(self.to_assignment(&values));
            }
        }
        Err(ScmError::RejectionBudgetExceeded { draws: max_draws })
    }

    // ------------------------------------------------------------------
    // Spec file
    // ------------------------------------------------------------------

    pub fn from_spec_str(text: &str) -> Result<(Scm, Option<StandardizationStats>), ScmError> {
        let spec: ScmFile = toml::from_str(text).map_err(|e| ScmError::Spec(e.to_string()))?;
        let nodes = spec
            .variables
            .iter()
            .map(|n| VariableId::new(n.as_str()))
            .collect::<Result<Vec<_>, _>>()?;
        for name in spec.nodes.keys() {
            if !spec.variables.contains(name) {
                return Err(ScmError::Spec(format!("table for undeclared variable `{name}`")));
            }
        }
        let mut parents = Vec::with_capacity(nodes.len());
        for id in &nodes {
            let node = spec
                .nodes
                .get(id.as_str())
                .ok_or_else(|| ScmError::Spec(format!("missing table [nodes.{id}]")))?;
            let ps = node
                .parents
                .iter()
                .map(|p| VariableId::new(p.as_str()))
                .collect::<Result<Vec<_>, _>>()?;
            parents.push((id.clone(), ps));
        }
        let graph = CausalGraph::new(nodes, parents.clone())?;
        let mut mechanisms = Vec::with_capacity(graph.len());
        for (id, ps) in &parents {
            let node = &spec.nodes[id.as_str()];
            let m = match (&node.mechanism, node.value) {
                (Some(text), None) => {
                    let noise_name = node.noise.as_deref().unwrap_or("standard_normal");
                    let noise = NoiseDistribution::parse(noise_name)
                        .ok_or_else(|| ScmError::Spec(format!("unknown noise `{noise_name}` for `{id}`")))?;
                    NodeMechanism::Structural(
                        Mechanism::parse(text, ps, noise)
                            .map_err(|source| ScmError::Mechanism { variable: id.clone(), source })?,
                    )
                }
                (None, Some(v)) => NodeMechanism::Fixed(v),
                _ => {
                    return Err(ScmError::Spec(format!(
                        "`{id}` needs exactly one of `mechanism` or `value`"
                    )))
                }
            };
            mechanisms.push(m);
        }
        let scm = Scm::new(graph, mechanisms)?;
        let stats = match spec.standardization {
            None => None,
            Some(s) => {
                let mut mean = BTreeMap::new();
                let mut std = BTreeMap::new();
                for id in scm.graph.nodes() {
                    let m = s.mean.get(id.as_str()).copied();
                    let sd = s.std.get(id.as_str()).copied();
                    match (m, sd) {
                        (Some(m), Some(sd)) => {
                            mean.insert(id.clone(), m);
                            std.insert(id.clone(), sd);
                        }
                        _ => {
                            return Err(ScmError::Spec(format!("standardization lacks `{id}`")));
                        }
                    }
                }
                Some(
                    StandardizationStats::new(mean, std)
                        .map_err(|e| ScmError::Spec(e.to_string()))?,
                )
            }
        };
        Ok((scm, stats))
    }

    pub fn to_spec_string(&self, stats: Option<&StandardizationStats>) -> String {
        let nodes = self
            .graph
            .nodes()
            .iter()
            .zip(&self.mechanisms)
            .enumerate()
            .map(|(i, (id, m))| {
                let parents = self
                    .graph
                    .parent_indices(i)
                    .iter()
                    .map(|&p| self.graph.node(p).to_string())
                    .collect();
                let spec = match m {
                    NodeMechanism::Structural(m) => NodeSpec {
                        parents,
                        mechanism: Some(m.source().to_string()),
                        noise: Some(m.noise().name().to_string()),
                        value: None,
                    },
                    NodeMechanism::Fixed(v) => NodeSpec { parents, mechanism: None, noise: None, value: Some(*v) },
                };
                (id.to_string(), spec)
            })
            .collect();
        let standardization = stats.map(|s| StatsSpec {
            mean: s.means().iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            std: s.stds().iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        });
        let file = ScmFile {
            variables: self.graph.nodes().iter().map(|v| v.to_string()).collect(),
            nodes,
            standardization,
        };
        toml::to_string(&file).expect("spec types always serialize")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Scm, Option<StandardizationStats>), ScmError> {
        Self::from_spec_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>, stats: Option<&StandardizationStats>) -> Result<(), ScmError> {
        std::fs::write(path, self.to_spec_string(stats))?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScmFile {
    variables: Vec<String>,
    nodes: BTreeMap<String, NodeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    standardization: Option<StatsSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeSpec {
    #[serde(default)]
    parents: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mechanism: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsSpec {
    mean: BTreeMap<String, f64>,
    std: BTreeMap<String, f64>,
}

/// One ChaCha8 stream per node.
struct NoiseSampler {
    streams: Vec<(ChaCha8Rng, Option<NoiseDistribution>)>,
}

impl NoiseSampler {
    fn new(scm: &Scm, seed: u64) -> Self {
        let streams = (0..scm.graph.len())
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                (rng, scm.mechanisms[i].structural().map(Mechanism::noise))
            })
            .collect();
        Self { streams }
    }

    fn draw(&mut self, out: &mut [f64]) {
        for (slot, (rng, noise)) in out.iter_mut().zip(self.streams.iter_mut()) {
            *slot = match noise {
                Some(NoiseDistribution::StandardNormal) => StandardNormal.sample(rng),
                None => 0.0,
            };
        }
    }
}
