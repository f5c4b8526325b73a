//! Directed acyclic causal graphs over named endogenous variables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of an endogenous variable, e.g. `n1`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VariableId(String);

impl VariableId {
    pub fn new(name: impl Into<String>) -> Result<Self, GraphError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(GraphError::EmptyName);
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for VariableId {
    /// Panics on an empty name; use [`VariableId::new`] for untrusted input.
    fn from(s: &str) -> Self {
        VariableId::new(s).expect("variable name must be nonempty")
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("variable name must be nonempty")]
    EmptyName,
    #[error("duplicate variable `{0}`")]
    DuplicateVariable(VariableId),
    #[error("unknown variable `{0}`")]
    UnknownVariable(VariableId),
    #[error("variable `{child}` lists parent `{parent}` more than once")]
    DuplicateParent { child: VariableId, parent: VariableId },
    #[error("cycle detected: {}", format_cycle(.0))]
    CycleDetected(Vec<VariableId>),
}

fn format_cycle(cycle: &[VariableId]) -> String {
    cycle
        .iter()
        .map(VariableId::as_str)
        .collect::<Vec<_>>()
        .join(" -> ")
}

/// A DAG with parents stored per node and a cached topological order.
///
/// Node indices follow declaration order. The topological order breaks ties
/// by declaration order so every downstream computation is reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalGraph {
    nodes: Vec<VariableId>,
    index: HashMap<VariableId, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    topo: Vec<usize>,
}

impl CausalGraph {
    /// Builds a graph from nodes in declaration order and `(child, parents)` lists.
    /// Nodes absent from `parents` are roots.
    pub fn new<I, P>(nodes: Vec<VariableId>, parents: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (VariableId, P)>,
        P: IntoIterator<Item = VariableId>,
    {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if index.insert(node.clone(), i).is_some() {
                return Err(GraphError::DuplicateVariable(node.clone()));
            }
        }

        let mut parent_idx = vec![Vec::new(); nodes.len()];
        for (child, ps) in parents {
            let c = *index
                .get(&child)
                .ok_or_else(|| GraphError::UnknownVariable(child.clone()))?;
            for p in ps {
                let pi = *index
                    .get(&p)
                    .ok_or_else(|| GraphError::UnknownVariable(p.clone()))?;
                if parent_idx[c].contains(&pi) {
                    return Err(GraphError::DuplicateParent { child: child.clone(), parent: p });
                }
                parent_idx[c].push(pi);
            }
        }

        let mut children = vec![Vec::new(); nodes.len()];
        for (c, ps) in parent_idx.iter().enumerate() {
            for &p in ps {
                children[p].push(c);
            }
        }

        let topo = kahn_order(&parent_idx, &children).map_err(|cycle| {
            GraphError::CycleDetected(cycle.into_iter().map(|i| nodes[i].clone()).collect())
        })?;

        Ok(Self { nodes, index, parents: parent_idx, children, topo })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes in declaration order.
    pub fn nodes(&self) -> &[VariableId] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &VariableId {
        &self.nodes[idx]
    }

    pub fn index_of(&self, id: &VariableId) -> Result<usize, GraphError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| GraphError::UnknownVariable(id.clone()))
    }

    pub fn contains(&self, id: &VariableId) -> bool {
        self.index.contains_key(id)
    }

    pub fn parent_indices(&self, idx: usize) -> &[usize] {
        &self.parents[idx]
    }

    pub fn child_indices(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    pub fn parents_of(&self, id: &VariableId) -> Result<Vec<VariableId>, GraphError> {
        let i = self.index_of(id)?;
        Ok(self.parents[i].iter().map(|&p| self.nodes[p].clone()).collect())
    }

    pub fn topo_indices(&self) -> &[usize] {
        &self.topo
    }

    pub fn topological_order(&self) -> Vec<VariableId> {
        self.topo.iter().map(|&i| self.nodes[i].clone()).collect()
    }

    /// Indices of `AN(targets)`: the targets plus all their ancestors, in topological order.
    pub fn ancestor_indices(&self, targets: &[usize]) -> Vec<usize> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack: Vec<usize> = targets.to_vec();
        while let Some(v) = stack.pop() {
            if std::mem::replace(&mut seen[v], true) {
                continue;
            }
            stack.extend(self.parents[v].iter().copied().filter(|&p| !seen[p]));
        }
        self.topo.iter().copied().filter(|&i| seen[i]).collect()
    }

    pub fn ancestors_including(
        &self,
        targets: &BTreeSet<VariableId>,
    ) -> Result<BTreeSet<VariableId>, GraphError> {
        let idx = targets
            .iter()
            .map(|t| self.index_of(t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self
            .ancestor_indices(&idx)
            .into_iter()
            .map(|i| self.nodes[i].clone())
            .collect())
    }

    /// Strict descendants of `idx` as a membership mask.
    pub fn descendant_mask(&self, idx: usize) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack: Vec<usize> = self.children[idx].clone();
        while let Some(v) = stack.pop() {
            if std::mem::replace(&mut seen[v], true) {
                continue;
            }
            stack.extend(self.children[v].iter().copied().filter(|&c| !seen[c]));
        }
        seen
    }

    /// `w_j` = 1 + number of distinct endogenous descendants of `V_j`.
    pub fn descendant_weights(&self) -> BTreeMap<VariableId, u32> {
        self.descendant_weight_vec()
            .into_iter()
            .enumerate()
            .map(|(i, w)| (self.nodes[i].clone(), w))
            .collect()
    }

    pub(crate) fn descendant_weight_vec(&self) -> Vec<u32> {
        (0..self.nodes.len())
            .map(|i| 1 + self.descendant_mask(i).iter().filter(|&&d| d).count() as u32)
            .collect()
    }

    /// Copy of the graph with all incoming edges of `targets` removed.
    pub(crate) fn mutilate(&self, targets: &[usize]) -> Self {
        let mut g = self.clone();
        for &t in targets {
            g.parents[t].clear();
        }
        let mut children = vec![Vec::new(); g.nodes.len()];
        for (c, ps) in g.parents.iter().enumerate() {
            for &p in ps {
                children[p].push(c);
            }
        }
        g.children = children;
        g.topo = kahn_order(&g.parents, &g.children).expect("removing edges keeps a DAG acyclic");
        g
    }
}

/// Kahn's algorithm, always releasing the smallest ready index first.
fn kahn_order(parents: &[Vec<usize>], children: &[Vec<usize>]) -> Result<Vec<usize>, Vec<usize>> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    let n = parents.len();
    let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = ready.pop() {
        order.push(v);
        for &c in &children[v] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(Reverse(c));
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    Err(find_cycle(parents, &indegree))
}

/// Walks parent links among the unreleased nodes until one repeats.
fn find_cycle(parents: &[Vec<usize>], indegree: &[usize]) -> Vec<usize> {
    let start = indegree.iter().position(|&d| d > 0).expect("cycle leaves positive indegree");
    let mut path = vec![start];
    let mut pos = vec![usize::MAX; parents.len()];
    pos[start] = 0;
    let mut cur = start;
    loop {
        let next = *parents[cur]
            .iter()
            .find(|&&p| indegree[p] > 0)
            .expect("node on a cycle has an unreleased parent");
        if pos[next] != usize::MAX {
            let mut cycle: Vec<usize> = path[pos[next]..].to_vec();
            // path follows parent links; report it along edge direction
            cycle.reverse();
            cycle.push(cycle[0]);
            return cycle;
        }
        pos[next] = path.len();
        path.push(next);
        cur = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(names: &[&str]) -> Vec<VariableId> {
        names.iter().map(|&n| VariableId::from(n)).collect()
    }

    fn graph(nodes: &[&str], edges: &[(&str, &str)]) -> Result<CausalGraph, GraphError> {
        let mut parents: BTreeMap<VariableId, Vec<VariableId>> = BTreeMap::new();
        for &(from, to) in edges {
            parents.entry(to.into()).or_default().push(from.into());
        }
        CausalGraph::new(ids(nodes), parents)
    }

    fn set(names: &[&str]) -> BTreeSet<VariableId> {
        ids(names).into_iter().collect()
    }

    fn toy1() -> CausalGraph {
        graph(&["n1", "n2", "n3"], &[("n1", "n2"), ("n1", "n3"), ("n2", "n3")]).unwrap()
    }

    fn toy3() -> CausalGraph {
        graph(
            &["n1", "n2", "n3", "n4"],
            &[("n1", "n2"), ("n1", "n4"), ("n2", "n3"), ("n3", "n4")],
        )
        .unwrap()
    }

    #[test]
    fn topo_order_toys() {
        assert_eq!(toy1().topological_order(), ids(&["n1", "n2", "n3"]));
        assert_eq!(toy3().topological_order(), ids(&["n1", "n2", "n3", "n4"]));
        let single = graph(&["n1"], &[]).unwrap();
        assert_eq!(single.topological_order(), ids(&["n1"]));
    }

    #[test]
    fn topo_order_breaks_ties_by_declaration() {
        let g = graph(&["c", "b", "a"], &[("b", "a")]).unwrap();
        assert_eq!(g.topological_order(), ids(&["c", "b", "a"]));
        let g = graph(&["a", "b", "c"], &[("c", "a")]).unwrap();
        assert_eq!(g.topological_order(), ids(&["b", "c", "a"]));
    }

    #[test]
    fn cycle_is_reported() {
        let err = graph(&["a", "b", "c"], &[("a", "b"), ("b", "c"), ("c", "a")]).unwrap_err();
        match err {
            GraphError::CycleDetected(cycle) => {
                assert_eq!(cycle.first(), cycle.last());
                assert_eq!(cycle.len(), 4);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            graph(&["a"], &[("a", "a")]).unwrap_err(),
            GraphError::CycleDetected(_)
        ));
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            graph(&["a", "a"], &[]).unwrap_err(),
            GraphError::DuplicateVariable(_)
        ));
        assert!(matches!(
            graph(&["a"], &[("z", "a")]).unwrap_err(),
            GraphError::UnknownVariable(_)
        ));
        assert!(matches!(
            graph(&["a", "b"], &[("a", "b"), ("a", "b")]).unwrap_err(),
            GraphError::DuplicateParent { .. }
        ));
        assert!(VariableId::new("  ").is_err());
    }

    #[test]
    fn ancestors() {
        let g = toy1();
        assert_eq!(g.ancestors_including(&set(&["n2"])).unwrap(), set(&["n1", "n2"]));
        assert_eq!(g.ancestors_including(&set(&["n1"])).unwrap(), set(&["n1"]));
        assert_eq!(
            toy3().ancestors_including(&set(&["n4"])).unwrap(),
            set(&["n1", "n2", "n3", "n4"])
        );
        assert!(matches!(
            g.ancestors_including(&set(&["zz"])).unwrap_err(),
            GraphError::UnknownVariable(_)
        ));
    }

    #[test]
    fn weights_match_worked_example() {
        let g = graph(&["C", "B", "A"], &[("C", "A"), ("C", "B"), ("B", "A")]).unwrap();
        let w = g.descendant_weights();
        assert_eq!(w[&"A".into()], 1);
        assert_eq!(w[&"B".into()], 2);
        assert_eq!(w[&"C".into()], 3);

        let chain = graph(&["n1", "n2", "n3"], &[("n1", "n2"), ("n2", "n3")]).unwrap();
        let w = chain.descendant_weights();
        assert_eq!((w[&"n1".into()], w[&"n2".into()], w[&"n3".into()]), (3, 2, 1));

        assert_eq!(graph(&["x"], &[]).unwrap().descendant_weights()[&"x".into()], 1);
    }

    #[test]
    fn mutilation_drops_incoming_edges_only() {
        let g = toy1();
        let m = g.mutilate(&[1]);
        assert!(m.parent_indices(1).is_empty());
        assert_eq!(m.parent_indices(2), &[0, 1]);
        assert_eq!(m.child_indices(0), &[2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        // random DAG: edges only from lower to higher index, then shuffled declaration
        fn arb_dag() -> impl Strategy<Value = CausalGraph> {
            (2usize..8)
                .prop_flat_map(|n| {
                    (
                        Just(n),
                        proptest::collection::vec(any::<bool>(), n * (n - 1) / 2),
                        Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
                    )
                })
                .prop_map(|(n, bits, perm)| {
                    let name = |i: usize| VariableId::from(format!("v{}", perm[i]).as_str());
                    let nodes: Vec<VariableId> = (0..n).map(|i| VariableId::from(format!("v{i}").as_str())).collect();
                    let mut parents: BTreeMap<VariableId, Vec<VariableId>> = BTreeMap::new();
                    let mut k = 0;
                    for j in 0..n {
                        for i in 0..j {
                            if bits[k] {
                                parents.entry(name(j)).or_default().push(name(i));
                            }
                            k += 1;
                        }
                    }
                    CausalGraph::new(nodes, parents).unwrap()
                })
        }

        proptest! {
            #[test]
            fn topo_is_valid_and_stable(g in arb_dag()) {
                let order = g.topological_order();
                prop_assert_eq!(order.len(), g.len());
                let pos: HashMap<_, _> = order.iter().enumerate().map(|(i, v)| (v.clone(), i)).collect();
                for v in g.nodes() {
                    for p in g.parents_of(v).unwrap() {
                        prop_assert!(pos[&p] < pos[v]);
                    }
                }
                prop_assert_eq!(order, g.topological_order());
            }

            #[test]
            fn ancestors_contain_targets_and_are_monotone(g in arb_dag(), a in 0usize..8, b in 0usize..8) {
                let a = g.node(a % g.len()).clone();
                let b = g.node(b % g.len()).clone();
                let small: BTreeSet<_> = [a.clone()].into();
                let big: BTreeSet<_> = [a.clone(), b].into();
                let an_small = g.ancestors_including(&small).unwrap();
                let an_big = g.ancestors_including(&big).unwrap();
                prop_assert!(an_small.contains(&a));
                prop_assert!(an_small.is_subset(&an_big));
            }

            #[test]
            fn weights_positive(g in arb_dag()) {
                let w = g.descendant_weights();
                for (i, v) in g.nodes().iter().enumerate() {
                    prop_assert!(w[v] >= 1);
                    if !g.child_indices(i).is_empty() {
                        prop_assert!(w[v] >= 2);
                    }
                }
            }
        }
    }
}
