//! Max-min graphs: maxima joined to the minima where their principal flow
//! lines end.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::critical::{CriticalSet, Kind};
use crate::flow::{LineOutcome, PrincipalFlowLine, Sign};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("maxima {0:?} are not simple (a principal line ended at a saddle or did not converge)")]
    NonSimpleInput(Vec<usize>),
    #[error("maximum {0} is missing a principal line")]
    MissingLine(usize),
    #[error("node {0} is not a {1}")]
    WrongKind(usize, &'static str),
    #[error("structure violation: {0}")]
    StructureViolation(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Edge {
    pub max: usize,
    pub min: usize,
    /// Which principal lines produced this edge.
    pub signs: Vec<Sign>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaxMinGraph {
    pub minima: Vec<usize>,
    pub maxima: Vec<usize>,
    pub edges: Vec<Edge>,
    /// Chart location of every node, used by the one-dimensional checks.
    #[serde(skip)]
    pub locations: BTreeMap<usize, Vec<f64>>,
}

impl MaxMinGraph {
    /// Builds a graph from explicit parts and checks the abstract conditions.
    pub fn from_parts(
        minima: Vec<usize>,
        maxima: Vec<usize>,
        edges: Vec<Edge>,
        locations: BTreeMap<usize, Vec<f64>>,
    ) -> Result<Self, GraphError> {
        let mut g = Self { minima, maxima, edges, locations };
        g.minima.sort_unstable();
        g.maxima.sort_unstable();
        g.edges.sort_by_key(|e| (e.max, e.min));
        g.check_abstract()?;
        Ok(g)
    }

    /// Bipartite, both sides non-empty, every maximum of degree 1 or 2.
    pub fn check_abstract(&self) -> Result<(), GraphError> {
        let violation = |m: String| Err(GraphError::StructureViolation(m));
        if self.minima.is_empty() || self.maxima.is_empty() {
            return violation("both node classes must be non-empty".into());
        }
        for e in &self.edges {
            if self.maxima.binary_search(&e.max).is_err() || self.minima.binary_search(&e.min).is_err() {
                return violation(format!("edge ({}, {}) does not join a maximum to a minimum", e.max, e.min));
            }
        }
        if self.edges.windows(2).any(|w| (w[0].max, w[0].min) == (w[1].max, w[1].min)) {
            return violation("duplicate edge".into());
        }
        for &p in &self.maxima {
            let d = self.degree(p);
            if !(1..=2).contains(&d) {
                return violation(format!("maximum {p} has degree {d}"));
            }
        }
        Ok(())
    }

    pub fn degree(&self, id: usize) -> usize {
        self.edges.iter().filter(|e| e.max == id || e.min == id).count()
    }

    /// Degree counting an edge once per principal line that produced it.
    pub fn line_degree(&self, id: usize) -> usize {
        self.edges.iter().filter(|e| e.max == id || e.min == id).map(|e| e.signs.len().max(1)).sum()
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("graph maxmin {\n");
        let mut nodes: Vec<(usize, bool)> = self.maxima.iter().map(|&p| (p, true)).chain(self.minima.iter().map(|&m| (m, false))).collect();
        nodes.sort_unstable();
        for (id, is_max) in nodes {
            let shape = if is_max { "triangle" } else { "circle" };
            let _ = writeln!(out, "  n{id} [label=\"{id}\", shape={shape}];");
        }
        for e in &self.edges {
            let signs: Vec<&str> = e.signs.iter().map(|s| s.symbol()).collect();
            let _ = writeln!(out, "  n{} -- n{} [label=\"{}\"];", e.max, e.min, signs.join(","));
        }
        out.push_str("}\n");
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Dot,
    Json,
}

pub fn export(g: &MaxMinGraph, format: Format) -> String {
    match format {
        Format::Dot => g.to_dot(),
        Format::Json => g.to_json(),
    }
}

/// Nodes are the minima and maxima; each maximum is joined to the minima
/// where its two principal lines end.
pub fn build_maxmin(critset: &CriticalSet, lines: &[PrincipalFlowLine]) -> Result<MaxMinGraph, GraphError> {
    let maxima: Vec<usize> = critset.maxima().map(|p| p.id).collect();
    let minima: Vec<usize> = critset.minima().map(|p| p.id).collect();
    let mut non_simple = Vec::new();
    let mut edges: BTreeMap<(usize, usize), Vec<Sign>> = BTreeMap::new();
    for &p in &maxima {
        let mine: Vec<&PrincipalFlowLine> = lines.iter().filter(|l| l.maximum == p).collect();
        for sign in [Sign::Plus, Sign::Minus] {
            let line = mine.iter().find(|l| l.sign == sign).ok_or(GraphError::MissingLine(p))?;
            match line.outcome {
                LineOutcome::Minimum(m) => {
                    if critset.get(m).kind() != Kind::Minimum {
                        return Err(GraphError::WrongKind(m, "minimum"));
                    }
                    edges.entry((p, m)).or_default().push(sign);
                }
                _ => {
                    if non_simple.last() != Some(&p) {
                        non_simple.push(p);
                    }
                }
            }
        }
    }
    if !non_simple.is_empty() {
        return Err(GraphError::NonSimpleInput(non_simple));
    }
    let edges = edges.into_iter().map(|((max, min), signs)| Edge { max, min, signs }).collect();
    let locations = critset
        .points
        .iter()
        .filter(|p| p.kind() != Kind::Saddle)
        .map(|p| (p.id, p.location.clone()))
        .collect();
    MaxMinGraph::from_parts(minima, maxima, edges, locations)
}

/// Rank of the first homology of a one-dimensional manifold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Interval.
    Rank0,
    /// Circle.
    Rank1,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Dim1Report {
    pub topology: Topology,
    pub minima: usize,
    pub maxima: usize,
    /// Node ids in coordinate order.
    pub order: Vec<usize>,
}

/// Minima and maxima must alternate along the line (or circle), and every
/// maximum must be joined exactly to its two neighbours.
pub fn validate_dim1(g: &MaxMinGraph, topology: Topology) -> Result<Dim1Report, GraphError> {
    let violation = |m: String| Err(GraphError::StructureViolation(m));
    g.check_abstract()?;
    let (k0, k1) = (g.minima.len(), g.maxima.len());
    match topology {
        Topology::Rank0 if k0 != k1 + 1 => return violation(format!("{k0} minima but {k1} maxima on an interval")),
        Topology::Rank1 if k0 != k1 => return violation(format!("{k0} minima but {k1} maxima on a circle")),
        _ => {}
    }
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(k0 + k1);
    for &id in g.minima.iter().chain(&g.maxima) {
        let loc = g.locations.get(&id).ok_or_else(|| GraphError::StructureViolation(format!("node {id} has no location")))?;
        if loc.len() != 1 {
            return violation(format!("node {id} is not on a one-dimensional chart"));
        }
        order.push((loc[0], id));
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ids: Vec<usize> = order.iter().map(|o| o.1).collect();
    let is_max = |id: usize| g.maxima.binary_search(&id).is_ok();
    let len = ids.len();
    let mut expected: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (pos, &id) in ids.iter().enumerate() {
        let neighbours = match topology {
            Topology::Rank0 => {
                if pos == 0 || pos == len - 1 {
                    if is_max(id) {
                        return violation(format!("maximum {id} is at an end of the interval"));
                    }
                    continue;
                }
                [ids[pos - 1], ids[pos + 1]]
            }
            Topology::Rank1 => [ids[(pos + len - 1) % len], ids[(pos + 1) % len]],
        };
        for nb in neighbours {
            if is_max(nb) == is_max(id) {
                return violation(format!("nodes {id} and {nb} are adjacent but of the same kind"));
            }
        }
        if is_max(id) {
            for nb in neighbours {
                *expected.entry((id, nb)).or_default() += 1;
            }
        }
    }
    let actual: BTreeMap<(usize, usize), usize> = g.edges.iter().map(|e| ((e.max, e.min), e.signs.len().max(1))).collect();
    let expected_set: Vec<_> = expected.keys().collect();
    let actual_set: Vec<_> = actual.keys().collect();
    if expected_set != actual_set {
        return violation(format!("edges {actual_set:?} differ from the alternating order {expected_set:?}"));
    }
    for &id in &ids {
        let d = g.line_degree(id);
        let need = match topology {
            Topology::Rank0 if !is_max(id) && (id == ids[0] || id == ids[len - 1]) => 1,
            _ => 2,
        };
        if d != need && !(topology == Topology::Rank0 && len == 1) {
            return violation(format!("node {id} has line degree {d}, expected {need}"));
        }
    }
    Ok(Dim1Report { topology, minima: k0, maxima: k1, order: ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critical::find_critical_points;
    use crate::flow::trace_principal;
    use crate::geometry::Landscape;

    fn graph_of(name: &str) -> (MaxMinGraph, CriticalSet) {
        let l = Landscape::from_builtin(name).unwrap();
        let c = find_critical_points(&l, 64).unwrap();
        let mut lines = Vec::new();
        for p in c.maxima() {
            let (a, b) = trace_principal(&l, p.id, &c, None).unwrap();
            lines.push(a);
            lines.push(b);
        }
        (build_maxmin(&c, &lines).unwrap(), c)
    }

    fn edge(max: usize, min: usize, signs: &[Sign]) -> Edge {
        Edge { max, min, signs: signs.to_vec() }
    }

    #[test]
    fn circle_1_single_edge() {
        let (g, _) = graph_of("circle_1");
        assert_eq!(g.edges, vec![edge(0, 1, &[Sign::Plus, Sign::Minus])]);
        assert_eq!(g.degree(0), 1);
        assert_eq!(validate_dim1(&g, Topology::Rank1).unwrap().order.len(), 2);
        let dot = g.to_dot();
        assert_eq!(dot.matches("shape=").count(), 2);
        assert_eq!(dot.matches(" -- ").count(), 1);
        assert_eq!(dot, export(&g, Format::Dot));
    }

    #[test]
    fn circle_3_is_a_cycle() {
        let (g, _) = graph_of("circle_3");
        assert_eq!(g.edges.len(), 6);
        for id in g.minima.iter().chain(&g.maxima) {
            assert_eq!(g.degree(*id), 2);
        }
        validate_dim1(&g, Topology::Rank1).unwrap();
        assert!(validate_dim1(&g, Topology::Rank0).is_err());
        let json: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
        assert_eq!(json["edges"].as_array().unwrap().len(), 6);
        assert_eq!(json["minima"].as_array().unwrap().len() + json["maxima"].as_array().unwrap().len(), 6);
        assert_eq!(g.to_dot().matches(" -- ").count(), 6);
    }

    #[test]
    fn interval_with_three_minima() {
        let (g, _) = graph_of("line_3min");
        assert_eq!((g.minima.len(), g.maxima.len()), (3, 2));
        let r = validate_dim1(&g, Topology::Rank0).unwrap();
        assert_eq!(r.order.len(), 5);
        for p in &g.maxima {
            assert_eq!(g.degree(*p), 2);
        }
    }

    #[test]
    fn degree_three_maximum_is_rejected() {
        let locs = BTreeMap::new();
        let err = MaxMinGraph::from_parts(
            vec![1, 2, 3],
            vec![0],
            vec![edge(0, 1, &[Sign::Plus]), edge(0, 2, &[Sign::Minus]), edge(0, 3, &[])],
            locs.clone(),
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::StructureViolation(_)));
        assert!(MaxMinGraph::from_parts(vec![], vec![0], vec![], locs.clone()).is_err());
        assert!(MaxMinGraph::from_parts(vec![1], vec![0], vec![edge(1, 0, &[])], locs).is_err());
    }

    #[test]
    fn disconnected_graphs_are_fine() {
        let g = MaxMinGraph::from_parts(
            vec![2, 3, 5],
            vec![0, 1],
            vec![edge(0, 2, &[Sign::Plus, Sign::Minus]), edge(1, 3, &[Sign::Plus, Sign::Minus])],
            BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(g.degree(5), 0);
        assert_eq!(g.to_dot(), g.clone().to_dot());
    }

    #[test]
    fn saddle_hits_are_rejected() {
        let l = Landscape::from_builtin("torus2_sep").unwrap();
        let c = find_critical_points(&l, 16).unwrap();
        let (a, b) = trace_principal(&l, 0, &c, None).unwrap();
        assert_eq!(build_maxmin(&c, &[a.clone(), b]).unwrap_err(), GraphError::NonSimpleInput(vec![0]));
        assert_eq!(build_maxmin(&c, &[a]).unwrap_err(), GraphError::MissingLine(0));
    }

    #[test]
    fn skew_torus_edges_match_grid_descent() {
        let (g, c) = graph_of("torus2_skew");
        assert_eq!(g.maxima.len(), 1);
        let l = Landscape::from_builtin("torus2_skew").unwrap();
        // the only minimum of torus2_skew is (pi, pi)
        let (min, d) = c.nearest(&l.manifold, &[std::f64::consts::PI, std::f64::consts::PI]).unwrap();
        assert!(d < 1e-9);
        assert_eq!(g.edges, vec![edge(0, min, &[Sign::Plus, Sign::Minus])]);
    }
}
