//! River network graph: a weighted DAG of gauges with downstream edges.
//!
//! Edges point downstream (src flows into dst) and carry the physical
//! attributes stream length, elevation difference and average slope. A valid
//! river graph is acyclic and anti-transitive: no edge shortcuts a longer
//! directed path, since water passes every gauge on its way downstream.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Stable identifier of a gauging station.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct GaugeId(pub u64);

impl fmt::Display for GaugeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Physical attributes of a river segment between two gauges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeAttrs {
    /// Stream length along the river in meters (> 0).
    pub stream_length: f64,
    /// Elevation difference in meters (>= 0).
    pub elevation_diff: f64,
    /// Average slope, dimensionless.
    pub avg_slope: f64,
}

impl EdgeAttrs {
    /// Builds attributes with the slope derived from length and elevation drop.
    pub fn new(stream_length: f64, elevation_diff: f64) -> Self {
        EdgeAttrs {
            stream_length,
            elevation_diff,
            avg_slope: elevation_diff / stream_length,
        }
    }

    /// Whether the stored slope matches `elevation_diff / stream_length`
    /// within `rel_tol` relative error. Raw data may ship inconsistent
    /// slopes; rewired edges always satisfy this.
    pub fn slope_consistent(&self, rel_tol: f64) -> bool {
        let expected = self.elevation_diff / self.stream_length;
        let scale = expected.abs().max(self.avg_slope.abs()).max(1e-300);
        (self.avg_slope - expected).abs() <= rel_tol * scale
    }

    /// Series combination of two consecutive segments: lengths and elevation
    /// differences add, the slope is recomputed as their ratio.
    fn combine(upstream: &EdgeAttrs, downstream: &EdgeAttrs) -> EdgeAttrs {
        EdgeAttrs::new(
            upstream.stream_length + downstream.stream_length,
            upstream.elevation_diff + downstream.elevation_diff,
        )
    }
}

/// Structural defect found by [`RiverGraph::validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    SelfLoop { node: GaugeId },
    Cycle { nodes: Vec<GaugeId> },
    /// Edge (src, dst) shortcuts a directed path of length >= 2.
    SkipEdge { src: GaugeId, dst: GaugeId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SelfLoop { node } => write!(f, "self-loop at gauge {node}"),
            Violation::Cycle { nodes } => {
                let ids: Vec<String> = nodes.iter().map(|n| n.to_string()).collect();
                write!(f, "cycle involving gauges [{}]", ids.join(", "))
            }
            Violation::SkipEdge { src, dst } => write!(
                f,
                "anti-transitivity violation: edge {src} -> {dst} shortcuts a longer directed path"
            ),
        }
    }
}

/// Weighted directed graph of gauges; see the module docs for the invariants
/// a well-formed river network satisfies. Construction is permissive so that
/// [`RiverGraph::validate`] can report defects in ingested data.
#[derive(Clone, Debug, Default)]
pub struct RiverGraph {
    nodes: BTreeSet<GaugeId>,
    edges: BTreeMap<(GaugeId, GaugeId), EdgeAttrs>,
    preds: BTreeMap<GaugeId, BTreeSet<GaugeId>>,
    succs: BTreeMap<GaugeId, BTreeSet<GaugeId>>,
}

impl RiverGraph {
    pub fn new() -> Self {
        RiverGraph::default()
    }

    /// Convenience constructor from `(src, dst, attrs)` triples.
    pub fn from_edges(edges: impl IntoIterator<Item = (u64, u64, EdgeAttrs)>) -> Result<Self> {
        let mut g = RiverGraph::new();
        for (src, dst, attrs) in edges {
            g.add_edge(GaugeId(src), GaugeId(dst), attrs)?;
        }
        Ok(g)
    }

    pub fn add_node(&mut self, id: GaugeId) {
        self.nodes.insert(id);
    }

    /// Inserts a downstream edge, adding missing endpoints. Parallel edges are
    /// unrepresentable; a second insertion of the same (src, dst) pair is an
    /// integrity error.
    pub fn add_edge(&mut self, src: GaugeId, dst: GaugeId, attrs: EdgeAttrs) -> Result<()> {
        if self.edges.contains_key(&(src, dst)) {
            return Err(Error::integrity(format!(
                "parallel edge {src} -> {dst} rejected"
            )));
        }
        self.nodes.insert(src);
        self.nodes.insert(dst);
        self.edges.insert((src, dst), attrs);
        self.succs.entry(src).or_default().insert(dst);
        self.preds.entry(dst).or_default().insert(src);
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains(&self, id: GaugeId) -> bool {
        self.nodes.contains(&id)
    }

    /// Node ids in ascending order; this ordering fixes matrix indices downstream.
    pub fn node_ids(&self) -> impl Iterator<Item = GaugeId> + '_ {
        self.nodes.iter().copied()
    }

    /// Edges in ascending (src, dst) order.
    pub fn edge_list(&self) -> impl Iterator<Item = (GaugeId, GaugeId, &EdgeAttrs)> + '_ {
        self.edges.iter().map(|(&(s, d), a)| (s, d, a))
    }

    pub fn edge_attrs(&self, src: GaugeId, dst: GaugeId) -> Option<&EdgeAttrs> {
        self.edges.get(&(src, dst))
    }

    /// Direct upstream neighbors, ascending.
    pub fn predecessors(&self, id: GaugeId) -> impl Iterator<Item = GaugeId> + '_ {
        self.preds.get(&id).into_iter().flatten().copied()
    }

    /// Direct downstream neighbors, ascending.
    pub fn successors(&self, id: GaugeId) -> impl Iterator<Item = GaugeId> + '_ {
        self.succs.get(&id).into_iter().flatten().copied()
    }

    /// Nodes with no outgoing edges.
    pub fn sinks(&self) -> Vec<GaugeId> {
        self.nodes
            .iter()
            .copied()
            .filter(|&n| self.succs.get(&n).map_or(true, |s| s.is_empty()))
            .collect()
    }

    /// The start gauge together with all of its direct and indirect
    /// predecessors, i.e. every gauge whose water eventually passes `start`.
    pub fn inverse_dfs(&self, start: GaugeId) -> Result<BTreeSet<GaugeId>> {
        if !self.nodes.contains(&start) {
            return Err(Error::domain(format!("unknown gauge id {start}")));
        }
        let mut seen = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            if seen.insert(v) {
                stack.extend(self.predecessors(v));
            }
        }
        Ok(seen)
    }

    /// Induced subgraph on `keep`: kept nodes plus all edges between them.
    pub fn induced(&self, keep: &BTreeSet<GaugeId>) -> RiverGraph {
        let mut g = RiverGraph::new();
        for &n in keep.intersection(&self.nodes) {
            g.add_node(n);
        }
        for (&(s, d), a) in &self.edges {
            if keep.contains(&s) && keep.contains(&d) {
                g.add_edge(s, d, *a).expect("source edges are unique");
            }
        }
        g
    }

    /// Removes `victim` and connects every (predecessor, successor) pair with
    /// combined attributes, preserving reachability among the survivors.
    ///
    /// On anti-transitive input none of the new edges can already exist; if
    /// one does, the input was corrupt and an integrity error is raised
    /// instead of silently merging attributes.
    pub fn rewire_remove(&self, victim: GaugeId) -> Result<RiverGraph> {
        if !self.nodes.contains(&victim) {
            return Err(Error::domain(format!("unknown gauge id {victim}")));
        }
        let preds: Vec<GaugeId> = self.predecessors(victim).collect();
        let succs: Vec<GaugeId> = self.successors(victim).collect();

        for &p in &preds {
            for &s in &succs {
                if p == s {
                    return Err(Error::integrity(format!(
                        "rewiring {victim} would create a self-loop at {p}"
                    )));
                }
                if self.edges.contains_key(&(p, s)) && p != victim && s != victim {
                    return Err(Error::integrity(format!(
                        "rewiring {victim} would duplicate edge {p} -> {s}; input is not anti-transitive"
                    )));
                }
            }
        }

        let mut g = RiverGraph::new();
        for &n in &self.nodes {
            if n != victim {
                g.add_node(n);
            }
        }
        for (&(s, d), a) in &self.edges {
            if s != victim && d != victim {
                g.add_edge(s, d, *a)?;
            }
        }
        for &p in &preds {
            let up = self.edges[&(p, victim)];
            for &s in &succs {
                let down = self.edges[&(victim, s)];
                g.add_edge(p, s, EdgeAttrs::combine(&up, &down))?;
            }
        }
        Ok(g)
    }

    /// Rewire-removes every node failing `keep`, in ascending-id order so that
    /// repeated runs produce identical graphs.
    pub fn filter_gauges(&self, keep: impl Fn(GaugeId) -> bool) -> Result<RiverGraph> {
        let victims: Vec<GaugeId> = self.nodes.iter().copied().filter(|&n| !keep(n)).collect();
        let mut g = self.clone();
        for v in victims {
            g = g.rewire_remove(v)?;
        }
        Ok(g)
    }

    /// Topological order (ascending id among ready nodes). Errors on cycles.
    pub fn topo_order(&self) -> Result<Vec<GaugeId>> {
        let mut indeg: BTreeMap<GaugeId, usize> = self.nodes.iter().map(|&n| (n, 0)).collect();
        for &(s, d) in self.edges.keys() {
            if s != d {
                *indeg.get_mut(&d).expect("edge endpoint is a node") += 1;
            }
        }
        let mut ready: BTreeSet<GaugeId> = indeg
            .iter()
            .filter(|&(_, &deg)| deg == 0)
            .map(|(&n, _)| n)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(&n) = ready.iter().next() {
            ready.remove(&n);
            order.push(n);
            for m in self.successors(n) {
                if m == n {
                    continue;
                }
                let deg = indeg.get_mut(&m).expect("edge endpoint is a node");
                *deg -= 1;
                if *deg == 0 {
                    ready.insert(m);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::domain("cycle detected; graph is not a DAG"));
        }
        Ok(order)
    }

    /// Maximum number of edges on any directed path.
    pub fn longest_path_length(&self) -> Result<usize> {
        let order = self.topo_order()?;
        let mut dist: BTreeMap<GaugeId, usize> = order.iter().map(|&n| (n, 0)).collect();
        let mut best = 0;
        for &n in &order {
            let dn = dist[&n];
            for m in self.successors(n) {
                let dm = dist.get_mut(&m).expect("edge endpoint is a node");
                if dn + 1 > *dm {
                    *dm = dn + 1;
                    best = best.max(*dm);
                }
            }
        }
        Ok(best)
    }

    /// Structural check: empty iff the graph is an acyclic, anti-transitive
    /// simple digraph. Violations are data, not errors.
    pub fn validate(&self) -> Vec<Violation> {
        let mut violations = Vec::new();

        for &(s, d) in self.edges.keys() {
            if s == d {
                violations.push(Violation::SelfLoop { node: s });
            }
        }

        // Kahn over non-loop edges; whatever remains sits on a cycle.
        let mut indeg: BTreeMap<GaugeId, usize> = self.nodes.iter().map(|&n| (n, 0)).collect();
        for &(s, d) in self.edges.keys() {
            if s != d {
                *indeg.get_mut(&d).expect("edge endpoint is a node") += 1;
            }
        }
        let mut ready: BTreeSet<GaugeId> = indeg
            .iter()
            .filter(|&(_, &deg)| deg == 0)
            .map(|(&n, _)| n)
            .collect();
        let mut removed = 0usize;
        while let Some(&n) = ready.iter().next() {
            ready.remove(&n);
            removed += 1;
            for m in self.successors(n) {
                if m == n {
                    continue;
                }
                let deg = indeg.get_mut(&m).expect("edge endpoint is a node");
                *deg -= 1;
                if *deg == 0 {
                    ready.insert(m);
                }
            }
        }
        if removed != self.nodes.len() {
            let nodes: Vec<GaugeId> = indeg
                .iter()
                .filter(|&(_, &deg)| deg > 0)
                .map(|(&n, _)| n)
                .collect();
            violations.push(Violation::Cycle { nodes });
        }

        for &(s, d) in self.edges.keys() {
            if s != d && self.has_long_path(s, d) {
                violations.push(Violation::SkipEdge { src: s, dst: d });
            }
        }
        violations
    }

    /// True if a directed path from `src` to `dst` of length >= 2 exists.
    fn has_long_path(&self, src: GaugeId, dst: GaugeId) -> bool {
        let mut queue: VecDeque<GaugeId> =
            self.successors(src).filter(|&m| m != dst && m != src).collect();
        let mut seen: BTreeSet<GaugeId> = queue.iter().copied().collect();
        while let Some(v) = queue.pop_front() {
            if v == dst {
                return true;
            }
            for m in self.successors(v) {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        seen.contains(&dst)
    }

    /// Edges whose stored slope disagrees with elevation_diff / stream_length
    /// by more than `rel_tol` relative. Flagged at ingestion, never rejected.
    pub fn slope_inconsistencies(&self, rel_tol: f64) -> Vec<(GaugeId, GaugeId)> {
        self.edges
            .iter()
            .filter(|(_, a)| !a.slope_consistent(rel_tol))
            .map(|(&(s, d), _)| (s, d))
            .collect()
    }

    /// Content hash over the canonical node/edge listing, for run manifests.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for &n in &self.nodes {
            hasher.update(format!("n{}\n", n.0));
        }
        for (&(s, d), a) in &self.edges {
            hasher.update(format!(
                "e{},{},{:.17e},{:.17e},{:.17e}\n",
                s.0, d.0, a.stream_length, a.elevation_diff, a.avg_slope
            ));
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads `edges.csv` (+ optional `nodes.csv` for isolated gauges) from `dir`.
pub fn load_graph_csv(dir: &Path) -> Result<RiverGraph> {
    let edges_path = dir.join("edges.csv");
    let mut reader = csv::Reader::from_path(&edges_path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", edges_path.display())))?;
    {
        let headers = reader.headers()?;
        let expected = ["src_id", "dst_id", "stream_length_m", "elevation_diff_m", "avg_slope"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::data(format!(
                "unexpected edges.csv header {:?}, expected {:?}",
                got, expected
            )));
        }
    }
    let mut g = RiverGraph::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::data(format!("short edges.csv record: {record:?}")))
        };
        let src: u64 = field(0)?
            .parse()
            .map_err(|e| Error::data(format!("bad src_id {:?}: {e}", field(0))))?;
        let dst: u64 = field(1)?
            .parse()
            .map_err(|e| Error::data(format!("bad dst_id {:?}: {e}", field(1))))?;
        let len: f64 = field(2)?
            .parse()
            .map_err(|e| Error::data(format!("bad stream_length_m: {e}")))?;
        let dh: f64 = field(3)?
            .parse()
            .map_err(|e| Error::data(format!("bad elevation_diff_m: {e}")))?;
        let slope: f64 = field(4)?
            .parse()
            .map_err(|e| Error::data(format!("bad avg_slope: {e}")))?;
        if !(len > 0.0) {
            return Err(Error::data(format!(
                "edge {src} -> {dst}: stream_length_m must be > 0, got {len}"
            )));
        }
        if dh < 0.0 {
            return Err(Error::data(format!(
                "edge {src} -> {dst}: elevation_diff_m must be >= 0, got {dh}"
            )));
        }
        g.add_edge(
            GaugeId(src),
            GaugeId(dst),
            EdgeAttrs { stream_length: len, elevation_diff: dh, avg_slope: slope },
        )?;
    }

    let nodes_path = dir.join("nodes.csv");
    if nodes_path.exists() {
        let mut reader = csv::Reader::from_path(&nodes_path)?;
        let id_col = reader
            .headers()?
            .iter()
            .position(|h| h == "gauge_id")
            .ok_or_else(|| Error::data("nodes.csv is missing a gauge_id column"))?;
        for record in reader.records() {
            let record = record?;
            let id: u64 = record
                .get(id_col)
                .ok_or_else(|| Error::data("short nodes.csv record"))?
                .parse()
                .map_err(|e| Error::data(format!("bad gauge_id: {e}")))?;
            g.add_node(GaugeId(id));
        }
    }

    for (s, d) in g.slope_inconsistencies(1e-9) {
        log::warn!("edge {s} -> {d}: stored avg_slope is inconsistent with elevation_diff / stream_length");
    }
    Ok(g)
}

/// Writes `edges.csv` and `nodes.csv` into `dir`.
pub fn save_graph_csv(graph: &RiverGraph, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("edges.csv"))?;
    w.write_record(["src_id", "dst_id", "stream_length_m", "elevation_diff_m", "avg_slope"])?;
    for (s, d, a) in graph.edge_list() {
        w.write_record([
            s.to_string(),
            d.to_string(),
            format!("{:.17e}", a.stream_length),
            format!("{:.17e}", a.elevation_diff),
            format!("{:.17e}", a.avg_slope),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("nodes.csv"))?;
    w.write_record(["gauge_id"])?;
    for n in graph.node_ids() {
        w.write_record([n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(ids: &[u64]) -> RiverGraph {
        let mut g = RiverGraph::new();
        for w in ids.windows(2) {
            g.add_edge(GaugeId(w[0]), GaugeId(w[1]), EdgeAttrs::new(1.0, 0.5))
                .unwrap();
        }
        g
    }

    #[test]
    fn inverse_dfs_full_chain() {
        let g = chain(&[1, 2, 3]);
        let got = g.inverse_dfs(GaugeId(3)).unwrap();
        let want: BTreeSet<GaugeId> = [1, 2, 3].into_iter().map(GaugeId).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn inverse_dfs_source_is_singleton() {
        let g = chain(&[1, 2, 3]);
        let got = g.inverse_dfs(GaugeId(1)).unwrap();
        assert_eq!(got.len(), 1);
        assert!(got.contains(&GaugeId(1)));
    }

    #[test]
    fn inverse_dfs_unknown_start() {
        let g = chain(&[1, 2]);
        assert!(matches!(g.inverse_dfs(GaugeId(99)), Err(Error::Domain(_))));
    }

    #[test]
    fn rewire_remove_combines_attributes() {
        let g = RiverGraph::from_edges([
            (1, 2, EdgeAttrs::new(2.0, 1.0)),
            (2, 3, EdgeAttrs::new(3.0, 2.0)),
        ])
        .unwrap();
        let g2 = g.rewire_remove(GaugeId(2)).unwrap();
        assert_eq!(g2.node_count(), 2);
        assert_eq!(g2.edge_count(), 1);
        let a = g2.edge_attrs(GaugeId(1), GaugeId(3)).unwrap();
        assert_eq!(a.stream_length, 5.0);
        assert_eq!(a.elevation_diff, 3.0);
        assert_eq!(a.avg_slope, 0.6);
    }

    #[test]
    fn rewire_remove_leaf_deletes_edges_only() {
        let g = chain(&[1, 2, 3]);
        let g2 = g.rewire_remove(GaugeId(1)).unwrap();
        assert_eq!(g2.node_count(), 2);
        assert_eq!(g2.edge_count(), 1);
        assert!(g2.edge_attrs(GaugeId(2), GaugeId(3)).is_some());
    }

    #[test]
    fn rewire_remove_duplicate_edge_is_integrity_error() {
        // Skip edge 1 -> 3 already present: input violates anti-transitivity.
        let g = RiverGraph::from_edges([
            (1, 2, EdgeAttrs::new(1.0, 0.0)),
            (2, 3, EdgeAttrs::new(1.0, 0.0)),
            (1, 3, EdgeAttrs::new(1.0, 0.0)),
        ])
        .unwrap();
        assert!(matches!(g.rewire_remove(GaugeId(2)), Err(Error::Integrity(_))));
    }

    #[test]
    fn filter_identity_keeps_graph() {
        let g = chain(&[1, 2, 3, 4]);
        let g2 = g.filter_gauges(|_| true).unwrap();
        assert_eq!(g2.node_count(), g.node_count());
        assert_eq!(g2.edge_count(), g.edge_count());
    }

    #[test]
    fn filter_drops_interior_node() {
        let g = RiverGraph::from_edges([
            (1, 2, EdgeAttrs::new(2.0, 1.0)),
            (2, 3, EdgeAttrs::new(3.0, 2.0)),
        ])
        .unwrap();
        let g2 = g.filter_gauges(|id| id != GaugeId(2)).unwrap();
        assert_eq!(g2.node_count(), 2);
        let a = g2.edge_attrs(GaugeId(1), GaugeId(3)).unwrap();
        assert_eq!(a.stream_length, 5.0);
    }

    #[test]
    fn chain_filter_adds_lengths_exactly() {
        let mut g = RiverGraph::new();
        for i in 0..9u64 {
            g.add_edge(GaugeId(i), GaugeId(i + 1), EdgeAttrs::new((i + 1) as f64, 1.0))
                .unwrap();
        }
        let kept = g
            .filter_gauges(|id| id == GaugeId(0) || id == GaugeId(9))
            .unwrap();
        let a = kept.edge_attrs(GaugeId(0), GaugeId(9)).unwrap();
        assert_eq!(a.stream_length, (1..=9).sum::<u64>() as f64);
        assert_eq!(a.elevation_diff, 9.0);
    }

    #[test]
    fn longest_path_cases() {
        let mut single = RiverGraph::new();
        single.add_node(GaugeId(7));
        assert_eq!(single.longest_path_length().unwrap(), 0);
        assert_eq!(chain(&[1, 2, 3, 4, 5]).longest_path_length().unwrap(), 4);
    }

    #[test]
    fn longest_path_rejects_cycles() {
        let g = RiverGraph::from_edges([
            (1, 2, EdgeAttrs::new(1.0, 0.0)),
            (2, 1, EdgeAttrs::new(1.0, 0.0)),
        ])
        .unwrap();
        assert!(matches!(g.longest_path_length(), Err(Error::Domain(_))));
    }

    #[test]
    fn longest_path_is_relabeling_invariant() {
        let g = RiverGraph::from_edges([
            (1, 2, EdgeAttrs::new(1.0, 0.0)),
            (2, 4, EdgeAttrs::new(1.0, 0.0)),
            (3, 4, EdgeAttrs::new(1.0, 0.0)),
        ])
        .unwrap();
        let relabeled = RiverGraph::from_edges([
            (40, 17, EdgeAttrs::new(1.0, 0.0)),
            (17, 5, EdgeAttrs::new(1.0, 0.0)),
            (99, 5, EdgeAttrs::new(1.0, 0.0)),
        ])
        .unwrap();
        assert_eq!(
            g.longest_path_length().unwrap(),
            relabeled.longest_path_length().unwrap()
        );
    }

    #[test]
    fn validate_accepts_chain() {
        assert!(chain(&[1, 2, 3]).validate().is_empty());
    }

    #[test]
    fn validate_flags_skip_edge() {
        let g = RiverGraph::from_edges([
            (1, 2, EdgeAttrs::new(1.0, 0.0)),
            (2, 3, EdgeAttrs::new(1.0, 0.0)),
            (1, 3, EdgeAttrs::new(1.0, 0.0)),
        ])
        .unwrap();
        let violations = g.validate();
        assert_eq!(violations.len(), 1);
        assert_eq!(
            violations[0],
            Violation::SkipEdge { src: GaugeId(1), dst: GaugeId(3) }
        );
    }

    #[test]
    fn validate_flags_two_cycle() {
        let g = RiverGraph::from_edges([
            (1, 2, EdgeAttrs::new(1.0, 0.0)),
            (2, 1, EdgeAttrs::new(1.0, 0.0)),
        ])
        .unwrap();
        assert!(g
            .validate()
            .iter()
            .any(|v| matches!(v, Violation::Cycle { .. })));
    }

    #[test]
    fn induced_subgraph_keeps_internal_edges() {
        let g = RiverGraph::from_edges([
            (1, 2, EdgeAttrs::new(1.0, 0.0)),
            (2, 3, EdgeAttrs::new(1.0, 0.0)),
            (4, 3, EdgeAttrs::new(1.0, 0.0)),
        ])
        .unwrap();
        let keep: BTreeSet<GaugeId> = [1, 2, 3].into_iter().map(GaugeId).collect();
        let sub = g.induced(&keep);
        assert_eq!(sub.node_count(), 3);
        assert_eq!(sub.edge_count(), 2);
    }

    #[test]
    fn content_hash_distinguishes_graphs() {
        let a = chain(&[1, 2, 3]);
        let b = chain(&[1, 2, 4]);
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), chain(&[1, 2, 3]).content_hash());
    }

    #[test]
    fn graph_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = RiverGraph::from_edges([
            (1, 2, EdgeAttrs::new(1234.5, 10.25)),
            (2, 3, EdgeAttrs::new(987.125, 4.5)),
        ])
        .unwrap();
        save_graph_csv(&g, dir.path()).unwrap();
        let g2 = load_graph_csv(dir.path()).unwrap();
        assert_eq!(g2.node_count(), g.node_count());
        for (s, d, a) in g.edge_list() {
            let b = g2.edge_attrs(s, d).unwrap();
            assert_eq!(a.stream_length, b.stream_length);
            assert_eq!(a.elevation_diff, b.elevation_diff);
            assert_eq!(a.avg_slope, b.avg_slope);
        }
    }
}
