//! Adjacency construction and normalization.
//!
//! Nodes are indexed by ascending gauge id. For an oriented edge (i, j) the
//! matrix holds `A[i][j]`, and message passing multiplies by the transpose so
//! that node j aggregates from its in-neighbors. Six adjacency definitions
//! are supported: isolated (no edges), binary, one of three physical edge
//! weights, a learnable weight vector, and — for attention models — all three
//! physical weights jointly as edge features next to a binary matrix.
//!
//! Normalization augments self-loops with weight `xi_i` (the mean incoming
//! edge weight, or 1 for source nodes and the isolated case) and scales
//! symmetrically by the in-degree-plus-self-loop matrix:
//! `Ahat = (D_in + diag(xi))^{-1/2} (A + diag(xi)) (D_in + diag(xi))^{-1/2}`.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{EdgeAttrs, GaugeId, RiverGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyType {
    Isolated,
    Binary,
    StreamLength,
    ElevationDifference,
    AverageSlope,
    Learned,
    /// All three physical weights as joint edge features; attention models only.
    AllPhysical,
}

impl AdjacencyType {
    pub fn name(self) -> &'static str {
        match self {
            AdjacencyType::Isolated => "isolated",
            AdjacencyType::Binary => "binary",
            AdjacencyType::StreamLength => "stream_length",
            AdjacencyType::ElevationDifference => "elevation_difference",
            AdjacencyType::AverageSlope => "average_slope",
            AdjacencyType::Learned => "learned",
            AdjacencyType::AllPhysical => "all_physical",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "isolated" => AdjacencyType::Isolated,
            "binary" => AdjacencyType::Binary,
            "stream_length" => AdjacencyType::StreamLength,
            "elevation_difference" => AdjacencyType::ElevationDifference,
            "average_slope" => AdjacencyType::AverageSlope,
            "learned" => AdjacencyType::Learned,
            "all_physical" => AdjacencyType::AllPhysical,
            other => return Err(Error::config(format!("unknown adjacency type '{other}'"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeOrientation {
    /// Edges as stored: information flows with the water.
    Downstream,
    /// All edges reversed.
    Upstream,
    /// Disjoint union of downstream and upstream edge sets.
    Bidirected,
}

impl EdgeOrientation {
    pub fn name(self) -> &'static str {
        match self {
            EdgeOrientation::Downstream => "downstream",
            EdgeOrientation::Upstream => "upstream",
            EdgeOrientation::Bidirected => "bidirected",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "downstream" => EdgeOrientation::Downstream,
            "upstream" => EdgeOrientation::Upstream,
            "bidirected" => EdgeOrientation::Bidirected,
            other => return Err(Error::config(format!("unknown edge orientation '{other}'"))),
        })
    }
}

/// One oriented edge in matrix coordinates, keeping the physical attributes
/// of the river segment it came from (a reversed edge carries the same
/// attributes as its forward twin).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedEdge {
    pub src: usize,
    pub dst: usize,
    pub attrs: EdgeAttrs,
}

/// Node index fixed by ascending gauge id.
pub fn node_order(graph: &RiverGraph) -> (Vec<GaugeId>, BTreeMap<GaugeId, usize>) {
    let ids: Vec<GaugeId> = graph.node_ids().collect();
    let index = ids.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    (ids, index)
}

/// Oriented edges sorted by (src, dst) matrix index; two builds of the same
/// graph always yield the identical list.
pub fn oriented_edges(graph: &RiverGraph, orientation: EdgeOrientation) -> Vec<OrientedEdge> {
    let (_, index) = node_order(graph);
    let mut edges = Vec::new();
    for (s, d, attrs) in graph.edge_list() {
        let (si, di) = (index[&s], index[&d]);
        match orientation {
            EdgeOrientation::Downstream => edges.push(OrientedEdge { src: si, dst: di, attrs: *attrs }),
            EdgeOrientation::Upstream => edges.push(OrientedEdge { src: di, dst: si, attrs: *attrs }),
            EdgeOrientation::Bidirected => {
                edges.push(OrientedEdge { src: si, dst: di, attrs: *attrs });
                edges.push(OrientedEdge { src: di, dst: si, attrs: *attrs });
            }
        }
    }
    edges.sort_by_key(|e| (e.src, e.dst));
    edges
}

/// Raw adjacency matrix plus the oriented edge index that addresses learned
/// weights, and the edge-feature table for the all-physical case.
#[derive(Clone, Debug)]
pub struct AdjacencyBuild {
    pub matrix: Array2<f64>,
    /// Empty for the isolated type, which removes all edges.
    pub edges: Vec<OrientedEdge>,
    /// `|edges| x 3` (stream length, elevation difference, average slope);
    /// present only for [`AdjacencyType::AllPhysical`].
    pub edge_features: Option<Array2<f64>>,
    pub adjacency_type: AdjacencyType,
    pub orientation: EdgeOrientation,
}

pub fn build_adjacency(
    graph: &RiverGraph,
    adjacency_type: AdjacencyType,
    orientation: EdgeOrientation,
    learned: Option<&[f64]>,
) -> Result<AdjacencyBuild> {
    let n = graph.node_count();
    if adjacency_type == AdjacencyType::Learned {
        if learned.is_none() {
            return Err(Error::domain("learned adjacency requires a weight vector"));
        }
    } else if learned.is_some() {
        return Err(Error::domain(format!(
            "weight vector supplied for non-learned adjacency type '{}'",
            adjacency_type.name()
        )));
    }

    let edges = if adjacency_type == AdjacencyType::Isolated {
        Vec::new()
    } else {
        oriented_edges(graph, orientation)
    };

    if let Some(w) = learned {
        if w.len() != edges.len() {
            return Err(Error::domain(format!(
                "learned weight vector has length {}, expected {} oriented edges",
                w.len(),
                edges.len()
            )));
        }
    }

    let mut matrix = Array2::<f64>::zeros((n, n));
    let mut edge_features = None;
    match adjacency_type {
        AdjacencyType::Isolated => {}
        AdjacencyType::Binary => {
            for e in &edges {
                matrix[[e.src, e.dst]] = 1.0;
            }
        }
        AdjacencyType::StreamLength => {
            for e in &edges {
                matrix[[e.src, e.dst]] = e.attrs.stream_length;
            }
        }
        AdjacencyType::ElevationDifference => {
            for e in &edges {
                matrix[[e.src, e.dst]] = e.attrs.elevation_diff;
            }
        }
        AdjacencyType::AverageSlope => {
            for e in &edges {
                matrix[[e.src, e.dst]] = e.attrs.avg_slope;
            }
        }
        AdjacencyType::Learned => {
            let w = learned.expect("checked above");
            for (e, &weight) in edges.iter().zip(w) {
                if !weight.is_finite() {
                    return Err(Error::numeric("non-finite learned edge weight"));
                }
                matrix[[e.src, e.dst]] = weight;
            }
        }
        AdjacencyType::AllPhysical => {
            let mut features = Array2::<f64>::zeros((edges.len(), 3));
            for (k, e) in edges.iter().enumerate() {
                matrix[[e.src, e.dst]] = 1.0;
                features[[k, 0]] = e.attrs.stream_length;
                features[[k, 1]] = e.attrs.elevation_diff;
                features[[k, 2]] = e.attrs.avg_slope;
            }
            edge_features = Some(features);
        }
    }

    Ok(AdjacencyBuild { matrix, edges, edge_features, adjacency_type, orientation })
}

/// Normalized augmented adjacency with stored self-loop weights.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    pub matrix: Array2<f64>,
    pub adjacency_type: AdjacencyType,
    pub orientation: EdgeOrientation,
    pub self_loop_weights: Array1<f64>,
}

impl NormalizedAdjacency {
    /// Builds and normalizes in one step, keeping provenance.
    pub fn build(
        graph: &RiverGraph,
        adjacency_type: AdjacencyType,
        orientation: EdgeOrientation,
        learned: Option<&[f64]>,
    ) -> Result<Self> {
        let built = build_adjacency(graph, adjacency_type, orientation, learned)?;
        let (matrix, self_loop_weights) =
            normalize_augmented(built.matrix.view(), adjacency_type)?;
        Ok(NormalizedAdjacency { matrix, adjacency_type, orientation, self_loop_weights })
    }
}

/// Applies the display formula from the module docs to a raw matrix.
///
/// `xi_i` is the mean over the nonzero incoming weights of node i (column i),
/// and exactly 1 when the node has no incoming edges or the type is isolated.
/// For the isolated type the result is bitwise the identity. Returns the
/// normalized matrix together with the self-loop weights.
pub fn normalize_augmented(
    a: ArrayView2<f64>,
    adjacency_type: AdjacencyType,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let (rows, cols) = a.dim();
    if rows != cols {
        return Err(Error::domain(format!(
            "adjacency matrix must be square, got {rows}x{cols}"
        )));
    }
    let n = rows;
    for &x in a.iter() {
        if !x.is_finite() {
            return Err(Error::domain("adjacency matrix has a non-finite entry"));
        }
        if x < 0.0 {
            return Err(Error::domain("adjacency matrix has a negative entry"));
        }
    }

    let mut in_weight = Array1::<f64>::zeros(n);
    let mut xi = Array1::<f64>::zeros(n);
    for j in 0..n {
        let mut sum = 0.0;
        let mut nonzero = 0usize;
        for i in 0..n {
            let w = a[[i, j]];
            if w != 0.0 {
                sum += w;
                nonzero += 1;
            }
        }
        in_weight[j] = sum;
        xi[j] = if adjacency_type == AdjacencyType::Isolated || nonzero == 0 {
            1.0
        } else {
            sum / nonzero as f64
        };
    }

    let scale: Array1<f64> = (0..n)
        .map(|i| 1.0 / (in_weight[i] + xi[i]).sqrt())
        .collect();
    let mut out = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let augmented = if i == j { a[[i, j]] + xi[i] } else { a[[i, j]] };
            out[[i, j]] = scale[i] * augmented * scale[j];
        }
    }
    Ok((out, xi))
}

/// Records the learned-weight normalization on a tape so gradients flow
/// through the whole expression. The self-loop weight of a node with incoming
/// edges is the structural mean over those edges' weights (fixed index set,
/// so the map stays differentiable after clipping); source nodes get 1.
pub fn learned_normalized_var(
    tape: &mut Tape,
    omega: Var,
    edges: &[OrientedEdge],
    n: usize,
) -> Result<Var> {
    let pairs: Arc<Vec<(usize, usize)>> = Arc::new(edges.iter().map(|e| (e.src, e.dst)).collect());

    let mut indegree = vec![0usize; n];
    for e in edges {
        indegree[e.dst] += 1;
    }
    let mut mean_map = Array2::<f64>::zeros((n, edges.len()));
    for (k, e) in edges.iter().enumerate() {
        mean_map[[e.dst, k]] = 1.0 / indegree[e.dst] as f64;
    }
    let xi_base: Array1<f64> = indegree
        .iter()
        .map(|&d| if d == 0 { 1.0 } else { 0.0 })
        .collect();

    let a = tape.scatter(omega, pairs, n)?;
    let mean_map = tape.constant(mean_map.into_dyn());
    let xi_base = tape.constant(xi_base.into_dyn());
    let xi_edges = tape.matvec(mean_map, omega)?;
    let xi = tape.add(xi_edges, xi_base)?;
    let d_in = tape.col_sum(a)?;
    let total = tape.add(d_in, xi)?;
    let scale = tape.rsqrt(total, 1e-12)?;
    let augmented = tape.add_diag(a, xi)?;
    let row_scaled = tape.scale_rows(augmented, scale)?;
    tape.scale_cols(row_scaled, scale)
}

/// Mask of aggregation sources per target column: in-neighbors plus self.
pub fn attention_mask(edges: &[OrientedEdge], n: usize) -> Array2<bool> {
    let mut mask = Array2::from_elem((n, n), false);
    for i in 0..n {
        mask[[i, i]] = true;
    }
    for e in edges {
        mask[[e.src, e.dst]] = true;
    }
    mask
}
