//! Construction of the Inter-Class and Intra-Class subgraphs.
//!
//! Edge weights come from cosine similarity between full flattened feature
//! grids, normalized with a softmax over each receiving node's incoming edge
//! group. The one exception is the class-to-proposal edge, which keeps its raw
//! cosine weight.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::types::{ClassKind, ClassPrototype, FeatureGrid, ProposalNode};

/// Default IoU threshold for proposal-proposal edges.
pub const DEFAULT_THETA: f64 = 0.7;

/// Cosine similarity of two equal-length vectors; 0 when either is all zero.
pub fn cosine_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity with a zero-norm feature, using 0");
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Cosine similarity over the flattened grids.
pub fn cosine(a: &FeatureGrid, b: &FeatureGrid) -> Result<f64> {
    b.ensure_shape(a.shape(), "second cosine argument")?;
    Ok(cosine_slices(a.as_slice(), b.as_slice()))
}

/// Max-shifted softmax. An empty input gives an empty output.
pub fn softmax_normalize(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Fully connected graph over all class prototypes (self-pairs included).
#[derive(Debug, Clone)]
pub struct InterClassGraph {
    pub classes: Vec<ClassPrototype>,
    /// `adjacency[[i, j]]`: softmax over `k` of `cos(f(c_i), f(c_k))`, taken at `j`.
    pub adjacency: Array2<f64>,
}

pub fn build_inter_class_graph(classes: &[ClassPrototype]) -> Result<InterClassGraph> {
    let first = classes.first().ok_or(Error::Empty("class list"))?;
    let shape = first.feature.shape();
    for c in classes {
        c.feature
            .ensure_shape(shape, &format!("prototype of class {}", c.class.id))?;
    }
    let n = classes.len();
    let mut adjacency = Array2::zeros((n, n));
    for i in 0..n {
        let row: Vec<f64> = classes
            .iter()
            .map(|ck| cosine_slices(classes[i].feature.as_slice(), ck.feature.as_slice()))
            .collect();
        for (j, w) in softmax_normalize(&row).into_iter().enumerate() {
            adjacency[[i, j]] = w;
        }
    }
    Ok(InterClassGraph {
        classes: classes.to_vec(),
        adjacency,
    })
}

/// Which proposal-side neighbors enter a proposal's neighbor set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeighborContext {
    /// Overlapping proposals plus the global image node.
    #[default]
    Both,
    LocalOnly,
    GlobalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Proposal(usize),
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedEdge {
    pub from: NodeRef,
    pub weight: f64,
}

/// Per-novel-class graph over the class node, the global node and the
/// class-specific proposals.
#[derive(Debug, Clone)]
pub struct IntraClassGraph {
    pub class_node: ClassPrototype,
    pub proposals: Vec<ProposalNode>,
    pub global_node: FeatureGrid,
    pub theta: f64,
    pub context: NeighborContext,
    /// Incoming proposal-proposal edges per receiving proposal. Overlapping
    /// proposals come first in index order, the global node last.
    pub neighbors: Vec<Vec<WeightedEdge>>,
    /// Raw cosine weight of the class -> proposal edge.
    pub cp_to_proposal: Vec<f64>,
    /// Softmax-normalized weights of the proposal -> class edges.
    pub cp_to_class: Vec<f64>,
}

impl IntraClassGraph {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    /// Dense `(N+1) x (N+1)` view of the proposal-proposal weights; index `N`
    /// is the global node, whose row is empty because it only sends.
    pub fn pp_weights(&self) -> Array2<f64> {
        let n = self.len();
        let mut m = Array2::zeros((n + 1, n + 1));
        for (i, edges) in self.neighbors.iter().enumerate() {
            for e in edges {
                let j = match e.from {
                    NodeRef::Proposal(j) => j,
                    NodeRef::Global => n,
                };
                m[[i, j]] = e.weight;
            }
        }
        m
    }

    /// Row-stochastic adjacency over `[proposals.., global, class]` used by
    /// the residual-free diagnostic layers. Every proposal and the class
    /// node average their own feature with their softmax-weighted incoming
    /// group (a proposal with no neighbors keeps only itself); the global
    /// node keeps itself.
    pub fn diagnostic_adjacency(&self) -> Array2<f64> {
        let n = self.len();
        let mut m = Array2::zeros((n + 2, n + 2));
        m.slice_mut(ndarray::s![..=n, ..=n])
            .assign(&(self.pp_weights() * 0.5));
        for i in 0..n {
            m[[i, i]] = if self.neighbors[i].is_empty() {
                1.0
            } else {
                0.5
            };
        }
        m[[n, n]] = 1.0;
        m[[n + 1, n + 1]] = 0.5;
        for (k, w) in self.cp_to_class.iter().enumerate() {
            m[[n + 1, k]] = 0.5 * w;
        }
        m
    }
}

/// Builds the Intra-Class subgraph with the default neighbor context.
pub fn build_intra_class_graph(
    class: &ClassPrototype,
    proposals: &[ProposalNode],
    global_feature: &FeatureGrid,
    theta: f64,
) -> Result<IntraClassGraph> {
    build_intra_class_graph_with(
        class,
        proposals,
        global_feature,
        theta,
        NeighborContext::Both,
    )
}

pub fn build_intra_class_graph_with(
    class: &ClassPrototype,
    proposals: &[ProposalNode],
    global_feature: &FeatureGrid,
    theta: f64,
    context: NeighborContext,
) -> Result<IntraClassGraph> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::arg(format!("theta must lie in (0, 1), got {theta}")));
    }
    if class.class.kind != ClassKind::Novel {
        return Err(Error::arg(format!(
            "intra-class graphs are built for novel classes, class {} is base",
            class.class.id
        )));
    }
    if proposals.is_empty() {
        return Err(Error::Empty("proposal list"));
    }
    let shape = class.feature.shape();
    global_feature.ensure_shape(shape, "global feature")?;
    for (i, p) in proposals.iter().enumerate() {
        p.feature.ensure_shape(shape, &format!("proposal {i}"))?;
    }

    let n = proposals.len();
    let use_local = context != NeighborContext::GlobalOnly;
    let use_global = context != NeighborContext::LocalOnly;
    let mut neighbors = Vec::with_capacity(n);
    for (i, pi) in proposals.iter().enumerate() {
        let mut from = Vec::new();
        if use_local {
            for (j, pj) in proposals.iter().enumerate() {
                if j != i && iou(&pi.bbox, &pj.bbox) > theta {
                    from.push(NodeRef::Proposal(j));
                }
            }
        }
        if use_global {
            from.push(NodeRef::Global);
        }
        let sims: Vec<f64> = from
            .iter()
            .map(|r| {
                let f = match *r {
                    NodeRef::Proposal(j) => &proposals[j].feature,
                    NodeRef::Global => global_feature,
                };
                cosine_slices(pi.feature.as_slice(), f.as_slice())
            })
            .collect();
        let weights = softmax_normalize(&sims);
        neighbors.push(
            from.into_iter()
                .zip(weights)
                .map(|(from, weight)| WeightedEdge { from, weight })
                .collect(),
        );
    }

    let cp_to_proposal: Vec<f64> = proposals
        .iter()
        .map(|p| cosine_slices(class.feature.as_slice(), p.feature.as_slice()))
        .collect();
    let cp_to_class = softmax_normalize(&cp_to_proposal);

    Ok(IntraClassGraph {
        class_node: class.clone(),
        proposals: proposals.to_vec(),
        global_node: global_feature.clone(),
        theta,
        context,
        neighbors,
        cp_to_proposal,
        cp_to_class,
    })
}
