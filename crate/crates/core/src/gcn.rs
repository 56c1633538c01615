//! Message passing over the heterogeneous graph.
//!
//! The Inter-Class pass has no learnable weight: each prototype becomes the
//! transposed-adjacency weighted sum of all prototypes plus itself. The
//! Intra-Class pass aggregates messages for every proposal and for the class
//! node, multiplies all of them by one shared matrix `W` and adds the
//! residual. Every node's message starts with its own feature (the class node
//! with unit weight as written, each proposal likewise), so with all edge types
//! off a layer is `X W + X`. Proposals and the prototype always see the same
//! number of `W` applications.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{InterClassGraph, IntraClassGraph, NodeRef};
use crate::pipeline::EdgeToggles;
use crate::rng::SplitMix64;
use crate::types::{ClassPrototype, FeatureGrid, FeatureShape};

/// Standard deviation of the noise added to the identity at initialization.
pub const WEIGHT_INIT_STD: f64 = 0.01;

/// Learnable state of the Intra-Class layers plus the layer counts.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    /// `D x D`, shared by the proposal and class updates.
    pub weight: Array2<f64>,
    pub layers_inter: usize,
    pub layers_intra: usize,
}

impl GcnParams {
    pub fn identity(dim: usize) -> Self {
        GcnParams {
            weight: Array2::eye(dim),
            layers_inter: 1,
            layers_intra: 1,
        }
    }

    /// Identity plus zero-mean Gaussian noise of standard deviation 0.01.
    pub fn init(dim: usize, rng: &mut SplitMix64) -> Self {
        let mut p = Self::identity(dim);
        p.weight
            .iter_mut()
            .for_each(|w| *w += WEIGHT_INIT_STD * rng.normal());
        p
    }

    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.nrows() != self.weight.ncols() {
            return Err(Error::shape(format!(
                "weight must be square, got {:?}",
                self.weight.dim()
            )));
        }
        if self.layers_inter == 0 || self.layers_intra == 0 {
            return Err(Error::arg("layer counts must be at least 1"));
        }
        if !self.weight.iter().all(|w| w.is_finite()) {
            return Err(Error::arg("weight has non-finite entries"));
        }
        Ok(())
    }

    pub(crate) fn ensure_dim(&self, shape: FeatureShape) -> Result<()> {
        if self.dim() != shape.dim() {
            return Err(Error::shape(format!(
                "weight is {}x{} but features flatten to {} ({shape})",
                self.dim(),
                self.dim(),
                shape.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Residual {
    On,
    /// Diagnostic only: drops the `+ X` term.
    Off,
}

/// `A X W + X`, or `A X + X` without a weight.
pub fn gcn_layer(x: &Array2<f64>, a: &Array2<f64>, w: Option<&Array2<f64>>) -> Result<Array2<f64>> {
    gcn_layer_with(x, a, w, Residual::On)
}

pub fn gcn_layer_with(
    x: &Array2<f64>,
    a: &Array2<f64>,
    w: Option<&Array2<f64>>,
    residual: Residual,
) -> Result<Array2<f64>> {
    if a.nrows() != a.ncols() || a.ncols() != x.nrows() {
        return Err(Error::shape(format!(
            "adjacency {:?} does not match {} nodes",
            a.dim(),
            x.nrows()
        )));
    }
    let mut out = a.dot(x);
    if let Some(w) = w {
        if w.nrows() != x.ncols() || w.ncols() != x.ncols() {
            return Err(Error::shape(format!(
                "weight {:?} does not match feature width {}",
                w.dim(),
                x.ncols()
            )));
        }
        out = out.dot(w);
    }
    if residual == Residual::On {
        out += x;
    }
    Ok(out)
}

pub(crate) fn stack_grids<'a>(
    grids: impl IntoIterator<Item = &'a FeatureGrid>,
    dim: usize,
) -> Array2<f64> {
    let rows: Vec<&FeatureGrid> = grids.into_iter().collect();
    let mut m = Array2::zeros((rows.len(), dim));
    for (mut row, g) in m.rows_mut().into_iter().zip(rows) {
        row.assign(&ArrayView1::from(g.as_slice()));
    }
    m
}

pub(crate) fn row_to_grid(row: ArrayView1<f64>, shape: FeatureShape) -> Result<FeatureGrid> {
    FeatureGrid::new(shape, row.to_vec())
}

/// Applies the class-class update `layers` times with the adjacency fixed.
pub fn inter_class_pass(graph: &InterClassGraph, layers: usize) -> Result<Vec<ClassPrototype>> {
    let Some(first) = graph.classes.first() else {
        return Ok(Vec::new());
    };
    let shape = first.feature.shape();
    let transposed = graph.adjacency.t().to_owned();
    let mut x = stack_grids(graph.classes.iter().map(|c| &c.feature), shape.dim());
    for _ in 0..layers {
        x = gcn_layer(&x, &transposed, None)?;
    }
    graph
        .classes
        .iter()
        .zip(x.rows())
        .map(|(c, row)| {
            Ok(ClassPrototype {
                class: c.class,
                feature: row_to_grid(row, shape)?,
                support_count: c.support_count,
            })
        })
        .collect()
}

/// Number of `W` multiplications each path went through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TransformAudit {
    pub proposal_path: usize,
    pub class_path: usize,
    pub inter_pass: usize,
}

#[derive(Debug, Clone)]
pub struct IntraPassOutput {
    pub proposals: Vec<FeatureGrid>,
    pub class: FeatureGrid,
    pub audit: TransformAudit,
}

/// Fixed message coefficients of one Intra-Class graph under a toggle set.
#[derive(Debug, Clone)]
pub(crate) struct MessagePlan {
    n: usize,
    /// Class -> proposal weight per proposal; empty when that direction is off.
    class_coeff: Vec<f64>,
    /// Proposal-proposal edges per proposal; empty lists when the type is off.
    neighbors: Vec<Vec<(NodeRef, f64)>>,
    /// Proposal -> class weights; empty when that direction is off.
    class_from_proposals: Vec<f64>,
}

impl MessagePlan {
    pub(crate) fn new(graph: &IntraClassGraph, toggles: &EdgeToggles) -> Self {
        let t = toggles.normalized();
        let n = graph.len();
        let class_coeff = if t.class_to_proposal_enabled() {
            graph.cp_to_proposal.clone()
        } else {
            Vec::new()
        };
        let neighbors = if t.proposal_proposal_enabled() {
            graph
                .neighbors
                .iter()
                .map(|edges| edges.iter().map(|e| (e.from, e.weight)).collect())
                .collect()
        } else {
            vec![Vec::new(); n]
        };
        let class_from_proposals = if t.proposal_to_class_enabled() {
            graph.cp_to_class.clone()
        } else {
            Vec::new()
        };
        MessagePlan {
            n,
            class_coeff,
            neighbors,
            class_from_proposals,
        }
    }

    /// Messages for node matrix `x` (`N` proposal rows then the class row):
    /// each node's own feature plus its enabled incoming edges.
    pub(crate) fn messages(&self, x: &Array2<f64>, global: ArrayView1<f64>) -> Array2<f64> {
        let n = self.n;
        let mut m = Array2::zeros(x.raw_dim());
        let class = x.row(n);
        for i in 0..n {
            let mut row = m.row_mut(i);
            row += &x.row(i);
            if let Some(a) = self.class_coeff.get(i) {
                row.scaled_add(*a, &class);
            }
            for &(from, w) in &self.neighbors[i] {
                match from {
                    NodeRef::Proposal(j) => row.scaled_add(w, &x.row(j)),
                    NodeRef::Global => row.scaled_add(w, &global),
                }
            }
        }
        let mut crow = m.row_mut(n);
        crow += &class;
        for (k, b) in self.class_from_proposals.iter().enumerate() {
            crow.scaled_add(*b, &x.row(k));
        }
        m
    }

    /// Accumulates into `gx` the gradient flowing back through
    /// [`MessagePlan::messages`] given the gradient `gm` of the messages.
    pub(crate) fn backprop(&self, gm: &Array2<f64>, gx: &mut Array2<f64>) {
        let n = self.n;
        for i in 0..n {
            let gi = gm.row(i);
            {
                let mut r = gx.row_mut(i);
                r += &gi;
            }
            if let Some(a) = self.class_coeff.get(i) {
                gx.row_mut(n).scaled_add(*a, &gi);
            }
            for &(from, w) in &self.neighbors[i] {
                if let NodeRef::Proposal(j) = from {
                    gx.row_mut(j).scaled_add(w, &gi);
                }
            }
        }
        let gc = gm.row(n);
        {
            let mut r = gx.row_mut(n);
            r += &gc;
        }
        for (k, b) in self.class_from_proposals.iter().enumerate() {
            gx.row_mut(k).scaled_add(*b, &gc);
        }
    }
}

/// Inputs and messages of every Intra-Class layer, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct IntraTrace {
    pub messages: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Runs `layers` synchronous layers `X <- M(X) W + X` starting from `x0`.
pub(crate) fn intra_forward(
    plan: &MessagePlan,
    x0: Array2<f64>,
    global: ArrayView1<f64>,
    weight: &Array2<f64>,
    layers: usize,
) -> IntraTrace {
    let mut x = x0;
    let mut messages = Vec::with_capacity(layers);
    for _ in 0..layers {
        let m = plan.messages(&x, global);
        x = m.dot(weight) + &x;
        messages.push(m);
    }
    IntraTrace {
        messages,
        output: x,
    }
}

/// Runs the Intra-Class layers for one novel class.
///
/// `enhanced_class` is the class node's input feature (normally the output
/// of the Inter-Class pass). Edge weights come from `graph` and stay fixed
/// across layers.
pub fn intra_class_pass(
    graph: &IntraClassGraph,
    enhanced_class: &ClassPrototype,
    params: &GcnParams,
    toggles: &EdgeToggles,
) -> Result<IntraPassOutput> {
    let shape = enhanced_class.feature.shape();
    params.ensure_dim(shape)?;
    graph.global_node.ensure_shape(shape, "global node")?;
    let dim = shape.dim();
    let mut x0 = stack_grids(graph.proposals.iter().map(|p| &p.feature), dim);
    x0.push_row(ArrayView1::from(enhanced_class.feature.as_slice()))
        .map_err(|e| Error::shape(e.to_string()))?;
    if toggles.bypass_gcn {
        return finish(x0, shape, TransformAudit::default());
    }
    let plan = MessagePlan::new(graph, toggles);
    let global = Array1::from(graph.global_node.as_slice().to_vec());
    let trace = intra_forward(
        &plan,
        x0,
        global.view(),
        &params.weight,
        params.layers_intra,
    );
    let audit = TransformAudit {
        proposal_path: trace.messages.len(),
        class_path: trace.messages.len(),
        inter_pass: 0,
    };
    finish(trace.output, shape, audit)
}

fn finish(x: Array2<f64>, shape: FeatureShape, audit: TransformAudit) -> Result<IntraPassOutput> {
    let n = x.nrows() - 1;
    let proposals = x
        .axis_iter(Axis(0))
        .take(n)
        .map(|r| row_to_grid(r, shape))
        .collect::<Result<Vec<_>>>()?;
    let class = row_to_grid(x.row(n), shape)?;
    Ok(IntraPassOutput {
        proposals,
        class,
        audit,
    })
}
