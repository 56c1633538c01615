//! Generated Intra-Class graphs and the structural checks run on them.

use hgfsod::gcn::{gcn_layer_with, Residual};
use hgfsod::graph::{build_intra_class_graph_with, NeighborContext, NodeRef, DEFAULT_THETA};
use hgfsod::synth::{generate_episode, GenConfig};
use hgfsod::{
    build_inter_class_graph, iou, ClassKind, Episode, FeatureShape, IntraClassGraph, SplitMix64,
};
use ndarray::Array2;

pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Episodes with plenty of overlapping proposals: few objects per image and
/// tight proposal clusters around each of them.
pub fn crowded_episode(seed: u64) -> Episode {
    let mut rng = SplitMix64::new(seed);
    let num_novel = 1 + rng.below(3);
    let cfg = GenConfig {
        num_base: 1 + rng.below(4),
        num_novel,
        shots: 1,
        base_shots: 1,
        proposals_per_class: 2 + rng.below(15),
        shape: FeatureShape {
            height: 2,
            width: 2,
            channels: 8,
        },
        family_bases: rng.below(2),
        jitter: rng.uniform(0.0, 0.3),
        cluster_boxes: 1 + rng.below(4),
        objects_per_image: (num_novel, num_novel + 1),
        seed,
        ..GenConfig::default()
    };
    generate_episode(&cfg, &mut rng).expect("feasible config").0
}

pub fn intra_graphs(ep: &Episode, context: NeighborContext) -> Vec<IntraClassGraph> {
    ep.class_table
        .iter()
        .filter(|p| p.class.kind == ClassKind::Novel)
        .map(|proto| {
            let props = &ep.proposals[&proto.class];
            build_intra_class_graph_with(proto, props, &ep.global_feature, DEFAULT_THETA, context)
                .unwrap()
        })
        .collect()
}

fn stochastic(weights: impl IntoIterator<Item = f64>, what: &str) -> Result<(), String> {
    let ws: Vec<f64> = weights.into_iter().collect();
    if ws.iter().any(|w| *w < 0.0) {
        return Err(format!("{what}: negative weight"));
    }
    let total: f64 = ws.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(format!("{what}: sums to {total}"));
    }
    Ok(())
}

/// Every softmax group of one graph sums to one, and proposal-proposal
/// edges are exactly the pairs overlapping above `theta`. Returns the
/// number of overlap edges.
pub fn check_graph(g: &IntraClassGraph) -> Result<usize, String> {
    stochastic(g.cp_to_class.iter().copied(), "proposal -> class")?;
    let mut local_edges = 0;
    for (i, edges) in g.neighbors.iter().enumerate() {
        if g.context != NeighborContext::LocalOnly
            && edges.last().map(|e| e.from) != Some(NodeRef::Global)
        {
            return Err(format!("proposal {i} lacks the global node"));
        }
        if !edges.is_empty() {
            stochastic(
                edges.iter().map(|e| e.weight),
                &format!("neighbors of proposal {i}"),
            )?;
        }
        let mut from: Vec<usize> = Vec::new();
        for e in edges {
            if let NodeRef::Proposal(j) = e.from {
                let v = iou(&g.proposals[i].bbox, &g.proposals[j].bbox);
                if j == i || v <= g.theta {
                    return Err(format!("edge {j} -> {i} at IoU {v}"));
                }
                from.push(j);
                local_edges += 1;
            }
        }
        let want: Vec<usize> = if g.context == NeighborContext::GlobalOnly {
            Vec::new()
        } else {
            (0..g.len())
                .filter(|&j| j != i && iou(&g.proposals[i].bbox, &g.proposals[j].bbox) > g.theta)
                .collect()
        };
        if from != want {
            return Err(format!(
                "proposal {i}: neighbors {from:?}, overlaps {want:?}"
            ));
        }
    }
    for (k, row) in g.diagnostic_adjacency().rows().into_iter().enumerate() {
        stochastic(row.iter().copied(), &format!("diagnostic row {k}"))?;
    }
    Ok(local_edges)
}

/// Checks `graphs` Intra-Class graphs (all three neighbor contexts) and
/// the Inter-Class graph of each episode they come from. Returns the
/// number of overlap edges seen.
pub fn check_generated_graphs(graphs: usize) -> Result<usize, String> {
    let (mut seen, mut local_edges, mut seed) = (0, 0, 0);
    while seen < graphs {
        let ep = crowded_episode(seed);
        seed += 1;
        let inter = build_inter_class_graph(&ep.class_table).map_err(|e| e.to_string())?;
        for (i, row) in inter.adjacency.rows().into_iter().enumerate() {
            stochastic(row.iter().copied(), &format!("inter-class row {i}"))?;
        }
        for context in [
            NeighborContext::Both,
            NeighborContext::LocalOnly,
            NeighborContext::GlobalOnly,
        ] {
            for g in intra_graphs(&ep, context) {
                local_edges += check_graph(&g).map_err(|e| format!("episode {}: {e}", seed - 1))?;
                seen += 1;
            }
        }
    }
    Ok(local_edges)
}

fn max_pairwise_distance(x: &Array2<f64>) -> f64 {
    let mut best: f64 = 0.0;
    for a in x.rows() {
        for b in x.rows() {
            let d: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
                .sqrt();
            best = best.max(d);
        }
    }
    best
}

/// Max pairwise node distance before and after each of `layers`
/// residual-free layers with `W = I`.
pub fn hull_diameters(g: &IntraClassGraph, layers: usize) -> Vec<f64> {
    let a = g.diagnostic_adjacency();
    let dim = g.class_node.feature.as_slice().len();
    let mut x = Array2::zeros((g.len() + 2, dim));
    for (k, p) in g.proposals.iter().enumerate() {
        x.row_mut(k)
            .assign(&ndarray::ArrayView1::from(p.feature.as_slice()));
    }
    x.row_mut(g.len())
        .assign(&ndarray::ArrayView1::from(g.global_node.as_slice()));
    x.row_mut(g.len() + 1)
        .assign(&ndarray::ArrayView1::from(g.class_node.feature.as_slice()));
    let identity = Array2::eye(dim);
    let mut out = vec![max_pairwise_distance(&x)];
    for _ in 0..layers {
        x = gcn_layer_with(&x, &a, Some(&identity), Residual::Off).unwrap();
        out.push(max_pairwise_distance(&x));
    }
    out
}

/// Runs the hull check on `graphs` graphs; returns how many shrank strictly.
pub fn check_hull_contraction(graphs: usize, layers: usize) -> Result<usize, String> {
    let (mut seen, mut strictly, mut seed) = (0, 0, 1000);
    while seen < graphs {
        let ep = crowded_episode(seed);
        seed += 1;
        for g in intra_graphs(&ep, NeighborContext::Both)
            .into_iter()
            .take(graphs - seen)
        {
            let d = hull_diameters(&g, layers);
            for (k, w) in d.windows(2).enumerate() {
                if w[1] > w[0] * (1.0 + 1e-12) {
                    return Err(format!("graph {seen} layer {k}: {} -> {}", w[0], w[1]));
                }
            }
            if d[layers] < d[0] {
                strictly += 1;
            }
            seen += 1;
        }
    }
    Ok(strictly)
}
