//! Disabling an edge type versus zeroing the matching graph weights by hand.

use hgfsod::gcn::{inter_class_pass, intra_class_pass};
use hgfsod::graph::{build_intra_class_graph_with, NeighborContext, DEFAULT_THETA};
use hgfsod::pipeline::{enhance_episode, ClassProposalEdges, ProposalEdges};
use hgfsod::{build_inter_class_graph, EdgeToggles, Episode, GcnParams, IntraClassGraph};

/// Node outputs (per class: proposals, then the class node) with the inter
/// and intra graphs built by hand, after `edit` has had a chance to zero
/// some of their weights.
pub fn enhanced_with_zeroed(
    ep: &Episode,
    params: &GcnParams,
    zero_inter: bool,
    edit: &dyn Fn(&mut IntraClassGraph),
) -> Vec<Vec<f64>> {
    let mut inter = build_inter_class_graph(&ep.class_table).unwrap();
    if zero_inter {
        inter.adjacency.fill(0.0);
    }
    let protos = inter_class_pass(&inter, params.layers_inter).unwrap();
    let mut out = Vec::new();
    for (class, props) in &ep.proposals {
        let proto = protos.iter().find(|p| p.class == *class).unwrap();
        let mut g = build_intra_class_graph_with(
            proto,
            props,
            &ep.global_feature,
            DEFAULT_THETA,
            NeighborContext::Both,
        )
        .unwrap();
        edit(&mut g);
        let o = intra_class_pass(&g, proto, params, &EdgeToggles::full()).unwrap();
        for p in o.proposals {
            out.push(p.into_vec());
        }
        out.push(o.class.into_vec());
    }
    out
}

/// Library node outputs in the same layout as [`enhanced_with_zeroed`].
pub fn library_nodes(ep: &Episode, params: &GcnParams, t: &EdgeToggles) -> Vec<Vec<f64>> {
    let e = enhance_episode(ep, params, t, DEFAULT_THETA).unwrap();
    let mut out = Vec::new();
    for (class, props) in &e.proposals {
        out.extend(props.iter().map(|p| p.as_slice().to_vec()));
        out.push(e.prototypes[class].as_slice().to_vec());
    }
    out
}

pub fn max_abs_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

fn zero_cp(g: &mut IntraClassGraph) {
    g.cp_to_proposal.iter_mut().for_each(|w| *w = 0.0);
    g.cp_to_class.iter_mut().for_each(|w| *w = 0.0);
}

fn zero_c2p(g: &mut IntraClassGraph) {
    g.cp_to_proposal.iter_mut().for_each(|w| *w = 0.0);
}

fn zero_p2c(g: &mut IntraClassGraph) {
    g.cp_to_class.iter_mut().for_each(|w| *w = 0.0);
}

fn zero_pp(g: &mut IntraClassGraph) {
    g.neighbors
        .iter_mut()
        .flatten()
        .for_each(|e| e.weight = 0.0);
}

/// (name, toggles with one edge type disabled, hand-zeroed node outputs).
pub fn cases(ep: &Episode, params: &GcnParams) -> Vec<(&'static str, EdgeToggles, Vec<Vec<f64>>)> {
    let full = EdgeToggles::full();
    vec![
        (
            "cc",
            EdgeToggles {
                class_class: false,
                ..full
            },
            enhanced_with_zeroed(ep, params, true, &|_| {}),
        ),
        (
            "cp",
            EdgeToggles {
                class_proposal: ClassProposalEdges::Off,
                ..full
            },
            enhanced_with_zeroed(ep, params, false, &zero_cp),
        ),
        (
            "c2p",
            EdgeToggles {
                class_proposal: ClassProposalEdges::ProposalToClass,
                ..full
            },
            enhanced_with_zeroed(ep, params, false, &zero_c2p),
        ),
        (
            "p2c",
            EdgeToggles {
                class_proposal: ClassProposalEdges::ClassToProposal,
                ..full
            },
            enhanced_with_zeroed(ep, params, false, &zero_p2c),
        ),
        (
            "pp",
            EdgeToggles {
                proposal_proposal: ProposalEdges::Off,
                ..full
            },
            enhanced_with_zeroed(ep, params, false, &zero_pp),
        ),
    ]
}

/// Largest deviation between disabling and zeroing over every case.
pub fn max_zeroing_deviation(ep: &Episode, params: &GcnParams) -> f64 {
    cases(ep, params)
        .into_iter()
        .map(|(_, t, zeroed)| max_abs_gap(&library_nodes(ep, params, &t), &zeroed))
        .fold(0.0, f64::max)
}
