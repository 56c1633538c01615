#![allow(dead_code)]

pub mod audit;
pub mod graphs;
pub mod oracle;
pub mod pr;
pub mod zeroing;

use hgfsod::pipeline::{ClassProposalEdges, ProposalEdges};
use hgfsod::synth::{generate_episode, GenConfig};
use hgfsod::{EdgeToggles, Episode, FeatureShape, GcnParams, MatchHead, SplitMix64};
use ndarray::Array2;

use oracle::Terms;

/// A random small episode (at most 5 classes, at most 8 proposals per
/// class, 2x2x8 features) with a perturbed model.
pub struct Instance {
    pub episode: Episode,
    pub params: GcnParams,
    pub head: MatchHead,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = SplitMix64::new(seed);
    let num_novel = 1 + rng.below(3);
    let num_base = 1 + rng.below(5 - num_novel);
    let cfg = GenConfig {
        num_base,
        num_novel,
        shots: 1 + rng.below(3),
        base_shots: 1 + rng.below(4),
        proposals_per_class: 1 + rng.below(8),
        shape: FeatureShape {
            height: 2,
            width: 2,
            channels: 8,
        },
        family_bases: rng.below(2),
        jitter: rng.uniform(0.0, 0.3),
        objects_per_image: (num_novel, num_novel + 2),
        seed,
        ..GenConfig::default()
    };
    let (episode, _) = generate_episode(&cfg, &mut rng).expect("feasible config");
    let dim = cfg.shape.dim();
    let mut params = GcnParams::identity(dim);
    params.weight.mapv_inplace(|w| w + 0.3 * rng.normal());
    params.layers_inter = 1 + rng.below(2);
    params.layers_intra = 1 + rng.below(3);
    let mut head = MatchHead::init(dim);
    head.scale = rng.uniform(0.5, 8.0);
    head.bias = rng.uniform(-3.0, 1.0);
    head.regressor = Array2::from_shape_fn((dim, 4), |_| 0.1 * rng.normal());
    Instance {
        episode,
        params,
        head,
    }
}

pub fn weight_rows(p: &GcnParams) -> Vec<Vec<f64>> {
    p.weight.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Reference terms equivalent to a toggle set.
pub fn terms_of(t: &EdgeToggles) -> Terms {
    let t = t.normalized();
    if t.bypass_gcn {
        return Terms::RAW;
    }
    if t.mlp_mode {
        return Terms::SELF_ONLY;
    }
    Terms {
        graph: true,
        class_class: t.class_class,
        class_to_proposal: matches!(
            t.class_proposal,
            ClassProposalEdges::ClassToProposal | ClassProposalEdges::Bidirectional
        ),
        proposal_to_class: matches!(
            t.class_proposal,
            ClassProposalEdges::ProposalToClass | ClassProposalEdges::Bidirectional
        ),
        local: matches!(
            t.proposal_proposal,
            ProposalEdges::LocalOnly | ProposalEdges::Both
        ),
        global: matches!(
            t.proposal_proposal,
            ProposalEdges::GlobalOnly | ProposalEdges::Both
        ),
    }
}

/// Every toggle combination the ablation tables use, memory sizes included.
pub fn toggle_grid() -> Vec<EdgeToggles> {
    let mut grid: Vec<EdgeToggles> = EdgeToggles::component_grid()
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    for cp in [
        ClassProposalEdges::ClassToProposal,
        ClassProposalEdges::ProposalToClass,
    ] {
        grid.push(EdgeToggles {
            class_proposal: cp,
            ..EdgeToggles::full()
        });
    }
    for pp in [ProposalEdges::LocalOnly, ProposalEdges::GlobalOnly] {
        grid.push(EdgeToggles {
            proposal_proposal: pp,
            ..EdgeToggles::full()
        });
    }
    for k in [0, 1, 3] {
        grid.push(EdgeToggles {
            base_memory_size: Some(k),
            ..EdgeToggles::full()
        });
    }
    grid
}

pub fn reference(inst: &Instance, toggles: &EdgeToggles, theta: f64) -> oracle::Output {
    let w = weight_rows(&inst.params);
    let model = oracle::Model {
        w: &w,
        scale: inst.head.scale,
        bias: inst.head.bias,
        layers_inter: inst.params.layers_inter,
        layers_intra: inst.params.layers_intra,
        theta,
        base_memory: toggles.base_memory_size,
    };
    oracle::run(&inst.episode, &model, terms_of(toggles))
}
