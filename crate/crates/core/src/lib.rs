//! Heterogeneous graph enhancement for few-shot object detection.
//!
//! Class prototypes and class-specific proposals are enhanced by an
//! Inter-Class graph over prototypes and one Intra-Class graph per novel
//! class, then matched by a cosine head with a linear box regressor. The
//! crate also ships a trainer with analytic gradients, a seeded synthetic
//! episode generator, AP metrics and JSON/CSV formats.

pub mod error;
pub mod eval;
pub mod gcn;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod pipeline;
pub mod prototype;
pub mod rng;
pub mod synth;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use gcn::{GcnParams, TransformAudit};
pub use geometry::{iou, nms, BoxDelta};
pub use graph::{
    build_inter_class_graph, build_intra_class_graph, InterClassGraph, IntraClassGraph,
};
pub use pipeline::{detect_episode, score_episode, DetectorConfig, EdgeToggles, MatchHead};
pub use rng::SplitMix64;
pub use synth::{GenConfig, Split};
pub use training::{train, TrainConfig};
pub use types::{
    BBox, ClassId, ClassKind, ClassPrototype, Detection, Episode, FeatureGrid, FeatureShape,
    GroundTruth, ProposalNode,
};
