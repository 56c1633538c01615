//! End-to-end detection for one episode.
//!
//! 1. Inter-Class pass over the base-class memory plus every novel class.
//! 2. Per novel class, an Intra-Class graph over its proposals, the global
//!    node and the enhanced prototype, followed by the Intra-Class layers.
//! 3. Pairwise scoring of each enhanced proposal against its enhanced
//!    prototype, box regression, thresholding and per-class NMS.
//!
//! The pairwise matcher is a sigmoid of an affine function of the cosine
//! between the two enhanced features, with a linear box regressor on the
//! enhanced proposal feature.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::{
    inter_class_pass, intra_forward, row_to_grid, stack_grids, GcnParams, MessagePlan,
    TransformAudit,
};
use crate::geometry::{apply_delta_clipped, nms, BoxDelta};
use crate::graph::{
    build_inter_class_graph, build_intra_class_graph_with, cosine, cosine_slices, NeighborContext,
    DEFAULT_THETA,
};
use crate::types::{BBox, ClassId, ClassKind, ClassPrototype, Detection, Episode, FeatureGrid};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassProposalEdges {
    Off,
    ClassToProposal,
    ProposalToClass,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalEdges {
    Off,
    LocalOnly,
    GlobalOnly,
    Both,
}

/// Runtime switches for the ablation studies.
///
/// `bypass_gcn` skips graph enhancement entirely (raw features are matched).
/// `mlp_mode` keeps only self-connections, so every node becomes `X W + X`.
/// Turning every edge type off is the same as `mlp_mode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeToggles {
    pub bypass_gcn: bool,
    pub mlp_mode: bool,
    pub class_class: bool,
    pub class_proposal: ClassProposalEdges,
    pub proposal_proposal: ProposalEdges,
    /// Number of base classes kept in the Inter-Class graph, first in table
    /// order. `None` keeps all of them.
    pub base_memory_size: Option<usize>,
}

impl Default for EdgeToggles {
    fn default() -> Self {
        Self::full()
    }
}

impl EdgeToggles {
    pub fn full() -> Self {
        EdgeToggles {
            bypass_gcn: false,
            mlp_mode: false,
            class_class: true,
            class_proposal: ClassProposalEdges::Bidirectional,
            proposal_proposal: ProposalEdges::Both,
            base_memory_size: None,
        }
    }

    /// No graph enhancement at all.
    pub fn none() -> Self {
        EdgeToggles {
            bypass_gcn: true,
            ..Self::mlp()
        }
    }

    pub fn mlp() -> Self {
        EdgeToggles {
            mlp_mode: true,
            class_class: false,
            class_proposal: ClassProposalEdges::Off,
            proposal_proposal: ProposalEdges::Off,
            ..Self::full()
        }
    }

    fn edges_only(cc: bool, cp: ClassProposalEdges, pp: ProposalEdges) -> Self {
        EdgeToggles {
            class_class: cc,
            class_proposal: cp,
            proposal_proposal: pp,
            ..Self::full()
        }
    }

    pub fn only_class_class() -> Self {
        Self::edges_only(true, ClassProposalEdges::Off, ProposalEdges::Off)
    }

    pub fn only_class_proposal() -> Self {
        Self::edges_only(false, ClassProposalEdges::Bidirectional, ProposalEdges::Off)
    }

    pub fn only_proposal_proposal() -> Self {
        Self::edges_only(false, ClassProposalEdges::Off, ProposalEdges::Both)
    }

    /// Class-proposal and proposal-proposal edges, no Inter-Class graph.
    pub fn intra_only() -> Self {
        Self::edges_only(
            false,
            ClassProposalEdges::Bidirectional,
            ProposalEdges::Both,
        )
    }

    /// Canonical form: bypass and MLP force every edge off, and all edges
    /// off means MLP.
    pub fn normalized(mut self) -> Self {
        if self.bypass_gcn {
            self.mlp_mode = true;
        }
        if self.mlp_mode {
            self.class_class = false;
            self.class_proposal = ClassProposalEdges::Off;
            self.proposal_proposal = ProposalEdges::Off;
        }
        if !self.class_class
            && self.class_proposal == ClassProposalEdges::Off
            && self.proposal_proposal == ProposalEdges::Off
        {
            self.mlp_mode = true;
        }
        self
    }

    pub fn inter_enabled(&self) -> bool {
        let t = self.normalized();
        t.class_class
    }

    pub fn class_to_proposal_enabled(&self) -> bool {
        matches!(
            self.normalized().class_proposal,
            ClassProposalEdges::ClassToProposal | ClassProposalEdges::Bidirectional
        )
    }

    pub fn proposal_to_class_enabled(&self) -> bool {
        matches!(
            self.normalized().class_proposal,
            ClassProposalEdges::ProposalToClass | ClassProposalEdges::Bidirectional
        )
    }

    pub fn proposal_proposal_enabled(&self) -> bool {
        self.normalized().proposal_proposal != ProposalEdges::Off
    }

    pub fn neighbor_context(&self) -> NeighborContext {
        match self.proposal_proposal {
            ProposalEdges::LocalOnly => NeighborContext::LocalOnly,
            ProposalEdges::GlobalOnly => NeighborContext::GlobalOnly,
            _ => NeighborContext::Both,
        }
    }

    /// Short label used in reports, e.g. `cc+cp+pp`, `cp:p2c`, `mlp`, `none`.
    pub fn label(&self) -> String {
        let t = self.normalized();
        let mut s = if t.bypass_gcn {
            "none".to_string()
        } else if t.mlp_mode {
            "mlp".to_string()
        } else {
            let mut parts = Vec::new();
            if t.class_class {
                parts.push("cc");
            }
            parts.push(match t.class_proposal {
                ClassProposalEdges::Off => "",
                ClassProposalEdges::ClassToProposal => "cp:c2p",
                ClassProposalEdges::ProposalToClass => "cp:p2c",
                ClassProposalEdges::Bidirectional => "cp",
            });
            parts.push(match t.proposal_proposal {
                ProposalEdges::Off => "",
                ProposalEdges::LocalOnly => "pp:local",
                ProposalEdges::GlobalOnly => "pp:global",
                ProposalEdges::Both => "pp",
            });
            parts.retain(|p| !p.is_empty());
            parts.join("+")
        };
        if let (Some(k), true) = (t.base_memory_size, t.class_class) {
            s.push_str(&format!("+mem={k}"));
        }
        s
    }

    /// Inverse of [`EdgeToggles::label`].
    pub fn parse_label(label: &str) -> Result<Self> {
        match label {
            "none" => return Ok(Self::none()),
            "mlp" => return Ok(Self::mlp()),
            _ => {}
        }
        let mut t = Self::edges_only(false, ClassProposalEdges::Off, ProposalEdges::Off);
        for part in label.split('+') {
            match part {
                "cc" => t.class_class = true,
                "cp" => t.class_proposal = ClassProposalEdges::Bidirectional,
                "cp:c2p" => t.class_proposal = ClassProposalEdges::ClassToProposal,
                "cp:p2c" => t.class_proposal = ClassProposalEdges::ProposalToClass,
                "pp" => t.proposal_proposal = ProposalEdges::Both,
                "pp:local" => t.proposal_proposal = ProposalEdges::LocalOnly,
                "pp:global" => t.proposal_proposal = ProposalEdges::GlobalOnly,
                other => {
                    let k = other
                        .strip_prefix("mem=")
                        .and_then(|k| k.parse().ok())
                        .ok_or_else(|| {
                            Error::arg(format!("unknown toggle label part {other:?}"))
                        })?;
                    t.base_memory_size = Some(k);
                }
            }
        }
        Ok(t.normalized())
    }

    /// Rows (a) through (g) of the component ablation.
    pub fn component_grid() -> Vec<(&'static str, EdgeToggles)> {
        vec![
            ("a", Self::none()),
            ("b", Self::mlp()),
            ("c", Self::only_class_class()),
            ("d", Self::only_class_proposal()),
            ("e", Self::only_proposal_proposal()),
            ("f", Self::intra_only()),
            ("g", Self::full()),
        ]
    }
}

/// Affine-on-cosine matcher with a linear box regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchHead {
    pub scale: f64,
    pub bias: f64,
    /// `D x 4`, maps a flattened enhanced proposal to `(dx, dy, dw, dh)`.
    pub regressor: Array2<f64>,
}

impl MatchHead {
    pub const INIT_SCALE: f64 = 5.0;
    pub const INIT_BIAS: f64 = -2.5;

    /// Scale 5, bias -2.5 and a zero regressor (proposal boxes pass through).
    pub fn init(dim: usize) -> Self {
        MatchHead {
            scale: Self::INIT_SCALE,
            bias: Self::INIT_BIAS,
            regressor: Array2::zeros((dim, 4)),
        }
    }

    pub fn dim(&self) -> usize {
        self.regressor.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.regressor.ncols() != 4 {
            return Err(Error::shape(format!(
                "regressor must have 4 columns, got {}",
                self.regressor.ncols()
            )));
        }
        if !self.scale.is_finite()
            || !self.bias.is_finite()
            || !self.regressor.iter().all(|v| v.is_finite())
        {
            return Err(Error::arg("match head has non-finite parameters"));
        }
        Ok(())
    }

    pub(crate) fn regress(&self, feature: ArrayView1<f64>) -> BoxDelta {
        let d = feature.dot(&self.regressor);
        BoxDelta::from_array([d[0], d[1], d[2], d[3]])
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn match_score(
    proposal_feature: &FeatureGrid,
    class_feature: &FeatureGrid,
    head: &MatchHead,
) -> Result<f64> {
    Ok(sigmoid(
        head.scale * cosine(proposal_feature, class_feature)? + head.bias,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub theta: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            theta: DEFAULT_THETA,
            nms_iou: DEFAULT_NMS_IOU,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
        }
    }
}

/// Graph structure of one novel class, fixed with respect to every
/// trainable parameter.
#[derive(Debug, Clone)]
pub(crate) struct PreparedClass {
    pub class: ClassId,
    pub boxes: Vec<BBox>,
    /// `N` raw proposal rows followed by the (inter-enhanced) class row.
    pub x0: Array2<f64>,
    pub global: Array1<f64>,
    pub plan: Option<MessagePlan>,
}

#[derive(Debug, Clone)]
pub(crate) struct PreparedEpisode {
    pub image_width: f64,
    pub image_height: f64,
    pub classes: Vec<PreparedClass>,
}

pub(crate) fn check_compat(ep: &Episode, params: &GcnParams, head: &MatchHead) -> Result<()> {
    ep.validate()?;
    params.validate()?;
    head.validate()?;
    params.ensure_dim(ep.shape)?;
    if head.dim() != ep.shape.dim() {
        return Err(Error::shape(format!(
            "regressor expects {} inputs, episode features flatten to {}",
            head.dim(),
            ep.shape.dim()
        )));
    }
    Ok(())
}

/// Prototypes entering the Inter-Class graph: the first `k` base classes and
/// every novel class, in table order.
pub(crate) fn inter_members(ep: &Episode, toggles: &EdgeToggles) -> Vec<ClassPrototype> {
    let keep_base = toggles.base_memory_size.unwrap_or(usize::MAX);
    let mut base_seen = 0;
    ep.class_table
        .iter()
        .filter(|p| match p.class.kind {
            ClassKind::Novel => true,
            ClassKind::Base => {
                base_seen += 1;
                base_seen <= keep_base
            }
        })
        .cloned()
        .collect()
}

pub(crate) fn prepare_episode(
    ep: &Episode,
    params: &GcnParams,
    toggles: &EdgeToggles,
    theta: f64,
) -> Result<PreparedEpisode> {
    let dim = ep.shape.dim();
    let t = toggles.normalized();
    let enhanced: Vec<ClassPrototype> = if t.inter_enabled() {
        let members = inter_members(ep, &t);
        inter_class_pass(&build_inter_class_graph(&members)?, params.layers_inter)?
    } else {
        ep.class_table.clone()
    };
    let global = Array1::from(ep.global_feature.as_slice().to_vec());
    let mut classes = Vec::with_capacity(ep.proposals.len());
    for (class, props) in &ep.proposals {
        if props.is_empty() {
            continue;
        }
        let proto = enhanced
            .iter()
            .find(|p| p.class == *class)
            .ok_or(Error::UnknownClass(class.id))?;
        let mut x0 = stack_grids(props.iter().map(|p| &p.feature), dim);
        x0.push_row(ArrayView1::from(proto.feature.as_slice()))
            .map_err(|e| Error::shape(e.to_string()))?;
        let plan = if t.bypass_gcn {
            None
        } else {
            let graph = build_intra_class_graph_with(
                proto,
                props,
                &ep.global_feature,
                theta,
                t.neighbor_context(),
            )?;
            Some(MessagePlan::new(&graph, &t))
        };
        classes.push(PreparedClass {
            class: *class,
            boxes: props.iter().map(|p| p.bbox).collect(),
            x0,
            global: global.clone(),
            plan,
        });
    }
    Ok(PreparedEpisode {
        image_width: ep.image_width,
        image_height: ep.image_height,
        classes,
    })
}

impl PreparedClass {
    /// Enhanced node matrix and the number of `W` applications.
    pub(crate) fn enhance(&self, params: &GcnParams) -> (Array2<f64>, usize) {
        match &self.plan {
            None => (self.x0.clone(), 0),
            Some(plan) => {
                let trace = intra_forward(
                    plan,
                    self.x0.clone(),
                    self.global.view(),
                    &params.weight,
                    params.layers_intra,
                );
                (trace.output, trace.messages.len())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalScore {
    pub index: usize,
    pub proposal: BBox,
    pub score: f64,
    pub delta: BoxDelta,
    /// Regressed box clipped to the image; `None` if it left the image.
    pub regressed: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub class: ClassId,
    pub proposals: Vec<ProposalScore>,
}

fn score_prepared(
    prep: &PreparedEpisode,
    params: &GcnParams,
    head: &MatchHead,
) -> Result<Vec<ClassScores>> {
    let mut out = Vec::with_capacity(prep.classes.len());
    for pc in &prep.classes {
        let (x, _) = pc.enhance(params);
        let n = pc.boxes.len();
        let class_row = x.row(n);
        let class_slice = class_row.as_slice().expect("row-major node matrix");
        let mut proposals = Vec::with_capacity(n);
        for (i, bbox) in pc.boxes.iter().enumerate() {
            let row = x.row(i);
            let cos = cosine_slices(row.as_slice().expect("row-major node matrix"), class_slice);
            let delta = head.regress(row);
            proposals.push(ProposalScore {
                index: i,
                proposal: *bbox,
                score: sigmoid(head.scale * cos + head.bias),
                delta,
                regressed: apply_delta_clipped(bbox, &delta, prep.image_width, prep.image_height)?,
            });
        }
        out.push(ClassScores {
            class: pc.class,
            proposals,
        });
    }
    Ok(out)
}

/// Scores every proposal of every novel class, without thresholding or NMS.
pub fn score_episode(
    ep: &Episode,
    params: &GcnParams,
    head: &MatchHead,
    toggles: &EdgeToggles,
    theta: f64,
) -> Result<Vec<ClassScores>> {
    check_compat(ep, params, head)?;
    let prep = prepare_episode(ep, params, toggles, theta)?;
    score_prepared(&prep, params, head)
}

pub fn detect_episode(
    ep: &Episode,
    params: &GcnParams,
    head: &MatchHead,
    toggles: &EdgeToggles,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let cfg = DetectorConfig {
        score_threshold,
        ..DetectorConfig::default()
    };
    detect_episode_with(ep, params, head, toggles, &cfg)
}

pub fn detect_episode_with(
    ep: &Episode,
    params: &GcnParams,
    head: &MatchHead,
    toggles: &EdgeToggles,
    cfg: &DetectorConfig,
) -> Result<Vec<Detection>> {
    let scores = score_episode(ep, params, head, toggles, cfg.theta)?;
    Ok(detections_from_scores(&scores, cfg))
}

pub fn detections_from_scores(scores: &[ClassScores], cfg: &DetectorConfig) -> Vec<Detection> {
    let mut dets = Vec::new();
    for cs in scores {
        let candidates: Vec<Detection> = cs
            .proposals
            .iter()
            .filter(|p| p.score >= cfg.score_threshold)
            .filter_map(|p| {
                p.regressed.map(|bbox| Detection {
                    class: cs.class,
                    bbox,
                    score: p.score,
                })
            })
            .collect();
        dets.extend(nms(&candidates, cfg.nms_iou, true));
    }
    dets
}

/// Enhanced features of one episode together with the toggles that made them.
#[derive(Debug, Clone)]
pub struct EnhancedEpisode {
    pub prototypes: BTreeMap<ClassId, FeatureGrid>,
    pub proposals: BTreeMap<ClassId, Vec<FeatureGrid>>,
    pub audits: BTreeMap<ClassId, TransformAudit>,
    pub toggles: EdgeToggles,
}

pub fn enhance_episode(
    ep: &Episode,
    params: &GcnParams,
    toggles: &EdgeToggles,
    theta: f64,
) -> Result<EnhancedEpisode> {
    ep.validate()?;
    params.ensure_dim(ep.shape)?;
    let prep = prepare_episode(ep, params, toggles, theta)?;
    let mut prototypes = BTreeMap::new();
    let mut proposals = BTreeMap::new();
    let mut audits = BTreeMap::new();
    for pc in &prep.classes {
        let (x, applied) = pc.enhance(params);
        let n = pc.boxes.len();
        let rows = (0..n)
            .map(|i| row_to_grid(x.row(i), ep.shape))
            .collect::<Result<Vec<_>>>()?;
        proposals.insert(pc.class, rows);
        prototypes.insert(pc.class, row_to_grid(x.row(n), ep.shape)?);
        audits.insert(
            pc.class,
            TransformAudit {
                proposal_path: applied,
                class_path: applied,
                inter_pass: 0,
            },
        );
    }
    Ok(EnhancedEpisode {
        prototypes,
        proposals,
        audits,
        toggles: *toggles,
    })
}

/// Symmetric matrix of raw pairwise prototype cosines.
pub fn cosine_matrix(classes: &[ClassPrototype]) -> Array2<f64> {
    let n = classes.len();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let c = cosine_slices(classes[i].feature.as_slice(), classes[j].feature.as_slice());
            m[[i, j]] = c;
            m[[j, i]] = c;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::FeatureShape;

    fn flat(v: &[f64]) -> FeatureGrid {
        FeatureGrid::new(FeatureShape::new(1, 1, v.len()).unwrap(), v.to_vec()).unwrap()
    }

    #[test]
    fn match_score_cases() {
        let mut head = MatchHead::init(2);
        head.scale = 0.0;
        head.bias = 0.3;
        let a = flat(&[1.0, 2.0]);
        let b = flat(&[-4.0, 0.5]);
        assert_eq!(match_score(&a, &b, &head).unwrap(), sigmoid(0.3));
        head.scale = 1.0;
        head.bias = 0.0;
        assert!((match_score(&a, &a, &head).unwrap() - 0.7310586).abs() < 1e-7);
        let o = flat(&[-2.0, 1.0]);
        assert_eq!(match_score(&a, &o, &head).unwrap(), 0.5);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }

    #[test]
    fn cosine_matrix_cases() {
        let c = |id, v: &[f64]| ClassPrototype {
            class: ClassId::base(id),
            feature: flat(v),
            support_count: 1,
        };
        let one = cosine_matrix(&[c(0, &[3.0, 4.0])]);
        assert!((one[[0, 0]] - 1.0).abs() < 1e-15);
        let m = cosine_matrix(&[c(0, &[1.0, 0.0]), c(1, &[0.0, 1.0]), c(2, &[1.0, 1.0])]);
        assert_eq!(m, m.t());
        assert!((m[[0, 2]] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(m[[0, 1]], 0.0);
    }

    #[test]
    fn toggle_labels_roundtrip() {
        let mut all = EdgeToggles::component_grid()
            .into_iter()
            .map(|(_, t)| t)
            .collect::<Vec<_>>();
        all.push(EdgeToggles {
            class_proposal: ClassProposalEdges::ProposalToClass,
            ..EdgeToggles::full()
        });
        all.push(EdgeToggles {
            proposal_proposal: ProposalEdges::LocalOnly,
            ..EdgeToggles::full()
        });
        all.push(EdgeToggles {
            base_memory_size: Some(3),
            ..EdgeToggles::full()
        });
        for t in all {
            let back = EdgeToggles::parse_label(&t.label()).unwrap();
            assert_eq!(back, t.normalized(), "{}", t.label());
        }
        assert_eq!(EdgeToggles::full().label(), "cc+cp+pp");
        assert!(EdgeToggles::parse_label("xx").is_err());
    }

    #[test]
    fn mlp_forces_edges_off() {
        let t = EdgeToggles {
            mlp_mode: true,
            ..EdgeToggles::full()
        }
        .normalized();
        assert!(!t.class_class);
        assert_eq!(t.class_proposal, ClassProposalEdges::Off);
        assert_eq!(t.proposal_proposal, ProposalEdges::Off);
        assert!(!EdgeToggles::only_class_class().normalized().mlp_mode);
    }
}
