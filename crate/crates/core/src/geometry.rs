//! Box arithmetic: IoU, greedy NMS and the R-CNN box-delta parameterization.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BBox, Detection};

/// Bound on the log size ratios before exponentiation.
pub const DELTA_LOG_CLAMP: f64 = 10.0;

/// Intersection over union. Boxes that only touch along an edge have IoU 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score (ties broken by smaller `x`,
/// then smaller `y`); a candidate is dropped when it overlaps an already kept
/// detection by more than `iou_threshold`. With `per_class` set, only
/// detections of the same class suppress each other.
pub fn nms(dets: &[Detection], iou_threshold: f64, per_class: bool) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(score_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(order.len());
    for cand in order {
        let suppressed = kept.iter().any(|k| {
            (!per_class || k.class == cand.class) && iou(&k.bbox, &cand.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(cand);
        }
    }
    kept
}

/// Regression target relative to a proposal: center offsets normalized by
/// the proposal size and log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BoxDelta {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

pub fn encode_delta(proposal: &BBox, target: &BBox) -> Result<BoxDelta> {
    proposal.validate()?;
    target.validate()?;
    let (pcx, pcy) = proposal.center();
    let (tcx, tcy) = target.center();
    Ok(BoxDelta {
        dx: (tcx - pcx) / proposal.w,
        dy: (tcy - pcy) / proposal.h,
        dw: (target.w / proposal.w)
            .ln()
            .clamp(-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP),
        dh: (target.h / proposal.h)
            .ln()
            .clamp(-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP),
    })
}

pub fn apply_delta(proposal: &BBox, delta: &BoxDelta) -> Result<BBox> {
    proposal.validate()?;
    if !delta.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::arg(format!("non-finite box delta {delta:?}")));
    }
    let (pcx, pcy) = proposal.center();
    let cx = pcx + delta.dx * proposal.w;
    let cy = pcy + delta.dy * proposal.h;
    let w = proposal.w * delta.dw.clamp(-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP).exp();
    let h = proposal.h * delta.dh.clamp(-DELTA_LOG_CLAMP, DELTA_LOG_CLAMP).exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
}

/// [`apply_delta`] followed by clipping to `[0, width] x [0, height]`.
/// `None` when the decoded box falls entirely outside the image.
pub fn apply_delta_clipped(
    proposal: &BBox,
    delta: &BoxDelta,
    width: f64,
    height: f64,
) -> Result<Option<BBox>> {
    Ok(apply_delta(proposal, delta)?.clip(width, height))
}
