//! Shared domain types: boxes, feature grids, class identifiers and episodes.
//!
//! Everything here is an immutable value once constructed. Constructors
//! validate their invariants, so a `FeatureGrid` or `Episode` that exists is
//! known to be well formed.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixels, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidBox(format!("non-finite field in {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "width and height must be positive, got {}x{}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// Clips to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = self.right().clamp(0.0, width);
        let y1 = self.bottom().clamp(0.0, height);
        BBox::from_corners(x0, y0, x1, y1).ok()
    }

    pub fn is_within(&self, width: f64, height: f64) -> bool {
        const SLACK: f64 = 1e-9;
        self.x >= -SLACK
            && self.y >= -SLACK
            && self.right() <= width + SLACK
            && self.bottom() <= height + SLACK
    }
}

/// The `(H, W, C)` shape shared by every feature grid of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureShape {
    /// 2x2 cells with 32 channels, the default used by the synthetic generator.
    pub const DESK: FeatureShape = FeatureShape {
        height: 2,
        width: 2,
        channels: 32,
    };

    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "feature shape must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(FeatureShape {
            height,
            width,
            channels,
        })
    }

    /// Length of the flattened grid, `H * W * C`.
    pub fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Spatial feature tensor stored row-major in `(h, w, c)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    shape: FeatureShape,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(shape: FeatureShape, data: Vec<f64>) -> Result<Self> {
        let shape = FeatureShape::new(shape.height, shape.width, shape.channels)?;
        if data.len() != shape.dim() {
            return Err(Error::shape(format!(
                "grid {shape} needs {} values, got {}",
                shape.dim(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!(
                "non-finite feature value at flat index {i}"
            )));
        }
        Ok(FeatureGrid { shape, data })
    }

    pub fn zeros(shape: FeatureShape) -> Self {
        FeatureGrid {
            shape,
            data: vec![0.0; shape.dim()],
        }
    }

    /// Inverse of [`FeatureGrid::flatten`].
    pub fn unflatten(shape: FeatureShape, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, data)
    }

    pub fn shape(&self) -> FeatureShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Row-major copy of the grid values.
    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        assert!(h < self.shape.height && w < self.shape.width && c < self.shape.channels);
        self.data[(h * self.shape.width + w) * self.shape.channels + c]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn ensure_shape(&self, expected: FeatureShape, what: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(format!(
                "{what} has shape {}, expected {expected}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Whether a class plays the base or the novel role within an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Base,
    Novel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId {
    pub id: u32,
    pub kind: ClassKind,
}

impl ClassId {
    pub fn base(id: u32) -> Self {
        ClassId {
            id,
            kind: ClassKind::Base,
        }
    }

    pub fn novel(id: u32) -> Self {
        ClassId {
            id,
            kind: ClassKind::Novel,
        }
    }
}

/// A class-specific proposal: its box, its RoI feature and the novel class
/// it was generated for.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalNode {
    pub bbox: BBox,
    pub feature: FeatureGrid,
    pub class_of: ClassId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub class: ClassId,
    pub feature: FeatureGrid,
    pub support_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: ClassId,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class: ClassId,
    pub bbox: BBox,
}

/// One query scene together with the class table it is evaluated against.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub image_width: f64,
    pub image_height: f64,
    pub shape: FeatureShape,
    pub class_table: Vec<ClassPrototype>,
    /// Class-specific proposal sets, keyed by the novel class they target.
    pub proposals: BTreeMap<ClassId, Vec<ProposalNode>>,
    pub global_feature: FeatureGrid,
    pub ground_truth: Vec<GroundTruth>,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        if !(self.image_width > 0.0 && self.image_height > 0.0)
            || !self.image_width.is_finite()
            || !self.image_height.is_finite()
        {
            return Err(Error::arg(format!(
                "image size must be positive, got {}x{}",
                self.image_width, self.image_height
            )));
        }
        let shape = self.shape;
        let mut seen = BTreeSet::new();
        for proto in &self.class_table {
            if !seen.insert(proto.class.id) {
                return Err(Error::arg(format!("duplicate class id {}", proto.class.id)));
            }
            if proto.support_count == 0 {
                return Err(Error::arg(format!(
                    "class {} has zero supports",
                    proto.class.id
                )));
            }
            proto
                .feature
                .ensure_shape(shape, &format!("prototype of class {}", proto.class.id))?;
        }
        self.global_feature.ensure_shape(shape, "global feature")?;
        for (class, props) in &self.proposals {
            if class.kind != ClassKind::Novel {
                return Err(Error::arg(format!(
                    "proposals keyed by class {} which is not novel",
                    class.id
                )));
            }
            if self.prototype(*class).is_none() {
                return Err(Error::UnknownClass(class.id));
            }
            for (i, p) in props.iter().enumerate() {
                if p.class_of != *class {
                    return Err(Error::arg(format!(
                        "proposal {i} under class {} is tagged with class {}",
                        class.id, p.class_of.id
                    )));
                }
                p.bbox.validate()?;
                if !p.bbox.is_within(self.image_width, self.image_height) {
                    return Err(Error::InvalidBox(format!(
                        "proposal {i} of class {} lies outside the image",
                        class.id
                    )));
                }
                p.feature
                    .ensure_shape(shape, &format!("proposal {i} of class {}", class.id))?;
            }
        }
        for gt in &self.ground_truth {
            gt.bbox.validate()?;
            if !seen.contains(&gt.class.id) {
                return Err(Error::UnknownClass(gt.class.id));
            }
        }
        Ok(())
    }

    pub fn prototype(&self, class: ClassId) -> Option<&ClassPrototype> {
        self.class_table.iter().find(|p| p.class == class)
    }

    pub fn novel_classes(&self) -> impl Iterator<Item = &ClassPrototype> {
        self.class_table
            .iter()
            .filter(|p| p.class.kind == ClassKind::Novel)
    }

    pub fn base_classes(&self) -> impl Iterator<Item = &ClassPrototype> {
        self.class_table
            .iter()
            .filter(|p| p.class.kind == ClassKind::Base)
    }

    /// Smallest support count among novel classes (the episode's shot count).
    pub fn shots(&self) -> usize {
        self.novel_classes()
            .map(|p| p.support_count)
            .min()
            .unwrap_or(0)
    }

    pub fn whole_image(&self) -> BBox {
        BBox {
            x: 0.0,
            y: 0.0,
            w: self.image_width,
            h: self.image_height,
        }
    }
}
