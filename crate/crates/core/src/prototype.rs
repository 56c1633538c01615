//! Class prototypes from support features, plus the Attention-RPN style
//! pooling and channel-wise query modulation.
//!
//! `modulate_query` is library math only; proposal generation itself is not
//! part of this crate, so nothing in the detection pipeline calls it.

use crate::error::{Error, Result};
use crate::types::FeatureGrid;

/// Elementwise mean of the support grids.
pub fn average_supports(supports: &[FeatureGrid]) -> Result<FeatureGrid> {
    let first = supports.first().ok_or(Error::Empty("support list"))?;
    let shape = first.shape();
    let mut acc = vec![0.0; shape.dim()];
    for (k, s) in supports.iter().enumerate() {
        s.ensure_shape(shape, &format!("support {k}"))?;
        for (a, v) in acc.iter_mut().zip(s.as_slice()) {
            *a += v;
        }
    }
    let n = supports.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    FeatureGrid::new(shape, acc)
}

/// Per-channel mean over all `H * W` cells.
pub fn spatial_avg_pool(feature: &FeatureGrid) -> Vec<f64> {
    let shape = feature.shape();
    let mut pooled = vec![0.0; shape.channels];
    for cell in feature.as_slice().chunks_exact(shape.channels) {
        for (p, v) in pooled.iter_mut().zip(cell) {
            *p += v;
        }
    }
    let cells = shape.cells() as f64;
    pooled.iter_mut().for_each(|p| *p /= cells);
    pooled
}

/// Channel-wise Hadamard product of every query cell with the pooled class
/// vector.
pub fn modulate_query(query: &FeatureGrid, class_pool: &[f64]) -> Result<FeatureGrid> {
    let shape = query.shape();
    if class_pool.len() != shape.channels {
        return Err(Error::shape(format!(
            "pooled class vector has {} channels, query has {}",
            class_pool.len(),
            shape.channels
        )));
    }
    let data = query
        .as_slice()
        .chunks_exact(shape.channels)
        .flat_map(|cell| cell.iter().zip(class_pool).map(|(q, p)| q * p))
        .collect();
    FeatureGrid::new(shape, data)
}
