//! Counts applications of `W` from the outside. With `W` replaced by `t W`
//! every node output is a polynomial in `t` whose degree is the number of
//! times `W` was applied on that node's path; finite differences recover it.

use hgfsod::graph::DEFAULT_THETA;
use hgfsod::pipeline::enhance_episode;
use hgfsod::{EdgeToggles, Episode, GcnParams};

/// `k`-th forward difference at 0 of samples `f(0), f(1), ...`.
fn forward_difference(samples: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut d: Vec<Vec<f64>> = samples.to_vec();
    for _ in 0..k {
        d = d
            .windows(2)
            .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect())
            .collect();
    }
    d[0].clone()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Degree of the polynomial behind `samples` (taken at t = 0, 1, ...),
/// assuming it is below `samples.len()`.
fn degree(samples: &[Vec<f64>]) -> usize {
    let scale = samples.iter().map(|s| norm(s)).fold(1.0, f64::max);
    (0..samples.len())
        .rev()
        .find(|&k| norm(&forward_difference(samples, k)) > 1e-7 * scale)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Degrees {
    pub proposal_path: usize,
    pub class_path: usize,
}

/// Largest degree in `t` over every proposal row and every class row.
pub fn w_degrees(ep: &Episode, params: &GcnParams, toggles: &EdgeToggles) -> Degrees {
    // Two samples beyond the largest degree we want to recognise.
    let points = 2 * params.layers_intra + 3;
    let runs: Vec<_> = (0..points)
        .map(|t| {
            let mut p = params.clone();
            p.weight.mapv_inplace(|w| w * t as f64);
            enhance_episode(ep, &p, toggles, DEFAULT_THETA).unwrap()
        })
        .collect();
    let mut out = Degrees {
        proposal_path: 0,
        class_path: 0,
    };
    for class in runs[0].prototypes.keys() {
        let rows = runs[0].proposals[class].len();
        for i in 0..rows {
            let s: Vec<Vec<f64>> = runs
                .iter()
                .map(|r| r.proposals[class][i].as_slice().to_vec())
                .collect();
            out.proposal_path = out.proposal_path.max(degree(&s));
        }
        let s: Vec<Vec<f64>> = runs
            .iter()
            .map(|r| r.prototypes[class].as_slice().to_vec())
            .collect();
        out.class_path = out.class_path.max(degree(&s));
    }
    out
}

/// Applications of `W` in the Inter-Class pass alone: the degree in `t`
/// of the prototypes with the intra stack removed.
pub fn inter_pass_degree(ep: &Episode, params: &GcnParams, toggles: &EdgeToggles) -> usize {
    let mut p = params.clone();
    p.layers_intra = 0;
    w_degrees(ep, &p, toggles).class_path
}
