//! Straight-line reference for enhancement and scoring. Plain vectors, no
//! library math beyond `iou`.

use std::collections::BTreeMap;

use hgfsod::{iou, ClassId, ClassKind, Episode};

/// Which message terms the reference includes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Terms {
    /// false: raw features go straight to the matcher.
    pub graph: bool,
    pub class_class: bool,
    pub class_to_proposal: bool,
    pub proposal_to_class: bool,
    pub local: bool,
    pub global: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        graph: true,
        class_class: true,
        class_to_proposal: true,
        proposal_to_class: true,
        local: true,
        global: true,
    };
    pub const SELF_ONLY: Terms = Terms {
        graph: true,
        class_class: false,
        class_to_proposal: false,
        proposal_to_class: false,
        local: false,
        global: false,
    };
    pub const RAW: Terms = Terms {
        graph: false,
        ..Terms::SELF_ONLY
    };
}

pub struct Model<'a> {
    /// Row-major `D x D`.
    pub w: &'a [Vec<f64>],
    pub scale: f64,
    pub bias: f64,
    pub layers_inter: usize,
    pub layers_intra: usize,
    pub theta: f64,
    pub base_memory: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Output {
    pub prototypes: BTreeMap<ClassId, Vec<f64>>,
    pub proposals: BTreeMap<ClassId, Vec<Vec<f64>>>,
    pub scores: BTreeMap<ClassId, Vec<f64>>,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub fn softmax(s: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn times_w(m: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let d = m.len();
    let mut out = vec![0.0; d];
    for j in 0..d {
        for k in 0..d {
            out[j] += m[k] * w[k][j];
        }
    }
    out
}

fn add_scaled(acc: &mut [f64], s: f64, v: &[f64]) {
    for i in 0..acc.len() {
        acc[i] += s * v[i];
    }
}

pub fn run(ep: &Episode, m: &Model, t: Terms) -> Output {
    // Class-class edges.
    let mut seen_base = 0;
    let members: Vec<(ClassId, Vec<f64>)> = ep
        .class_table
        .iter()
        .filter(|p| match p.class.kind {
            ClassKind::Novel => true,
            ClassKind::Base => {
                seen_base += 1;
                seen_base <= m.base_memory.unwrap_or(usize::MAX)
            }
        })
        .map(|p| (p.class, p.feature.as_slice().to_vec()))
        .collect();
    let mut protos: BTreeMap<ClassId, Vec<f64>> = ep
        .class_table
        .iter()
        .map(|p| (p.class, p.feature.as_slice().to_vec()))
        .collect();
    if t.graph && t.class_class {
        let n = members.len();
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                softmax(
                    &(0..n)
                        .map(|k| cos(&members[i].1, &members[k].1))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let mut f: Vec<Vec<f64>> = members.iter().map(|m| m.1.clone()).collect();
        for _ in 0..m.layers_inter {
            let mut next = f.clone();
            for j in 0..n {
                for i in 0..n {
                    add_scaled(&mut next[j], a[i][j], &f[i]);
                }
            }
            f = next;
        }
        for (k, (id, _)) in members.iter().enumerate() {
            protos.insert(*id, f[k].clone());
        }
    }

    let g = ep.global_feature.as_slice();
    let mut out = Output::default();
    for (class, props) in &ep.proposals {
        if props.is_empty() {
            continue;
        }
        let n = props.len();
        let mut c = protos[class].clone();
        let mut x: Vec<Vec<f64>> = props
            .iter()
            .map(|p| p.feature.as_slice().to_vec())
            .collect();
        if t.graph {
            // Edge weights from the layer-0 features.
            let alpha: Vec<f64> = x.iter().map(|xi| cos(&c, xi)).collect();
            let beta = softmax(&alpha);
            let mut nbrs: Vec<Vec<Option<usize>>> = Vec::new();
            let mut nw: Vec<Vec<f64>> = Vec::new();
            for i in 0..n {
                let mut from = Vec::new();
                if t.local {
                    for j in 0..n {
                        if j != i && iou(&props[i].bbox, &props[j].bbox) > m.theta {
                            from.push(Some(j));
                        }
                    }
                }
                if t.global {
                    from.push(None);
                }
                let s: Vec<f64> = from
                    .iter()
                    .map(|f| match f {
                        Some(j) => cos(&x[i], &x[*j]),
                        None => cos(&x[i], g),
                    })
                    .collect();
                nw.push(softmax(&s));
                nbrs.push(from);
            }
            for _ in 0..m.layers_intra {
                let mut next = Vec::with_capacity(n);
                for i in 0..n {
                    let mut msg = x[i].clone();
                    if t.class_to_proposal {
                        add_scaled(&mut msg, alpha[i], &c);
                    }
                    for (f, w) in nbrs[i].iter().zip(&nw[i]) {
                        match f {
                            Some(j) => add_scaled(&mut msg, *w, &x[*j]),
                            None => add_scaled(&mut msg, *w, g),
                        }
                    }
                    let mut xi = times_w(&msg, m.w);
                    add_scaled(&mut xi, 1.0, &x[i]);
                    next.push(xi);
                }
                let mut msg = c.clone();
                if t.proposal_to_class {
                    for k in 0..n {
                        add_scaled(&mut msg, beta[k], &x[k]);
                    }
                }
                let mut cn = times_w(&msg, m.w);
                add_scaled(&mut cn, 1.0, &c);
                x = next;
                c = cn;
            }
        }
        let scores = x
            .iter()
            .map(|xi| 1.0 / (1.0 + (-(m.scale * cos(xi, &c) + m.bias)).exp()))
            .collect();
        out.scores.insert(*class, scores);
        out.proposals.insert(*class, x);
        out.prototypes.insert(*class, c);
    }
    out
}
