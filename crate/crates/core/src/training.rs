//! Episodic training of the shared Intra-Class weight and the match head.
//!
//! The loss of one episode is the mean binary cross-entropy over its labeled
//! proposals plus `regression_weight` times the mean smooth-L1 box loss over
//! its positives. Gradients are analytic. Edge weights are built from input
//! features only, so they are constants of the trainable parameters; the
//! cosine inside the matcher is differentiated.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::{intra_forward, GcnParams};
use crate::geometry::{encode_delta, iou, BoxDelta};
use crate::graph::DEFAULT_THETA;
use crate::pipeline::{
    check_compat, prepare_episode, EdgeToggles, MatchHead, PreparedClass, PreparedEpisode,
};
use crate::rng::SplitMix64;
use crate::types::{ClassId, Episode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_episodes: usize,
    pub iterations: usize,
    /// Iteration at which the learning rate is divided by 10.
    pub lr_decay_at: Option<usize>,
    pub positive_iou: f64,
    pub regression_weight: f64,
    pub theta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.002,
            momentum: 0.9,
            weight_decay: 0.0001,
            batch_episodes: 4,
            iterations: 2000,
            lr_decay_at: None,
            positive_iou: 0.5,
            regression_weight: 1.0,
            theta: DEFAULT_THETA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::arg("weight decay must be non-negative"));
        }
        if !(self.positive_iou > 0.0 && self.positive_iou < 1.0) {
            return Err(Error::arg(format!(
                "positive IoU must lie in (0, 1), got {}",
                self.positive_iou
            )));
        }
        if self.batch_episodes == 0 {
            return Err(Error::arg("batch must hold at least one episode"));
        }
        if !(self.regression_weight >= 0.0) {
            return Err(Error::arg("regression weight must be non-negative"));
        }
        Ok(())
    }

    fn lr_at(&self, iteration: usize) -> f64 {
        match self.lr_decay_at {
            Some(at) if iteration >= at => self.learning_rate * 0.1,
            _ => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledProposal {
    pub class: ClassId,
    pub index: usize,
    pub label: Label,
    /// Regression target, present for positives only.
    pub target: Option<BoxDelta>,
}

/// Labels every proposal: positive iff its best IoU with a ground-truth box
/// of the same class reaches `positive_iou`.
pub fn label_proposals(ep: &Episode, positive_iou: f64) -> Result<Vec<LabeledProposal>> {
    let mut out = Vec::new();
    for (class, props) in &ep.proposals {
        for (index, p) in props.iter().enumerate() {
            let best = ep
                .ground_truth
                .iter()
                .filter(|g| g.class == *class)
                .map(|g| (iou(&p.bbox, &g.bbox), g.bbox))
                .max_by(|a, b| a.0.total_cmp(&b.0));
            let labeled = match best {
                Some((v, gt)) if v >= positive_iou => LabeledProposal {
                    class: *class,
                    index,
                    label: Label::Positive,
                    target: Some(encode_delta(&p.bbox, &gt)?),
                },
                _ => LabeledProposal {
                    class: *class,
                    index,
                    label: Label::Negative,
                    target: None,
                },
            };
            out.push(labeled);
        }
    }
    Ok(out)
}

/// `-[y ln s + (1 - y) ln(1 - s)]` for a score strictly inside (0, 1).
pub fn bce_loss(score: f64, label: f64) -> f64 {
    -(label * score.ln() + (1.0 - label) * (1.0 - score).ln())
}

/// Cross-entropy of `sigmoid(logit)`, stable for large logits.
pub fn bce_with_logit(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

fn smooth_l1_term(t: f64) -> f64 {
    if t.abs() < 1.0 {
        0.5 * t * t
    } else {
        t.abs() - 0.5
    }
}

fn smooth_l1_grad(t: f64) -> f64 {
    if t.abs() < 1.0 {
        t
    } else {
        t.signum()
    }
}

pub fn smooth_l1(pred: &BoxDelta, target: &BoxDelta) -> f64 {
    pred.to_array()
        .iter()
        .zip(target.to_array())
        .map(|(p, t)| smooth_l1_term(p - t))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub smooth_l1: f64,
}

/// Gradients of the episode loss for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weight: Array2<f64>,
    pub scale: f64,
    pub bias: f64,
    pub regressor: Array2<f64>,
}

impl Gradients {
    pub fn zeros(dim: usize) -> Self {
        Gradients {
            weight: Array2::zeros((dim, dim)),
            scale: 0.0,
            bias: 0.0,
            regressor: Array2::zeros((dim, 4)),
        }
    }

    fn add_scaled(&mut self, other: &Gradients, s: f64) {
        self.weight.scaled_add(s, &other.weight);
        self.scale += s * other.scale;
        self.bias += s * other.bias;
        self.regressor.scaled_add(s, &other.regressor);
    }
}

/// Labels resolved to (prepared class slot, proposal index).
struct ResolvedLabels {
    items: Vec<(usize, usize, f64, Option<[f64; 4]>)>,
    positives: usize,
}

fn resolve_labels(prep: &PreparedEpisode, labels: &[LabeledProposal]) -> Result<ResolvedLabels> {
    let mut items = Vec::with_capacity(labels.len());
    let mut positives = 0;
    for l in labels {
        let slot = prep
            .classes
            .iter()
            .position(|c| c.class == l.class)
            .ok_or(Error::UnknownClass(l.class.id))?;
        if l.index >= prep.classes[slot].boxes.len() {
            return Err(Error::arg(format!(
                "label points at proposal {} of class {}, which has {}",
                l.index,
                l.class.id,
                prep.classes[slot].boxes.len()
            )));
        }
        let y = match l.label {
            Label::Positive => 1.0,
            Label::Negative => 0.0,
        };
        let target = match (l.label, l.target) {
            (Label::Positive, Some(t)) => {
                positives += 1;
                Some(t.to_array())
            }
            (Label::Positive, None) => {
                return Err(Error::arg(format!(
                    "positive proposal {} of class {} has no regression target",
                    l.index, l.class.id
                )))
            }
            (Label::Negative, _) => None,
        };
        items.push((slot, l.index, y, target));
    }
    Ok(ResolvedLabels { items, positives })
}

struct ClassForward {
    messages: Vec<Array2<f64>>,
    output: Array2<f64>,
}

fn forward_class(pc: &PreparedClass, params: &GcnParams) -> ClassForward {
    match &pc.plan {
        None => ClassForward {
            messages: Vec::new(),
            output: pc.x0.clone(),
        },
        Some(plan) => {
            let t = intra_forward(
                plan,
                pc.x0.clone(),
                pc.global.view(),
                &params.weight,
                params.layers_intra,
            );
            ClassForward {
                messages: t.messages,
                output: t.output,
            }
        }
    }
}

fn norm(v: ndarray::ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Loss and (optionally) gradients for one prepared episode.
fn loss_and_grad(
    prep: &PreparedEpisode,
    labels: &ResolvedLabels,
    params: &GcnParams,
    head: &MatchHead,
    regression_weight: f64,
    want_grad: bool,
) -> (LossBreakdown, Option<Gradients>) {
    let dim = params.dim();
    let forwards: Vec<ClassForward> = prep
        .classes
        .iter()
        .map(|pc| forward_class(pc, params))
        .collect();
    let n_lab = labels.items.len();
    let mut loss = LossBreakdown::default();
    if n_lab == 0 {
        return (loss, want_grad.then(|| Gradients::zeros(dim)));
    }
    let inv_lab = 1.0 / n_lab as f64;
    let inv_pos = if labels.positives > 0 {
        1.0 / labels.positives as f64
    } else {
        0.0
    };
    let mut grads = Gradients::zeros(dim);
    let mut gouts: Vec<Array2<f64>> = if want_grad {
        forwards
            .iter()
            .map(|f| Array2::zeros(f.output.raw_dim()))
            .collect()
    } else {
        Vec::new()
    };

    for &(slot, i, y, target) in &labels.items {
        let out = &forwards[slot].output;
        let n = prep.classes[slot].boxes.len();
        let u = out.row(i);
        let v = out.row(n);
        let (nu, nv) = (norm(u), norm(v));
        let degenerate = nu == 0.0 || nv == 0.0;
        let cos = if degenerate {
            0.0
        } else {
            (u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0)
        };
        let logit = head.scale * cos + head.bias;
        loss.bce += inv_lab * bce_with_logit(logit, y);

        let pred = target.map(|_| u.dot(&head.regressor));
        if let (Some(t), Some(p)) = (target, pred.as_ref()) {
            let l: f64 = (0..4).map(|k| smooth_l1_term(p[k] - t[k])).sum();
            loss.smooth_l1 += inv_pos * l;
        }

        if !want_grad {
            continue;
        }
        let s = crate::pipeline::sigmoid(logit);
        let gz = inv_lab * (s - y);
        grads.scale += gz * cos;
        grads.bias += gz;
        let gcos = gz * head.scale;
        let gout = &mut gouts[slot];
        if !degenerate {
            // d cos / du = v / (|u||v|) - cos u / |u|^2
            let mut gu = gout.row_mut(i);
            gu.scaled_add(gcos / (nu * nv), &v);
            gu.scaled_add(-gcos * cos / (nu * nu), &u);
            let mut gv = gout.row_mut(n);
            gv.scaled_add(gcos / (nu * nv), &u);
            gv.scaled_add(-gcos * cos / (nv * nv), &v);
        }
        if let (Some(t), Some(p)) = (target, pred) {
            let gd: Array1<f64> = (0..4)
                .map(|k| regression_weight * inv_pos * smooth_l1_grad(p[k] - t[k]))
                .collect();
            for (r, mut grow) in grads.regressor.axis_iter_mut(Axis(0)).enumerate() {
                grow.scaled_add(u[r], &gd);
            }
            let mut gu = gout.row_mut(i);
            gu += &head.regressor.dot(&gd);
        }
    }
    loss.total = loss.bce + regression_weight * loss.smooth_l1;

    if !want_grad {
        return (loss, None);
    }
    for ((pc, fwd), gout) in prep.classes.iter().zip(&forwards).zip(gouts) {
        let Some(plan) = &pc.plan else { continue };
        let mut gx = gout;
        for (layer, m) in fwd.messages.iter().enumerate().rev() {
            grads.weight += &m.t().dot(&gx);
            if layer == 0 {
                break;
            }
            let gm = gx.dot(&params.weight.t());
            plan.backprop(&gm, &mut gx);
        }
    }
    (loss, Some(grads))
}

fn prepare_checked(
    ep: &Episode,
    labels: &[LabeledProposal],
    params: &GcnParams,
    head: &MatchHead,
    toggles: &EdgeToggles,
    theta: f64,
) -> Result<(PreparedEpisode, ResolvedLabels)> {
    check_compat(ep, params, head)?;
    let prep = prepare_episode(ep, params, toggles, theta)?;
    let resolved = resolve_labels(&prep, labels)?;
    Ok((prep, resolved))
}

/// Options shared by [`episode_loss`] and [`episode_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub theta: f64,
    pub regression_weight: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            theta: DEFAULT_THETA,
            regression_weight: 1.0,
        }
    }
}

pub fn episode_loss(
    ep: &Episode,
    labels: &[LabeledProposal],
    params: &GcnParams,
    head: &MatchHead,
    toggles: &EdgeToggles,
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    let (prep, resolved) = prepare_checked(ep, labels, params, head, toggles, opts.theta)?;
    Ok(loss_and_grad(
        &prep,
        &resolved,
        params,
        head,
        opts.regression_weight,
        false,
    )
    .0)
}

pub fn episode_gradients(
    ep: &Episode,
    labels: &[LabeledProposal],
    params: &GcnParams,
    head: &MatchHead,
    toggles: &EdgeToggles,
    opts: &LossOptions,
) -> Result<(LossBreakdown, Gradients)> {
    let (prep, resolved) = prepare_checked(ep, labels, params, head, toggles, opts.theta)?;
    let (loss, grads) = loss_and_grad(&prep, &resolved, params, head, opts.regression_weight, true);
    Ok((loss, grads.expect("gradients requested")))
}

/// Source of training episodes. Streams used for training never run dry.
pub trait EpisodeStream {
    fn next_episode(&mut self) -> Result<Option<Episode>>;
}

/// Cycles through a fixed episode list, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct CycleEpisodes {
    episodes: Vec<Episode>,
    order: Vec<usize>,
    cursor: usize,
    rng: SplitMix64,
}

impl CycleEpisodes {
    pub fn new(episodes: Vec<Episode>, seed: u64) -> Self {
        let order = (0..episodes.len()).collect();
        CycleEpisodes {
            episodes,
            order,
            cursor: usize::MAX,
            rng: SplitMix64::derive(seed, 0xC7C1E),
        }
    }
}

impl EpisodeStream for CycleEpisodes {
    fn next_episode(&mut self) -> Result<Option<Episode>> {
        if self.episodes.is_empty() {
            return Ok(None);
        }
        if self.cursor >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let ep = self.episodes[self.order[self.cursor]].clone();
        self.cursor += 1;
        Ok(Some(ep))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub bce: f64,
    pub smooth_l1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: GcnParams,
    pub head: MatchHead,
    pub trace: Vec<LossRecord>,
}

/// SGD with momentum and weight decay (`v <- m v + g + wd p; p <- p - lr v`).
#[derive(Debug, Clone)]
struct Sgd {
    velocity: Gradients,
}

impl Sgd {
    fn step(
        &mut self,
        params: &mut GcnParams,
        head: &mut MatchHead,
        g: &Gradients,
        cfg: &TrainConfig,
        lr: f64,
    ) {
        let (m, wd) = (cfg.momentum, cfg.weight_decay);
        let v = &mut self.velocity;
        v.weight.mapv_inplace(|vi| vi * m);
        v.weight += &g.weight;
        v.weight.scaled_add(wd, &params.weight);
        params.weight.scaled_add(-lr, &v.weight);

        v.regressor.mapv_inplace(|vi| vi * m);
        v.regressor += &g.regressor;
        v.regressor.scaled_add(wd, &head.regressor);
        head.regressor.scaled_add(-lr, &v.regressor);

        v.scale = m * v.scale + g.scale + wd * head.scale;
        head.scale -= lr * v.scale;
        v.bias = m * v.bias + g.bias + wd * head.bias;
        head.bias -= lr * v.bias;
    }
}

/// One optimizer update with externally supplied gradients; exposed for
/// optimizer-level tests.
pub fn sgd_steps(
    params: &mut GcnParams,
    head: &mut MatchHead,
    grads: &Gradients,
    cfg: &TrainConfig,
    steps: usize,
) {
    let mut opt = Sgd {
        velocity: Gradients::zeros(params.dim()),
    };
    for it in 0..steps {
        opt.step(params, head, grads, cfg, cfg.lr_at(it));
    }
}

pub fn train<S: EpisodeStream + ?Sized>(
    stream: &mut S,
    config: &TrainConfig,
    params: GcnParams,
    head: MatchHead,
    toggles: &EdgeToggles,
) -> Result<TrainOutcome> {
    config.validate()?;
    params.validate()?;
    head.validate()?;
    let mut params = params;
    let mut head = head;
    let mut opt = Sgd {
        velocity: Gradients::zeros(params.dim()),
    };
    let mut trace = Vec::with_capacity(config.iterations);

    for iteration in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch_episodes);
        for _ in 0..config.batch_episodes {
            let ep = stream
                .next_episode()?
                .ok_or(Error::Empty("episode stream"))?;
            let labels = label_proposals(&ep, config.positive_iou)?;
            batch.push((ep, labels));
        }
        let results: Vec<Result<(LossBreakdown, Gradients)>> = batch
            .par_iter()
            .map(|(ep, labels)| {
                let (prep, resolved) =
                    prepare_checked(ep, labels, &params, &head, toggles, config.theta)?;
                let (l, g) = loss_and_grad(
                    &prep,
                    &resolved,
                    &params,
                    &head,
                    config.regression_weight,
                    true,
                );
                Ok((l, g.expect("gradients requested")))
            })
            .collect();
        let inv = 1.0 / batch.len() as f64;
        let mut grads = Gradients::zeros(params.dim());
        let mut loss = LossBreakdown::default();
        for r in results {
            let (l, g) = r?;
            grads.add_scaled(&g, inv);
            loss.total += inv * l.total;
            loss.bce += inv * l.bce;
            loss.smooth_l1 += inv * l.smooth_l1;
        }
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                iteration,
                loss: loss.total,
            });
        }
        trace.push(LossRecord {
            iteration,
            total: loss.total,
            bce: loss.bce,
            smooth_l1: loss.smooth_l1,
        });
        opt.step(
            &mut params,
            &mut head,
            &grads,
            config,
            config.lr_at(iteration),
        );
        let finite = params.weight.iter().all(|w| w.is_finite())
            && head.scale.is_finite()
            && head.bias.is_finite();
        if !finite {
            return Err(Error::Divergence {
                iteration,
                loss: f64::NAN,
            });
        }
    }
    Ok(TrainOutcome {
        params,
        head,
        trace,
    })
}

/// Absolute floor of the relative-error denominator in [`gradient_check`].
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: usize,
    pub max_relative_error: f64,
    pub worst_parameter: String,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compares analytic gradients with central finite differences over every
/// trainable scalar. `corrupt_analytic` perturbs the analytic bias gradient
/// so callers can confirm that the check actually fails on a wrong gradient.
pub fn gradient_check(
    ep: &Episode,
    labels: &[LabeledProposal],
    params: &GcnParams,
    head: &MatchHead,
    toggles: &EdgeToggles,
    opts: &LossOptions,
    step: f64,
    corrupt_analytic: bool,
) -> Result<GradCheckReport> {
    let (prep, resolved) = prepare_checked(ep, labels, params, head, toggles, opts.theta)?;
    let eval = |p: &GcnParams, h: &MatchHead| {
        loss_and_grad(&prep, &resolved, p, h, opts.regression_weight, false)
            .0
            .total
    };
    let (_, g) = loss_and_grad(&prep, &resolved, params, head, opts.regression_weight, true);
    let mut g = g.expect("gradients requested");
    if corrupt_analytic {
        g.bias = g.bias * 1.5 + 1e-3;
    }

    let mut report = GradCheckReport {
        entries: 0,
        max_relative_error: 0.0,
        worst_parameter: String::new(),
    };
    let mut record = |name: String, analytic: f64, numeric: f64| {
        let rel =
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        report.entries += 1;
        if rel > report.max_relative_error || report.worst_parameter.is_empty() {
            report.max_relative_error = rel.max(report.max_relative_error);
            report.worst_parameter = name;
        }
    };

    let dim = params.dim();
    for r in 0..dim {
        for c in 0..dim {
            let mut p = params.clone();
            p.weight[[r, c]] += step;
            let up = eval(&p, head);
            p.weight[[r, c]] -= 2.0 * step;
            let down = eval(&p, head);
            record(
                format!("W[{r},{c}]"),
                g.weight[[r, c]],
                (up - down) / (2.0 * step),
            );
        }
    }
    for r in 0..dim {
        for c in 0..4 {
            let mut h = head.clone();
            h.regressor[[r, c]] += step;
            let up = eval(params, &h);
            h.regressor[[r, c]] -= 2.0 * step;
            let down = eval(params, &h);
            record(
                format!("R[{r},{c}]"),
                g.regressor[[r, c]],
                (up - down) / (2.0 * step),
            );
        }
    }
    let scalar = |f: &dyn Fn(&mut MatchHead, f64)| {
        let mut h = head.clone();
        f(&mut h, step);
        let up = eval(params, &h);
        let mut h = head.clone();
        f(&mut h, -step);
        let down = eval(params, &h);
        (up - down) / (2.0 * step)
    };
    let n_scale = scalar(&|h, d| h.scale += d);
    let n_bias = scalar(&|h, d| h.bias += d);
    record("scale".into(), g.scale, n_scale);
    record("bias".into(), g.bias, n_bias);
    Ok(report)
}
