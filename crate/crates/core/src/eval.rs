//! Average precision and the ablation benchmark.
//!
//! AP uses greedy score-descending matching (best unmatched IoU, ties to the
//! earlier ground truth) and 101-point interpolated precision. Dataset-level
//! AP pools every image's detections per class before building the curve.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::GcnParams;
use crate::geometry::iou;
use crate::pipeline::{detect_episode_with, DetectorConfig, EdgeToggles, MatchHead};
use crate::rng::SplitMix64;
use crate::synth::{generate_dataset, GenConfig, Split, SynthStream, World};
use crate::training::{train, TrainConfig};
use crate::types::{ClassId, Detection, Episode, GroundTruth};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// Interpolated precision at recall 0, 0.01, ..., 1, averaged.
fn interpolated_ap(hits: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (k, hit) in hits.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope from the right.
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..=100 {
        let recall = r as f64 / 100.0;
        while k < points.len() && points[k].0 < recall - 1e-12 {
            k += 1;
        }
        if k < points.len() {
            sum += points[k].1;
        }
    }
    sum / 101.0
}

/// Detection of one image, kept with its position for tie-breaking.
struct Ranked {
    image: usize,
    order: usize,
    det: Detection,
}

/// Whether each ranked detection is a true positive.
fn match_detections(
    ranked: &[Ranked],
    gts: &[Vec<GroundTruth>],
    class: ClassId,
    thr: f64,
) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|r| {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts[r.image].iter().enumerate() {
                if gt.class != class || used[r.image][j] {
                    continue;
                }
                let v = iou(&r.det.bbox, &gt.bbox);
                if v >= thr && best.map_or(true, |(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    used[r.image][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// AP over several images: detections and ground truth are paired by index.
/// Classes without ground truth are excluded; with none at all AP is 0.
pub fn dataset_average_precision(
    images: &[(Vec<Detection>, Vec<GroundTruth>)],
    iou_threshold: f64,
) -> f64 {
    let classes: BTreeSet<ClassId> = images
        .iter()
        .flat_map(|(_, g)| g.iter().map(|g| g.class))
        .collect();
    if classes.is_empty() {
        return 0.0;
    }
    let gts: Vec<Vec<GroundTruth>> = images.iter().map(|(_, g)| g.clone()).collect();
    let mut total = 0.0;
    for class in &classes {
        let n_gt = gts.iter().flatten().filter(|g| g.class == *class).count();
        let mut ranked: Vec<Ranked> = images
            .iter()
            .enumerate()
            .flat_map(|(image, (dets, _))| {
                dets.iter()
                    .enumerate()
                    .filter(|(_, d)| d.class == *class)
                    .map(move |(order, d)| Ranked {
                        image,
                        order,
                        det: *d,
                    })
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.det
                .score
                .total_cmp(&a.det.score)
                .then(a.image.cmp(&b.image))
                .then(a.order.cmp(&b.order))
        });
        let hits = match_detections(&ranked, &gts, *class, iou_threshold);
        total += interpolated_ap(&hits, n_gt);
    }
    total / classes.len() as f64
}

/// Single-image AP, the mean over classes present in `gts`.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> f64 {
    dataset_average_precision(&[(dets.to_vec(), gts.to_vec())], iou_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ApSummary {
    /// Mean over IoU thresholds 0.50:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

pub fn summarize(images: &[(Vec<Detection>, Vec<GroundTruth>)]) -> ApSummary {
    let per: Vec<f64> = coco_thresholds()
        .iter()
        .map(|t| dataset_average_precision(images, *t))
        .collect();
    ApSummary {
        ap: per.iter().sum::<f64>() / per.len() as f64,
        ap50: per[0],
        ap75: per[5],
    }
}

/// Ground truth restricted to the classes the episode has proposals for.
pub fn novel_ground_truth(ep: &Episode) -> Vec<GroundTruth> {
    ep.ground_truth
        .iter()
        .filter(|g| ep.proposals.contains_key(&g.class))
        .copied()
        .collect()
}

/// Detections for every episode (computed in parallel, kept in input order)
/// scored against each episode's novel-class ground truth.
pub fn evaluate_dataset(
    dataset: &[Episode],
    params: &GcnParams,
    head: &MatchHead,
    toggles: &EdgeToggles,
    cfg: &DetectorConfig,
) -> Result<ApSummary> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let images = dataset
        .par_iter()
        .map(|ep| {
            Ok((
                detect_episode_with(ep, params, head, toggles, cfg)?,
                novel_ground_truth(ep),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&images))
}

/// Score threshold used for evaluation: AP ranks every detection.
pub fn eval_detector_config() -> DetectorConfig {
    DetectorConfig {
        score_threshold: 0.0,
        ..DetectorConfig::default()
    }
}

/// One line of an ablation report. `seed` holds a seed number or the
/// aggregate name (`mean`, `std`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub toggles: String,
    pub shots: usize,
    pub seed: String,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
}

impl ReportRow {
    pub fn summary(&self) -> ApSummary {
        ApSummary {
            ap: self.ap,
            ap50: self.ap50,
            ap75: self.ap75,
        }
    }
}

/// One row per toggle set, in grid order.
pub fn ablation_report(
    dataset: &[Episode],
    params: &GcnParams,
    head: &MatchHead,
    toggle_grid: &[EdgeToggles],
    seed: u64,
) -> Result<Vec<ReportRow>> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let shots = dataset.iter().map(Episode::shots).min().unwrap_or(0);
    let cfg = eval_detector_config();
    toggle_grid
        .iter()
        .map(|t| {
            let s = evaluate_dataset(dataset, params, head, t, &cfg)?;
            Ok(ReportRow {
                toggles: t.label(),
                shots,
                seed: seed.to_string(),
                ap: s.ap,
                ap50: s.ap50,
                ap75: s.ap75,
            })
        })
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Appends a `mean` and a `std` row (population standard deviation) per
/// (toggles, shots) group, in order of first appearance.
pub fn with_aggregates(rows: Vec<ReportRow>) -> Vec<ReportRow> {
    let mut groups: Vec<(String, usize)> = Vec::new();
    let mut members: BTreeMap<(String, usize), Vec<ApSummary>> = BTreeMap::new();
    for r in &rows {
        let key = (r.toggles.clone(), r.shots);
        if !members.contains_key(&key) {
            groups.push(key.clone());
        }
        members.entry(key).or_default().push(r.summary());
    }
    let mut out = rows;
    for key in groups {
        let m = &members[&key];
        let (ap, ap_sd) = mean_std(&m.iter().map(|s| s.ap).collect::<Vec<_>>());
        let (ap50, ap50_sd) = mean_std(&m.iter().map(|s| s.ap50).collect::<Vec<_>>());
        let (ap75, ap75_sd) = mean_std(&m.iter().map(|s| s.ap75).collect::<Vec<_>>());
        let (toggles, shots) = key;
        out.push(ReportRow {
            toggles: toggles.clone(),
            shots,
            seed: "mean".into(),
            ap,
            ap50,
            ap75,
        });
        out.push(ReportRow {
            toggles,
            shots,
            seed: "std".into(),
            ap: ap_sd,
            ap50: ap50_sd,
            ap75: ap75_sd,
        });
    }
    out
}

/// Train-then-evaluate sweep over toggle variants and training seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    /// World and meta-test episode settings; `split` is overridden.
    pub generator: GenConfig,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub train: TrainConfig,
    pub variants: Vec<EdgeToggles>,
    pub seeds: Vec<u64>,
}

impl BenchmarkSpec {
    /// Component ablation on the frozen benchmark world: rows (a) to (e)
    /// and (g), five seeds, 2000 iterations each.
    pub fn acceptance() -> Self {
        let rows = ["a", "b", "c", "d", "e", "g"];
        BenchmarkSpec {
            generator: GenConfig::acceptance(),
            eval_episodes: 50,
            eval_seed: 777,
            train: TrainConfig {
                learning_rate: 0.03,
                lr_decay_at: Some(1500),
                ..TrainConfig::default()
            },
            variants: EdgeToggles::component_grid()
                .into_iter()
                .filter(|(k, _)| rows.contains(k))
                .map(|(_, t)| t)
                .collect(),
            seeds: (0..5).collect(),
        }
    }
}

/// Trained parameters of one (variant, seed) cell.
#[derive(Debug, Clone)]
pub struct BenchmarkCell {
    pub toggles: EdgeToggles,
    pub seed: u64,
    pub params: GcnParams,
    pub head: MatchHead,
    pub summary: ApSummary,
}

/// Stream seeds and initial weights for training seed `seed`.
pub fn initial_state(dim: usize, seed: u64) -> (GcnParams, MatchHead) {
    let mut rng = SplitMix64::derive(seed, 0x1A17);
    (GcnParams::init(dim, &mut rng), MatchHead::init(dim))
}

/// Trains every variant under every seed on meta-train episodes and
/// evaluates it on one fixed meta-test set.
pub fn run_benchmark(spec: &BenchmarkSpec) -> Result<Vec<BenchmarkCell>> {
    if spec.variants.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Empty("benchmark grid"));
    }
    let test_cfg = GenConfig {
        split: Split::MetaTest,
        ..spec.generator.clone()
    };
    let train_cfg = GenConfig {
        split: Split::MetaTrain,
        ..spec.generator.clone()
    };
    let test_world = World::new(&test_cfg)?;
    let train_world = World::new(&train_cfg)?;
    let dataset = generate_dataset(&test_world, spec.eval_seed, spec.eval_episodes)?;
    let dim = test_cfg.shape.dim();
    let det_cfg = eval_detector_config();
    let mut cells = Vec::new();
    for toggles in &spec.variants {
        for &seed in &spec.seeds {
            let (params, head) = initial_state(dim, seed);
            let config = TrainConfig {
                seed,
                ..spec.train.clone()
            };
            let mut stream = SynthStream::new(train_world.clone(), seed);
            let out = train(&mut stream, &config, params, head, toggles)?;
            let summary = evaluate_dataset(&dataset, &out.params, &out.head, toggles, &det_cfg)?;
            cells.push(BenchmarkCell {
                toggles: *toggles,
                seed,
                params: out.params,
                head: out.head,
                summary,
            });
        }
    }
    Ok(cells)
}

/// Report rows of a benchmark run, followed by the mean/std aggregates.
pub fn benchmark_rows(cells: &[BenchmarkCell], shots: usize) -> Vec<ReportRow> {
    let rows = cells
        .iter()
        .map(|c| ReportRow {
            toggles: c.toggles.label(),
            shots,
            seed: c.seed.to_string(),
            ap: c.summary.ap,
            ap50: c.summary.ap50,
            ap75: c.summary.ap75,
        })
        .collect();
    with_aggregates(rows)
}
