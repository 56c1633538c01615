//! JSON files for episodes, checkpoints and dataset manifests; CSV reports.
//!
//! Every JSON document carries `format_version` and `shape` (`[H, W, C]`);
//! feature grids are flat row-major arrays. Floats are written in shortest
//! round-trip form and read back bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::ReportRow;
use crate::gcn::GcnParams;
use crate::pipeline::{EdgeToggles, MatchHead};
use crate::synth::GenConfig;
use crate::training::{LossRecord, TrainConfig};
use crate::types::{
    BBox, ClassId, ClassKind, ClassPrototype, Episode, FeatureGrid, FeatureShape, GroundTruth,
    ProposalNode,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {cause}")]
    Io { path: String, cause: std::io::Error },

    #[error("unsupported format_version {found} (expected {expected})")]
    Version { found: u64, expected: u32 },

    #[error("shape inconsistency at {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("malformed document at line {line}, column {column}: {message}")]
    Malformed {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("csv: {0}")]
    Csv(String),
}

type FResult<T> = std::result::Result<T, FormatError>;

fn io_err(path: &Path, source: std::io::Error) -> FormatError {
    FormatError::Io {
        path: path.display().to_string(),
        cause: source,
    }
}

fn malformed(e: serde_json::Error) -> FormatError {
    FormatError::Malformed {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

#[derive(Deserialize)]
struct Header {
    format_version: u64,
}

/// Parses a versioned document; the version is checked before the body.
fn parse_versioned<T: DeserializeOwned>(text: &str) -> FResult<T> {
    let header: Header = serde_json::from_str(text).map_err(malformed)?;
    if header.format_version != u64::from(FORMAT_VERSION) {
        return Err(FormatError::Version {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_str(text).map_err(malformed)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializing plain data cannot fail");
    s.push('\n');
    s
}

fn read_text(path: &Path) -> FResult<String> {
    let mut s = String::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_string(&mut s))
        .map_err(|e| io_err(path, e))?;
    Ok(s)
}

fn write_text(path: &Path, text: &str) -> FResult<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| io_err(path, e))
}

fn shape_of(dims: [usize; 3], context: &str) -> FResult<FeatureShape> {
    FeatureShape::new(dims[0], dims[1], dims[2]).map_err(|e| FormatError::Shape {
        context: context.into(),
        detail: e.to_string(),
    })
}

fn grid(shape: FeatureShape, data: Vec<f64>, context: impl Fn() -> String) -> FResult<FeatureGrid> {
    if data.len() != shape.dim() {
        return Err(FormatError::Shape {
            context: context(),
            detail: format!("{} values, shape {shape} needs {}", data.len(), shape.dim()),
        });
    }
    FeatureGrid::new(shape, data).map_err(|e| FormatError::Shape {
        context: context(),
        detail: e.to_string(),
    })
}

fn bbox(v: [f64; 4]) -> BBox {
    BBox {
        x: v[0],
        y: v[1],
        w: v[2],
        h: v[3],
    }
}

fn bbox_array(b: &BBox) -> [f64; 4] {
    [b.x, b.y, b.w, b.h]
}

#[derive(Serialize, Deserialize)]
struct ClassDoc {
    id: u32,
    kind: ClassKind,
    support_count: usize,
    feature: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ProposalDoc {
    bbox: [f64; 4],
    feature: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ProposalSetDoc {
    class: u32,
    proposals: Vec<ProposalDoc>,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthDoc {
    class: u32,
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct EpisodeDoc {
    format_version: u32,
    shape: [usize; 3],
    image_width: f64,
    image_height: f64,
    classes: Vec<ClassDoc>,
    global_feature: Vec<f64>,
    proposal_sets: Vec<ProposalSetDoc>,
    ground_truth: Vec<GroundTruthDoc>,
}

fn episode_doc(ep: &Episode) -> EpisodeDoc {
    let s = ep.shape;
    EpisodeDoc {
        format_version: FORMAT_VERSION,
        shape: [s.height, s.width, s.channels],
        image_width: ep.image_width,
        image_height: ep.image_height,
        classes: ep
            .class_table
            .iter()
            .map(|p| ClassDoc {
                id: p.class.id,
                kind: p.class.kind,
                support_count: p.support_count,
                feature: p.feature.flatten(),
            })
            .collect(),
        global_feature: ep.global_feature.flatten(),
        proposal_sets: ep
            .proposals
            .iter()
            .map(|(c, props)| ProposalSetDoc {
                class: c.id,
                proposals: props
                    .iter()
                    .map(|p| ProposalDoc {
                        bbox: bbox_array(&p.bbox),
                        feature: p.feature.flatten(),
                    })
                    .collect(),
            })
            .collect(),
        ground_truth: ep
            .ground_truth
            .iter()
            .map(|g| GroundTruthDoc {
                class: g.class.id,
                bbox: bbox_array(&g.bbox),
            })
            .collect(),
    }
}

fn episode_from_doc(doc: EpisodeDoc) -> crate::Result<Episode> {
    let shape = shape_of(doc.shape, "shape")?;
    let mut kinds = BTreeMap::new();
    let mut class_table = Vec::with_capacity(doc.classes.len());
    for (k, c) in doc.classes.into_iter().enumerate() {
        let feature = grid(shape, c.feature, || {
            format!("classes[{k}] (class {}) feature", c.id)
        })?;
        kinds.insert(c.id, c.kind);
        class_table.push(ClassPrototype {
            class: ClassId {
                id: c.id,
                kind: c.kind,
            },
            feature,
            support_count: c.support_count,
        });
    }
    let class_of = |id: u32| -> crate::Result<ClassId> {
        kinds
            .get(&id)
            .map(|kind| ClassId { id, kind: *kind })
            .ok_or(crate::Error::UnknownClass(id))
    };
    let global_feature = grid(shape, doc.global_feature, || "global_feature".into())?;
    let mut proposals = BTreeMap::new();
    for set in doc.proposal_sets {
        let class = class_of(set.class)?;
        let mut nodes = Vec::with_capacity(set.proposals.len());
        for (i, p) in set.proposals.into_iter().enumerate() {
            let feature = grid(shape, p.feature, || {
                format!("class {} proposal {i} feature", set.class)
            })?;
            nodes.push(ProposalNode {
                bbox: bbox(p.bbox),
                feature,
                class_of: class,
            });
        }
        if proposals.insert(class, nodes).is_some() {
            return Err(crate::Error::arg(format!(
                "class {} has two proposal sets",
                set.class
            )));
        }
    }
    let ground_truth = doc
        .ground_truth
        .into_iter()
        .map(|g| {
            Ok(GroundTruth {
                class: class_of(g.class)?,
                bbox: bbox(g.bbox),
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let ep = Episode {
        image_width: doc.image_width,
        image_height: doc.image_height,
        shape,
        class_table,
        proposals,
        global_feature,
        ground_truth,
    };
    ep.validate()?;
    Ok(ep)
}

pub fn episode_to_string(ep: &Episode) -> String {
    to_json(&episode_doc(ep))
}

pub fn episode_from_str(text: &str) -> crate::Result<Episode> {
    episode_from_doc(parse_versioned(text)?)
}

pub fn write_episode(path: &Path, ep: &Episode) -> crate::Result<()> {
    ep.validate()?;
    Ok(write_text(path, &episode_to_string(ep))?)
}

pub fn read_episode(path: &Path) -> crate::Result<Episode> {
    episode_from_str(&read_text(path)?)
}

/// Trained state plus the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub shape: FeatureShape,
    pub params: GcnParams,
    pub head: MatchHead,
    pub config: TrainConfig,
    pub toggles: EdgeToggles,
    pub seed: u64,
}

impl Checkpoint {
    /// Refuses episodes whose feature shape differs from the checkpoint's.
    pub fn check_episode(&self, ep: &Episode) -> crate::Result<()> {
        if ep.shape != self.shape {
            return Err(FormatError::Shape {
                context: "checkpoint".into(),
                detail: format!(
                    "trained for {} features, episode has {}",
                    self.shape, ep.shape
                ),
            }
            .into());
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct HeadDoc {
    scale: f64,
    bias: f64,
    regressor: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    shape: [usize; 3],
    seed: u64,
    layers_inter: usize,
    layers_intra: usize,
    /// Row-major `D x D`.
    weight: Vec<f64>,
    head: HeadDoc,
    train_config: TrainConfig,
    toggles: EdgeToggles,
}

pub fn checkpoint_to_string(ck: &Checkpoint) -> String {
    let s = ck.shape;
    to_json(&CheckpointDoc {
        format_version: FORMAT_VERSION,
        shape: [s.height, s.width, s.channels],
        seed: ck.seed,
        layers_inter: ck.params.layers_inter,
        layers_intra: ck.params.layers_intra,
        weight: ck.params.weight.iter().copied().collect(),
        head: HeadDoc {
            scale: ck.head.scale,
            bias: ck.head.bias,
            regressor: ck.head.regressor.iter().copied().collect(),
        },
        train_config: ck.config.clone(),
        toggles: ck.toggles,
    })
}

fn matrix(data: Vec<f64>, rows: usize, cols: usize, context: &str) -> FResult<Array2<f64>> {
    let n = data.len();
    Array2::from_shape_vec((rows, cols), data).map_err(|_| FormatError::Shape {
        context: context.into(),
        detail: format!("{n} values, expected {rows}x{cols}"),
    })
}

pub fn checkpoint_from_str(text: &str) -> crate::Result<Checkpoint> {
    let doc: CheckpointDoc = parse_versioned(text)?;
    let shape = shape_of(doc.shape, "shape")?;
    let d = shape.dim();
    let params = GcnParams {
        weight: matrix(doc.weight, d, d, "weight")?,
        layers_inter: doc.layers_inter,
        layers_intra: doc.layers_intra,
    };
    let head = MatchHead {
        scale: doc.head.scale,
        bias: doc.head.bias,
        regressor: matrix(doc.head.regressor, d, 4, "head.regressor")?,
    };
    params.validate()?;
    head.validate()?;
    Ok(Checkpoint {
        shape,
        params,
        head,
        config: doc.train_config,
        toggles: doc.toggles,
        seed: doc.seed,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> crate::Result<()> {
    Ok(write_text(path, &checkpoint_to_string(ck))?)
}

pub fn read_checkpoint(path: &Path) -> crate::Result<Checkpoint> {
    checkpoint_from_str(&read_text(path)?)
}

/// Index of a generated dataset: the generator settings and episode files
/// relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub shape: [usize; 3],
    pub generator: GenConfig,
    pub episode_seed: u64,
    pub episodes: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_manifest(path: &Path, m: &Manifest) -> crate::Result<()> {
    Ok(write_text(path, &to_json(m))?)
}

pub fn read_manifest(path: &Path) -> crate::Result<Manifest> {
    let m: Manifest = parse_versioned(&read_text(path)?)?;
    shape_of(m.shape, "shape")?;
    Ok(m)
}

/// Reads a dataset given either a manifest, a directory holding one, or a
/// single episode file.
pub fn read_dataset(path: &Path) -> crate::Result<Vec<Episode>> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = read_text(&manifest)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(malformed)?;
    if value.get("episodes").is_none() {
        return Ok(vec![episode_from_str(&text)?]);
    }
    let m = read_manifest(&manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    m.episodes
        .iter()
        .map(|f| read_episode(&dir.join(f)))
        .collect()
}

fn csv_err(e: impl std::fmt::Display) -> FormatError {
    FormatError::Csv(e.to_string())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> crate::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Columns `iteration,total,bce,smooth_l1`.
pub fn write_loss_trace(path: &Path, trace: &[LossRecord]) -> crate::Result<()> {
    write_rows(path, trace)
}

pub fn read_loss_trace(path: &Path) -> crate::Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(e).into()))
        .collect()
}

/// Columns `toggles,shots,seed,AP,AP50,AP75`.
pub fn write_report(path: &Path, rows: &[ReportRow]) -> crate::Result<()> {
    write_rows(path, rows)
}

pub fn read_report(path: &Path) -> crate::Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(e).into()))
        .collect()
}

/// Square matrix with a `class` header column of ids.
pub fn write_cosine_matrix(path: &Path, ids: &[u32], m: &Array2<f64>) -> crate::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["class".to_string()];
    header.extend(ids.iter().map(u32::to_string));
    w.write_record(&header).map_err(csv_err)?;
    for (id, row) in ids.iter().zip(m.rows()) {
        let mut rec = vec![id.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}
