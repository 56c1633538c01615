//! Seeded synthetic episodes.
//!
//! A world (fixed by `GenConfig::seed`) holds unit-norm class centers, a
//! per-class support shift direction and a background direction. Each novel
//! class shares a family with `family_bases` base classes: all members are
//! drawn around one family root, so they are "siblings" of each other. Each
//! episode places objects in a query image (each novel class with
//! probability `presence`) and emits per-class proposal sets whose features
//! mix the appearance of whatever they cover with background, a box-offset
//! encoding and noise. Proposals cluster: several jittered boxes per object
//! and per background anchor.
//!
//! When `C >= 16` the last four channels of every cell carry the encoded
//! offset from the proposal to the object it mostly covers; the remaining
//! channels are appearance. Smaller grids are appearance only.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::encode_delta;
use crate::rng::SplitMix64;
use crate::training::{label_proposals, LabeledProposal};
use crate::types::{
    BBox, ClassId, ClassKind, ClassPrototype, Episode, FeatureGrid, FeatureShape, GroundTruth,
    ProposalNode,
};

const WORLD_STREAM: u64 = 0x5747_4F52_4C44;
const OFFSET_CHANNELS: usize = 4;
const MAX_PLACEMENT_TRIES: usize = 200;
/// Two ground-truth objects may share at most this fraction of the smaller
/// one.
const MAX_OBJECT_OVERLAP: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    /// Novel roles are played by sampled base classes; novel classes never
    /// appear.
    MetaTrain,
    /// Real novel classes against the base-class memory.
    MetaTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub num_base: usize,
    pub num_novel: usize,
    /// Supports per novel(-role) class.
    pub shots: usize,
    /// Supports behind each base-class memory prototype.
    pub base_shots: usize,
    pub proposals_per_class: usize,
    pub shape: FeatureShape,
    /// Spread of family members around their family root; two members
    /// have cosine exactly `1 / (1 + s^2)`.
    pub cluster_spread: f64,
    /// Base classes sharing a family with each novel class.
    pub family_bases: usize,
    /// Weight of an appearance direction shared by every class before
    /// normalization; unrelated classes then have cosine near
    /// `o^2 / (1 + o^2)`.
    pub objectness: f64,
    /// Size of the per-class offset between support and query appearance.
    pub support_shift: f64,
    /// Box noise as a fraction of the object size.
    pub jitter: f64,
    /// Per-object appearance variation.
    pub instance_spread: f64,
    /// Independent noise on every feature vector.
    pub feature_noise: f64,
    /// Norm of the background appearance.
    pub background: f64,
    /// Per-image variation of the background direction.
    pub background_spread: f64,
    /// Scale of the offset channels.
    pub offset_scale: f64,
    /// Share of each proposal set drawn around the class's own objects.
    pub own_share: f64,
    /// Share drawn around objects of other classes; the rest is background.
    pub other_share: f64,
    /// Background proposals come in jittered clusters of this size.
    pub cluster_boxes: usize,
    /// Probability that a novel(-role) class has an object in the query;
    /// at least one always does.
    pub presence: f64,
    /// Inclusive range of objects per query image.
    pub objects_per_image: (usize, usize),
    pub image_width: f64,
    pub image_height: f64,
    pub split: Split,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_base: 10,
            num_novel: 5,
            shots: 2,
            base_shots: 30,
            proposals_per_class: 16,
            shape: FeatureShape::DESK,
            cluster_spread: 0.3,
            family_bases: 2,
            objectness: 0.0,
            support_shift: 0.6,
            jitter: 0.2,
            instance_spread: 0.4,
            feature_noise: 0.5,
            background: 0.8,
            background_spread: 0.3,
            offset_scale: 0.5,
            own_share: 0.5,
            other_share: 0.25,
            cluster_boxes: 3,
            presence: 1.0,
            objects_per_image: (6, 8),
            image_width: 320.0,
            image_height: 320.0,
            split: Split::MetaTest,
            seed: 0,
        }
    }
}

impl GenConfig {
    /// The frozen benchmark world: one base sibling per novel class, a flat
    /// 68-channel feature, heavy per-region noise and novel classes that are
    /// absent from half of the queries.
    pub fn acceptance() -> Self {
        GenConfig {
            shape: FeatureShape {
                height: 1,
                width: 1,
                channels: 68,
            },
            family_bases: 1,
            jitter: 0.1,
            instance_spread: 1.0,
            feature_noise: 2.0,
            other_share: 0.1,
            presence: 0.5,
            ..GenConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_base == 0
            || self.num_novel == 0
            || self.shots == 0
            || self.base_shots == 0
            || self.proposals_per_class == 0
        {
            return Err(Error::arg(
                "class, shot and proposal counts must be at least 1",
            ));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::arg(format!(
                "cluster spread must be positive, got {}",
                self.cluster_spread
            )));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::arg(format!(
                "jitter must lie in [0, 0.5), got {}",
                self.jitter
            )));
        }
        for (name, v) in [
            ("support shift", self.support_shift),
            ("instance spread", self.instance_spread),
            ("feature noise", self.feature_noise),
            ("background", self.background),
            ("objectness", self.objectness),
            ("background spread", self.background_spread),
            ("offset scale", self.offset_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.presence > 0.0 && self.presence <= 1.0) {
            return Err(Error::arg(format!(
                "presence must lie in (0, 1], got {}",
                self.presence
            )));
        }
        if !(self.own_share >= 0.0
            && self.other_share >= 0.0
            && self.own_share + self.other_share <= 1.0)
        {
            return Err(Error::arg(
                "proposal shares must be non-negative and sum to at most 1",
            ));
        }
        if self.cluster_boxes == 0 {
            return Err(Error::arg("background clusters need at least one box"));
        }
        let appearance = self.shape.cells() * self.appearance_channels();
        let family = self.family_bases.min(self.num_base) + 1;
        if appearance <= family {
            return Err(Error::arg(format!(
                "{appearance} appearance dimensions cannot hold a family of {family} around a root"
            )));
        }
        let (lo, hi) = self.objects_per_image;
        let needed = if self.presence < 1.0 {
            1
        } else {
            self.role_counts().0
        };
        if lo > hi || lo < needed {
            return Err(Error::arg(format!(
                "objects per image {lo}..={hi} cannot hold one object per novel class ({})",
                self.role_counts().0
            )));
        }
        if !(self.image_width >= 32.0 && self.image_height >= 32.0) {
            return Err(Error::arg("image must be at least 32x32"));
        }
        if self.split == Split::MetaTrain && self.num_base < 2 {
            return Err(Error::arg("meta-training needs at least two base classes"));
        }
        Ok(())
    }

    /// Number of (novel-role, base-role) classes per episode.
    pub fn role_counts(&self) -> (usize, usize) {
        match self.split {
            Split::MetaTest => (self.num_novel, self.num_base),
            Split::MetaTrain => {
                let novel = self.num_novel.min(self.num_base - 1).max(1);
                (novel, self.num_base - novel)
            }
        }
    }

    /// Base ids in the family of novel class `k` (counted from 0).
    pub fn family(&self, k: usize) -> std::ops::Range<usize> {
        let lo = (k * self.family_bases).min(self.num_base);
        let hi = ((k + 1) * self.family_bases).min(self.num_base);
        lo..hi
    }

    fn appearance_channels(&self) -> usize {
        if self.shape.channels >= 16 {
            self.shape.channels - OFFSET_CHANNELS
        } else {
            self.shape.channels
        }
    }
}

/// Class geometry shared by every episode generated from one seed.
#[derive(Debug, Clone)]
pub struct World {
    cfg: GenConfig,
    /// Appearance centers, base classes first; unit norm.
    centers: Vec<Vec<f64>>,
    shift_dirs: Vec<Vec<f64>>,
    background: Vec<f64>,
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian(rng: &mut SplitMix64, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.normal()).collect()
}

fn random_unit(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    let mut v = gaussian(rng, n, 1.0);
    unit(&mut v);
    v
}

impl World {
    pub fn new(cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::derive(cfg.seed, WORLD_STREAM);
        let dim = cfg.shape.cells() * cfg.appearance_channels();
        let total = cfg.num_base + cfg.num_novel;
        // Members sit at angle t from the root along mutually orthogonal
        // directions, so any two of them have cosine cos^2 t.
        let cos_t = 1.0 / (1.0 + cfg.cluster_spread.powi(2)).sqrt();
        let sin_t = (1.0 - cos_t * cos_t).sqrt();
        let mut centers: Vec<Vec<f64>> = vec![Vec::new(); total];
        for k in 0..cfg.num_novel {
            let root = random_unit(&mut rng, dim);
            let mut basis = vec![root.clone()];
            let ids: Vec<usize> = cfg.family(k).chain([cfg.num_base + k]).collect();
            for id in ids {
                let mut u = gaussian(&mut rng, dim, 1.0);
                for b in &basis {
                    let d: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
                    u.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
                unit(&mut u);
                centers[id] = root
                    .iter()
                    .zip(&u)
                    .map(|(r, v)| cos_t * r + sin_t * v)
                    .collect();
                basis.push(u);
            }
        }
        for c in centers.iter_mut().filter(|c| c.is_empty()) {
            *c = random_unit(&mut rng, dim);
        }
        let shift_dirs = (0..total).map(|_| random_unit(&mut rng, dim)).collect();
        let background = random_unit(&mut rng, dim);
        let shared = random_unit(&mut rng, dim);
        for c in &mut centers {
            c.iter_mut()
                .zip(&shared)
                .for_each(|(x, s)| *x += cfg.objectness * s);
            unit(c);
        }
        Ok(World {
            cfg: cfg.clone(),
            centers,
            shift_dirs,
            background,
        })
    }

    pub fn config(&self) -> &GenConfig {
        &self.cfg
    }

    /// Appearance center of a world class (base ids first, then novel ids).
    pub fn center(&self, id: u32) -> &[f64] {
        &self.centers[id as usize]
    }

    fn appearance_dim(&self) -> usize {
        self.background.len()
    }

    /// Builds a grid from an appearance vector and a 4-vector of offsets.
    fn assemble(&self, appearance: &[f64], offsets: [f64; 4]) -> Result<FeatureGrid> {
        let shape = self.cfg.shape;
        let a = self.cfg.appearance_channels();
        let cells = shape.cells();
        let mut data = Vec::with_capacity(shape.dim());
        let per_cell = self.cfg.offset_scale / (cells as f64).sqrt();
        for cell in 0..cells {
            data.extend_from_slice(&appearance[cell * a..(cell + 1) * a]);
            if a < shape.channels {
                data.extend(offsets.iter().map(|o| per_cell * o));
            }
        }
        FeatureGrid::new(shape, data)
    }

    fn noise(&self, rng: &mut SplitMix64, scale: f64) -> Vec<f64> {
        let dim = self.appearance_dim();
        gaussian(rng, dim, scale / (dim as f64).sqrt())
    }

    fn support_feature(&self, id: u32, shift: f64, rng: &mut SplitMix64) -> Vec<f64> {
        let c = &self.centers[id as usize];
        let u = &self.shift_dirs[id as usize];
        let inst = self.noise(rng, self.cfg.instance_spread);
        let noise = self.noise(rng, self.cfg.feature_noise);
        (0..c.len())
            .map(|i| c[i] + shift * u[i] + inst[i] + noise[i])
            .collect()
    }

    fn prototype(&self, class: ClassId, rng: &mut SplitMix64) -> Result<ClassPrototype> {
        let (k, shift) = match class.kind {
            ClassKind::Novel => (self.cfg.shots, self.cfg.support_shift),
            ClassKind::Base => (self.cfg.base_shots, 0.0),
        };
        let mut acc = vec![0.0; self.appearance_dim()];
        for _ in 0..k {
            for (a, v) in acc
                .iter_mut()
                .zip(self.support_feature(class.id, shift, rng))
            {
                *a += v / k as f64;
            }
        }
        Ok(ClassPrototype {
            class,
            feature: self.assemble(&acc, [0.0; 4])?,
            support_count: k,
        })
    }
}

struct PlacedObject {
    class: ClassId,
    bbox: BBox,
    appearance: Vec<f64>,
}

fn random_object_box(cfg: &GenConfig, rng: &mut SplitMix64) -> BBox {
    let side = cfg.image_width.min(cfg.image_height);
    let w = rng.uniform(0.15, 0.3) * side;
    let h = w * rng.uniform(0.7, 1.4);
    let h = h.min(cfg.image_height * 0.9);
    let x = rng.uniform(0.0, cfg.image_width - w);
    let y = rng.uniform(0.0, cfg.image_height - h);
    BBox { x, y, w, h }
}

fn jitter_box(b: &BBox, jitter: f64, cfg: &GenConfig, rng: &mut SplitMix64) -> BBox {
    let (cx, cy) = b.center();
    let cx = cx + rng.uniform(-jitter, jitter) * b.w;
    let cy = cy + rng.uniform(-jitter, jitter) * b.h;
    let w = (b.w * rng.uniform(-jitter, jitter).exp()).min(cfg.image_width);
    let h = (b.h * rng.uniform(-jitter, jitter).exp()).min(cfg.image_height);
    let x = (cx - w / 2.0).clamp(0.0, cfg.image_width - w);
    let y = (cy - h / 2.0).clamp(0.0, cfg.image_height - h);
    BBox { x, y, w, h }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let h = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    w * h
}

/// Query-image feature of `b`: appearance of what it covers, the offset to
/// the most covered object, and noise.
fn region_feature(
    world: &World,
    b: &BBox,
    objects: &[PlacedObject],
    background: &[f64],
    rng: &mut SplitMix64,
) -> Result<FeatureGrid> {
    let mut appearance = vec![0.0; world.appearance_dim()];
    let mut covered = 0.0;
    let mut by_cover: Vec<(f64, &PlacedObject)> = objects
        .iter()
        .map(|o| (intersection(b, &o.bbox) / b.area(), o))
        .filter(|(c, _)| *c > 0.0)
        .collect();
    by_cover.sort_by(|x, y| y.0.total_cmp(&x.0));
    let best = by_cover.first().map(|(_, o)| *o);
    for (cov, o) in by_cover {
        let cov = cov.min(1.0 - covered);
        covered += cov;
        for (a, v) in appearance.iter_mut().zip(&o.appearance) {
            *a += cov * v;
        }
    }
    for (a, v) in appearance.iter_mut().zip(background) {
        *a += (1.0 - covered) * v;
    }
    for (a, n) in appearance
        .iter_mut()
        .zip(world.noise(rng, world.cfg.feature_noise))
    {
        *a += n;
    }
    let offsets = match best {
        Some(o) => encode_delta(b, &o.bbox)?.to_array(),
        None => [0.0; 4],
    };
    world.assemble(&appearance, offsets)
}

/// Places one object per entry of `present`, then fills the image with
/// distractors drawn from `distractors`.
fn place_objects(
    world: &World,
    present: &[(ClassId, u32)],
    distractors: &[(ClassId, u32)],
    rng: &mut SplitMix64,
) -> Result<Vec<PlacedObject>> {
    let cfg = &world.cfg;
    let (lo, hi) = cfg.objects_per_image;
    let count = (lo + rng.below(hi - lo + 1)).max(present.len());
    let mut objects: Vec<PlacedObject> = Vec::with_capacity(count);
    for slot in 0..count {
        let (class, world_id) = if slot < present.len() {
            present[slot]
        } else if !distractors.is_empty() {
            distractors[rng.below(distractors.len())]
        } else {
            present[rng.below(present.len())]
        };
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let b = random_object_box(cfg, rng);
            let clear = objects.iter().all(|o| {
                intersection(&o.bbox, &b) <= MAX_OBJECT_OVERLAP * o.bbox.area().min(b.area())
            });
            if clear {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| {
            Error::Infeasible(format!(
                "could not place object {} of {count} after {MAX_PLACEMENT_TRIES} tries",
                slot + 1
            ))
        })?;
        let inst = world.noise(rng, cfg.instance_spread);
        let appearance = world.centers[world_id as usize]
            .iter()
            .zip(inst)
            .map(|(c, n)| c + n)
            .collect();
        objects.push(PlacedObject {
            class,
            bbox,
            appearance,
        });
    }
    Ok(objects)
}

/// Proposal boxes for one class: jittered copies of its objects, a few boxes
/// on other objects, and clusters of background boxes.
fn proposal_boxes(
    cfg: &GenConfig,
    class: ClassId,
    objects: &[PlacedObject],
    rng: &mut SplitMix64,
) -> Vec<BBox> {
    let n = cfg.proposals_per_class;
    let own: Vec<&PlacedObject> = objects.iter().filter(|o| o.class == class).collect();
    let others: Vec<&PlacedObject> = objects.iter().filter(|o| o.class != class).collect();
    let n_own = if own.is_empty() {
        0
    } else {
        (cfg.own_share * n as f64).round() as usize
    };
    let n_other = if others.is_empty() {
        0
    } else {
        ((cfg.other_share * n as f64).round() as usize).min(n - n_own)
    };
    let mut boxes = Vec::with_capacity(n);
    for k in 0..n_own {
        boxes.push(jitter_box(&own[k % own.len()].bbox, cfg.jitter, cfg, rng));
    }
    for _ in 0..n_other {
        let o = others[rng.below(others.len())];
        boxes.push(jitter_box(&o.bbox, cfg.jitter, cfg, rng));
    }
    while boxes.len() < n {
        let anchor = random_object_box(cfg, rng);
        boxes.push(anchor);
        for _ in 1..cfg.cluster_boxes {
            if boxes.len() == n {
                break;
            }
            boxes.push(jitter_box(&anchor, cfg.jitter, cfg, rng));
        }
    }
    boxes
}

/// One episode and its proposal labels (IoU >= 0.5 against same-class
/// ground truth). The world is rebuilt from `cfg`; use
/// [`generate_episode_in`] to reuse one.
pub fn generate_episode(
    cfg: &GenConfig,
    rng: &mut SplitMix64,
) -> Result<(Episode, Vec<LabeledProposal>)> {
    let world = World::new(cfg)?;
    generate_episode_in(&world, rng)
}

pub fn generate_episode_in(
    world: &World,
    rng: &mut SplitMix64,
) -> Result<(Episode, Vec<LabeledProposal>)> {
    let cfg = &world.cfg;
    let (novel_roles, _) = cfg.role_counts();
    // (episode class id, world class id); novel roles first.
    let roles: Vec<(ClassId, u32)> = match cfg.split {
        Split::MetaTest => (0..cfg.num_novel)
            .map(|k| {
                let id = (cfg.num_base + k) as u32;
                (ClassId::novel(id), id)
            })
            .chain((0..cfg.num_base as u32).map(|id| (ClassId::base(id), id)))
            .collect(),
        Split::MetaTrain => {
            let mut ids: Vec<u32> = (0..cfg.num_base as u32).collect();
            rng.shuffle(&mut ids);
            let (novel, base) = ids.split_at(novel_roles);
            let mut novel = novel.to_vec();
            let mut base = base.to_vec();
            novel.sort_unstable();
            base.sort_unstable();
            novel
                .into_iter()
                .map(|id| (ClassId::novel(id), id))
                .chain(base.into_iter().map(|id| (ClassId::base(id), id)))
                .collect()
        }
    };

    let mut class_table = Vec::with_capacity(roles.len());
    for &(class, _) in &roles {
        class_table.push(world.prototype(class, rng)?);
    }
    class_table.sort_by_key(|p| (p.class.id, p.class.kind));

    let mut present: Vec<(ClassId, u32)> = roles[..novel_roles]
        .iter()
        .copied()
        .filter(|_| rng.uniform(0.0, 1.0) < cfg.presence)
        .collect();
    if present.is_empty() {
        present.push(roles[rng.below(novel_roles)]);
    }
    rng.shuffle(&mut present);
    present.truncate(cfg.objects_per_image.1);
    let objects = place_objects(world, &present, &roles[novel_roles..], rng)?;
    let image_bg: Vec<f64> = world
        .background
        .iter()
        .zip(world.noise(rng, cfg.background_spread))
        .map(|(b, n)| cfg.background * (b + n))
        .collect();

    let mut proposals = BTreeMap::new();
    for &(class, _) in roles.iter().take(novel_roles) {
        let boxes = proposal_boxes(cfg, class, &objects, rng);
        let mut nodes = Vec::with_capacity(boxes.len());
        for bbox in boxes {
            let feature = region_feature(world, &bbox, &objects, &image_bg, rng)?;
            nodes.push(ProposalNode {
                bbox,
                feature,
                class_of: class,
            });
        }
        proposals.insert(class, nodes);
    }

    let mut global = vec![0.0; world.appearance_dim()];
    for o in &objects {
        for (g, v) in global.iter_mut().zip(&o.appearance) {
            *g += v / objects.len() as f64;
        }
    }
    for (g, n) in global.iter_mut().zip(world.noise(rng, cfg.feature_noise)) {
        *g += n;
    }
    let global_feature = world.assemble(&global, [0.0; 4])?;
    let ground_truth = objects
        .iter()
        .map(|o| GroundTruth {
            class: o.class,
            bbox: o.bbox,
        })
        .collect();

    let ep = Episode {
        image_width: cfg.image_width,
        image_height: cfg.image_height,
        shape: cfg.shape,
        class_table,
        proposals,
        global_feature,
        ground_truth,
    };
    ep.validate()?;
    let labels = label_proposals(&ep, 0.5)?;
    Ok((ep, labels))
}

/// Seed of episode `index` in a dataset drawn with `seed`.
pub fn episode_rng(seed: u64, index: u64) -> SplitMix64 {
    SplitMix64::derive(seed, index)
}

/// `count` episodes, episode `i` drawn from [`episode_rng`]`(seed, i)`.
/// Generation runs in parallel; the result does not depend on scheduling.
pub fn generate_dataset(world: &World, seed: u64, count: usize) -> Result<Vec<Episode>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_episode_in(world, &mut episode_rng(seed, i)).map(|(ep, _)| ep))
        .collect()
}

/// Endless stream of fresh episodes for training.
#[derive(Debug, Clone)]
pub struct SynthStream {
    world: World,
    seed: u64,
    next: u64,
}

impl SynthStream {
    pub fn new(world: World, seed: u64) -> Self {
        SynthStream {
            world,
            seed,
            next: 0,
        }
    }
}

impl crate::training::EpisodeStream for SynthStream {
    fn next_episode(&mut self) -> Result<Option<Episode>> {
        let (ep, _) = generate_episode_in(&self.world, &mut episode_rng(self.seed, self.next))?;
        self.next += 1;
        Ok(Some(ep))
    }
}

/// Fraction of positive labels among one class's proposals.
pub fn positive_fraction(labels: &[LabeledProposal], class: ClassId) -> f64 {
    let of_class: Vec<_> = labels.iter().filter(|l| l.class == class).collect();
    if of_class.is_empty() {
        return 0.0;
    }
    let pos = of_class
        .iter()
        .filter(|l| l.label == crate::training::Label::Positive)
        .count();
    pos as f64 / of_class.len() as f64
}
