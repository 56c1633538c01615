use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use hgfsod::eval::{ablation_report, initial_state, with_aggregates, ReportRow};
use hgfsod::io::{self, Checkpoint, Manifest, FORMAT_VERSION, MANIFEST_FILE};
use hgfsod::pipeline::{cosine_matrix, ClassProposalEdges, ProposalEdges};
use hgfsod::prototype::{modulate_query, spatial_avg_pool};
use hgfsod::synth::{episode_rng, generate_episode_in, World};
use hgfsod::training::{gradient_check, CycleEpisodes, LossOptions};
use hgfsod::{
    EdgeToggles, Error, FeatureShape, GcnParams, GenConfig, MatchHead, Split, SplitMix64,
    TrainConfig,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "hgfsod",
    version,
    about = "Few-shot detection with heterogeneous graph enhancement"
)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded synthetic episodes and a manifest.
    Generate(GenerateArgs),
    /// Train W and the match head on episodes.
    Train(TrainArgs),
    /// Evaluate checkpoints and write an AP report.
    Eval(EvalArgs),
    /// Pairwise cosine similarity of an episode's class prototypes.
    CosineMatrix(CosineArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Modulate an episode's global feature by a pooled class prototype.
    Modulate(ModulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    MetaTrain,
    MetaTest,
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of base classes.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 5)]
    novel: usize,
    #[arg(long, default_value_t = 2)]
    shots: usize,
    #[arg(long, default_value_t = 16)]
    proposals: usize,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// World seed: class geometry shared by every split generated with it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the episode stream (defaults to --seed).
    #[arg(long)]
    episode_seed: Option<u64>,
    #[arg(long, value_enum, default_value = "meta-test")]
    split: SplitArg,
    #[arg(long)]
    out_dir: PathBuf,
    /// Starting point for every generator knob not given explicitly.
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// Feature shape as HxWxC (preset default: 2x2x32, acceptance 1x1x68).
    #[arg(long, value_parser = parse_shape)]
    shape: Option<FeatureShape>,
    /// Supports behind each base-class memory prototype.
    #[arg(long)]
    base_shots: Option<usize>,
    /// Base siblings per novel class.
    #[arg(long)]
    family_bases: Option<usize>,
    /// Probability that a novel class appears in a query image.
    #[arg(long)]
    presence: Option<f64>,
    /// Share of proposals drawn around other classes' objects.
    #[arg(long)]
    other_share: Option<f64>,
    /// Boxes per background proposal cluster.
    #[arg(long)]
    cluster_boxes: Option<usize>,
    #[arg(long)]
    cluster_spread: Option<f64>,
    #[arg(long)]
    support_shift: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    instance_spread: Option<f64>,
    #[arg(long)]
    feature_noise: Option<f64>,
    #[arg(long)]
    background: Option<f64>,
    /// Inclusive object count range per image, as MIN..MAX.
    #[arg(long, value_parser = parse_range)]
    objects: Option<(usize, usize)>,
    #[arg(long)]
    image_size: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Acceptance,
}

fn parse_shape(s: &str) -> Result<FeatureShape, String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>().map_err(|e| format!("{d:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match dims[..] {
        [h, w, c] => FeatureShape::new(h, w, c).map_err(|e| e.to_string()),
        _ => Err(format!("expected HxWxC, got {s:?}")),
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| format!("expected MIN..MAX, got {s:?}"))?;
    let lo = lo.parse().map_err(|e| format!("{lo:?}: {e}"))?;
    let hi = hi.parse().map_err(|e| format!("{hi:?}: {e}"))?;
    Ok((lo, hi))
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EdgeKind {
    ClassClass,
    ClassProposal,
    ProposalProposal,
}

#[derive(Clone, Copy, ValueEnum)]
enum CpDirection {
    Both,
    ClassToProposal,
    ProposalToClass,
}

#[derive(Clone, Copy, ValueEnum)]
enum PpContext {
    Both,
    Local,
    Global,
}

#[derive(Args, Default)]
struct ToggleArgs {
    /// Edge types to disable, comma separated.
    #[arg(long, value_enum, value_delimiter = ',')]
    ablate: Vec<EdgeKind>,
    /// Self-connections only (every node becomes X W + X).
    #[arg(long)]
    mlp: bool,
    /// Skip graph enhancement entirely and match raw features.
    #[arg(long)]
    no_graph: bool,
    #[arg(long, value_enum)]
    cp_direction: Option<CpDirection>,
    #[arg(long, value_enum)]
    pp_context: Option<PpContext>,
    /// Keep only the first K base classes in the Inter-Class graph.
    #[arg(long)]
    base_memory: Option<usize>,
}

impl ToggleArgs {
    fn is_set(&self) -> bool {
        !self.ablate.is_empty()
            || self.mlp
            || self.no_graph
            || self.cp_direction.is_some()
            || self.pp_context.is_some()
            || self.base_memory.is_some()
    }

    fn toggles(&self) -> EdgeToggles {
        let mut t = EdgeToggles::full();
        t.bypass_gcn = self.no_graph;
        t.mlp_mode = self.mlp;
        if let Some(d) = self.cp_direction {
            t.class_proposal = match d {
                CpDirection::Both => ClassProposalEdges::Bidirectional,
                CpDirection::ClassToProposal => ClassProposalEdges::ClassToProposal,
                CpDirection::ProposalToClass => ClassProposalEdges::ProposalToClass,
            };
        }
        if let Some(c) = self.pp_context {
            t.proposal_proposal = match c {
                PpContext::Both => ProposalEdges::Both,
                PpContext::Local => ProposalEdges::LocalOnly,
                PpContext::Global => ProposalEdges::GlobalOnly,
            };
        }
        for kind in &self.ablate {
            match kind {
                EdgeKind::ClassClass => t.class_class = false,
                EdgeKind::ClassProposal => t.class_proposal = ClassProposalEdges::Off,
                EdgeKind::ProposalProposal => t.proposal_proposal = ProposalEdges::Off,
            }
        }
        t.base_memory_size = self.base_memory;
        t.normalized()
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Episode file, dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0001)]
    weight_decay: f64,
    /// Episodes per SGD step.
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Iteration after which the learning rate is divided by 10.
    #[arg(long)]
    lr_decay_at: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    positive_iou: f64,
    #[arg(long, default_value_t = 1.0)]
    regression_weight: f64,
    /// Proposal-proposal IoU threshold.
    #[arg(long, default_value_t = hgfsod::graph::DEFAULT_THETA)]
    theta: f64,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV (default: the checkpoint path with `.loss.csv`).
    #[arg(long)]
    loss_trace: Option<PathBuf>,
    /// Continue from --init on novel-class episodes.
    #[arg(long, requires = "init")]
    finetune: bool,
    /// Starting checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    toggles: ToggleArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; `{seed}` is replaced by each value of --seeds.
    #[arg(long)]
    checkpoint: String,
    /// Seeds to evaluate; adds mean and std rows when more than one.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Evaluate the component grid (rows a-g) instead of one toggle set.
    #[arg(long)]
    grid: bool,
    #[arg(long, default_value_t = hgfsod::graph::DEFAULT_THETA)]
    theta: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    toggles: ToggleArgs,
}

#[derive(Args)]
struct CosineArgs {
    /// Episode file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Corrupt the analytic gradient (negative control).
    #[arg(long, hide = true)]
    inject_bug: bool,
    #[command(flatten)]
    toggles: ToggleArgs,
}

#[derive(Args)]
struct ModulateArgs {
    /// Episode file.
    #[arg(long)]
    data: PathBuf,
    /// Class id whose prototype is pooled.
    #[arg(long)]
    class: u32,
    #[arg(long)]
    out: PathBuf,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Divergence { .. }) => EXIT_NUMERIC,
            Some(Error::InvalidArgument(_)) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: anyhow::anyhow!("{msg}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HGFSOD_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::CosineMatrix(a) => cosine(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Modulate(a) => modulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let base = match a.preset {
        Preset::Default => GenConfig::default(),
        Preset::Acceptance => GenConfig::acceptance(),
    };
    let mut cfg = GenConfig {
        num_base: a.classes,
        num_novel: a.novel,
        shots: a.shots,
        proposals_per_class: a.proposals,
        shape: a.shape.unwrap_or(base.shape),
        base_shots: a.base_shots.unwrap_or(base.base_shots),
        family_bases: a.family_bases.unwrap_or(base.family_bases),
        cluster_boxes: a.cluster_boxes.unwrap_or(base.cluster_boxes),
        split: match a.split {
            SplitArg::MetaTrain => Split::MetaTrain,
            SplitArg::MetaTest => Split::MetaTest,
        },
        seed: a.seed,
        ..base
    };
    let set = |field: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *field = v;
        }
    };
    set(&mut cfg.cluster_spread, a.cluster_spread);
    set(&mut cfg.support_shift, a.support_shift);
    set(&mut cfg.jitter, a.jitter);
    set(&mut cfg.instance_spread, a.instance_spread);
    set(&mut cfg.feature_noise, a.feature_noise);
    set(&mut cfg.background, a.background);
    set(&mut cfg.presence, a.presence);
    set(&mut cfg.other_share, a.other_share);
    if let Some(s) = a.image_size {
        cfg.image_width = s;
        cfg.image_height = s;
    }
    if let Some(r) = a.objects {
        cfg.objects_per_image = r;
    }
    cfg.validate().map_err(usage)?;
    if a.episodes == 0 {
        return Err(usage("--episodes must be at least 1"));
    }
    let world = World::new(&cfg)?;
    let episode_seed = a.episode_seed.unwrap_or(a.seed);
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut files = Vec::with_capacity(a.episodes);
    for i in 0..a.episodes {
        let (ep, _) = generate_episode_in(&world, &mut episode_rng(episode_seed, i as u64))?;
        let name = format!("episode_{i:04}.json");
        io::write_episode(&a.out_dir.join(&name), &ep)?;
        files.push(name);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        shape: [cfg.shape.height, cfg.shape.width, cfg.shape.channels],
        generator: cfg,
        episode_seed,
        episodes: files,
    };
    io::write_manifest(&a.out_dir.join(MANIFEST_FILE), &manifest)?;
    info!("wrote {} episodes to {}", a.episodes, a.out_dir.display());
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Vec<hgfsod::Episode>, Failure> {
    let data = io::read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    if data.is_empty() {
        return Err(Failure {
            code: EXIT_DATA,
            error: anyhow::anyhow!("{} holds no episodes", path.display()),
        });
    }
    let shape = data[0].shape;
    if let Some(ep) = data.iter().find(|e| e.shape != shape) {
        return Err(
            Error::ShapeMismatch(format!("episodes mix shapes {shape} and {}", ep.shape)).into(),
        );
    }
    Ok(data)
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let config = TrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_episodes: a.batch,
        iterations: a.iterations,
        lr_decay_at: a.lr_decay_at,
        positive_iou: a.positive_iou,
        regression_weight: a.regression_weight,
        theta: a.theta,
        seed: a.seed,
    };
    config.validate().map_err(usage)?;
    if a.layers == 0 {
        return Err(usage("--layers must be at least 1"));
    }
    let data = load_dataset(&a.data)?;
    let shape = data[0].shape;
    let (params, head, toggles) = match &a.init {
        Some(path) => {
            let ck =
                io::read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
            ck.check_episode(&data[0])?;
            let toggles = if a.toggles.is_set() {
                a.toggles.toggles()
            } else {
                ck.toggles
            };
            (ck.params, ck.head, toggles)
        }
        None => {
            let (mut params, head) = initial_state(shape.dim(), a.seed);
            params.layers_intra = a.layers;
            (params, head, a.toggles.toggles())
        }
    };
    if a.finetune {
        info!(
            "fine-tuning from {}",
            a.init.as_deref().unwrap_or(Path::new("?")).display()
        );
    }
    let mut stream = CycleEpisodes::new(data, a.seed);
    let out = hgfsod::train(&mut stream, &config, params, head, &toggles)?;
    let ck = Checkpoint {
        shape,
        params: out.params,
        head: out.head,
        config,
        toggles,
        seed: a.seed,
    };
    io::write_checkpoint(&a.out, &ck)?;
    let trace_path = a
        .loss_trace
        .unwrap_or_else(|| a.out.with_extension("loss.csv"));
    io::write_loss_trace(&trace_path, &out.trace)?;
    if let Some(last) = out.trace.last() {
        info!(
            "final loss {:.6} (bce {:.6}, smooth-l1 {:.6})",
            last.total, last.bce, last.smooth_l1
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    if !(a.theta > 0.0 && a.theta < 1.0) {
        return Err(usage(format!(
            "--theta must lie in (0, 1), got {}",
            a.theta
        )));
    }
    if a.seeds.len() > 1 && !a.checkpoint.contains("{seed}") {
        return Err(usage(
            "several --seeds need a {seed} placeholder in --checkpoint",
        ));
    }
    let data = load_dataset(&a.data)?;
    let runs: Vec<(Option<u64>, String)> = if a.seeds.is_empty() {
        vec![(None, a.checkpoint.clone())]
    } else {
        a.seeds
            .iter()
            .map(|s| (Some(*s), a.checkpoint.replace("{seed}", &s.to_string())))
            .collect()
    };
    let mut rows: Vec<ReportRow> = Vec::new();
    for (seed, path) in runs {
        let ck =
            io::read_checkpoint(Path::new(&path)).with_context(|| format!("reading {path}"))?;
        for ep in &data {
            ck.check_episode(ep)?;
        }
        let grid: Vec<EdgeToggles> = if a.grid {
            EdgeToggles::component_grid()
                .into_iter()
                .map(|(_, t)| t)
                .collect()
        } else if a.toggles.is_set() {
            vec![a.toggles.toggles()]
        } else {
            vec![ck.toggles]
        };
        let theta_data: Vec<_> = data.clone();
        let report = report_with_theta(&theta_data, &ck, &grid, seed.unwrap_or(ck.seed), a.theta)?;
        rows.extend(report);
    }
    let rows = if a.seeds.len() > 1 {
        with_aggregates(rows)
    } else {
        rows
    };
    io::write_report(&a.out, &rows)?;
    Ok(())
}

fn report_with_theta(
    data: &[hgfsod::Episode],
    ck: &Checkpoint,
    grid: &[EdgeToggles],
    seed: u64,
    theta: f64,
) -> Result<Vec<ReportRow>, Failure> {
    if (theta - hgfsod::graph::DEFAULT_THETA).abs() > 0.0 {
        let mut rows = Vec::with_capacity(grid.len());
        let shots = data.iter().map(hgfsod::Episode::shots).min().unwrap_or(0);
        let cfg = hgfsod::DetectorConfig {
            theta,
            ..hgfsod::eval::eval_detector_config()
        };
        for t in grid {
            let s = hgfsod::eval::evaluate_dataset(data, &ck.params, &ck.head, t, &cfg)?;
            rows.push(ReportRow {
                toggles: t.label(),
                shots,
                seed: seed.to_string(),
                ap: s.ap,
                ap50: s.ap50,
                ap75: s.ap75,
            });
        }
        return Ok(rows);
    }
    Ok(ablation_report(data, &ck.params, &ck.head, grid, seed)?)
}

fn cosine(a: CosineArgs) -> Result<(), Failure> {
    let ep = io::read_episode(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let m = cosine_matrix(&ep.class_table);
    let ids: Vec<u32> = ep.class_table.iter().map(|p| p.class.id).collect();
    io::write_cosine_matrix(&a.out, &ids, &m)?;
    Ok(())
}

/// The seeded 2-class, 4-proposal configuration used by `gradcheck`.
fn gradcheck_episode(
    seed: u64,
) -> Result<(hgfsod::Episode, Vec<hgfsod::training::LabeledProposal>), Failure> {
    let cfg = GenConfig {
        num_base: 3,
        num_novel: 2,
        proposals_per_class: 4,
        shape: FeatureShape::new(1, 2, 3)?,
        objects_per_image: (2, 3),
        seed,
        ..GenConfig::default()
    };
    let world = World::new(&cfg)?;
    Ok(generate_episode_in(&world, &mut episode_rng(seed, 0))?)
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    if !(a.step > 0.0) || !(a.tolerance > 0.0) {
        return Err(usage("--step and --tolerance must be positive"));
    }
    let (ep, labels) = gradcheck_episode(a.seed)?;
    let dim = ep.shape.dim();
    let mut rng = SplitMix64::derive(a.seed, 0x6C);
    let mut params = GcnParams::init(dim, &mut rng);
    params
        .weight
        .iter_mut()
        .for_each(|w| *w += 0.3 * rng.normal());
    let mut head = MatchHead::init(dim);
    head.regressor
        .iter_mut()
        .for_each(|r| *r = 0.5 * rng.normal());
    let toggles = a.toggles.toggles();
    let report = gradient_check(
        &ep,
        &labels,
        &params,
        &head,
        &toggles,
        &LossOptions::default(),
        a.step,
        a.inject_bug,
    )?;
    println!(
        "entries {} max_relative_error {:.3e} worst {} tolerance {:.1e}",
        report.entries, report.max_relative_error, report.worst_parameter, a.tolerance
    );
    if !report.passes(a.tolerance) {
        return Err(Failure {
            code: EXIT_NUMERIC,
            error: anyhow::anyhow!("gradient check failed at {}", report.worst_parameter),
        });
    }
    Ok(())
}

fn modulate(a: ModulateArgs) -> Result<(), Failure> {
    let ep = io::read_episode(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let proto = ep
        .class_table
        .iter()
        .find(|p| p.class.id == a.class)
        .ok_or(Error::UnknownClass(a.class))?;
    let pooled = spatial_avg_pool(&proto.feature);
    let out = modulate_query(&ep.global_feature, &pooled)?;
    let s = out.shape();
    let mut w =
        std::fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    use std::io::Write;
    let mut text = String::from("h,w,c,value\n");
    for h in 0..s.height {
        for x in 0..s.width {
            for c in 0..s.channels {
                text.push_str(&format!("{h},{x},{c},{}\n", out.get(h, x, c)));
            }
        }
    }
    w.write_all(text.as_bytes())
        .with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}
