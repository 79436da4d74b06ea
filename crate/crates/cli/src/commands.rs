use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use roadsurf::bev::{BevGrid, BevMeta, StoredBev, EMPTY_LABEL};
use roadsurf::grad::{self, GradCheckOptions, ParamClass};
use roadsurf::image::Raster;
use roadsurf::io::{self, CameraRecord, ClassTable, EnhanceManifest};
use roadsurf::optim::{self, AdamState, CheckpointMeta, TrainOptions};
use roadsurf::raster::{self, RenderOptions};
use roadsurf::scene::Split;
use roadsurf::synth::{self, SynthSpec};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::logging::{event, progress};
use crate::pipeline;

pub const CHECKPOINT_FILE: &str = "scene.srf";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const REFERENCE_STATS_FILE: &str = "reference_stats.json";

#[derive(Debug, Parser)]
#[command(name = "roadsurf", version, about = "Road surface reconstruction with planar Gaussian surfels")]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores). Results do
    /// not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with ground truth from a TOML scene file.
    Synth(SynthArgs),
    /// Write color-enhanced frames and reference statistics into <dataset>/enhanced.
    Enhance(EnhanceArgs),
    /// Train a surfel scene and write a checkpoint and training log.
    Optimize(OptimizeArgs),
    /// Render color, depth, normal and semantic images from a checkpoint.
    Render(RenderArgs),
    /// Export bird's-eye-view color, semantic and elevation maps.
    ExportBev(ExportBevArgs),
    /// Compare a predicted BEV directory with ground truth.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences on random scenes.
    CheckGrads(CheckGradsArgs),
    /// Load a dataset and check every frame.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene file (TOML); built-in defaults when omitted.
    pub spec: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the scene file.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Flags shared by the commands that read a dataset under a pipeline config.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Pipeline config (TOML). Flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Root seed for all random streams.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable occluder inpainting: occluded pixels are masked, never replaced.
    #[arg(long)]
    pub no_inpaint: bool,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Output directory for the checkpoint and training log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Total iteration count; a resumed run continues up to this number.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Supervise with the raw (or inpainted) images instead of enhanced ones.
    #[arg(long)]
    pub no_enhance: bool,
    /// Set the semantic loss weight to zero.
    #[arg(long)]
    pub no_semantic_loss: bool,
    /// Continue from this checkpoint and its optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frame id in the dataset's cameras.json.
    #[arg(long, requires = "dataset", conflicts_with = "pose")]
    pub camera: Option<String>,
    /// JSON file holding one cameras.json entry.
    #[arg(long, required_unless_present = "camera")]
    pub pose: Option<PathBuf>,
    /// Dataset directory, for --camera and the class palette.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportBevArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pipeline config, for the default BEV resolution.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cell size in meters for a grid fitted to the surfel bounding box.
    #[arg(long, conflicts_with = "grid")]
    pub bev_resolution: Option<f64>,
    /// Reuse the grid recorded in this bev_meta.json.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Dataset directory whose classes.json supplies the palette.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by export-bev.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth BEV directory (`gt/` of a synthetic dataset).
    #[arg(long)]
    pub gt: PathBuf,
    /// Also report held-out view PSNR for this checkpoint.
    #[arg(long, requires = "dataset")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckGradsArgs {
    /// Pipeline config, for the loss weights.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the first random scene; scene i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub cases: u64,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
}

/// A failed check, reported with exit code 1 like other errors but without the
/// error chain.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("thread pool already initialized; --threads ignored");
        }
    }
    match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Enhance(a) => enhance_cmd(a),
        Command::Optimize(a) => optimize_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::ExportBev(a) => export_bev_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::CheckGrads(a) => check_grads_cmd(a),
        Command::Validate(a) => validate_cmd(a),
    }
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SynthSpec::from_toml_str(&text).with_context(|| format!("spec {}", p.display()))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let ds = synth::synthesize(&spec)?;
    synth::write_synth(&a.out, &ds)?;
    event(
        "synth",
        &json!({ "out": a.out, "frames": ds.views.len(), "seed": spec.seed }),
    );
    Ok(())
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(self.config.as_deref())?;
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
        }
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if self.no_inpaint {
            cfg.occlusion.use_inpainted = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dataset_path(cfg: &PipelineConfig) -> Result<&Path> {
    cfg.dataset
        .as_deref()
        .ok_or_else(|| anyhow!("no dataset given (use --dataset or `dataset` in the config)"))
}

fn load(cfg: &PipelineConfig) -> Result<io::Dataset> {
    let root = dataset_path(cfg)?;
    let ds = io::load_dataset(root).with_context(|| format!("loading dataset {}", root.display()))?;
    cfg.check_classes(&ds.classes)?;
    Ok(ds)
}

fn enhance_cmd(a: EnhanceArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let ds = load(&cfg)?;
    let out = pipeline::enhance_frames(&ds.frames, &cfg, &ds.classes)?;
    for (id, img) in &out.images {
        io::write_rgb_png(&io::enhanced_path(&ds.root, id), img)?;
    }
    let dir = ds.root.join(io::ENHANCED_DIR);
    io::write_json(&dir.join(REFERENCE_STATS_FILE), &out.reference)?;
    // The manifest goes last so a partial run is never taken as complete.
    io::write_json(&io::manifest_path(&ds.root), &EnhanceManifest { frames: out.sources })?;
    event("enhance", &json!({ "frames": out.images.len(), "out": dir }));
    Ok(())
}

fn optimize_cmd(a: OptimizeArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    if let Some(n) = a.iterations {
        cfg.optim.iterations = n;
    }
    if a.no_enhance {
        cfg.enhance.enabled = false;
    }
    if a.no_semantic_loss {
        cfg.loss.lambda_s = 0.0;
    }
    cfg.validate()?;
    let out_dir = cfg
        .out
        .clone()
        .ok_or_else(|| anyhow!("no output directory given (use --out or `out` in the config)"))?;
    let ds = load(&cfg)?;
    let enhanced = pipeline::enhanced_for_training(&ds, &cfg)?;
    let views = pipeline::training_views(&ds.frames, &cfg, &ds.classes, &enhanced)?;
    let hash = cfg.hash();

    let (mut scene, mut state, start) = match &a.resume {
        Some(ckpt) => {
            let (scene, meta) = optim::read_checkpoint(ckpt)?;
            if meta.config_hash != hash {
                return Err(CheckFailed(format!(
                    "{} was written under a different configuration",
                    ckpt.display()
                ))
                .into());
            }
            if meta.class_names != ds.classes.names {
                bail!("checkpoint classes differ from the dataset's classes.json");
            }
            let state = optim::read_state(ckpt)?
                .ok_or_else(|| anyhow!("{} has no optimizer state", ckpt.display()))?;
            (scene, state, meta.iterations)
        }
        None => {
            let scene = pipeline::initial_scene(&views, &cfg, &ds.classes)?;
            let state = AdamState::for_scene(&scene);
            (scene, state, 0)
        }
    };
    let total = cfg.optim.iterations;
    if start > total {
        bail!("checkpoint is at iteration {start}, past the requested {total}");
    }
    event(
        "optimize_start",
        &json!({ "views": views.len(), "surfels": scene.len(), "start": start, "iterations": total, "config_hash": hash }),
    );

    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut run_cfg = cfg.optim;
    run_cfg.iterations = total - start;
    let opts = TrainOptions {
        render: RenderOptions::training(),
        start_iteration: start,
    };
    let started = std::time::Instant::now();
    let mut write_err = None;
    optim::optimize_with(&mut scene, &mut state, &views, &run_cfg, &cfg.loss, &opts, |l| {
        let line = serde_json::to_string(l).expect("log entry serializes");
        println!("{line}");
        if write_err.is_none() {
            use std::io::Write;
            write_err = writeln!(log_file, "{line}").err();
        }
        if l.iteration % 100 == 0 || l.iteration == total {
            progress(&format!(
                "iteration {}/{total}  loss {:.5}  surfels {}  {:.0}s",
                l.iteration,
                l.loss.total,
                l.surfels,
                started.elapsed().as_secs_f64()
            ));
        }
    })?;
    if let Some(e) = write_err {
        return Err(anyhow::Error::from(e).context(format!("writing {}", log_path.display())));
    }
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let meta = CheckpointMeta {
        class_names: ds.classes.names.clone(),
        config_hash: hash,
        iterations: total,
    };
    optim::write_checkpoint(&ckpt, &scene, &meta, Some(&state))?;
    event("checkpoint", &json!({ "path": ckpt, "iterations": total, "surfels": scene.len() }));
    Ok(())
}

/// Class table of the dataset when given, else default colors for the
/// checkpoint's class names.
fn class_table(dataset: Option<&Path>, names: &[String]) -> Result<ClassTable> {
    match dataset {
        Some(d) => {
            let t = ClassTable::read(&d.join("classes.json"))?;
            if t.names != names {
                bail!("classes.json of {} does not match the checkpoint's classes", d.display());
            }
            Ok(t)
        }
        None => Ok(ClassTable::new(names.to_vec())),
    }
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let (scene, meta) = optim::read_checkpoint(&a.checkpoint)?;
    let (name, camera) = match (&a.camera, &a.pose) {
        (Some(id), _) => {
            let root = a.dataset.as_deref().expect("clap requires --dataset");
            let cams: io::CamerasFile = io::read_json(&root.join("cameras.json"))?;
            let rec = cams
                .frames
                .iter()
                .find(|r| &r.id == id)
                .ok_or_else(|| anyhow!("no camera `{id}` in {}", root.display()))?;
            (id.clone(), rec.camera())
        }
        (None, Some(p)) => {
            let rec: CameraRecord = io::read_json(p)?;
            (rec.id.clone(), rec.camera())
        }
        (None, None) => unreachable!("clap requires --camera or --pose"),
    };
    let classes = class_table(a.dataset.as_deref(), &meta.class_names)?;
    let out = raster::render(&scene, &camera, &RenderOptions::default())?;
    let (w, h) = (out.width, out.height);
    let covered = |p: usize| out.alpha[p] >= raster::ALPHA_THRESHOLD;

    let color = out.color_image();
    let depth = Raster::from_vec(
        w,
        h,
        (0..w * h).map(|p| if covered(p) { out.depth[p] } else { f64::NAN }).collect(),
    )?;
    let normal = Raster::from_vec(
        w,
        h,
        (0..w * h)
            .map(|p| {
                let n = out.dominant_normal[p];
                if out.normal_valid[p] {
                    [(n.x + 1.0) / 2.0, (n.y + 1.0) / 2.0, (n.z + 1.0) / 2.0]
                } else {
                    [0.0; 3]
                }
            })
            .collect(),
    )?;
    let argmax = out.semantic_argmax();
    let semantic = Raster::from_vec(
        w,
        h,
        (0..w * h)
            .map(|p| if covered(p) && out.class_count > 0 { argmax[p] } else { EMPTY_LABEL })
            .collect(),
    )?;
    let path = |kind: &str| a.out.join(format!("{name}_{kind}.png"));
    io::write_rgb_png(&path("color"), &color)?;
    io::write_depth_png16(&path("depth"), &depth)?;
    io::write_rgb_png(&path("normal"), &normal)?;
    io::write_label_png(&path("semantic"), &semantic, Some(&classes.palette))?;
    event("render", &json!({ "camera": name, "out": a.out }));
    Ok(())
}

fn export_bev_cmd(a: ExportBevArgs) -> Result<()> {
    let cfg = PipelineConfig::load(a.config.as_deref())?;
    let (scene, meta) = optim::read_checkpoint(&a.checkpoint)?;
    let grid = match (&a.grid, a.bev_resolution) {
        (Some(p), _) => io::read_json::<BevMeta>(p)?.grid,
        (None, r) => {
            let res = r.unwrap_or(cfg.bev.resolution);
            if !(res > 0.0 && res.is_finite()) {
                bail!("--bev-resolution must be positive");
            }
            BevGrid::for_scene(&scene, res)
        }
    };
    let classes = class_table(a.dataset.as_deref(), &meta.class_names)?;
    let map = pipeline::export(&scene, &grid)?;
    map.write(&a.out, &classes.names, &classes.palette)?;
    event(
        "export_bev",
        &json!({ "out": a.out, "width": grid.width, "height": grid.height, "resolution": grid.resolution }),
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let pred = StoredBev::read(&a.pred).with_context(|| format!("reading prediction {}", a.pred.display()))?;
    let gt = StoredBev::read(&a.gt).with_context(|| format!("reading ground truth {}", a.gt.display()))?;
    let mut report = pipeline::evaluate_bev(&pred, &gt)?;
    if let (Some(ckpt), Some(root)) = (&a.checkpoint, &a.dataset) {
        let (scene, _) = optim::read_checkpoint(ckpt)?;
        let ds = io::load_dataset(root)?;
        report.heldout = Some(pipeline::heldout_psnr(&scene, &ds.frames, &ds.classes)?);
    }
    if let Some(p) = &a.out {
        io::write_json(p, &report)?;
    }
    event("eval", &report);
    Ok(())
}

fn check_grads_cmd(a: CheckGradsArgs) -> Result<()> {
    let cfg = PipelineConfig::load(a.config.as_deref())?;
    let mut opts = GradCheckOptions::default();
    if let Some(name) = &a.inject_fault {
        opts.inject_fault =
            Some(ParamClass::parse(name).ok_or_else(|| anyhow!("unknown parameter class `{name}`"))?);
    }
    let mut failures = Vec::new();
    for i in 0..a.cases {
        let seed = a.seed + i;
        let case = grad::random_check_case(seed);
        let report = grad::finite_diff_check(&case.scene, &case.camera, &case.target, &cfg.loss, &opts)?;
        for c in &report.classes {
            event(
                "grad_check",
                &json!({
                    "seed": seed,
                    "class": c.class.name(),
                    "compared": c.compared,
                    "max_rel_error": c.max_rel_error,
                    "worst": c.worst,
                    "passed": c.passed,
                }),
            );
        }
        for c in report.failing() {
            failures.push(format!(
                "seed {seed}: {} max relative error {:.3e} at {}",
                c.class.name(),
                c.max_rel_error,
                c.worst.as_deref().unwrap_or("?")
            ));
        }
    }
    if failures.is_empty() {
        progress(&format!("gradient check passed on {} scenes", a.cases));
        Ok(())
    } else {
        Err(CheckFailed(format!("gradient check failed:\n  {}", failures.join("\n  "))).into())
    }
}

fn validate_cmd(a: ValidateArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let ds = load(&cfg).map_err(|e| CheckFailed(format!("{e:#}")))?;
    let policy = cfg.policy(&ds.classes)?;
    for f in &ds.frames {
        roadsurf::occlusion::supervision_target(f, None, &policy)
            .map_err(|e| CheckFailed(e.to_string()))?;
    }
    let train = ds.frames.iter().filter(|f| f.split == Split::Train).count();
    if train == 0 {
        return Err(CheckFailed("dataset has no training frames".into()).into());
    }
    event(
        "validate",
        &json!({
            "dataset": ds.root,
            "frames": ds.frames.len(),
            "train": train,
            "test": ds.frames.len() - train,
            "classes": ds.classes.names,
            "ok": true,
        }),
    );
    Ok(())
}
