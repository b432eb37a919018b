//! Command-line front end: argument parsing and the commands behind `h4d`.
//!
//! Exit codes: 0 on success, 1 for validation errors (bad arguments,
//! config, missing inputs), 2 for numerical failures (NaN, divergence).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::field::DynamicField;
use crate::gradcheck;
use crate::io::{read_dataset, write_dataset, write_png_rgb, Dataset, DatasetManifest, Frame};
use crate::metrics::{evaluate, psnr};
use crate::priors::DirectPriorTargets;
use crate::render::{render_image, Camera, FieldView, RenderSettings};
use crate::run::{content_hash, RunLayout, RunManifest};
use crate::scenes::{bake_reference, bake_views, ring_cameras, SceneVariant};
use crate::trainer::{
    load_checkpoint, load_field_params, loss_csv, run_dynamic_stage, run_static_stage, save_checkpoint, DynamicProviders,
    Stage, TrainState, TrainedPriors,
};

#[derive(Debug, Parser)]
#[command(name = "h4d", version, about = "Hybrid-prior 4D radiance field optimization")]
pub struct Cli {
    /// TOML config file; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set schedule.static_iterations=200`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run name under `output.runs_dir` (shorthand for `--set output.name=...`).
    #[arg(long, global = true)]
    pub name: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic reference datasets.
    #[command(subcommand)]
    Scene(SceneCommand),
    /// Train a stage.
    #[command(subcommand)]
    Fit(FitCommand),
    /// Render a checkpoint along an orbit.
    Render(RenderArgs),
    /// Per-frame PSNR, mask IoU and flow EPE of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable op.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Subcommand)]
pub enum SceneCommand {
    /// Bake an analytic scene to frames, masks, flow and cameras.
    Gen(SceneGenArgs),
}

#[derive(Debug, Args)]
pub struct SceneGenArgs {
    #[arg(long)]
    pub variant: Option<SceneVariant>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    /// Multi-view stills of frame 0.
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum FitCommand {
    Static(FitStaticArgs),
    Dynamic(FitDynamicArgs),
}

#[derive(Debug, Args)]
pub struct FitStaticArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from a checkpoint of this stage.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this iteration (the run can be resumed later).
    #[arg(long)]
    pub until: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitDynamicArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Final checkpoint of the static stage.
    #[arg(long = "static")]
    pub static_checkpoint: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub until: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Azimuth swept over the trajectory, degrees.
    #[arg(long, default_value_t = 360.0)]
    pub orbit: f64,
    #[arg(long, default_value_t = 24)]
    pub frames: usize,
    #[arg(long, default_value_t = 10.0)]
    pub elevation: f64,
    #[arg(long, default_value_t = 2.0)]
    pub radius: f64,
    /// Fixed time; by default time runs from 0 to 1 along the trajectory.
    #[arg(long)]
    pub time: Option<f64>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    /// Output directory; defaults to the run's `previews/orbit`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics file; defaults to the run's `metrics.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parse `args`, run the command and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}

/// 0 on success, 2 for numerical failures, 1 for everything else.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_numerical() => 2,
        Err(_) => 1,
    }
}

/// Cap the worker pool at `H4D_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("H4D_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("H4D_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(Error::Config("H4D_THREADS must be >= 1".into()));
        }
        // A second initialization in the same process is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut overrides = cli.overrides.clone();
    if let Some(name) = &cli.name {
        overrides.push(format!("output.name=\"{name}\""));
    }
    let config = Config::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Scene(SceneCommand::Gen(a)) => cmd_scene_gen(&config, &a).map(|_| ()),
        Command::Fit(FitCommand::Static(a)) => cmd_fit_static(&config, &a).map(|_| ()),
        Command::Fit(FitCommand::Dynamic(a)) => cmd_fit_dynamic(&config, &a).map(|_| ()),
        Command::Render(a) => cmd_render(&config, &a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&config, &a).map(|_| ()),
        Command::GradCheck(a) => cmd_grad_check(&config, &a),
    }
}

pub fn cmd_scene_gen(config: &Config, args: &SceneGenArgs) -> Result<Dataset> {
    let mut scene = config.scene.clone();
    scene.variant = args.variant.unwrap_or(scene.variant);
    scene.frames = args.frames.unwrap_or(scene.frames);
    scene.width = args.width.unwrap_or(scene.width);
    scene.height = args.height.unwrap_or(scene.height);
    scene.views = args.views.unwrap_or(scene.views);
    scene.seed = args.seed.unwrap_or(scene.seed);
    if scene.frames < 2 {
        return Err(Error::Config("--frames must be >= 2".into()));
    }
    let spec = scene.spec();
    let clip = bake_reference(&spec, &scene.input_camera(), scene.frames)?;
    let views = if scene.views > 0 {
        let cams = ring_cameras(scene.views, scene.view_elevation, scene.radius, scene.width, scene.height, scene.azimuth);
        Some(bake_views(&spec, &cams, 0.0)?)
    } else {
        None
    };
    let data = Dataset {
        manifest: DatasetManifest {
            variant: scene.variant.to_string(),
            frames: scene.frames,
            width: scene.width,
            height: scene.height,
            views: scene.views,
            seed: scene.seed,
            topology_change: spec.topology_change(),
            scene: serde_json::to_value(&spec)?,
        },
        clip,
        views,
    };
    write_dataset(&args.out, &data)?;
    println!(
        "wrote {} frames of {} ({}x{}) to {}",
        scene.frames,
        scene.variant,
        scene.width,
        scene.height,
        args.out.display()
    );
    Ok(data)
}

/// Frame 0 at the input view plus any multi-view stills.
pub fn static_targets(data: &Dataset) -> DirectPriorTargets {
    let c = &data.clip;
    let mut t = DirectPriorTargets {
        cameras: vec![c.cameras[0].clone()],
        times: vec![c.times[0]],
        frames: vec![c.frames[0].clone()],
        masks: vec![c.masks[0].clone()],
        flows: Vec::new(),
    };
    if let Some(v) = &data.views {
        t.cameras.extend(v.cameras.iter().cloned());
        t.times.extend(v.times.iter().copied());
        t.frames.extend(v.frames.iter().cloned());
        t.masks.extend(v.masks.iter().cloned());
    }
    t
}

fn preview(field: &DynamicField, camera: &Camera, t: f64, config: &Config, path: &Path) -> Result<()> {
    let settings = RenderSettings {
        samples: config.render.eval_samples,
        ..RenderSettings::evaluation()
    };
    let out = render_image(&FieldView::dynamic(field), camera, t, &settings, 0)?;
    write_png_rgb(
        path,
        &Frame {
            width: out.width,
            height: out.height,
            rgb: out.rgb,
        },
    )
}

struct Segments {
    total: usize,
    stop: usize,
    checkpoint_every: usize,
    preview_every: usize,
}

impl Segments {
    /// Next stopping point after `at`: a checkpoint or preview boundary, or the end.
    fn next(&self, at: usize) -> usize {
        let round = |every: usize| if every == 0 { usize::MAX } else { (at / every + 1) * every };
        round(self.checkpoint_every).min(round(self.preview_every)).min(self.stop).min(self.total)
    }
}

fn stage_label(stage: Stage) -> &'static str {
    match stage {
        Stage::Static => "static",
        Stage::Dynamic => "dynamic",
    }
}

/// Drive one stage in segments, checkpointing and previewing between them.
/// A numerical failure dumps the state to `checkpoints/failed_<stage>.h4dc`.
#[allow(clippy::too_many_arguments)]
fn drive<F>(
    layout: &RunLayout,
    config: &Config,
    field: &mut DynamicField,
    state: &mut TrainState,
    lora: impl Fn(&mut F) -> Option<&crate::priors::ToyDenoiser>,
    ctx: &mut F,
    total: usize,
    stop: usize,
    preview_camera: &Camera,
    mut step: impl FnMut(&mut DynamicField, &mut TrainState, &mut F, usize) -> Result<()>,
) -> Result<()> {
    let label = stage_label(state.stage);
    let seg = Segments {
        total,
        stop,
        checkpoint_every: config.output.checkpoint_every,
        preview_every: config.output.preview_every,
    };
    while state.iteration < seg.stop.min(total) {
        let until = seg.next(state.iteration);
        if let Err(e) = step(field, state, ctx, until) {
            if e.is_numerical() {
                let dump = layout.checkpoint(&format!("failed_{label}"));
                save_checkpoint(&dump, field, config.scene.seed, state, lora(ctx))?;
                eprintln!("state dumped to {}", dump.display());
            }
            std::fs::write(layout.loss_csv(label), loss_csv(&state.history))?;
            return Err(e);
        }
        let it = state.iteration;
        if config.output.checkpoint_every > 0 && it % config.output.checkpoint_every == 0 {
            save_checkpoint(&layout.checkpoint(&format!("{label}_{it:06}")), field, config.scene.seed, state, lora(ctx))?;
        }
        if config.output.preview_every > 0 && it % config.output.preview_every == 0 {
            let t = if state.stage == Stage::Static { 0.0 } else { 0.5 };
            preview(field, preview_camera, t, config, &layout.previews().join(format!("{label}_{it:06}.png")))?;
        }
        if let Some(row) = state.history.last() {
            println!("{label} {:6}/{total}  loss {:.4e}", row.iteration + 1, row.total);
        }
    }
    save_checkpoint(&layout.checkpoint(label), field, config.scene.seed, state, lora(ctx))?;
    std::fs::write(layout.loss_csv(label), loss_csv(&state.history))?;
    Ok(())
}

pub fn cmd_fit_static(config: &Config, args: &FitStaticArgs) -> Result<PathBuf> {
    let data = read_dataset(&args.data)?;
    let layout = RunLayout::for_config(config);
    layout.create(config)?;
    let targets = static_targets(&data);
    let w = config.schedule.static_weights;
    let priors = if w.sds_2d > 0.0 || w.sds_3d > 0.0 {
        Some(TrainedPriors::fit(&data.clip, data.views.as_ref(), &config.priors, config.scene.seed)?)
    } else {
        None
    };
    let providers = priors.as_ref().map(|p| p.static_providers()).unwrap_or_default();
    let (mut field, mut state) = match &args.resume {
        Some(path) => {
            let l = load_checkpoint(path)?;
            if l.state.stage != Stage::Static {
                return Err(Error::Config(format!("{} is not a static-stage checkpoint", path.display())));
            }
            (l.field, l.state)
        }
        None => {
            let field = DynamicField::new(config.grids.clone(), config.scene.seed)?;
            let state = TrainState::new(Stage::Static, config.scene.seed, &field, config.schedule.learning_rate);
            (field, state)
        }
    };
    let total = config.schedule.static_iterations;
    let stop = args.until.unwrap_or(total);
    drive(
        &layout,
        config,
        &mut field,
        &mut state,
        |_: &mut ()| None,
        &mut (),
        total,
        stop,
        &targets.cameras[0],
        |f, s, _, until| run_static_stage(f, &targets, &providers, config, s, until),
    )?;

    let view = FieldView::canonical(&field);
    let settings = RenderSettings {
        samples: config.render.eval_samples,
        ..RenderSettings::evaluation()
    };
    let mut scores = Vec::new();
    for (k, cam) in targets.cameras.iter().enumerate() {
        let out = render_image(&view, cam, 0.0, &settings, 0)?;
        scores.push(psnr(&out.rgb, &targets.frames[k].rgb)?);
    }
    let metrics = json!({
        "stage": "static",
        "iterations": state.iteration,
        "psnr": scores,
        "final_loss": state.history.last().map(|r| r.total),
        "dominance": state.dominance,
    });
    std::fs::write(layout.metrics(), serde_json::to_string_pretty(&metrics)?)?;
    write_manifest(&layout, config, "fit static", &[&args.data], &["checkpoints/static.h4dc", "loss_static.csv"])?;
    Ok(layout.checkpoint("static"))
}

pub fn cmd_fit_dynamic(config: &Config, args: &FitDynamicArgs) -> Result<PathBuf> {
    let data = read_dataset(&args.data)?;
    let layout = RunLayout::for_config(config);
    layout.create(config)?;
    let s = &config.schedule;
    let priors = if s.video_sds > 0.0 || s.bsd > 0.0 {
        Some(TrainedPriors::fit(&data.clip, data.views.as_ref(), &config.priors, config.scene.seed)?)
    } else {
        None
    };
    let mut providers = priors.as_ref().map(|p| p.dynamic_providers()).unwrap_or_default();
    let (mut field, mut state) = match &args.resume {
        Some(path) => {
            let l = load_checkpoint(path)?;
            if l.state.stage != Stage::Dynamic {
                return Err(Error::Config(format!("{} is not a dynamic-stage checkpoint", path.display())));
            }
            if l.lora.is_some() {
                providers.lora = l.lora;
            }
            (l.field, l.state)
        }
        None => {
            if !args.static_checkpoint.exists() {
                return Err(Error::Missing(args.static_checkpoint.clone()));
            }
            let mut field = DynamicField::new(config.grids.clone(), config.scene.seed)?;
            load_field_params(&args.static_checkpoint, &mut field)?;
            let state = TrainState::new(Stage::Dynamic, config.scene.seed, &field, s.learning_rate);
            (field, state)
        }
    };
    let total = s.dynamic_iterations;
    let stop = args.until.unwrap_or(total);
    let clip = &data.clip;
    drive(
        &layout,
        config,
        &mut field,
        &mut state,
        |p: &mut DynamicProviders<'_>| p.lora.as_ref(),
        &mut providers,
        total,
        stop,
        &clip.cameras[0],
        |f, st, p, until| run_dynamic_stage(f, clip, p, config, st, until),
    )?;

    let report = evaluate(&field, clip, config.render.eval_samples)?;
    let metrics = json!({
        "stage": "dynamic",
        "iterations": state.iteration,
        "psnr": report.psnr,
        "iou": report.iou,
        "epe": report.epe,
        "means": report.means,
        "dominance": state.dominance,
    });
    std::fs::write(layout.metrics(), serde_json::to_string_pretty(&metrics)?)?;
    write_manifest(
        &layout,
        config,
        "fit dynamic",
        &[&args.data, &args.static_checkpoint],
        &["checkpoints/dynamic.h4dc", "loss_dynamic.csv"],
    )?;
    Ok(layout.checkpoint("dynamic"))
}

pub fn cmd_render(config: &Config, args: &RenderArgs) -> Result<Vec<PathBuf>> {
    if args.frames == 0 {
        return Err(Error::Config("--frames must be >= 1".into()));
    }
    let field = load_checkpoint(&args.checkpoint)?.field;
    let layout = RunLayout::for_config(config);
    let out = args.out.clone().unwrap_or_else(|| layout.previews().join("orbit"));
    let (w, h) = (args.width.unwrap_or(config.scene.width), args.height.unwrap_or(config.scene.height));
    let settings = RenderSettings {
        samples: config.render.eval_samples,
        ..RenderSettings::evaluation()
    };
    let n = args.frames;
    let mut paths = Vec::with_capacity(n);
    for j in 0..n {
        let s = j as f64 / n as f64;
        let cam = Camera::orbit(config.scene.azimuth + args.orbit * s, args.elevation, args.radius, w, h);
        let t = args.time.unwrap_or(if n > 1 { j as f64 / (n - 1) as f64 } else { 0.0 });
        let r = render_image(&FieldView::dynamic(&field), &cam, t, &settings, 0)?;
        let path = out.join(format!("frame_{j:04}.png"));
        write_png_rgb(
            &path,
            &Frame {
                width: r.width,
                height: r.height,
                rgb: r.rgb,
            },
        )?;
        paths.push(path);
    }
    println!("rendered {n} frames to {}", out.display());
    Ok(paths)
}

pub fn cmd_eval(config: &Config, args: &EvalArgs) -> Result<crate::metrics::EvalReport> {
    let field = load_checkpoint(&args.checkpoint)?.field;
    let data = read_dataset(&args.data)?;
    let report = evaluate(&field, &data.clip, config.render.eval_samples)?;
    let path = args.out.clone().unwrap_or_else(|| RunLayout::for_config(config).metrics());
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "PSNR {:.2} dB  IoU {:.4}  EPE {:.4} px  -> {}",
        report.means.psnr,
        report.means.iou,
        report.means.epe,
        path.display()
    );
    Ok(report)
}

pub fn cmd_grad_check(config: &Config, args: &GradCheckArgs) -> Result<()> {
    let report = gradcheck::run_all(&config.grids, args.seed)?;
    for c in &report.checks {
        println!(
            "{:<28} {:>4} coords  rel.err {:.3e}  {}",
            c.op,
            c.coordinates,
            c.relative_error,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    println!("max rel.err {:.3e} (tolerance {:.0e})", report.max_error(), report.tolerance);
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "gradient check failed: max relative error {:.3e}",
            report.max_error()
        )))
    }
}

fn write_manifest(layout: &RunLayout, config: &Config, command: &str, inputs: &[&Path], outputs: &[&str]) -> Result<()> {
    RunManifest {
        command: command.into(),
        seed: config.scene.seed,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        input_hash: content_hash(inputs)?,
        config: config.clone(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    }
    .write(layout)
}
