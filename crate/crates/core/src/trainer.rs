//! Two-stage optimization.
//!
//! The static stage fits the canonical field to frame 0 (input view plus
//! optional extra views) with direct RGB/mask losses and image-level score
//! distillation on random orbit views. The dynamic stage trains the whole
//! 4D field on the reference clip: direct losses on pixel patches of a
//! short frame window, total variation of the rendered displacement, and a
//! per-iteration random choice between video SDS and BSD.
//!
//! Every iteration draws from its own generator seeded by `(seed, stage,
//! iteration)`, so a run split at any iteration and resumed from a
//! checkpoint reproduces the uninterrupted loss history bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Config, PriorsConfig};
use crate::error::{Error, Result};
use crate::field::{DynamicField, FieldConfig, FieldGrads, FieldMode, MotionOptions};
use crate::io::Frame;
use crate::nn::{AdamConfig, AdamState};
use crate::priors::{
    augment, bsd_grad, flow_loss, mask_loss, rgb_loss, sds_grad, train_toy_denoiser, tv_loss, ConditioningTag,
    DirectPriorTargets, DistillGrad, FrameSeparable, NoiseSchedule, ScoreProvider, Tensor, ToyDenoiser,
};
use crate::render::{
    all_pixels, backward_rays, forward_rays, generate_rays, mix_seed, BatchSettings, Camera, RayGrad, RayOutput,
    RayQuery,
};

// ---------------------------------------------------------------------------
// Schedules

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Linear,
    Cosine,
}

/// A loss weight that decays from `initial` to `final` over the first
/// `window` fraction of a stage and stays at `final` afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSchedule {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_value: f64,
    pub profile: Profile,
    pub window: f64,
}

impl WeightSchedule {
    pub fn constant(value: f64) -> Self {
        Self {
            initial: value,
            final_value: value,
            profile: Profile::Linear,
            window: 1.0,
        }
    }

    pub fn decay(initial: f64, final_value: f64, profile: Profile, window: f64) -> Self {
        Self {
            initial,
            final_value,
            profile,
            window,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.initial.is_finite() && self.final_value.is_finite()) || self.initial < 0.0 || self.final_value < 0.0
        {
            return Err(Error::Schedule(format!("{name}: weights must be finite and >= 0")));
        }
        if self.final_value > self.initial {
            return Err(Error::Schedule(format!(
                "{name}: weight increases from {} to {}",
                self.initial, self.final_value
            )));
        }
        if !(0.0..=1.0).contains(&self.window) {
            return Err(Error::Schedule(format!("{name}: window {} outside [0, 1]", self.window)));
        }
        Ok(())
    }

    /// Weight at `iter` of a stage with `total` iterations. Endpoints are
    /// exact and the sequence is nonincreasing.
    pub fn at(&self, iter: usize, total: usize) -> f64 {
        let span = self.window * total as f64;
        if iter == 0 || total == 0 {
            return self.initial;
        }
        if span <= 0.0 || iter as f64 >= span {
            return self.final_value;
        }
        let s = iter as f64 / span;
        let (a, b) = (self.initial, self.final_value);
        let v = match self.profile {
            Profile::Linear => a + (b - a) * s,
            Profile::Cosine => b + (a - b) * 0.5 * (1.0 + (std::f64::consts::PI * s).cos()),
        };
        v.clamp(b, a)
    }
}

/// Probability of choosing video SDS over BSD, linear in stage progress.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbabilitySchedule {
    pub start: f64,
    pub end: f64,
}

impl ProbabilitySchedule {
    pub fn constant(p: f64) -> Self {
        Self { start: p, end: p }
    }

    pub fn at(&self, iter: usize, total: usize) -> f64 {
        if total == 0 || self.start == self.end {
            return self.start;
        }
        let s = (iter as f64 / total as f64).min(1.0);
        self.start + (self.end - self.start) * s
    }
}

/// Static-stage weights `(λ_2D, λ_3D, λ_RGB, λ_mask)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticWeights {
    pub sds_2d: f64,
    pub sds_3d: f64,
    pub rgb: f64,
    pub mask: f64,
}

impl Default for StaticWeights {
    fn default() -> Self {
        Self {
            sds_2d: 0.025,
            sds_3d: 1.0,
            rgb: 1000.0,
            mask: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub static_iterations: usize,
    pub dynamic_iterations: usize,
    pub learning_rate: f64,
    pub static_weights: StaticWeights,
    pub rgb: WeightSchedule,
    pub mask: WeightSchedule,
    pub flow: WeightSchedule,
    pub video_sds: f64,
    pub bsd: f64,
    pub tv: f64,
    pub sds_probability: ProbabilitySchedule,
    /// Learning-rate multiplier of the canonical parameters in the dynamic stage.
    pub static_lr_multiplier: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            static_iterations: 10_000,
            dynamic_iterations: 10_000,
            learning_rate: 1e-2,
            static_weights: StaticWeights::default(),
            rgb: WeightSchedule::decay(1000.0, 50.0, Profile::Linear, 0.6),
            mask: WeightSchedule::decay(100.0, 5.0, Profile::Linear, 0.6),
            flow: WeightSchedule::decay(10.0, 0.5, Profile::Linear, 0.6),
            video_sds: 0.02,
            bsd: 0.02,
            tv: 0.1,
            sds_probability: ProbabilitySchedule::constant(0.5),
            static_lr_multiplier: 0.1,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        self.rgb.validate("rgb")?;
        self.mask.validate("mask")?;
        self.flow.validate("flow")?;
        let w = &self.static_weights;
        let scalars = [
            ("static_weights.sds_2d", w.sds_2d),
            ("static_weights.sds_3d", w.sds_3d),
            ("static_weights.rgb", w.rgb),
            ("static_weights.mask", w.mask),
            ("video_sds", self.video_sds),
            ("bsd", self.bsd),
            ("tv", self.tv),
            ("static_lr_multiplier", self.static_lr_multiplier),
        ];
        for (name, v) in scalars {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Schedule(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let p = self.sds_probability;
        if !((0.0..=1.0).contains(&p.start) && (0.0..=1.0).contains(&p.end)) {
            return Err(Error::Schedule(format!("sds probability {p:?} outside [0, 1]")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Schedule(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        Ok(())
    }
}

/// Dynamic-stage weights at one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rgb: f64,
    pub mask: f64,
    pub flow: f64,
    pub tv: f64,
    pub video_sds: f64,
    pub bsd: f64,
    pub sds_probability: f64,
}

pub fn schedule_weights(spec: &ScheduleSpec, iter: usize) -> Result<LossWeights> {
    let n = spec.dynamic_iterations;
    if iter > n {
        return Err(Error::Schedule(format!("iteration {iter} beyond the {n}-iteration stage")));
    }
    Ok(LossWeights {
        rgb: spec.rgb.at(iter, n),
        mask: spec.mask.at(iter, n),
        flow: spec.flow.at(iter, n),
        tv: spec.tv,
        video_sds: spec.video_sds,
        bsd: spec.bsd,
        sds_probability: spec.sds_probability.at(iter, n),
    })
}

// ---------------------------------------------------------------------------
// State

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Static,
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillChoice {
    None,
    VideoSds,
    Bsd,
}

/// Per-iteration generator. The dynamic stage draws its SDS/BSD choice
/// first.
pub fn iteration_rng(seed: u64, stage: Stage, iteration: usize) -> ChaCha8Rng {
    let salt = match stage {
        Stage::Static => 0x5747_4943,
        Stage::Dynamic => 0x4459_4e41,
    };
    ChaCha8Rng::seed_from_u64(mix_seed(seed ^ salt, iteration as u64))
}

pub fn draw_choice<R: Rng + ?Sized>(rng: &mut R, p: f64) -> DistillChoice {
    if rng.gen::<f64>() < p {
        DistillChoice::VideoSds
    } else {
        DistillChoice::Bsd
    }
}

/// One row of the loss log. Unused terms are zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub total: f64,
    pub rgb: f64,
    pub mask: f64,
    pub flow: f64,
    pub tv: f64,
    pub sds_2d: f64,
    pub sds_3d: f64,
    pub video_sds: f64,
    pub bsd: f64,
    pub choice: DistillChoice,
    pub weight_rgb: f64,
    pub weight_mask: f64,
    pub weight_flow: f64,
}

impl LossRow {
    fn new(iteration: usize) -> Self {
        Self {
            iteration,
            total: 0.0,
            rgb: 0.0,
            mask: 0.0,
            flow: 0.0,
            tv: 0.0,
            sds_2d: 0.0,
            sds_3d: 0.0,
            video_sds: 0.0,
            bsd: 0.0,
            choice: DistillChoice::None,
            weight_rgb: 0.0,
            weight_mask: 0.0,
            weight_flow: 0.0,
        }
    }
}

pub const CSV_HEADER: &str =
    "iteration,total,rgb,mask,flow,tv,sds_2d,sds_3d,video_sds,bsd,choice,weight_rgb,weight_mask,weight_flow";

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let choice = match r.choice {
            DistillChoice::None => "none",
            DistillChoice::VideoSds => "video_sds",
            DistillChoice::Bsd => "bsd",
        };
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{},{},{}",
            r.iteration,
            r.total,
            r.rgb,
            r.mask,
            r.flow,
            r.tv,
            r.sds_2d,
            r.sds_3d,
            r.video_sds,
            r.bsd,
            choice,
            r.weight_rgb,
            r.weight_mask,
            r.weight_flow
        );
    }
    s
}

/// Parameter-gradient norms of the direct and distillation terms, measured
/// at the first iteration of a stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dominance {
    pub direct: f64,
    pub distill: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub stage: Stage,
    pub iteration: usize,
    pub seed: u64,
    pub history: Vec<LossRow>,
    pub dominance: Option<Dominance>,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    stage: Stage,
    iteration: usize,
    seed: u64,
    history: Vec<LossRow>,
    dominance: Option<Dominance>,
    field: FieldConfig,
    field_seed: u64,
}

impl TrainState {
    pub fn new(stage: Stage, seed: u64, field: &DynamicField, learning_rate: f64) -> Self {
        Self {
            stage,
            iteration: 0,
            seed,
            history: Vec::new(),
            dominance: None,
            adam: AdamState::new(
                AdamConfig {
                    learning_rate,
                    ..AdamConfig::default()
                },
                &field.store,
            ),
        }
    }
}

/// Everything needed to resume: field parameters, optimizer moments, loss
/// history and the lora denoiser of the dynamic stage.
pub fn save_checkpoint(
    path: &Path,
    field: &DynamicField,
    field_seed: u64,
    state: &TrainState,
    lora: Option<&ToyDenoiser>,
) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.put_params("field.", &field.store)?;
    ck.put_adam("adam.", &field.store, &state.adam)?;
    ck.put_json(
        "meta",
        &StateMeta {
            stage: state.stage,
            iteration: state.iteration,
            seed: state.seed,
            history: state.history.clone(),
            dominance: state.dominance,
            field: field.config.clone(),
            field_seed,
        },
    )?;
    if let Some(l) = lora {
        ck.put_json("lora.options", &l.options)?;
        ck.put_params("lora.", &l.store)?;
        ck.put_adam("lora.adam.", &l.store, &l.adam)?;
    }
    ck.write(path)
}

pub struct LoadedCheckpoint {
    pub field: DynamicField,
    pub field_seed: u64,
    pub state: TrainState,
    pub lora: Option<ToyDenoiser>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let ck = Checkpoint::read(path)?;
    let meta: StateMeta = ck.json("meta")?;
    let mut field = DynamicField::new(meta.field.clone(), meta.field_seed)?;
    ck.load_params("field.", &mut field.store)?;
    let adam = ck.load_adam("adam.", &field.store)?;
    let lora = if ck.get("lora.options").is_some() {
        let mut l = ToyDenoiser::new(ck.json("lora.options")?)?;
        ck.load_params("lora.", &mut l.store)?;
        l.adam = ck.load_adam("lora.adam.", &l.store)?;
        Some(l)
    } else {
        None
    };
    Ok(LoadedCheckpoint {
        field,
        field_seed: meta.field_seed,
        state: TrainState {
            stage: meta.stage,
            iteration: meta.iteration,
            seed: meta.seed,
            history: meta.history,
            dominance: meta.dominance,
            adam,
        },
        lora,
    })
}

/// Load field parameters from a checkpoint into `field`, ignoring parameters
/// the checkpoint does not have (e.g. a topology head absent from it) and
/// failing on parameters the field does not have.
pub fn load_field_params(path: &Path, field: &mut DynamicField) -> Result<()> {
    let ck = Checkpoint::read(path)?;
    let names: Vec<String> = field.store.entries().map(|(_, e)| e.name.clone()).collect();
    for name in names {
        let key = format!("field.{name}");
        if ck.get(&key).is_some() {
            field.store.replace_value(&name, ck.f64s(&key)?.to_vec())?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Providers

/// Score providers of the static stage: an unconditional image prior and a
/// view-conditioned one.
#[derive(Default)]
pub struct StaticProviders<'a> {
    pub image: Option<&'a dyn ScoreProvider>,
    pub view: Option<&'a dyn ScoreProvider>,
}

/// Score providers of the dynamic stage. The lora denoiser is fine-tuned
/// on renders during training and is part of the resumable state.
#[derive(Default)]
pub struct DynamicProviders<'a> {
    pub video: Option<&'a dyn ScoreProvider>,
    pub boot: Option<&'a dyn ScoreProvider>,
    pub lora: Option<ToyDenoiser>,
}

/// Train a toy denoiser on `frames`, padding with augmented copies up to
/// the 16 frames the trainer requires.
pub fn fit_prior(frames: &[(Frame, ConditioningTag)], priors: &PriorsConfig, seed: u64) -> Result<ToyDenoiser> {
    const MIN_FRAMES: usize = 16;
    if frames.is_empty() {
        return Err(Error::Config("no frames to train a prior on".into()));
    }
    let mut set = frames.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xA06));
    let mut k = 0;
    while set.len() < MIN_FRAMES {
        let (f, c) = &frames[k % frames.len()];
        set.push((augment(f, &priors.augmentation, &mut rng), c.clone()));
        k += 1;
    }
    let options = crate::priors::DenoiserOptions {
        seed,
        ..priors.denoiser
    };
    Ok(train_toy_denoiser(&set, &priors.noise_schedule()?, options)?.0)
}

/// Owned providers for a full run, trained on the reference data.
pub struct TrainedPriors {
    pub image: ToyDenoiser,
    pub view: Option<ToyDenoiser>,
    pub video: FrameSeparable<ToyDenoiser>,
}

impl TrainedPriors {
    /// The image prior learns the reference clip; the view prior learns the
    /// multi-view stills bucketed by azimuth (absent without stills).
    pub fn fit(clip: &DirectPriorTargets, views: Option<&DirectPriorTargets>, priors: &PriorsConfig, seed: u64) -> Result<Self> {
        let clip_frames: Vec<_> = clip.frames.iter().map(|f| (f.clone(), ConditioningTag::None)).collect();
        let image = fit_prior(&clip_frames, priors, mix_seed(seed, 1))?;
        let view = match views {
            Some(v) if !v.is_empty() => {
                let tagged: Vec<_> = v
                    .frames
                    .iter()
                    .zip(&v.cameras)
                    .map(|(f, c)| (f.clone(), ConditioningTag::for_camera(c, priors.denoiser.buckets)))
                    .collect();
                Some(fit_prior(&tagged, priors, mix_seed(seed, 2))?)
            }
            _ => None,
        };
        Ok(Self {
            video: FrameSeparable::new(image.clone()),
            image,
            view,
        })
    }

    pub fn static_providers(&self) -> StaticProviders<'_> {
        StaticProviders {
            image: Some(&self.image),
            view: self.view.as_ref().map(|v| v as &dyn ScoreProvider),
        }
    }

    pub fn dynamic_providers(&self) -> DynamicProviders<'_> {
        DynamicProviders {
            video: Some(&self.video),
            boot: Some(&self.image),
            lora: Some(self.image.clone()),
        }
    }
}

// ---------------------------------------------------------------------------
// Shared pieces

/// Random orbit camera for distillation: azimuth in [0, 360), elevation in
/// [−10, 45] degrees, radius in [1.8, 2.2].
pub fn random_orbit<R: Rng + ?Sized>(rng: &mut R, width: u32, height: u32) -> (f64, f64, f64, Camera) {
    let az = rng.gen_range(0.0..360.0);
    let el = rng.gen_range(-10.0..=45.0);
    let r = rng.gen_range(1.8..=2.2);
    (az, el, r, Camera::orbit(az, el, r, width, height))
}

fn background<R: Rng + ?Sized>(rng: &mut R, random: bool) -> [f64; 3] {
    if random {
        [rng.gen::<f64>(); 3]
    } else {
        [1.0; 3]
    }
}

/// Reference color recomposited from white onto `bg`.
fn recomposite(c: [f64; 3], alpha: f64, bg: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|k| c[k] - (1.0 - alpha) + (1.0 - alpha) * bg[k])
}

fn full_image_queries<R: Rng + ?Sized>(camera: &Camera, index: usize, time: f64, rng: &mut R) -> Vec<RayQuery> {
    generate_rays(camera, &all_pixels(camera))
        .into_iter()
        .map(|ray| RayQuery {
            ray,
            camera: index,
            time,
            background: [1.0; 3],
            seed: rng.gen(),
        })
        .collect()
}

fn rays_to_data(outs: &[RayOutput]) -> Vec<f64> {
    outs.iter().flat_map(|o| o.color).collect()
}

fn color_upstream(grad: &[f64], scale: f64) -> Vec<RayGrad> {
    grad.chunks_exact(3)
        .map(|g| RayGrad {
            color: [g[0] * scale, g[1] * scale, g[2] * scale],
            ..RayGrad::default()
        })
        .collect()
}

fn grad_norm(field: &DynamicField, grads: &FieldGrads) -> Result<f64> {
    let mut probe = field.clone();
    probe.store.zero_grads();
    probe.apply_grads(grads)?;
    Ok(probe.store.flat_grads().iter().map(|g| g * g).sum::<f64>().sqrt())
}

fn check_loss(row: &LossRow) -> Result<()> {
    if row.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss(format!("iteration {}: {row:?}", row.iteration)))
    }
}

struct Batch {
    cameras: Vec<Camera>,
    queries: Vec<RayQuery>,
    upstream: Vec<RayGrad>,
}

// ---------------------------------------------------------------------------
// Static stage

/// Run static iterations `state.iteration .. until` (capped at the stage
/// length). `targets` holds frame-0 images with their cameras.
pub fn run_static_stage(
    field: &mut DynamicField,
    targets: &DirectPriorTargets,
    providers: &StaticProviders<'_>,
    config: &Config,
    state: &mut TrainState,
    until: usize,
) -> Result<()> {
    if state.stage != Stage::Static {
        return Err(Error::Config("state belongs to the dynamic stage".into()));
    }
    targets.validate()?;
    if targets.is_empty() {
        return Err(Error::Config("static stage needs at least one target view".into()));
    }
    field.set_canonical_lr_scale(1.0);
    let spec = &config.schedule;
    let schedule = config.priors.noise_schedule()?;
    let end = until.min(spec.static_iterations);
    while state.iteration < end {
        let iter = state.iteration;
        let mut rng = iteration_rng(state.seed, Stage::Static, iter);
        let (row, direct, distill) = static_step(field, targets, providers, config, &schedule, iter, &mut rng)?;
        check_loss(&row)?;
        if iter == 0 {
            state.dominance = Some(Dominance {
                direct: grad_norm(field, &direct)?,
                distill: grad_norm(field, &distill)?,
            });
        }
        field.apply_grads(&direct)?;
        field.apply_grads(&distill)?;
        state.adam.step(&mut field.store)?;
        state.history.push(row);
        state.iteration += 1;
    }
    Ok(())
}

fn static_step(
    field: &DynamicField,
    targets: &DirectPriorTargets,
    providers: &StaticProviders<'_>,
    config: &Config,
    schedule: &NoiseSchedule,
    iter: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(LossRow, FieldGrads, FieldGrads)> {
    let w = config.schedule.static_weights;
    let settings = BatchSettings {
        samples: config.render.train_samples,
        jitter: true,
        motion: None,
    };
    let mut row = LossRow::new(iter);
    row.weight_rgb = w.rgb;
    row.weight_mask = w.mask;

    // Direct losses on random pixels of the target views.
    let n = config.render.rays_per_batch;
    let mut queries = Vec::with_capacity(n);
    let mut want_rgb = Vec::with_capacity(n);
    let mut want_alpha = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.gen_range(0..targets.len());
        let cam = &targets.cameras[k];
        let (px, py) = (rng.gen_range(0..cam.width), rng.gen_range(0..cam.height));
        let i = (py * cam.width + px) as usize;
        let bg = background(rng, config.render.random_background);
        let a = targets.masks[k].values[i];
        want_rgb.push(recomposite(targets.frames[k].rgb[i], a, bg));
        want_alpha.push(a);
        queries.push(RayQuery {
            ray: generate_rays(cam, &[(px, py)])[0],
            camera: k,
            time: targets.times[k],
            background: bg,
            seed: rng.gen(),
        });
    }
    let outs = forward_rays(field, FieldMode::Canonical, &targets.cameras, &queries, &settings)?;
    let rgb: Vec<[f64; 3]> = outs.iter().map(|o| o.color).collect();
    let alpha: Vec<f64> = outs.iter().map(|o| o.alpha).collect();
    let (l_rgb, g_rgb) = rgb_loss(&rgb, &want_rgb)?;
    let (l_mask, g_mask) = mask_loss(&alpha, &want_alpha)?;
    row.rgb = l_rgb;
    row.mask = l_mask;
    let upstream: Vec<RayGrad> = g_rgb
        .iter()
        .zip(&g_mask)
        .map(|(c, a)| RayGrad {
            color: c.map(|v| v * w.rgb),
            alpha: a * w.mask,
            displacement: [0.0; 2],
        })
        .collect();
    let direct = backward_rays(field, FieldMode::Canonical, &targets.cameras, &queries, &settings, &upstream)?;

    // Image-level distillation on one random orbit view.
    let image = providers.image.filter(|_| w.sds_2d > 0.0);
    let view = providers.view.filter(|_| w.sds_3d > 0.0);
    let mut distill = FieldGrads::new(field);
    if image.is_some() || view.is_some() {
        let p = &config.priors;
        let (_, _, _, cam) = random_orbit(rng, p.distill_width, p.distill_height);
        let cams = [cam];
        let q = full_image_queries(&cams[0], 0, 0.0, rng);
        let outs = forward_rays(field, FieldMode::Canonical, &cams, &q, &settings)?;
        let x = Tensor::image(p.distill_height as usize, p.distill_width as usize, rays_to_data(&outs))?;
        let range = p.timesteps.at(iter as f64 / config.schedule.static_iterations.max(1) as f64);
        let mut total = vec![0.0; x.data.len()];
        if let Some(prov) = image {
            let g = sds_grad(prov, schedule, &x, &ConditioningTag::None, range, rng)?;
            row.sds_2d = g.loss;
            total.iter_mut().zip(&g.grad).for_each(|(t, v)| *t += w.sds_2d * v);
        }
        if let Some(prov) = view {
            let cond = ConditioningTag::for_camera(&cams[0], p.denoiser.buckets);
            let g = sds_grad(prov, schedule, &x, &cond, range, rng)?;
            row.sds_3d = g.loss;
            total.iter_mut().zip(&g.grad).for_each(|(t, v)| *t += w.sds_3d * v);
        }
        distill = backward_rays(field, FieldMode::Canonical, &cams, &q, &settings, &color_upstream(&total, 1.0))?;
    }
    row.total = w.rgb * row.rgb + w.mask * row.mask + w.sds_2d * row.sds_2d + w.sds_3d * row.sds_3d;
    Ok((row, direct, distill))
}

// ---------------------------------------------------------------------------
// Dynamic stage

/// Run dynamic iterations `state.iteration .. until` (capped at the stage
/// length) against the reference clip.
pub fn run_dynamic_stage(
    field: &mut DynamicField,
    targets: &DirectPriorTargets,
    providers: &mut DynamicProviders<'_>,
    config: &Config,
    state: &mut TrainState,
    until: usize,
) -> Result<()> {
    if state.stage != Stage::Dynamic {
        return Err(Error::Config("state belongs to the static stage".into()));
    }
    targets.validate()?;
    if targets.len() < 2 {
        return Err(Error::Config("dynamic stage needs a clip of at least 2 frames".into()));
    }
    field.set_canonical_lr_scale(config.schedule.static_lr_multiplier);
    let schedule = config.priors.noise_schedule()?;
    let end = until.min(config.schedule.dynamic_iterations);
    while state.iteration < end {
        let iter = state.iteration;
        let mut rng = iteration_rng(state.seed, Stage::Dynamic, iter);
        let weights = schedule_weights(&config.schedule, iter)?;
        let choice = draw_choice(&mut rng, weights.sds_probability);
        let (mut row, direct) = dynamic_direct(field, targets, config, &weights, iter, &mut rng)?;
        let distill = dynamic_distill(field, providers, config, &schedule, &weights, choice, iter, &mut rng, &mut row)?;
        check_loss(&row)?;
        if iter == 0 {
            state.dominance = Some(Dominance {
                direct: grad_norm(field, &direct)?,
                distill: grad_norm(field, &distill)?,
            });
        }
        field.apply_grads(&direct)?;
        field.apply_grads(&distill)?;
        state.adam.step(&mut field.store)?;
        state.history.push(row);
        state.iteration += 1;
    }
    Ok(())
}

/// Uniform frame spacing of the clip.
fn clip_dt(targets: &DirectPriorTargets) -> Result<f64> {
    let dt = targets.times[1] - targets.times[0];
    if !(dt > 0.0) {
        return Err(Error::Config("clip frame times must increase".into()));
    }
    Ok(dt)
}

fn dynamic_direct(
    field: &DynamicField,
    targets: &DirectPriorTargets,
    config: &Config,
    weights: &LossWeights,
    iter: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(LossRow, FieldGrads)> {
    let mut row = LossRow::new(iter);
    row.weight_rgb = weights.rgb;
    row.weight_mask = weights.mask;
    row.weight_flow = weights.flow;
    let f = targets.len();
    let (width, height) = targets.resolution().expect("non-empty clip");
    let win = config.render.window_frames.min(f);
    let p = config.render.patch_size.min(width).min(height);
    let k0 = rng.gen_range(0..=f - win);
    let (x0, y0) = (rng.gen_range(0..=width - p), rng.gen_range(0..=height - p));
    let settings = BatchSettings {
        samples: config.render.train_samples,
        jitter: true,
        motion: Some(MotionOptions::new(clip_dt(targets)?, config.render.motion_iterations)),
    };

    let mut batch = Batch {
        cameras: targets.cameras.clone(),
        queries: Vec::new(),
        upstream: Vec::new(),
    };
    let mut want_rgb = Vec::new();
    let mut want_alpha = Vec::new();
    let mut pixels = Vec::with_capacity((p * p) as usize);
    for y in y0..y0 + p {
        for x in x0..x0 + p {
            pixels.push((x, y));
        }
    }
    for k in k0..k0 + win {
        let rays = generate_rays(&targets.cameras[k], &pixels);
        for (ray, &(x, y)) in rays.into_iter().zip(&pixels) {
            let i = (y * width + x) as usize;
            let bg = background(rng, config.render.random_background);
            let a = targets.masks[k].values[i];
            want_rgb.push(recomposite(targets.frames[k].rgb[i], a, bg));
            want_alpha.push(a);
            batch.queries.push(RayQuery {
                ray,
                camera: k,
                time: targets.times[k],
                background: bg,
                seed: rng.gen(),
            });
        }
    }
    let outs = forward_rays(field, FieldMode::Dynamic, &batch.cameras, &batch.queries, &settings)?;
    let pp = pixels.len();
    let rgb: Vec<[f64; 3]> = outs.iter().map(|o| o.color).collect();
    let alpha: Vec<f64> = outs.iter().map(|o| o.alpha).collect();
    let (l_rgb, g_rgb) = rgb_loss(&rgb, &want_rgb)?;
    let (l_mask, g_mask) = mask_loss(&alpha, &want_alpha)?;
    row.rgb = l_rgb;
    row.mask = l_mask;
    batch.upstream = g_rgb
        .iter()
        .zip(&g_mask)
        .map(|(c, a)| RayGrad {
            color: c.map(|v| v * weights.rgb),
            alpha: a * weights.mask,
            displacement: [0.0; 2],
        })
        .collect();

    // Flow on frames that have a successor in the reference.
    let flow_frames: Vec<usize> = (k0..k0 + win).filter(|&k| k < targets.flows.len()).collect();
    if !flow_frames.is_empty() && weights.flow > 0.0 {
        let mut pred = Vec::new();
        let mut want = Vec::new();
        let mut mask = Vec::new();
        for &k in &flow_frames {
            let base = (k - k0) * pp;
            for (j, &(x, y)) in pixels.iter().enumerate() {
                let i = (y * width + x) as usize;
                pred.push(outs[base + j].displacement);
                want.push(targets.flows[k].flow[i]);
                mask.push(targets.masks[k].values[i]);
            }
        }
        let (l, g) = flow_loss(&pred, &want, &mask)?;
        row.flow = l;
        for (n, &k) in flow_frames.iter().enumerate() {
            let base = (k - k0) * pp;
            for j in 0..pp {
                let d = &mut batch.upstream[base + j].displacement;
                d[0] += weights.flow * g[n * pp + j][0];
                d[1] += weights.flow * g[n * pp + j][1];
            }
        }
    }

    if win >= 2 && weights.tv > 0.0 {
        let maps: Vec<Vec<[f64; 2]>> = outs.chunks(pp).map(|c| c.iter().map(|o| o.displacement).collect()).collect();
        let (l, g) = tv_loss(&maps, p as usize, p as usize)?;
        row.tv = l;
        for (fk, gm) in g.iter().enumerate() {
            for (j, v) in gm.iter().enumerate() {
                let d = &mut batch.upstream[fk * pp + j].displacement;
                d[0] += weights.tv * v[0];
                d[1] += weights.tv * v[1];
            }
        }
    }
    row.total = weights.rgb * row.rgb + weights.mask * row.mask + weights.flow * row.flow + weights.tv * row.tv;
    let grads = backward_rays(
        field,
        FieldMode::Dynamic,
        &batch.cameras,
        &batch.queries,
        &settings,
        &batch.upstream,
    )?;
    Ok((row, grads))
}

#[allow(clippy::too_many_arguments)]
fn dynamic_distill(
    field: &DynamicField,
    providers: &mut DynamicProviders<'_>,
    config: &Config,
    schedule: &NoiseSchedule,
    weights: &LossWeights,
    choice: DistillChoice,
    iter: usize,
    rng: &mut ChaCha8Rng,
    row: &mut LossRow,
) -> Result<FieldGrads> {
    let p = &config.priors;
    let settings = BatchSettings {
        samples: config.render.train_samples,
        jitter: true,
        motion: None,
    };
    let progress = iter as f64 / config.schedule.dynamic_iterations.max(1) as f64;
    let range = p.timesteps.at(progress);
    let (h, w) = (p.distill_height as usize, p.distill_width as usize);
    match choice {
        DistillChoice::VideoSds => {
            row.choice = choice;
            let Some(prov) = providers.video.filter(|_| weights.video_sds > 0.0) else {
                return Ok(FieldGrads::new(field));
            };
            let (az, el, r, _) = random_orbit(rng, p.distill_width, p.distill_height);
            let n = p.video_frames;
            let cams: Vec<Camera> = (0..n)
                .map(|j| {
                    let s = j as f64 / (n - 1) as f64;
                    Camera::orbit(az + p.video_sweep * (s - 0.5), el, r, p.distill_width, p.distill_height)
                })
                .collect();
            let mut queries = Vec::with_capacity(n * h * w);
            for (j, cam) in cams.iter().enumerate() {
                queries.extend(full_image_queries(cam, j, j as f64 / (n - 1) as f64, rng));
            }
            let outs = forward_rays(field, FieldMode::Dynamic, &cams, &queries, &settings)?;
            let x = Tensor::video(n, h, w, rays_to_data(&outs))?;
            let g = sds_grad(prov, schedule, &x, &ConditioningTag::None, range, rng)?;
            row.video_sds = g.loss;
            row.total += weights.video_sds * g.loss;
            backward_rays(
                field,
                FieldMode::Dynamic,
                &cams,
                &queries,
                &settings,
                &color_upstream(&g.grad, weights.video_sds),
            )
        }
        DistillChoice::Bsd => {
            row.choice = choice;
            let (Some(boot), Some(lora)) = (providers.boot, providers.lora.as_mut()) else {
                return Ok(FieldGrads::new(field));
            };
            if weights.bsd <= 0.0 {
                return Ok(FieldGrads::new(field));
            }
            let (_, _, _, cam) = random_orbit(rng, p.distill_width, p.distill_height);
            let t = rng.gen::<f64>();
            let cams = [cam];
            let queries = full_image_queries(&cams[0], 0, t, rng);
            let outs = forward_rays(field, FieldMode::Dynamic, &cams, &queries, &settings)?;
            let x = Tensor::image(h, w, rays_to_data(&outs))?;
            let g: DistillGrad = bsd_grad(boot, &*lora, schedule, &x, &ConditioningTag::None, range, rng)?;
            row.bsd = g.loss;
            row.total += weights.bsd * g.loss;
            if iter % p.lora_every == 0 {
                let frame = x.to_frame(0);
                lora.train_step(&[(&frame, ConditioningTag::None)], schedule, rng)?;
            }
            backward_rays(
                field,
                FieldMode::Dynamic,
                &cams,
                &queries,
                &settings,
                &color_upstream(&g.grad, weights.bsd),
            )
        }
        DistillChoice::None => Ok(FieldGrads::new(field)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_midpoint_and_endpoints() {
        let s = WeightSchedule::decay(100.0, 1.0, Profile::Linear, 1.0);
        assert_eq!(s.at(0, 100), 100.0);
        assert_eq!(s.at(50, 100), 50.5);
        assert_eq!(s.at(100, 100), 1.0);
        let c = WeightSchedule::decay(1000.0, 50.0, Profile::Cosine, 0.6);
        assert_eq!(c.at(0, 1000), 1000.0);
        assert_eq!(c.at(600, 1000), 50.0);
        assert_eq!(c.at(1000, 1000), 50.0);
    }

    #[test]
    fn dense_sweep_is_nonincreasing() {
        for profile in [Profile::Linear, Profile::Cosine] {
            for window in [0.0, 0.3, 0.6, 1.0] {
                let s = WeightSchedule::decay(1000.0, 0.37, profile, window);
                let total = 9973;
                let mut prev = f64::INFINITY;
                for i in 0..=total {
                    let v = s.at(i, total);
                    assert!(v <= prev, "{profile:?} window {window} rises at {i}");
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn increasing_schedule_is_rejected() {
        let spec = ScheduleSpec {
            flow: WeightSchedule::decay(1.0, 2.0, Profile::Linear, 0.5),
            ..ScheduleSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Schedule(_))));
        assert!(schedule_weights(&ScheduleSpec::default(), 10_001).is_err());
    }

    #[test]
    fn choice_frequency_tracks_p() {
        let n = 10_000;
        let count = (0..n)
            .filter(|&i| draw_choice(&mut iteration_rng(7, Stage::Dynamic, i), 0.6) == DistillChoice::VideoSds)
            .count();
        assert!((count as f64 / n as f64 - 0.6).abs() < 0.05);
        assert_eq!(draw_choice(&mut iteration_rng(1, Stage::Dynamic, 3), 1.0), DistillChoice::VideoSds);
        assert_eq!(draw_choice(&mut iteration_rng(1, Stage::Dynamic, 3), 0.0), DistillChoice::Bsd);
    }

    #[test]
    fn csv_has_header_and_one_row_per_iteration() {
        let rows: Vec<LossRow> = (0..3).map(LossRow::new).collect();
        let csv = loss_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1].split(',').count(), CSV_HEADER.split(',').count());
    }
}
