//! Loss machinery: direct reference-video losses, the displacement TV
//! regularizer, score distillation (SDS) and bootstrapped score
//! distillation (BSD) gradients, and small score providers.
//!
//! Renderings are handled in pixel space: the "latent" of a rendering is the
//! rendering itself. A [`Tensor`] is an image `(H, W, 3)` or a video
//! `(F, H, W, 3)` stored flat in row-major order.
//!
//! SDS uses the reconstruction form: noise `X` to `X_t`, let the provider
//! estimate `X̂₀`, and return the gradient of `‖X − X̂₀‖²` with `X̂₀` held
//! constant, `2(X − X̂₀)`. Substituting `X̂₀ = (X_t − √(1−ᾱ) ε̂)/√ᾱ` gives
//! `2√(1−ᾱ)/√ᾱ · (ε̂ − ε)`, the classic SDS direction up to a time weight.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{FlowField, Frame, Mask};
use crate::nn::{Activation, AdamConfig, AdamState, FinalInit, GradBuffer, Mlp, MlpConfig, ParamStore};
use crate::render::{Camera, RenderOutput};

/// Reference clip at the input view: frames, masks and forward flow.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectPriorTargets {
    pub cameras: Vec<Camera>,
    pub times: Vec<f64>,
    pub frames: Vec<Frame>,
    pub masks: Vec<Mask>,
    /// `flows[k]` maps frame `k` to frame `k + 1`; empty when unavailable.
    pub flows: Vec<FlowField>,
}

impl DirectPriorTargets {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> Option<(u32, u32)> {
        self.frames.first().map(|f| (f.width, f.height))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if self.masks.len() != n || self.cameras.len() != n || self.times.len() != n {
            return Err(Error::Shape(format!(
                "{} frames, {} masks, {} cameras, {} times",
                n,
                self.masks.len(),
                self.cameras.len(),
                self.times.len()
            )));
        }
        if !self.flows.is_empty() && self.flows.len() + 1 != n {
            return Err(Error::Shape(format!("{} flow maps for {n} frames", self.flows.len())));
        }
        let Some((w, h)) = self.resolution() else {
            return Ok(());
        };
        let sizes = self
            .frames
            .iter()
            .map(|f| (f.width, f.height, f.rgb.len()))
            .chain(self.masks.iter().map(|m| (m.width, m.height, m.values.len())))
            .chain(self.flows.iter().map(|f| (f.width, f.height, f.flow.len())))
            .chain(self.cameras.iter().map(|c| (c.width, c.height, c.pixel_count())));
        for (fw, fh, len) in sizes {
            if (fw, fh) != (w, h) || len != w as usize * h as usize {
                return Err(Error::Shape(format!(
                    "mixed resolutions: {w}x{h} vs {fw}x{fh} ({len} values)"
                )));
            }
        }
        Ok(())
    }
}

/// DDPM-style cumulative signal levels `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// Linear `β` from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "noise schedule needs steps >= 2 and 0 < beta_start <= beta_end < 1 (got {steps}, {beta_start}, {beta_end})"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..steps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t.min(self.steps())]
    }

    pub fn level(&self, t: usize) -> NoiseLevel {
        NoiseLevel {
            t,
            steps: self.steps(),
            alpha_bar: self.alpha_bar(t),
        }
    }

    /// Uniform integer timestep in `[round(lo·T), round(hi·T)]`, at least 1.
    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R, lo: f64, hi: f64) -> usize {
        let steps = self.steps() as f64;
        let a = ((lo * steps).round() as usize).max(1);
        let b = ((hi * steps).round() as usize).clamp(a, self.steps());
        rng.gen_range(a..=b)
    }
}

/// A timestep with its signal level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevel {
    pub t: usize,
    pub steps: usize,
    pub alpha_bar: f64,
}

impl NoiseLevel {
    /// Forward process `√ᾱ x + √(1−ᾱ) ε`.
    pub fn noise(&self, x: &[f64], eps: &[f64]) -> Vec<f64> {
        let (a, s) = (self.alpha_bar.sqrt(), (1.0 - self.alpha_bar).sqrt());
        x.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
    }

    /// Signal-to-noise ratio `ᾱ / (1 − ᾱ)`.
    pub fn snr(&self) -> f64 {
        self.alpha_bar / (1.0 - self.alpha_bar)
    }
}

/// Image `(H, W, 3)` when `frames` is `None`, otherwise video `(F, H, W, 3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub frames: Option<usize>,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn image(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::checked(None, height, width, data)
    }

    pub fn video(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::checked(Some(frames), height, width, data)
    }

    fn checked(frames: Option<usize>, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let t = Self {
            frames,
            height,
            width,
            data,
        };
        if t.data.len() != t.frame_count() * t.frame_len() {
            return Err(Error::Shape(format!(
                "tensor of shape {:?} cannot hold {} values",
                t.shape(),
                t.data.len()
            )));
        }
        Ok(t)
    }

    pub fn from_frame(frame: &Frame) -> Self {
        Self {
            frames: None,
            height: frame.height as usize,
            width: frame.width as usize,
            data: frame.rgb.iter().flatten().copied().collect(),
        }
    }

    pub fn to_frame(&self, k: usize) -> Frame {
        Frame {
            width: self.width as u32,
            height: self.height as u32,
            rgb: self.frame(k).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self.frames {
            Some(f) => vec![f, self.height, self.width, 3],
            None => vec![self.height, self.width, 3],
        }
    }

    pub fn is_video(&self) -> bool {
        self.frames.is_some()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.unwrap_or(1)
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[k * n..(k + 1) * n]
    }

    fn with_data(&self, data: Vec<f64>) -> Self {
        Self { data, ..self.clone() }
    }
}

/// Stand-in for a text prompt: a label or a view bucket.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConditioningTag {
    #[default]
    None,
    Label(String),
    ViewBucket(usize),
}

impl ConditioningTag {
    /// Bucket `0..buckets` this tag maps to.
    pub fn bucket(&self, buckets: usize) -> usize {
        let buckets = buckets.max(1);
        match self {
            ConditioningTag::None => 0,
            ConditioningTag::ViewBucket(k) => k % buckets,
            ConditioningTag::Label(s) => {
                // FNV-1a, stable across runs and platforms
                let h = s
                    .bytes()
                    .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
                (h % buckets as u64) as usize
            }
        }
    }

    /// View bucket of a camera by azimuth around the +y axis.
    pub fn for_camera(camera: &Camera, buckets: usize) -> Self {
        let p = camera.position();
        let az = p[0].atan2(p[2]).rem_euclid(std::f64::consts::TAU);
        let k = (az / std::f64::consts::TAU * buckets as f64).floor() as usize;
        ConditioningTag::ViewBucket(k.min(buckets.saturating_sub(1)))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Capabilities {
    pub image: bool,
    pub video: bool,
    pub view_conditioned: bool,
}

/// A denoiser `ε̂(X_t, t, cond)`.
pub trait ScoreProvider: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    fn predict_noise(&self, x_t: &Tensor, level: NoiseLevel, cond: &ConditioningTag) -> Result<Vec<f64>>;

    /// Clean-sample estimate `X̂₀ = (X_t − √(1−ᾱ) ε̂)/√ᾱ`.
    fn predict_x0(&self, x_t: &Tensor, level: NoiseLevel, cond: &ConditioningTag) -> Result<Vec<f64>> {
        let eps = self.predict_noise(x_t, level, cond)?;
        let (a, s) = (level.alpha_bar.sqrt(), (1.0 - level.alpha_bar).sqrt());
        Ok(x_t.data.iter().zip(&eps).map(|(x, e)| (x - s * e) / a).collect())
    }
}

fn noise_from_x0(x_t: &[f64], x0: &[f64], level: NoiseLevel) -> Vec<f64> {
    let (a, s) = (level.alpha_bar.sqrt(), (1.0 - level.alpha_bar).sqrt());
    x_t.iter().zip(x0).map(|(x, m)| (x - a * m) / s).collect()
}

/// Denoiser of a distribution concentrated on one sample `μ`:
/// `ε̂ = (X_t − √ᾱ μ)/√(1−ᾱ)`, so `X̂₀ = μ`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMassProvider {
    pub target: Vec<f64>,
}

impl PointMassProvider {
    pub fn new(target: Vec<f64>) -> Self {
        Self { target }
    }

    fn check(&self, x_t: &Tensor) -> Result<()> {
        if x_t.data.len() != self.target.len() {
            return Err(Error::Shape(format!(
                "point-mass target has {} values, input has {}",
                self.target.len(),
                x_t.data.len()
            )));
        }
        Ok(())
    }
}

impl ScoreProvider for PointMassProvider {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            image: true,
            video: true,
            view_conditioned: false,
        }
    }

    fn predict_noise(&self, x_t: &Tensor, level: NoiseLevel, _: &ConditioningTag) -> Result<Vec<f64>> {
        self.check(x_t)?;
        Ok(noise_from_x0(&x_t.data, &self.target, level))
    }

    fn predict_x0(&self, x_t: &Tensor, _: NoiseLevel, _: &ConditioningTag) -> Result<Vec<f64>> {
        self.check(x_t)?;
        Ok(self.target.clone())
    }
}

/// A perfect denoiser for the sample currently being noised: it knows the
/// clean `X`, so `ε̂` is the true noise and `X̂₀ = X`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleProvider {
    pub clean: Vec<f64>,
}

impl ScoreProvider for OracleProvider {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            image: true,
            video: true,
            view_conditioned: false,
        }
    }

    fn predict_noise(&self, x_t: &Tensor, level: NoiseLevel, _: &ConditioningTag) -> Result<Vec<f64>> {
        Ok(noise_from_x0(&x_t.data, &self.clean, level))
    }

    fn predict_x0(&self, _: &Tensor, _: NoiseLevel, _: &ConditioningTag) -> Result<Vec<f64>> {
        Ok(self.clean.clone())
    }
}

/// Lifts an image provider to videos by denoising each frame independently.
pub struct FrameSeparable<P> {
    pub inner: P,
}

impl<P: ScoreProvider> FrameSeparable<P> {
    pub fn new(inner: P) -> Self {
        Self { inner }
    }

    fn per_frame(
        &self,
        x_t: &Tensor,
        f: impl Fn(&Tensor) -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        if !x_t.is_video() {
            return f(x_t);
        }
        let mut out = Vec::with_capacity(x_t.data.len());
        for k in 0..x_t.frame_count() {
            let img = Tensor {
                frames: None,
                height: x_t.height,
                width: x_t.width,
                data: x_t.frame(k).to_vec(),
            };
            out.extend(f(&img)?);
        }
        Ok(out)
    }
}

impl<P: ScoreProvider> ScoreProvider for FrameSeparable<P> {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            video: true,
            ..self.inner.capabilities()
        }
    }

    fn predict_noise(&self, x_t: &Tensor, level: NoiseLevel, cond: &ConditioningTag) -> Result<Vec<f64>> {
        self.per_frame(x_t, |img| self.inner.predict_noise(img, level, cond))
    }

    fn predict_x0(&self, x_t: &Tensor, level: NoiseLevel, cond: &ConditioningTag) -> Result<Vec<f64>> {
        self.per_frame(x_t, |img| self.inner.predict_x0(img, level, cond))
    }
}

/// Timestep range for distillation, as fractions of `T`. With `anneal_to`
/// set, the upper bound moves linearly from `max` to `anneal_to` over training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepRange {
    pub min: f64,
    pub max: f64,
    pub anneal_to: Option<f64>,
}

impl Default for TimestepRange {
    fn default() -> Self {
        Self {
            min: 0.02,
            max: 0.98,
            anneal_to: None,
        }
    }
}

impl TimestepRange {
    pub fn validate(&self) -> Result<()> {
        let hi = self.anneal_to.unwrap_or(self.max);
        if !(0.0 <= self.min && self.min <= self.max && self.max <= 1.0 && self.min <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("bad timestep range {self:?}")));
        }
        Ok(())
    }

    /// Bounds at training progress `p ∈ [0, 1]`.
    pub fn at(&self, progress: f64) -> (f64, f64) {
        match self.anneal_to {
            Some(end) => (self.min, self.max + (end - self.max) * progress.clamp(0.0, 1.0)),
            None => (self.min, self.max),
        }
    }
}

/// Distillation gradient with respect to a rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillGrad {
    pub grad: Vec<f64>,
    pub t: usize,
    /// Mean squared residual `‖X − X̂₀‖²/n` (SDS) or mean squared
    /// gradient (BSD); diagnostic only.
    pub loss: f64,
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn check_capability(provider: &dyn ScoreProvider, x: &Tensor) -> Result<()> {
    let caps = provider.capabilities();
    let ok = if x.is_video() { caps.video } else { caps.image };
    if !ok {
        return Err(Error::Config(format!(
            "score provider cannot handle a tensor of shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn check_prediction(v: &[f64], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::Shape(format!("{what} returned {} values for {n}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLoss(format!("{what} produced a non-finite prediction")));
    }
    Ok(())
}

/// Gradient of `‖X − X̂₀‖²` with `X̂₀` held constant: `2(X − X̂₀)`.
pub fn sds_grad<R: Rng + ?Sized>(
    provider: &dyn ScoreProvider,
    schedule: &NoiseSchedule,
    x: &Tensor,
    cond: &ConditioningTag,
    range: (f64, f64),
    rng: &mut R,
) -> Result<DistillGrad> {
    check_capability(provider, x)?;
    let t = schedule.sample_timestep(rng, range.0, range.1);
    let level = schedule.level(t);
    let eps = standard_normal(rng, x.data.len());
    let x_t = x.with_data(level.noise(&x.data, &eps));
    let x0 = provider.predict_x0(&x_t, level, cond)?;
    check_prediction(&x0, x.data.len(), "predict_x0")?;
    let grad: Vec<f64> = x.data.iter().zip(&x0).map(|(a, b)| 2.0 * (a - b)).collect();
    let loss = x.data.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.data.len().max(1) as f64;
    Ok(DistillGrad { grad, t, loss })
}

/// BSD time weight `ω(t) = 1 − ᾱ_t`.
pub fn bsd_weight(level: NoiseLevel) -> f64 {
    1.0 - level.alpha_bar
}

/// `ω(t)·(ε̂_boot(X_t) − ε̂_lora(X_t))` at one shared noisy sample.
pub fn bsd_grad<R: Rng + ?Sized>(
    boot: &dyn ScoreProvider,
    lora: &dyn ScoreProvider,
    schedule: &NoiseSchedule,
    x: &Tensor,
    cond: &ConditioningTag,
    range: (f64, f64),
    rng: &mut R,
) -> Result<DistillGrad> {
    check_capability(boot, x)?;
    check_capability(lora, x)?;
    let t = schedule.sample_timestep(rng, range.0, range.1);
    let level = schedule.level(t);
    let eps = standard_normal(rng, x.data.len());
    let x_t = x.with_data(level.noise(&x.data, &eps));
    let e_boot = boot.predict_noise(&x_t, level, cond)?;
    check_prediction(&e_boot, x.data.len(), "bootstrap provider")?;
    let e_lora = lora.predict_noise(&x_t, level, cond)?;
    check_prediction(&e_lora, x.data.len(), "lora provider")?;
    let w = bsd_weight(level);
    let grad: Vec<f64> = e_boot.iter().zip(&e_lora).map(|(a, b)| w * (a - b)).collect();
    let loss = grad.iter().map(|g| g * g).sum::<f64>() / grad.len().max(1) as f64;
    Ok(DistillGrad { grad, t, loss })
}

/// Mean squared RGB error over all pixels and channels, with its gradient.
pub fn rgb_loss(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>)> {
    same_len(pred.len(), target.len(), "rgb")?;
    let n = (3 * pred.len()).max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            [0, 1, 2].map(|c| {
                let d = p[c] - t[c];
                loss += d * d;
                2.0 * d / n
            })
        })
        .collect();
    Ok((loss / n, grad))
}

/// Mean squared alpha-vs-mask error over the full frame.
pub fn mask_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len(pred.len(), target.len(), "mask")?;
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Pixels counted by the flow loss: target mask at least one half.
pub const SILHOUETTE_THRESHOLD: f64 = 0.5;

/// Mean endpoint error `‖f̂ − f‖₂` over target-silhouette pixels.
/// Zero (with zero gradient) when the silhouette is empty.
pub fn flow_loss(pred: &[[f64; 2]], target: &[[f64; 2]], mask: &[f64]) -> Result<(f64, Vec<[f64; 2]>)> {
    same_len(pred.len(), target.len(), "flow")?;
    same_len(pred.len(), mask.len(), "flow mask")?;
    let count = mask.iter().filter(|&&m| m >= SILHOUETTE_THRESHOLD).count();
    let mut grad = vec![[0.0; 2]; pred.len()];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = count as f64;
    let mut loss = 0.0;
    for i in 0..pred.len() {
        if mask[i] < SILHOUETTE_THRESHOLD {
            continue;
        }
        let d = [pred[i][0] - target[i][0], pred[i][1] - target[i][1]];
        let e = (d[0] * d[0] + d[1] * d[1]).sqrt();
        loss += e;
        if e > 0.0 {
            grad[i] = [d[0] / (e * n), d[1] / (e * n)];
        }
    }
    Ok((loss / n, grad))
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} predicted vs {b} target values")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectLossValues {
    pub rgb: f64,
    pub mask: f64,
    pub flow: f64,
}

/// Per-frame gradients of the direct losses.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectLossGrads {
    pub rgb: Vec<Vec<[f64; 3]>>,
    pub alpha: Vec<Vec<f64>>,
    pub flow: Vec<Vec<[f64; 2]>>,
}

/// Direct losses of a rendered clip against the reference, averaged over
/// frames. `renders[k].displacement` is compared with `targets.flows[k]`
/// for every frame that has a successor.
pub fn direct_losses(renders: &[RenderOutput], targets: &DirectPriorTargets) -> Result<(DirectLossValues, DirectLossGrads)> {
    if renders.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} rendered frames for {} targets",
            renders.len(),
            targets.len()
        )));
    }
    let nf = renders.len().max(1) as f64;
    let nflow = targets.flows.len().max(1) as f64;
    let mut values = DirectLossValues::default();
    let mut grads = DirectLossGrads {
        rgb: Vec::new(),
        alpha: Vec::new(),
        flow: Vec::new(),
    };
    for (k, r) in renders.iter().enumerate() {
        if (r.width, r.height) != (targets.frames[k].width, targets.frames[k].height) {
            return Err(Error::Shape(format!(
                "frame {k}: render {}x{} vs target {}x{}",
                r.width, r.height, targets.frames[k].width, targets.frames[k].height
            )));
        }
        let (l, g) = rgb_loss(&r.rgb, &targets.frames[k].rgb)?;
        values.rgb += l / nf;
        grads.rgb.push(g.into_iter().map(|v| v.map(|x| x / nf)).collect());
        let (l, g) = mask_loss(&r.alpha, &targets.masks[k].values)?;
        values.mask += l / nf;
        grads.alpha.push(g.into_iter().map(|x| x / nf).collect());
        if let Some(flow) = targets.flows.get(k) {
            let (l, g) = flow_loss(&r.displacement, &flow.flow, &targets.masks[k].values)?;
            values.flow += l / nflow;
            grads.flow.push(g.into_iter().map(|v| v.map(|x| x / nflow)).collect());
        } else {
            grads.flow.push(vec![[0.0; 2]; r.displacement.len()]);
        }
    }
    Ok((values, grads))
}

/// Total variation of displacement maps `maps[f][y·W + x]`:
/// `mean‖D_x‖² + mean‖D_y‖² + mean‖D_t‖²`, each mean taken over the number
/// of forward differences along that axis. Axes with a single entry
/// contribute nothing.
pub fn tv_loss(maps: &[Vec<[f64; 2]>], width: usize, height: usize) -> Result<(f64, Vec<Vec<[f64; 2]>>)> {
    let frames = maps.len();
    if frames < 2 {
        return Err(Error::Shape("tv_loss needs at least 2 frames".into()));
    }
    if let Some(m) = maps.iter().find(|m| m.len() != width * height) {
        return Err(Error::Shape(format!(
            "displacement map has {} pixels, expected {}x{}",
            m.len(),
            width,
            height
        )));
    }
    let mut grad = vec![vec![[0.0; 2]; width * height]; frames];
    let mut loss = 0.0;
    let mut axis = |count: usize, pairs: &mut dyn Iterator<Item = ((usize, usize), (usize, usize))>| {
        if count == 0 {
            return;
        }
        let n = count as f64;
        for ((fa, ia), (fb, ib)) in pairs {
            for c in 0..2 {
                let d = maps[fb][ib][c] - maps[fa][ia][c];
                loss += d * d / n;
                grad[fb][ib][c] += 2.0 * d / n;
                grad[fa][ia][c] -= 2.0 * d / n;
            }
        }
    };
    let idx = |x: usize, y: usize| y * width + x;
    axis(
        frames * height * width.saturating_sub(1),
        &mut (0..frames).flat_map(|f| {
            (0..height).flat_map(move |y| (1..width).map(move |x| ((f, idx(x - 1, y)), (f, idx(x, y)))))
        }),
    );
    axis(
        frames * height.saturating_sub(1) * width,
        &mut (0..frames).flat_map(|f| {
            (1..height).flat_map(move |y| (0..width).map(move |x| ((f, idx(x, y - 1)), (f, idx(x, y)))))
        }),
    );
    axis(
        (frames - 1) * height * width,
        &mut (1..frames).flat_map(|f| (0..width * height).map(move |i| ((f - 1, i), (f, i)))),
    );
    Ok((loss, grad))
}

/// Architecture and training options of the toy denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserOptions {
    pub hidden: usize,
    /// Conditioning buckets (one-hot input); 1 means unconditional.
    pub buckets: usize,
    pub epochs: usize,
    /// Random pixels per training step.
    pub pixels_per_step: usize,
    pub learning_rate: f64,
    /// Cap on the SNR weight that turns the x₀ error into the ε error.
    pub snr_cap: f64,
    pub seed: u64,
}

impl Default for DenoiserOptions {
    fn default() -> Self {
        Self {
            hidden: 64,
            buckets: 8,
            epochs: 40,
            pixels_per_step: 128,
            learning_rate: 3e-3,
            snr_cap: 5.0,
            seed: 0,
        }
    }
}

const PATCH: usize = 27;
const COORD_FEATURES: usize = 16;
const TIME_FEATURES: usize = 8;

/// Small per-pixel denoiser. Each output pixel sees the 3×3 neighbourhood
/// of `X_t`, Fourier features of its image coordinates, sinusoidal
/// timestep features and a one-hot conditioning bucket; a 4-layer MLP
/// (equivalently a 3×3 convolution followed by 1×1 convolutions) predicts
/// the clean pixel. `ε̂` follows from `X̂₀`.
#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    pub store: ParamStore,
    pub mlp: Mlp,
    pub options: DenoiserOptions,
    pub adam: AdamState,
}

impl ToyDenoiser {
    pub fn new(options: DenoiserOptions) -> Result<Self> {
        use rand::SeedableRng;
        if options.buckets == 0 || options.hidden == 0 {
            return Err(Error::Config("denoiser needs hidden >= 1 and buckets >= 1".into()));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(options.seed);
        let mut store = ParamStore::new();
        let h = options.hidden;
        let input = PATCH + COORD_FEATURES + TIME_FEATURES + options.buckets;
        let cfg = MlpConfig::new(vec![input, h, h, h, 3], Activation::Identity);
        let mlp = Mlp::new(&mut store, "denoiser", cfg, FinalInit::Uniform { bias: 0.5 }, &mut rng)?;
        if store.scalar_count() > 200_000 {
            return Err(Error::Config(format!(
                "denoiser has {} parameters, limit is 200000",
                store.scalar_count()
            )));
        }
        let adam = AdamState::new(
            AdamConfig {
                learning_rate: options.learning_rate,
                ..AdamConfig::default()
            },
            &store,
        );
        Ok(Self {
            store,
            mlp,
            options,
            adam,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn features(&self, x: &[f64], h: usize, w: usize, px: usize, py: usize, level: NoiseLevel, bucket: usize) -> Vec<f64> {
        let mut f = Vec::with_capacity(PATCH + COORD_FEATURES + TIME_FEATURES + self.options.buckets);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = (py as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let xx = (px as i64 + dx).clamp(0, w as i64 - 1) as usize;
                f.extend_from_slice(&x[(yy * w + xx) * 3..(yy * w + xx) * 3 + 3]);
            }
        }
        let u = (px as f64 + 0.5) / w as f64;
        let v = (py as f64 + 0.5) / h as f64;
        for k in 0..4 {
            let s = std::f64::consts::PI * (1u32 << k) as f64;
            f.extend_from_slice(&[(s * u).sin(), (s * u).cos(), (s * v).sin(), (s * v).cos()]);
        }
        let tau = level.t as f64 / level.steps.max(1) as f64;
        for k in 0..4 {
            let s = std::f64::consts::PI * (1u32 << k) as f64;
            f.extend_from_slice(&[(s * tau).sin(), (s * tau).cos()]);
        }
        let start = f.len();
        f.resize(start + self.options.buckets, 0.0);
        f[start + bucket] = 1.0;
        f
    }

    fn denoise_image(&self, x: &[f64], h: usize, w: usize, level: NoiseLevel, cond: &ConditioningTag) -> Result<Vec<f64>> {
        let bucket = cond.bucket(self.options.buckets);
        let mut out = Vec::with_capacity(x.len());
        for py in 0..h {
            for px in 0..w {
                let f = self.features(x, h, w, px, py, level, bucket);
                out.extend(self.mlp.eval(&self.store, &f)?);
            }
        }
        Ok(out)
    }

    /// One Adam step on random pixels of `(frame, cond)` pairs; returns the
    /// mean weighted denoising loss of the step.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        frames: &[(&Frame, ConditioningTag)],
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<f64> {
        let mut grads = GradBuffer::new(&self.store);
        let mut total = 0.0;
        let count: usize = frames
            .iter()
            .map(|(f, _)| 3 * self.options.pixels_per_step.min(f.rgb.len()))
            .sum();
        let n = count.max(1) as f64;
        for (frame, cond) in frames {
            let (h, w) = (frame.height as usize, frame.width as usize);
            let clean: Vec<f64> = frame.rgb.iter().flatten().copied().collect();
            let t = schedule.sample_timestep(rng, 0.0, 1.0);
            let level = schedule.level(t);
            let eps = standard_normal(rng, clean.len());
            let noisy = level.noise(&clean, &eps);
            let weight = level.snr().min(self.options.snr_cap);
            let bucket = cond.bucket(self.options.buckets);
            for _ in 0..self.options.pixels_per_step.min(h * w) {
                let (px, py) = (rng.gen_range(0..w), rng.gen_range(0..h));
                let f = self.features(&noisy, h, w, px, py, level, bucket);
                let tape = self.mlp.forward(&self.store, &f)?;
                let out = tape.output();
                let target = &clean[(py * w + px) * 3..(py * w + px) * 3 + 3];
                let mut up = [0.0; 3];
                for c in 0..3 {
                    let d = out[c] - target[c];
                    total += weight * d * d;
                    up[c] = 2.0 * weight * d / n;
                }
                self.mlp.backward(&self.store, &tape, &up, &mut grads)?;
            }
        }
        self.store.accumulate(&grads);
        self.adam.step(&mut self.store)?;
        let loss = total / n;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss("denoiser".into()));
        }
        Ok(loss)
    }
}

impl ScoreProvider for ToyDenoiser {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            image: true,
            video: false,
            view_conditioned: self.options.buckets > 1,
        }
    }

    fn predict_noise(&self, x_t: &Tensor, level: NoiseLevel, cond: &ConditioningTag) -> Result<Vec<f64>> {
        let x0 = self.predict_x0(x_t, level, cond)?;
        Ok(noise_from_x0(&x_t.data, &x0, level))
    }

    fn predict_x0(&self, x_t: &Tensor, level: NoiseLevel, cond: &ConditioningTag) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x_t.data.len());
        for k in 0..x_t.frame_count() {
            out.extend(self.denoise_image(x_t.frame(k), x_t.height, x_t.width, level, cond)?);
        }
        Ok(out)
    }
}

/// Training curve of a toy denoiser: mean loss per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserReport {
    pub epoch_losses: Vec<f64>,
}

/// Fit a [`ToyDenoiser`] to a set of `(frame, conditioning)` pairs with
/// the SNR-capped denoising objective. Each epoch visits every frame once.
/// Fails with [`Error::Divergence`] when the last epoch ends above the first.
pub fn train_toy_denoiser(
    frames: &[(Frame, ConditioningTag)],
    schedule: &NoiseSchedule,
    options: DenoiserOptions,
) -> Result<(ToyDenoiser, DenoiserReport)> {
    use rand::SeedableRng;
    if frames.len() < 16 {
        return Err(Error::Config(format!(
            "toy denoiser needs at least 16 frames, got {}",
            frames.len()
        )));
    }
    let mut den = ToyDenoiser::new(options)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(options.seed ^ 0xD1FF);
    let mut epoch_losses = Vec::with_capacity(options.epochs);
    for _ in 0..options.epochs {
        let mut sum = 0.0;
        for (frame, cond) in frames {
            sum += den.train_step(&[(frame, cond.clone())], schedule, &mut rng)?;
        }
        epoch_losses.push(sum / frames.len() as f64);
    }
    if let (Some(first), Some(last)) = (epoch_losses.first(), epoch_losses.last()) {
        if epoch_losses.len() > 1 && last > first {
            return Err(Error::Divergence(format!(
                "denoiser loss rose from {first:.4e} to {last:.4e}"
            )));
        }
    }
    Ok((den, DenoiserReport { epoch_losses }))
}

/// Random crop (rescaled back to full size) plus brightness/contrast jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Smallest crop side as a fraction of the image side.
    pub min_crop: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            min_crop: 0.8,
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

pub fn augment<R: Rng + ?Sized>(frame: &Frame, aug: &Augmentation, rng: &mut R) -> Frame {
    let (w, h) = (frame.width as usize, frame.height as usize);
    let scale = rng.gen_range(aug.min_crop.clamp(0.05, 1.0)..=1.0);
    let (cw, ch) = (w as f64 * scale, h as f64 * scale);
    let x0 = rng.gen_range(0.0..=(w as f64 - cw));
    let y0 = rng.gen_range(0.0..=(h as f64 - ch));
    let b = rng.gen_range(-aug.brightness..=aug.brightness);
    let c = 1.0 + rng.gen_range(-aug.contrast..=aug.contrast);
    let sample = |x: f64, y: f64| -> [f64; 3] {
        // bilinear on pixel centres
        let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (jx, jy) = ((ix + 1).min(w - 1), (iy + 1).min(h - 1));
        let (ax, ay) = (fx - ix as f64, fy - iy as f64);
        let p = |x: usize, y: usize| frame.rgb[y * w + x];
        [0, 1, 2].map(|k| {
            let top = p(ix, iy)[k] * (1.0 - ax) + p(jx, iy)[k] * ax;
            let bot = p(ix, jy)[k] * (1.0 - ax) + p(jx, jy)[k] * ax;
            top * (1.0 - ay) + bot * ay
        })
    };
    let rgb = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| {
            let sx = x0 + (x as f64 + 0.5) * cw / w as f64;
            let sy = y0 + (y as f64 + 0.5) * ch / h as f64;
            sample(sx, sy).map(|v| ((v - 0.5) * c + 0.5 + b).clamp(0.0, 1.0))
        })
        .collect();
    Frame {
        width: frame.width,
        height: frame.height,
        rgb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn schedule_is_monotone_from_one() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(1000) < 1e-4);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn timesteps_stay_in_range() {
        let s = NoiseSchedule::default();
        let mut r = rng();
        for _ in 0..2000 {
            let t = s.sample_timestep(&mut r, 0.02, 0.98);
            assert!((20..=980).contains(&t));
        }
    }

    #[test]
    fn oracle_sds_is_exactly_zero() {
        let s = NoiseSchedule::default();
        let x = Tensor::image(2, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let oracle = OracleProvider { clean: x.data.clone() };
        let g = sds_grad(&oracle, &s, &x, &ConditioningTag::None, (0.02, 0.98), &mut rng()).unwrap();
        assert!(g.grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn point_mass_sds_points_at_target() {
        let s = NoiseSchedule::default();
        let x = Tensor::image(1, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let mu = vec![0.5; 6];
        let g = sds_grad(&PointMassProvider::new(mu.clone()), &s, &x, &ConditioningTag::None, (0.02, 0.98), &mut rng()).unwrap();
        for ((g, x), m) in g.grad.iter().zip(&x.data).zip(&mu) {
            assert!((g - 2.0 * (x - m)).abs() < 1e-15);
        }
    }

    #[test]
    fn video_sds_matches_per_frame_image_sds_shape() {
        let s = NoiseSchedule::default();
        let v = Tensor::video(3, 2, 2, vec![0.3; 36]).unwrap();
        let p = FrameSeparable::new(PointMassProvider::new(vec![0.7; 12]));
        let g = sds_grad(&p, &s, &v, &ConditioningTag::None, (0.02, 0.98), &mut rng()).unwrap();
        assert_eq!(g.grad.len(), 36);
        assert!(g.grad.iter().all(|&v| (v - 2.0 * (0.3 - 0.7)).abs() < 1e-15));
        let img_only = ToyDenoiser::new(DenoiserOptions::default()).unwrap();
        assert!(sds_grad(&img_only, &s, &v, &ConditioningTag::None, (0.02, 0.98), &mut rng()).is_err());
    }

    #[test]
    fn bsd_identical_zero_and_swap_negates() {
        let s = NoiseSchedule::default();
        let x = Tensor::image(2, 2, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = PointMassProvider::new(vec![0.2; 12]);
        let b = OracleProvider { clean: x.data.clone() };
        let same = bsd_grad(&a, &a, &s, &x, &ConditioningTag::None, (0.02, 0.98), &mut rng()).unwrap();
        assert!(same.grad.iter().all(|&v| v == 0.0));
        let ab = bsd_grad(&a, &b, &s, &x, &ConditioningTag::None, (0.02, 0.98), &mut rng()).unwrap();
        let ba = bsd_grad(&b, &a, &s, &x, &ConditioningTag::None, (0.02, 0.98), &mut rng()).unwrap();
        for (p, q) in ab.grad.iter().zip(&ba.grad) {
            assert_eq!(p.to_bits(), (-q).to_bits());
        }
    }

    #[test]
    fn bsd_weight_vanishes_at_low_noise() {
        let s = NoiseSchedule::default();
        assert!(bsd_weight(s.level(1)) < 1e-3);
        assert!(bsd_weight(s.level(1000)) > 0.99);
    }

    #[test]
    fn bsd_pulls_toward_point_mass_in_expectation() {
        // E[ω(ε̂_boot − ε)] = E[ω √ᾱ/√(1−ᾱ)]·(X − μ)
        let s = NoiseSchedule::default();
        let x = Tensor::image(1, 1, vec![0.9, 0.1, 0.5]).unwrap();
        let mu = vec![0.4, 0.4, 0.4];
        let boot = PointMassProvider::new(mu.clone());
        let lora = OracleProvider { clean: x.data.clone() };
        let mut r = rng();
        let n = 10_000;
        let mut mean = [0.0; 3];
        let mut scale = 0.0;
        for _ in 0..n {
            let g = bsd_grad(&boot, &lora, &s, &x, &ConditioningTag::None, (0.02, 0.98), &mut r).unwrap();
            let l = s.level(g.t);
            scale += bsd_weight(l) * (l.alpha_bar / (1.0 - l.alpha_bar)).sqrt() / n as f64;
            for c in 0..3 {
                mean[c] += g.grad[c] / n as f64;
            }
        }
        for c in 0..3 {
            let expect = scale * (x.data[c] - mu[c]);
            assert!((mean[c] - expect).abs() < 1e-9 + 1e-6 * expect.abs(), "{c}: {} vs {expect}", mean[c]);
        }
    }

    #[test]
    fn direct_losses_zero_on_exact_match_and_mask_one_on_empty() {
        let (l, _) = rgb_loss(&[[0.1, 0.2, 0.3]], &[[0.1, 0.2, 0.3]]).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = mask_loss(&[0.0; 10], &[1.0; 10]).unwrap();
        assert_eq!(l, 1.0);
        let (l, _) = flow_loss(&[[1.0, 2.0]; 4], &[[1.0, 2.0]; 4], &[1.0; 4]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn flow_loss_counts_silhouette_only() {
        let pred = [[3.0, 4.0], [100.0, 0.0]];
        let target = [[0.0, 0.0], [0.0, 0.0]];
        let (l, g) = flow_loss(&pred, &target, &[1.0, 0.0]).unwrap();
        assert_eq!(l, 5.0);
        assert_eq!(g[1], [0.0, 0.0]);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[0][1] - 0.8).abs() < 1e-15);
    }

    fn numeric(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut r = rng();
        let n = 7;
        let x: Vec<f64> = (0..3 * n).map(|_| r.gen()).collect();
        let y: Vec<f64> = (0..3 * n).map(|_| r.gen()).collect();
        let to3 = |v: &[f64]| v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        let f = |v: &[f64]| rgb_loss(&to3(v), &to3(&y)).unwrap().0;
        let g: Vec<f64> = rgb_loss(&to3(&x), &to3(&y)).unwrap().1.into_iter().flatten().collect();
        assert!(relative_error(&g, &numeric(&f, &x)) < 1e-6);

        let f = |v: &[f64]| mask_loss(v, &y[..n]).unwrap().0;
        let g = mask_loss(&x[..n], &y[..n]).unwrap().1;
        assert!(relative_error(&g, &numeric(&f, &x[..n])) < 1e-6);

        let to2 = |v: &[f64]| v.chunks(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>();
        let mask: Vec<f64> = (0..n).map(|i| (i % 3 != 0) as u8 as f64).collect();
        let f = |v: &[f64]| flow_loss(&to2(v), &to2(&y[..2 * n]), &mask).unwrap().0;
        let g: Vec<f64> = flow_loss(&to2(&x[..2 * n]), &to2(&y[..2 * n]), &mask).unwrap().1.into_iter().flatten().collect();
        assert!(relative_error(&g, &numeric(&f, &x[..2 * n])) < 1e-6);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let (f, h, w) = (3, 4, 5);
        let mut r = rng();
        let flat: Vec<f64> = (0..f * h * w * 2).map(|_| r.gen::<f64>() - 0.5).collect();
        let maps = |v: &[f64]| {
            v.chunks(h * w * 2)
                .map(|m| m.chunks(2).map(|c| [c[0], c[1]]).collect())
                .collect::<Vec<Vec<[f64; 2]>>>()
        };
        let loss = |v: &[f64]| tv_loss(&maps(v), w, h).unwrap().0;
        let g: Vec<f64> = tv_loss(&maps(&flat), w, h).unwrap().1.into_iter().flatten().flatten().collect();
        assert!(relative_error(&g, &numeric(&loss, &flat)) < 1e-6);
    }

    #[test]
    fn tv_spike_counts_difference_terms() {
        // Value from a hand count of the 12 difference terms touching the spike.
        let (f, h, w, m) = (4, 5, 6, 3.0);
        let mut maps = vec![vec![[0.0; 2]; h * w]; f];
        maps[1][2 * w + 3] = [m, 0.0];
        let (l, _) = tv_loss(&maps, w, h).unwrap();
        assert!((l - 0.5675).abs() < 1e-12, "{l}");
    }

    #[test]
    fn tv_ramp_equals_squared_slope() {
        let (f, h, w, s) = (2, 3, 5, 0.7);
        let map: Vec<[f64; 2]> = (0..h).flat_map(|_| (0..w).map(|x| [s * x as f64, 0.0])).collect();
        let (l, _) = tv_loss(&vec![map; f], w, h).unwrap();
        assert!((l - s * s).abs() < 1e-12);
        let (l, _) = tv_loss(&vec![vec![[1.5, -2.0]; w * h]; f], w, h).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn augment_keeps_shape_and_range() {
        let frame = Frame {
            width: 8,
            height: 6,
            rgb: (0..48).map(|i| [i as f64 / 48.0, 0.5, 1.0 - i as f64 / 48.0]).collect(),
        };
        let a = augment(&frame, &Augmentation::default(), &mut rng());
        assert_eq!((a.width, a.height, a.rgb.len()), (8, 6, 48));
        assert!(a.rgb.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn denoiser_is_small_and_shape_preserving() {
        let d = ToyDenoiser::new(DenoiserOptions::default()).unwrap();
        assert!(d.param_count() <= 200_000);
        let x = Tensor::image(4, 5, vec![0.3; 60]).unwrap();
        let s = NoiseSchedule::default();
        let e = d.predict_noise(&x, s.level(500), &ConditioningTag::ViewBucket(3)).unwrap();
        assert_eq!(e.len(), 60);
    }

    #[test]
    fn denoiser_needs_sixteen_frames() {
        let f = Frame::filled(4, 4, [0.5; 3]);
        let few: Vec<_> = (0..3).map(|_| (f.clone(), ConditioningTag::None)).collect();
        assert!(train_toy_denoiser(&few, &NoiseSchedule::default(), DenoiserOptions::default()).is_err());
    }
}
