//! Run configuration: a TOML document with `[scene]`, `[grids]`, `[render]`,
//! `[schedule]`, `[priors]` and `[output]` sections.
//!
//! Loading starts from the serialized defaults, deep-merges the user file on
//! top and then applies `section.key=value` overrides, so every key is
//! optional and every default is visible in a dumped config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::priors::{Augmentation, DenoiserOptions, NoiseSchedule, TimestepRange};
use crate::render::Camera;
use crate::scenes::{SceneSpec, SceneVariant};
use crate::trainer::ScheduleSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub variant: SceneVariant,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    /// Multi-view stills of frame 0 for the static stage; 0 disables them.
    pub views: usize,
    pub view_elevation: f64,
    /// Input-view camera on the orbit sphere.
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            variant: SceneVariant::TranslatingSphere,
            frames: 16,
            width: 32,
            height: 32,
            views: 8,
            view_elevation: 15.0,
            azimuth: 0.0,
            elevation: 10.0,
            radius: 2.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn spec(&self) -> SceneSpec {
        SceneSpec::of_variant(self.variant)
    }

    pub fn input_camera(&self) -> Camera {
        Camera::orbit(self.azimuth, self.elevation, self.radius, self.width, self.height)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    /// Samples per ray during training.
    pub train_samples: usize,
    /// Samples per ray for previews, evaluation and baking.
    pub eval_samples: usize,
    /// Random rays per static-stage iteration.
    pub rays_per_batch: usize,
    /// Side of the square pixel patch used by the dynamic direct losses.
    pub patch_size: u32,
    /// Consecutive frames per dynamic-stage direct batch.
    pub window_frames: usize,
    pub motion_iterations: usize,
    /// Composite training targets over a random gray instead of white.
    pub random_background: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            train_samples: 48,
            eval_samples: 128,
            rays_per_batch: 256,
            patch_size: 8,
            window_frames: 3,
            motion_iterations: 10,
            random_background: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorsConfig {
    pub noise_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub timesteps: TimestepRange,
    pub denoiser: DenoiserOptions,
    pub augmentation: Augmentation,
    /// Frames of the novel-trajectory video rendered for video SDS.
    pub video_frames: usize,
    /// Azimuth swept by that trajectory, degrees.
    pub video_sweep: f64,
    /// Resolution of every distillation render.
    pub distill_width: u32,
    pub distill_height: u32,
    /// The lora denoiser takes one step on the current render every this
    /// many BSD iterations.
    pub lora_every: usize,
}

impl Default for PriorsConfig {
    fn default() -> Self {
        Self {
            noise_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            timesteps: TimestepRange::default(),
            denoiser: DenoiserOptions::default(),
            augmentation: Augmentation::default(),
            video_frames: 24,
            video_sweep: 30.0,
            distill_width: 16,
            distill_height: 16,
            lora_every: 1,
        }
    }
}

impl PriorsConfig {
    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.noise_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub runs_dir: String,
    pub name: String,
    pub checkpoint_every: usize,
    pub preview_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            runs_dir: "runs".into(),
            name: "default".into(),
            checkpoint_every: 500,
            preview_every: 500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub scene: SceneConfig,
    pub grids: FieldConfig,
    pub render: RenderConfig,
    pub schedule: ScheduleSpec,
    pub priors: PriorsConfig,
    pub output: OutputConfig,
}

impl Config {
    /// Defaults, then `file` (if any), then `overrides` of the form
    /// `section.key=value`. The result is validated.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = toml::Value::try_from(Config::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            if !path.exists() {
                return Err(Error::Missing(path.to_path_buf()));
            }
            let text = std::fs::read_to_string(path)?;
            let user: toml::Value =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut doc, user);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Config = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut doc = toml::Value::try_from(Config::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut doc, toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?);
        let cfg: Config = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        if s.frames < 2 || s.width == 0 || s.height == 0 {
            return Err(Error::Config("scene needs >= 2 frames and a nonzero resolution".into()));
        }
        if !(s.radius > 3f64.sqrt() * crate::field::HALF_EXTENT) {
            return Err(Error::Config(format!("camera radius {} is inside the scene bounds", s.radius)));
        }
        self.grids.validate()?;
        let r = &self.render;
        if r.train_samples == 0 || r.eval_samples == 0 || r.rays_per_batch == 0 {
            return Err(Error::Config("render sample and ray counts must be >= 1".into()));
        }
        if r.patch_size == 0 || r.window_frames == 0 || r.motion_iterations == 0 {
            return Err(Error::Config("patch_size, window_frames and motion_iterations must be >= 1".into()));
        }
        self.schedule.validate()?;
        let p = &self.priors;
        p.noise_schedule()?;
        p.timesteps.validate()?;
        if p.video_frames < 2 || p.distill_width == 0 || p.distill_height == 0 || p.lora_every == 0 {
            return Err(Error::Config(
                "video_frames must be >= 2; distill resolution and lora_every >= 1".into(),
            ));
        }
        if self.output.name.is_empty() || self.output.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("bad run name `{}`", self.output.name)));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Apply `a.b.c=value`. The value is parsed as a TOML literal, falling back
/// to a bare string.
pub fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key `{path}`")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut node = doc;
    for k in &keys[..keys.len() - 1] {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(*k))
            .ok_or_else(|| Error::Config(format!("unknown config section `{path}`")))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{path}` does not name a key")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(Config::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("[schedule.static_weights]"));
    }

    #[test]
    fn static_weights_default() {
        let w = Config::default().schedule.static_weights;
        assert_eq!((w.sds_2d, w.sds_3d, w.rgb, w.mask), (0.025, 1.0, 1000.0, 100.0));
    }

    #[test]
    fn overrides_and_partial_files() {
        let cfg = Config::load(
            None,
            &[
                "scene.variant=splitting_blob".into(),
                "grids.spatial.table_size_log2=12".into(),
                "output.name=abc".into(),
                "schedule.rgb.profile=\"cosine\"".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.scene.variant, SceneVariant::SplittingBlob);
        assert_eq!(cfg.grids.spatial.table_size_log2, 12);
        assert_eq!(cfg.output.name, "abc");
        let partial = Config::from_toml("[render]\ntrain_samples = 7\n").unwrap();
        assert_eq!(partial.render.train_samples, 7);
        assert_eq!(partial.render.eval_samples, 128);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Config::load(None, &["render.bogus=1".into()]).is_err());
        assert!(Config::load(None, &["nosuch.key=1".into()]).is_err());
        assert!(Config::load(None, &["scene.frames".into()]).is_err());
        let err = Config::load(None, &["schedule.rgb.final=2000".into()]).unwrap_err();
        assert!(matches!(err, Error::Schedule(_)), "{err}");
    }
}
