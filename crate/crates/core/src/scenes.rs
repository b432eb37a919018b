//! Analytic 4D scenes with known density, color and motion, used as
//! reference videos and as ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{in_bounds, MotionOptions, PointEval, Motion, HALF_EXTENT};
use crate::io::{FlowField, Frame, Mask};
use crate::priors::DirectPriorTargets;
use crate::render::{render_image, Camera, RenderSettings, VolumeField, FLOW_ALPHA_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneVariant {
    TranslatingSphere,
    PulsingBlob,
    SplittingBlob,
}

impl std::str::FromStr for SceneVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translating_sphere" => Ok(Self::TranslatingSphere),
            "pulsing_blob" => Ok(Self::PulsingBlob),
            "splitting_blob" => Ok(Self::SplittingBlob),
            other => Err(Error::Config(format!("unknown scene variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for SceneVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TranslatingSphere => "translating_sphere",
            Self::PulsingBlob => "pulsing_blob",
            Self::SplittingBlob => "splitting_blob",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Albedo {
    Solid { color: [f64; 3] },
    /// Checkerboard in object-attached coordinates with `frequency` cells per unit.
    Checker { a: [f64; 3], b: [f64; 3], frequency: f64 },
}

/// Geometry and appearance of an analytic scene.
///
/// * `translating_sphere`: sphere of `radius` centred at `center + velocity·t`.
/// * `pulsing_blob`: sphere at `center` with radius `radius·(1 + amplitude·sin 2πt)`.
/// * `splitting_blob`: a sphere of `radius` until `split_time`, then two
///   disjoint lobes of `lobe_radius` at `center ± s(t)·x̂` with
///   `s(t) = separation + separation_rate·(t − split_time)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub variant: SceneVariant,
    pub center: [f64; 3],
    pub radius: f64,
    pub velocity: [f64; 3],
    pub amplitude: f64,
    pub split_time: f64,
    pub lobe_radius: f64,
    pub separation: f64,
    pub separation_rate: f64,
    pub albedo: Albedo,
    /// Peak density `k`.
    pub density: f64,
    /// Edge softness `τ` of `σ = k·sigmoid(−sdf/τ)`.
    pub softness: f64,
}

impl SceneSpec {
    pub fn translating_sphere() -> Self {
        Self {
            variant: SceneVariant::TranslatingSphere,
            center: [-0.15, 0.0, 0.0],
            radius: 0.2,
            velocity: [0.3, 0.0, 0.0],
            amplitude: 0.0,
            split_time: 0.0,
            lobe_radius: 0.0,
            separation: 0.0,
            separation_rate: 0.0,
            albedo: Albedo::Solid {
                color: [0.9, 0.45, 0.2],
            },
            density: 50.0,
            softness: 0.02,
        }
    }

    pub fn pulsing_blob() -> Self {
        Self {
            variant: SceneVariant::PulsingBlob,
            center: [0.0; 3],
            radius: 0.2,
            velocity: [0.0; 3],
            amplitude: 0.3,
            albedo: Albedo::Solid {
                color: [0.3, 0.6, 0.9],
            },
            ..Self::translating_sphere()
        }
    }

    pub fn splitting_blob() -> Self {
        Self {
            variant: SceneVariant::SplittingBlob,
            center: [0.0; 3],
            radius: 0.18,
            velocity: [0.0; 3],
            amplitude: 0.0,
            split_time: 0.5,
            lobe_radius: 0.12,
            separation: 0.2,
            separation_rate: 0.2,
            albedo: Albedo::Solid {
                color: [0.35, 0.75, 0.3],
            },
            ..Self::translating_sphere()
        }
    }

    pub fn of_variant(variant: SceneVariant) -> Self {
        match variant {
            SceneVariant::TranslatingSphere => Self::translating_sphere(),
            SceneVariant::PulsingBlob => Self::pulsing_blob(),
            SceneVariant::SplittingBlob => Self::splitting_blob(),
        }
    }

    /// Same geometry, no motion.
    pub fn frozen(mut self) -> Self {
        self.velocity = [0.0; 3];
        self.amplitude = 0.0;
        self.separation_rate = 0.0;
        self.split_time = f64::INFINITY;
        self
    }

    pub fn topology_change(&self) -> bool {
        self.variant == SceneVariant::SplittingBlob && self.split_time <= 1.0
    }

    /// Check that the geometry stays inside the scene cube for `t ∈ [0, 1]`
    /// (with a margin of `4τ` so the soft edge is not cut off).
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.softness > 0.0) {
            return Err(Error::Config("scene density and softness must be positive".into()));
        }
        let margin = 4.0 * self.softness;
        for k in 0..=100 {
            let t = k as f64 / 100.0;
            for (c, r) in self.components(t) {
                if c.iter().any(|v| v.abs() + r + margin > HALF_EXTENT) {
                    return Err(Error::Config(format!(
                        "scene geometry leaves the unit cube at t = {t}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sphere components `(centre, radius)` at time `t`.
    pub fn components(&self, t: f64) -> Vec<([f64; 3], f64)> {
        match self.variant {
            SceneVariant::TranslatingSphere => {
                let c = [0, 1, 2].map(|k| self.center[k] + self.velocity[k] * t);
                vec![(c, self.radius)]
            }
            SceneVariant::PulsingBlob => {
                let r = self.radius * (1.0 + self.amplitude * (std::f64::consts::TAU * t).sin());
                vec![(self.center, r)]
            }
            SceneVariant::SplittingBlob => {
                if t < self.split_time {
                    vec![(self.center, self.radius)]
                } else {
                    let s = self.separation + self.separation_rate * (t - self.split_time);
                    let mut a = self.center;
                    let mut b = self.center;
                    a[0] -= s;
                    b[0] += s;
                    vec![(a, self.lobe_radius), (b, self.lobe_radius)]
                }
            }
        }
    }

    /// Signed distance to the scene geometry, and the index of the nearest component.
    pub fn sdf(&self, x: [f64; 3], t: f64) -> (f64, usize) {
        self.components(t)
            .into_iter()
            .enumerate()
            .map(|(i, (c, r))| (dist(x, c) - r, i))
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
    }

    /// Velocity of the material point at `x`.
    pub fn velocity_at(&self, x: [f64; 3], t: f64) -> [f64; 3] {
        match self.variant {
            SceneVariant::TranslatingSphere => self.velocity,
            SceneVariant::PulsingBlob => {
                let tau = std::f64::consts::TAU;
                let r = 1.0 + self.amplitude * (tau * t).sin();
                let dr = self.amplitude * tau * (tau * t).cos();
                [0, 1, 2].map(|k| (x[k] - self.center[k]) * dr / r)
            }
            SceneVariant::SplittingBlob => {
                if t < self.split_time {
                    [0.0; 3]
                } else {
                    let (_, i) = self.sdf(x, t);
                    let sign = if i == 0 { -1.0 } else { 1.0 };
                    [sign * self.separation_rate, 0.0, 0.0]
                }
            }
        }
    }

    /// Object-attached coordinates used for the albedo pattern.
    fn local(&self, x: [f64; 3], t: f64) -> [f64; 3] {
        let (_, i) = self.sdf(x, t);
        let (c, _) = self.components(t)[i];
        [0, 1, 2].map(|k| x[k] - c[k])
    }

    fn color(&self, x: [f64; 3], t: f64) -> [f64; 3] {
        match self.albedo {
            Albedo::Solid { color } => color,
            Albedo::Checker { a, b, frequency } => {
                let l = self.local(x, t);
                let parity: i64 = l.iter().map(|v| (v * frequency).floor() as i64).sum();
                if parity.rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

/// Density and color of the analytic scene at `(x, t)`.
pub fn eval_scene(spec: &SceneSpec, x: [f64; 3], t: f64) -> (f64, [f64; 3]) {
    let (d, _) = spec.sdf(x, t);
    let sigma = spec.density * crate::nn::sigmoid(-d / spec.softness);
    (sigma, spec.color(x, t))
}

impl VolumeField for SceneSpec {
    fn query(&self, x: [f64; 3], t: f64, motion: Option<MotionOptions>) -> Result<PointEval> {
        if !in_bounds(x) {
            return Ok(PointEval {
                sigma: 0.0,
                color: [0.0; 3],
                motion: motion.map(|_| Motion {
                    delta: [0.0; 3],
                    converged: true,
                }),
            });
        }
        let (sigma, color) = eval_scene(self, x, t);
        let motion = motion.map(|m| {
            let v = self.velocity_at(x, t);
            Motion {
                delta: v.map(|c| c * m.dt),
                converged: true,
            }
        });
        Ok(PointEval { sigma, color, motion })
    }
}

/// Frame times `k / (frames − 1)` for a clip of `frames` frames.
pub fn frame_times(frames: usize) -> Vec<f64> {
    if frames <= 1 {
        return vec![0.0; frames];
    }
    (0..frames).map(|k| k as f64 / (frames - 1) as f64).collect()
}

/// Render a fixed-camera reference clip: RGB frames on white, alpha masks,
/// and forward flow between consecutive frames from the analytic velocity.
pub fn bake_reference(spec: &SceneSpec, camera: &Camera, frames: usize) -> Result<DirectPriorTargets> {
    spec.validate()?;
    camera.validate()?;
    if frames < 2 {
        return Err(Error::Config("a reference clip needs at least 2 frames".into()));
    }
    let times = frame_times(frames);
    let dt = 1.0 / (frames - 1) as f64;
    let settings = RenderSettings::evaluation().with_motion(MotionOptions::new(dt, 1));
    let mut out = DirectPriorTargets {
        cameras: vec![camera.clone(); frames],
        times: times.clone(),
        frames: Vec::with_capacity(frames),
        masks: Vec::with_capacity(frames),
        flows: Vec::with_capacity(frames - 1),
    };
    for (k, &t) in times.iter().enumerate() {
        let r = render_image(spec, camera, t, &settings, 0)?;
        out.frames.push(Frame {
            width: r.width,
            height: r.height,
            rgb: r.rgb.clone(),
        });
        out.masks.push(Mask {
            width: r.width,
            height: r.height,
            values: r.alpha.clone(),
        });
        if k + 1 < frames {
            let flow = r
                .displacement
                .iter()
                .zip(&r.alpha)
                .map(|(d, &a)| if a < FLOW_ALPHA_MIN { [0.0; 2] } else { *d })
                .collect();
            out.flows.push(FlowField {
                width: r.width,
                height: r.height,
                flow,
            });
        }
    }
    Ok(out)
}

/// Cameras evenly spaced in azimuth at a fixed elevation and radius.
pub fn ring_cameras(count: usize, elevation_deg: f64, radius: f64, width: u32, height: u32, offset_deg: f64) -> Vec<Camera> {
    (0..count)
        .map(|k| {
            let az = offset_deg + 360.0 * k as f64 / count as f64;
            Camera::orbit(az, elevation_deg, radius, width, height)
        })
        .collect()
}

/// Multi-view stills of the scene at time `t` (frame 0 by default).
pub fn bake_views(spec: &SceneSpec, cameras: &[Camera], t: f64) -> Result<DirectPriorTargets> {
    spec.validate()?;
    let settings = RenderSettings::evaluation();
    let mut out = DirectPriorTargets {
        cameras: cameras.to_vec(),
        times: vec![t; cameras.len()],
        frames: Vec::new(),
        masks: Vec::new(),
        flows: Vec::new(),
    };
    for cam in cameras {
        let r = render_image(spec, cam, t, &settings, 0)?;
        out.frames.push(Frame {
            width: r.width,
            height: r.height,
            rgb: r.rgb,
        });
        out.masks.push(Mask {
            width: r.width,
            height: r.height,
            values: r.alpha,
        });
    }
    Ok(out)
}

/// Hard-edged silhouette of the scene's sphere components at time `t`:
/// a pixel is inside when its centre ray hits any sphere.
pub fn analytic_silhouette(spec: &SceneSpec, camera: &Camera, t: f64) -> Vec<bool> {
    let rays = crate::render::generate_rays(camera, &crate::render::all_pixels(camera));
    let comps = spec.components(t);
    rays.iter()
        .map(|ray| comps.iter().any(|&(c, r)| ray_hits_sphere(ray.origin, ray.direction, c, r).is_some()))
        .collect()
}

/// Distance along the ray to the first sphere intersection.
pub fn ray_hits_sphere(o: [f64; 3], d: [f64; 3], c: [f64; 3], r: f64) -> Option<f64> {
    let oc = [o[0] - c[0], o[1] - c[1], o[2] - c[2]];
    let b = oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2];
    let cc = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - r * r;
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let z = -b - disc.sqrt();
    (z > 0.0).then_some(z)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn far_points_are_empty() {
        for spec in [SceneSpec::translating_sphere(), SceneSpec::pulsing_blob(), SceneSpec::splitting_blob()] {
            let (sigma, _) = eval_scene(&spec, [0.49, 0.49, 0.49], 0.3);
            assert!(sigma <= 1e-6, "{:?}: {sigma}", spec.variant);
        }
    }

    #[test]
    fn sphere_center_is_peak_density() {
        let spec = SceneSpec::translating_sphere();
        let (sigma, _) = eval_scene(&spec, spec.center, 0.0);
        assert!((sigma - spec.density).abs() / spec.density < 1e-4);
    }

    #[test]
    fn splitting_blob_empties_original_center() {
        let spec = SceneSpec::splitting_blob();
        let before = eval_scene(&spec, spec.center, spec.split_time - 1e-3).0;
        let after = eval_scene(&spec, spec.center, spec.split_time + 1e-3).0;
        assert!(before > 0.9 * spec.density);
        // sdf at the centre is separation − lobe_radius = 0.08, σ = k·sigmoid(−4)
        let expect = spec.density * crate::nn::sigmoid(-(0.2 + 0.2e-3 - 0.12) / 0.02);
        assert!((after - expect).abs() < 1e-9);
        assert!(after < 0.1 * spec.density);
        assert!(spec.topology_change());
        assert!(!SceneSpec::translating_sphere().topology_change());
    }

    #[test]
    fn default_scenes_stay_in_bounds() {
        for spec in [SceneSpec::translating_sphere(), SceneSpec::pulsing_blob(), SceneSpec::splitting_blob()] {
            spec.validate().unwrap();
        }
        let mut bad = SceneSpec::translating_sphere();
        bad.velocity = [1.0, 0.0, 0.0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn checker_albedo_moves_with_object() {
        let mut spec = SceneSpec::translating_sphere();
        spec.albedo = Albedo::Checker {
            a: [1.0, 0.0, 0.0],
            b: [0.0, 0.0, 1.0],
            frequency: 10.0,
        };
        let x0 = [spec.center[0] + 0.03, 0.01, 0.02];
        let t = 0.5;
        let x1 = [x0[0] + spec.velocity[0] * t, x0[1], x0[2]];
        assert_eq!(eval_scene(&spec, x0, 0.0).1, eval_scene(&spec, x1, t).1);
    }

    #[test]
    fn pulsing_velocity_matches_radius_derivative() {
        let spec = SceneSpec::pulsing_blob();
        let t = 0.13;
        let h = 1e-6;
        let r = |t: f64| spec.components(t)[0].1;
        let dr = (r(t + h) - r(t - h)) / (2.0 * h);
        let surface = [r(t), 0.0, 0.0];
        assert!((spec.velocity_at(surface, t)[0] - dr).abs() < 1e-6);
    }
}
