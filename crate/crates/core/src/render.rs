//! Differentiable volume rendering.
//!
//! Rays are sampled at stratified depths in `[near, far]`; sample `i` sits
//! in bin `[near + iΔ, near + (i+1)Δ]` (bin centre, or a uniform jitter
//! inside the bin) and integrates over the bin width `Δ`. Compositing uses
//! `α_i = 1 − exp(−σ_i Δ)` and `w_i = α_i ∏_{j<i} (1 − α_j)`.
//!
//! Camera convention: camera-to-world pose, camera looks down its −z axis,
//! +y is up, image rows grow downward. Pixel `(u, v)` is sampled through its
//! centre `(u + 0.5, v + 0.5)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DynamicField, FieldGrads, FieldMode, MotionOptions, PointEval, PointTape};

/// Pinhole camera with a rigid camera-to-world pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major 4×4 camera-to-world matrix; the last row is `0 0 0 1`.
    pub c2w: [f64; 16],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Domain("camera focal lengths must be positive".into()));
        }
        if !(self.near < self.far) || self.near < 0.0 {
            return Err(Error::Domain(format!(
                "camera needs 0 <= near < far, got {} / {}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Domain("camera image is empty".into()));
        }
        let r = self.rotation();
        let mut err = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let id = if i == j { 1.0 } else { 0.0 };
                err = err.max((dot - id).abs());
            }
        }
        if err > 1e-6 {
            return Err(Error::Domain(format!("camera rotation not orthonormal (err {err:e})")));
        }
        Ok(())
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.c2w;
        [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]
    }

    pub fn position(&self) -> [f64; 3] {
        [self.c2w[3], self.c2w[7], self.c2w[11]]
    }

    fn from_pose(rot: [[f64; 3]; 3], pos: [f64; 3], width: u32, height: u32, near: f64, far: f64) -> Self {
        let f = 1.5 * width as f64;
        let mut c2w = [0.0; 16];
        for i in 0..3 {
            for j in 0..3 {
                c2w[i * 4 + j] = rot[i][j];
            }
            c2w[i * 4 + 3] = pos[i];
        }
        c2w[15] = 1.0;
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            c2w,
            near,
            far,
        }
    }

    /// Camera at `eye` looking at `target`, world +y up. Focal length is
    /// `1.5 × width` pixels.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], width: u32, height: u32, near: f64, far: f64) -> Self {
        let f = normalize(sub(target, eye));
        let mut right = cross(f, [0.0, 1.0, 0.0]);
        if norm(right) < 1e-9 {
            right = cross(f, [0.0, 0.0, -1.0]);
        }
        let right = normalize(right);
        let up = cross(right, f);
        let rot = [
            [right[0], up[0], -f[0]],
            [right[1], up[1], -f[1]],
            [right[2], up[2], -f[2]],
        ];
        Self::from_pose(rot, eye, width, height, near, far)
    }

    /// Camera on a sphere of `radius` around the origin, looking at it.
    /// Azimuth 0 / elevation 0 sits on +z. Near/far bracket the scene cube.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, radius: f64, width: u32, height: u32) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = [
            radius * el.cos() * az.sin(),
            radius * el.sin(),
            radius * el.cos() * az.cos(),
        ];
        let reach = 3f64.sqrt() * crate::field::HALF_EXTENT;
        Self::look_at(eye, [0.0; 3], width, height, (radius - reach).max(1e-3), radius + reach)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Continuous pixel coordinates of a world point, or `None` behind the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        self.project_with_jacobian(p).map(|(uv, _)| uv)
    }

    /// Projection plus its 2×3 Jacobian with respect to the world point.
    pub fn project_with_jacobian(&self, p: [f64; 3]) -> Option<([f64; 2], [[f64; 3]; 2])> {
        let r = self.rotation();
        let d = sub(p, self.position());
        let pc = [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ];
        let s = -pc[2];
        if s <= 1e-9 {
            return None;
        }
        let u = self.cx + self.fx * pc[0] / s;
        let v = self.cy - self.fy * pc[1] / s;
        let du_dpc = [self.fx / s, 0.0, self.fx * pc[0] / (s * s)];
        let dv_dpc = [0.0, -self.fy / s, -self.fy * pc[1] / (s * s)];
        // ∂/∂p = R ∂/∂pc
        let mut jac = [[0.0; 3]; 2];
        for i in 0..3 {
            jac[0][i] = (0..3).map(|k| r[i][k] * du_dpc[k]).sum();
            jac[1][i] = (0..3).map(|k| r[i][k] * dv_dpc[k]).sum();
        }
        Some(([u, v], jac))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub pixel: (u32, u32),
}

impl Ray {
    pub fn at(&self, z: f64) -> [f64; 3] {
        [
            self.origin[0] + z * self.direction[0],
            self.origin[1] + z * self.direction[1],
            self.origin[2] + z * self.direction[2],
        ]
    }
}

/// Pinhole rays through the centres of `pixels`.
pub fn generate_rays(camera: &Camera, pixels: &[(u32, u32)]) -> Vec<Ray> {
    let r = camera.rotation();
    let origin = camera.position();
    pixels
        .iter()
        .map(|&(u, v)| {
            let dc = [
                (u as f64 + 0.5 - camera.cx) / camera.fx,
                -(v as f64 + 0.5 - camera.cy) / camera.fy,
                -1.0,
            ];
            let dw = [
                r[0][0] * dc[0] + r[0][1] * dc[1] + r[0][2] * dc[2],
                r[1][0] * dc[0] + r[1][1] * dc[1] + r[1][2] * dc[2],
                r[2][0] * dc[0] + r[2][1] * dc[1] + r[2][2] * dc[2],
            ];
            Ray {
                origin,
                direction: normalize(dw),
                pixel: (u, v),
            }
        })
        .collect()
}

/// All pixels of the camera in row-major order.
pub fn all_pixels(camera: &Camera) -> Vec<(u32, u32)> {
    (0..camera.height)
        .flat_map(|v| (0..camera.width).map(move |u| (u, v)))
        .collect()
}

/// Anything that can be queried for density, color and motion.
pub trait VolumeField: Sync {
    fn query(&self, x: [f64; 3], t: f64, motion: Option<MotionOptions>) -> Result<PointEval>;
}

/// A [`DynamicField`] queried in a fixed [`FieldMode`].
#[derive(Clone, Copy)]
pub struct FieldView<'a> {
    pub field: &'a DynamicField,
    pub mode: FieldMode,
}

impl<'a> FieldView<'a> {
    pub fn canonical(field: &'a DynamicField) -> Self {
        Self {
            field,
            mode: FieldMode::Canonical,
        }
    }

    pub fn dynamic(field: &'a DynamicField) -> Self {
        Self {
            field,
            mode: FieldMode::Dynamic,
        }
    }
}

impl VolumeField for FieldView<'_> {
    fn query(&self, x: [f64; 3], t: f64, motion: Option<MotionOptions>) -> Result<PointEval> {
        self.field.eval_point(x, t, self.mode, motion)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub samples: usize,
    /// Jitter sample depths inside their bins.
    pub jitter: bool,
    pub background: [f64; 3],
    /// Track motion over `dt` for displacement maps.
    pub motion: Option<MotionOptions>,
}

impl RenderSettings {
    /// 128 bin-centred samples on a white background.
    pub fn evaluation() -> Self {
        Self {
            samples: 128,
            jitter: false,
            background: [1.0; 3],
            motion: None,
        }
    }

    pub fn with_motion(mut self, motion: MotionOptions) -> Self {
        self.motion = Some(motion);
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RayOutput {
    pub color: [f64; 3],
    pub alpha: f64,
    pub depth: f64,
    /// Composited image-plane motion in pixels.
    pub displacement: [f64; 2],
    /// Some sample fell back to the approximate motion.
    pub flagged: bool,
}

const DEPTH_EPS: f64 = 1e-10;

/// Depths of `n` stratified samples in `[near, far]` and the common bin width.
pub fn sample_depths(near: f64, far: f64, n: usize, jitter: Option<&mut ChaCha8Rng>) -> (Vec<f64>, f64) {
    let bin = (far - near) / n as f64;
    let z = match jitter {
        Some(rng) => (0..n).map(|i| near + (i as f64 + rng.gen::<f64>()) * bin).collect(),
        None => (0..n).map(|i| near + (i as f64 + 0.5) * bin).collect(),
    };
    (z, bin)
}

/// Per-sample quantities fed to compositing.
struct SampleSet {
    sigma: Vec<f64>,
    color: Vec<[f64; 3]>,
    depth: Vec<f64>,
    disp: Vec<[f64; 2]>,
    /// 3D motion of each sample (zero when not tracked).
    motion: Vec<[f64; 3]>,
    flagged: bool,
}

struct CompositeCache {
    weights: Vec<f64>,
    /// Transmittance after each sample, `T_{i+1}`.
    trans_after: Vec<f64>,
}

fn composite(s: &SampleSet, bin: f64, background: [f64; 3]) -> (RayOutput, CompositeCache) {
    let n = s.sigma.len();
    let mut weights = Vec::with_capacity(n);
    let mut trans_after = Vec::with_capacity(n);
    let mut trans = 1.0;
    let mut out = RayOutput {
        flagged: s.flagged,
        ..Default::default()
    };
    let mut depth_num = 0.0;
    for i in 0..n {
        let a = 1.0 - (-s.sigma[i] * bin).exp();
        let w = trans * a;
        trans *= 1.0 - a;
        weights.push(w);
        trans_after.push(trans);
        for k in 0..3 {
            out.color[k] += w * s.color[i][k];
        }
        depth_num += w * s.depth[i];
        out.displacement[0] += w * s.disp[i][0];
        out.displacement[1] += w * s.disp[i][1];
    }
    // Equal to the sum of the weights, but never above 1 after rounding.
    out.alpha = 1.0 - trans;
    for k in 0..3 {
        out.color[k] += trans * background[k];
    }
    out.depth = depth_num / out.alpha.max(DEPTH_EPS);
    (out, CompositeCache { weights, trans_after })
}

/// Upstream gradient of a loss with respect to one ray's outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RayGrad {
    pub color: [f64; 3],
    pub alpha: f64,
    pub displacement: [f64; 2],
}

impl RayGrad {
    pub fn is_zero(&self) -> bool {
        self.color == [0.0; 3] && self.alpha == 0.0 && self.displacement == [0.0; 2]
    }
}

/// Per-sample gradients `(∂L/∂σ_i, ∂L/∂c_i, ∂L/∂m_i)` from the ray upstream.
fn composite_backward(
    s: &SampleSet,
    cache: &CompositeCache,
    bin: f64,
    background: [f64; 3],
    up: &RayGrad,
) -> (Vec<f64>, Vec<[f64; 3]>, Vec<[f64; 2]>) {
    let n = s.sigma.len();
    // g_k = ∂L/∂w_k
    let g: Vec<f64> = (0..n)
        .map(|k| {
            let mut v = up.alpha;
            for c in 0..3 {
                v += up.color[c] * (s.color[k][c] - background[c]);
            }
            v + up.displacement[0] * s.disp[k][0] + up.displacement[1] * s.disp[k][1]
        })
        .collect();
    let mut d_sigma = vec![0.0; n];
    let mut suffix = 0.0; // Σ_{k>i} g_k w_k
    for i in (0..n).rev() {
        d_sigma[i] = bin * (cache.trans_after[i] * g[i] - suffix);
        suffix += g[i] * cache.weights[i];
    }
    let d_color = cache
        .weights
        .iter()
        .map(|&w| [w * up.color[0], w * up.color[1], w * up.color[2]])
        .collect();
    let d_disp = cache
        .weights
        .iter()
        .map(|&w| [w * up.displacement[0], w * up.displacement[1]])
        .collect();
    (d_sigma, d_color, d_disp)
}

fn sample_displacement(camera: &Camera, x: [f64; 3], delta: [f64; 3]) -> [f64; 2] {
    match (camera.project(x), camera.project(crate::field::add(x, delta))) {
        (Some(a), Some(b)) => [b[0] - a[0], b[1] - a[1]],
        _ => [0.0; 2],
    }
}

fn ray_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Render one ray through `field` at time `t`.
pub fn render_ray<F: VolumeField + ?Sized>(
    field: &F,
    camera: &Camera,
    ray: &Ray,
    t: f64,
    settings: &RenderSettings,
    jitter_seed: u64,
) -> Result<RayOutput> {
    if settings.samples < 2 {
        return Err(Error::Domain("render_ray needs at least 2 samples".into()));
    }
    let mut rng = ray_rng(jitter_seed);
    let (depths, bin) = sample_depths(
        camera.near,
        camera.far,
        settings.samples,
        settings.jitter.then_some(&mut rng),
    );
    let mut set = SampleSet {
        sigma: Vec::with_capacity(depths.len()),
        color: Vec::with_capacity(depths.len()),
        disp: Vec::with_capacity(depths.len()),
        motion: Vec::new(),
        depth: depths,
        flagged: false,
    };
    for &z in &set.depth {
        let x = ray.at(z);
        let e = field.query(x, t, settings.motion)?;
        set.sigma.push(e.sigma);
        set.color.push(e.color);
        let d = match e.motion {
            Some(m) => {
                if !m.converged && e.sigma > 0.0 {
                    set.flagged = true;
                }
                sample_displacement(camera, x, m.delta)
            }
            None => [0.0; 2],
        };
        set.disp.push(d);
    }
    Ok(composite(&set, bin, settings.background).0)
}

/// Per-pixel outputs of one rendered image.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
    /// Composited image-plane motion in pixels per frame interval (zero
    /// unless motion tracking was requested).
    pub displacement: Vec<[f64; 2]>,
    pub flagged: Vec<bool>,
}

impl RenderOutput {
    fn from_rays(camera: &Camera, rays: Vec<RayOutput>) -> Self {
        Self {
            width: camera.width,
            height: camera.height,
            rgb: rays.iter().map(|r| r.color).collect(),
            alpha: rays.iter().map(|r| r.alpha).collect(),
            depth: rays.iter().map(|r| r.depth).collect(),
            displacement: rays.iter().map(|r| r.displacement).collect(),
            flagged: rays.iter().map(|r| r.flagged).collect(),
        }
    }
}

/// Render every pixel of `camera` at time `t`. Per-ray jitter seeds derive
/// from `seed` and the pixel index, so results do not depend on threading.
pub fn render_image<F: VolumeField + ?Sized>(
    field: &F,
    camera: &Camera,
    t: f64,
    settings: &RenderSettings,
    seed: u64,
) -> Result<RenderOutput> {
    camera.validate()?;
    let rays = generate_rays(camera, &all_pixels(camera));
    let out = rays
        .par_iter()
        .enumerate()
        .map(|(i, ray)| render_ray(field, camera, ray, t, settings, mix_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RenderOutput::from_rays(camera, out))
}

/// Render one frame per `(camera, time)` pair.
pub fn render_video<F: VolumeField + ?Sized>(
    field: &F,
    trajectory: &[Camera],
    times: &[f64],
    settings: &RenderSettings,
    seed: u64,
) -> Result<Vec<RenderOutput>> {
    if trajectory.len() != times.len() {
        return Err(Error::Shape(format!(
            "trajectory has {} cameras but {} frame times",
            trajectory.len(),
            times.len()
        )));
    }
    trajectory
        .iter()
        .zip(times)
        .enumerate()
        .map(|(k, (cam, &t))| render_image(field, cam, t, settings, mix_seed(seed, 1 << 32 | k as u64)))
        .collect()
}

/// Per-pixel optical flow (pixels) between `t` and `t + dt` from a fixed
/// camera, plus a flag for pixels whose motion tracking fell back to the
/// backward difference. Pixels with alpha below 0.01 have zero flow.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    pub width: u32,
    pub height: u32,
    pub flow: Vec<[f64; 2]>,
    pub flagged: Vec<bool>,
}

pub const FLOW_ALPHA_MIN: f64 = 0.01;

pub fn render_scene_flow<F: VolumeField + ?Sized>(
    field: &F,
    camera: &Camera,
    t: f64,
    dt: f64,
    samples: usize,
) -> Result<FlowMap> {
    let settings = RenderSettings {
        samples,
        jitter: false,
        background: [1.0; 3],
        motion: Some(MotionOptions::new(dt, 10)),
    };
    let out = render_image(field, camera, t, &settings, 0)?;
    let flow = out
        .displacement
        .iter()
        .zip(&out.alpha)
        .map(|(d, &a)| if a < FLOW_ALPHA_MIN { [0.0; 2] } else { *d })
        .collect();
    Ok(FlowMap {
        width: camera.width,
        height: camera.height,
        flow,
        flagged: out.flagged,
    })
}

pub(crate) fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One ray of a differentiable batch. `camera` indexes the camera slice
/// passed alongside the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayQuery {
    pub ray: Ray,
    pub camera: usize,
    pub time: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

/// Training-time render settings for a differentiable batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchSettings {
    pub samples: usize,
    pub jitter: bool,
    pub motion: Option<MotionOptions>,
}

const CHUNK: usize = 32;

/// Compositing weight below which training batches skip motion tracking.
pub const MOTION_WEIGHT_MIN: f64 = 1e-5;

fn trace_taped(
    field: &DynamicField,
    mode: FieldMode,
    cameras: &[Camera],
    q: &RayQuery,
    settings: &BatchSettings,
    keep_tapes: bool,
) -> Result<(SampleSet, f64, Vec<Option<PointTape>>, Vec<[f64; 3]>)> {
    let camera = cameras
        .get(q.camera)
        .ok_or_else(|| Error::Shape(format!("ray refers to camera {} of {}", q.camera, cameras.len())))?;
    let mut rng = ray_rng(q.seed);
    let (depths, bin) = sample_depths(
        camera.near,
        camera.far,
        settings.samples,
        settings.jitter.then_some(&mut rng),
    );
    let n = depths.len();
    let mut set = SampleSet {
        sigma: Vec::with_capacity(n),
        color: Vec::with_capacity(n),
        disp: Vec::with_capacity(n),
        motion: Vec::with_capacity(n),
        depth: depths,
        flagged: false,
    };
    let mut tapes = Vec::with_capacity(if keep_tapes { n } else { 0 });
    let mut points = Vec::with_capacity(n);
    for &z in &set.depth {
        let x = q.ray.at(z);
        let e = if keep_tapes {
            let (e, tape) = field.eval_point_taped(x, q.time, mode, None)?;
            tapes.push(Some(tape));
            e
        } else {
            field.eval_point(x, q.time, mode, None)?
        };
        set.sigma.push(e.sigma);
        set.color.push(e.color);
        set.disp.push([0.0; 2]);
        set.motion.push([0.0; 3]);
        points.push(x);
    }
    if let (Some(opts), FieldMode::Dynamic) = (settings.motion, mode) {
        // Motion only matters through the compositing weights; samples the
        // ray barely sees are left at rest.
        let mut trans = 1.0;
        for i in 0..n {
            let a = 1.0 - (-set.sigma[i] * bin).exp();
            let w = trans * a;
            trans *= 1.0 - a;
            if w <= MOTION_WEIGHT_MIN {
                continue;
            }
            let m = match tapes.get_mut(i) {
                Some(Some(tape)) => field.attach_motion(tape, opts)?,
                _ => field.motion(points[i], q.time, opts)?,
            };
            if !m.converged {
                set.flagged = true;
            }
            set.motion[i] = m.delta;
            set.disp[i] = sample_displacement(camera, points[i], m.delta);
        }
    }
    Ok((set, bin, tapes, points))
}

/// Forward pass over a batch of rays (no tapes kept).
pub fn forward_rays(
    field: &DynamicField,
    mode: FieldMode,
    cameras: &[Camera],
    queries: &[RayQuery],
    settings: &BatchSettings,
) -> Result<Vec<RayOutput>> {
    queries
        .par_iter()
        .map(|q| {
            let (set, bin, _, _) = trace_taped(field, mode, cameras, q, settings, false)?;
            Ok(composite(&set, bin, q.background).0)
        })
        .collect()
}

/// Backward pass: re-traces each ray with tapes and backpropagates
/// `upstream`. Chunks are reduced in order, so the result is independent of
/// the number of worker threads.
pub fn backward_rays(
    field: &DynamicField,
    mode: FieldMode,
    cameras: &[Camera],
    queries: &[RayQuery],
    settings: &BatchSettings,
    upstream: &[RayGrad],
) -> Result<FieldGrads> {
    if upstream.len() != queries.len() {
        return Err(Error::Shape(format!(
            "{} upstream gradients for {} rays",
            upstream.len(),
            queries.len()
        )));
    }
    let parts = queries
        .par_chunks(CHUNK)
        .zip(upstream.par_chunks(CHUNK))
        .map(|(qs, ups)| {
            let mut grads = FieldGrads::new(field);
            for (q, up) in qs.iter().zip(ups) {
                if up.is_zero() {
                    continue;
                }
                let (set, bin, tapes, points) = trace_taped(field, mode, cameras, q, settings, true)?;
                let camera = &cameras[q.camera];
                let (_, cache) = composite(&set, bin, q.background);
                let (d_sigma, d_color, d_disp) = composite_backward(&set, &cache, bin, q.background, up);
                for i in 0..set.sigma.len() {
                    let tape = tapes[i].as_ref().expect("taped trace");
                    let d_motion = match settings.motion {
                        Some(_) if d_disp[i] != [0.0; 2] => motion_grad(camera, points[i], set.motion[i], d_disp[i]),
                        _ => [0.0; 3],
                    };
                    if d_sigma[i] == 0.0 && d_color[i] == [0.0; 3] && d_motion == [0.0; 3] {
                        continue;
                    }
                    field.backward_point(tape, d_sigma[i], d_color[i], d_motion, &mut grads)?;
                }
            }
            Ok(grads)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = FieldGrads::new(field);
    for p in parts {
        total.merge(p);
    }
    Ok(total)
}

/// ∂L/∂(3D motion) of one sample from ∂L/∂(pixel displacement).
fn motion_grad(camera: &Camera, x: [f64; 3], delta: [f64; 3], d_disp: [f64; 2]) -> [f64; 3] {
    if camera.project(x).is_none() {
        return [0.0; 3];
    }
    match camera.project_with_jacobian(crate::field::add(x, delta)) {
        Some((_, jac)) => [0, 1, 2].map(|k| d_disp[0] * jac[0][k] + d_disp[1] * jac[1][k]),
        None => [0.0; 3],
    }
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::tests::{perturb_dynamic, tiny_config};
    use crate::gradcheck::relative_error;
    use crate::scenes::SceneSpec;

    fn identity_camera(width: u32, height: u32) -> Camera {
        let mut c2w = [0.0; 16];
        for i in 0..4 {
            c2w[i * 4 + i] = 1.0;
        }
        Camera {
            fx: 50.0,
            fy: 40.0,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            c2w,
            near: 0.5,
            far: 3.0,
        }
    }

    struct Uniform {
        sigma: f64,
        color: [f64; 3],
        /// Occupied depth range along world z (slab).
        z: (f64, f64),
    }

    impl VolumeField for Uniform {
        fn query(&self, x: [f64; 3], _: f64, _: Option<MotionOptions>) -> Result<PointEval> {
            let inside = x[2] >= self.z.0 && x[2] <= self.z.1;
            Ok(PointEval {
                sigma: if inside { self.sigma } else { 0.0 },
                color: self.color,
                motion: None,
            })
        }
    }

    #[test]
    fn principal_ray_looks_down_negative_z_from_origin() {
        let cam = identity_camera(10, 8);
        let ray = generate_rays(&cam, &[(5, 4)])[0];
        assert_eq!(ray.origin, [0.0; 3]);
        // pixel centre (5.5, 4.5) is half a pixel off the principal point
        let expect = normalize([0.5 / 50.0, -0.5 / 40.0, -1.0]);
        for k in 0..3 {
            assert!((ray.direction[k] - expect[k]).abs() < 1e-15);
        }
        assert!(ray.direction[2] < -0.99);
        assert!((norm(ray.direction) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corner_pixel_matches_pinhole_formula() {
        let cam = Camera::orbit(40.0, 20.0, 2.0, 16, 12);
        let ray = generate_rays(&cam, &[(0, 0)])[0];
        let dc = [(0.5 - cam.cx) / cam.fx, -(0.5 - cam.cy) / cam.fy, -1.0];
        let r = cam.rotation();
        let dw = normalize([0, 1, 2].map(|i| (0..3).map(|k| r[i][k] * dc[k]).sum::<f64>()));
        for k in 0..3 {
            assert!((ray.direction[k] - dw[k]).abs() < 1e-12);
        }
        // projecting a point on the ray returns the pixel centre
        let uv = cam.project(ray.at(1.3)).unwrap();
        assert!((uv[0] - 0.5).abs() < 1e-9 && (uv[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn empty_space_renders_background() {
        let cam = identity_camera(4, 4);
        let f = Uniform {
            sigma: 0.0,
            color: [1.0, 0.0, 0.0],
            z: (-10.0, 10.0),
        };
        let bg = [0.2, 0.4, 0.6];
        let settings = RenderSettings {
            background: bg,
            ..RenderSettings::evaluation()
        };
        let out = render_image(&f, &cam, 0.0, &settings, 0).unwrap();
        assert!(out.alpha.iter().all(|&a| a == 0.0));
        assert!(out.rgb.iter().all(|&c| c == bg));
    }

    #[test]
    fn dense_slab_saturates_to_its_color() {
        let cam = identity_camera(2, 2);
        let f = Uniform {
            sigma: 1e4,
            color: [0.3, 0.6, 0.9],
            z: (-2.0, -1.0),
        };
        let out = render_image(&f, &cam, 0.0, &RenderSettings::evaluation(), 0).unwrap();
        for (c, a) in out.rgb.iter().zip(&out.alpha) {
            assert!((a - 1.0).abs() < 1e-12);
            for k in 0..3 {
                assert!((c[k] - [0.3, 0.6, 0.9][k]).abs() < 1e-12);
            }
        }
    }

    fn random_set(n: usize, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SampleSet {
            sigma: (0..n).map(|_| rng.gen_range(0.0..20.0)).collect(),
            color: (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
            depth: (0..n).map(|i| 1.0 + i as f64 * 0.05).collect(),
            disp: (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect(),
            motion: vec![[0.0; 3]; n],
            flagged: false,
        }
    }

    #[test]
    fn transmittance_is_monotone_and_weights_sum_below_one() {
        let set = random_set(64, 1);
        let (out, cache) = composite(&set, 0.05, [1.0; 3]);
        let mut prev = 1.0;
        for &t in &cache.trans_after {
            assert!(t <= prev);
            prev = t;
        }
        let sum: f64 = cache.weights.iter().sum();
        assert!((0.0..=1.0).contains(&sum));
        assert!((sum - out.alpha).abs() < 1e-15);
    }

    #[test]
    fn composite_is_linear_in_colors() {
        let mut set = random_set(32, 2);
        let (a, _) = composite(&set, 0.05, [0.0; 3]);
        for c in &mut set.color {
            *c = c.map(|v| 2.0 * v);
        }
        let (b, _) = composite(&set, 0.05, [0.0; 3]);
        for k in 0..3 {
            assert!((b.color[k] - 2.0 * a.color[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let set = random_set(24, 3);
        let bin = 0.04;
        let bg = [0.3, 0.5, 0.7];
        let up = RayGrad {
            color: [0.7, -1.1, 0.4],
            alpha: 0.9,
            displacement: [0.3, -0.2],
        };
        let loss = |s: &SampleSet| {
            let (o, _) = composite(s, bin, bg);
            (0..3).map(|k| up.color[k] * o.color[k]).sum::<f64>()
                + up.alpha * o.alpha
                + up.displacement[0] * o.displacement[0]
                + up.displacement[1] * o.displacement[1]
        };
        let (_, cache) = composite(&set, bin, bg);
        let (ds, dc, dd) = composite_backward(&set, &cache, bin, bg, &up);
        let h = 1e-6;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in 0..set.sigma.len() {
            let mut a = random_set(24, 3);
            let mut b = random_set(24, 3);
            a.sigma[i] += h;
            b.sigma[i] -= h;
            analytic.push(ds[i]);
            numeric.push((loss(&a) - loss(&b)) / (2.0 * h));
            for k in 0..3 {
                let mut a = random_set(24, 3);
                let mut b = random_set(24, 3);
                a.color[i][k] += h;
                b.color[i][k] -= h;
                analytic.push(dc[i][k]);
                numeric.push((loss(&a) - loss(&b)) / (2.0 * h));
            }
            for k in 0..2 {
                let mut a = random_set(24, 3);
                let mut b = random_set(24, 3);
                a.disp[i][k] += h;
                b.disp[i][k] -= h;
                analytic.push(dd[i][k]);
                numeric.push((loss(&a) - loss(&b)) / (2.0 * h));
            }
        }
        assert!(relative_error(&analytic, &numeric) < 1e-7);
    }

    /// Independent quadrature: midpoint rule with `n` bins, composited directly.
    fn oracle(spec: &SceneSpec, ray: &Ray, near: f64, far: f64, n: usize, bg: [f64; 3]) -> ([f64; 3], f64) {
        let dz = (far - near) / n as f64;
        let mut trans = 1.0;
        let mut color = [0.0; 3];
        for i in 0..n {
            let x = ray.at(near + (i as f64 + 0.5) * dz);
            let (sigma, c) = if crate::field::in_bounds(x) {
                crate::scenes::eval_scene(spec, x, 0.0)
            } else {
                (0.0, [0.0; 3])
            };
            let a = 1.0 - (-sigma * dz).exp();
            for k in 0..3 {
                color[k] += trans * a * c[k];
            }
            trans *= 1.0 - a;
        }
        for k in 0..3 {
            color[k] += trans * bg[k];
        }
        (color, 1.0 - trans)
    }

    #[test]
    fn sphere_matches_oversampled_oracle() {
        let spec = SceneSpec::translating_sphere();
        let cam = Camera::orbit(20.0, 10.0, 2.0, 24, 24);
        let rays = generate_rays(&cam, &all_pixels(&cam));
        let settings = RenderSettings::evaluation();
        for ray in rays.iter().step_by(7) {
            let r = render_ray(&spec, &cam, ray, 0.0, &settings, 0).unwrap();
            let (c, a) = oracle(&spec, ray, cam.near, cam.far, 1280, settings.background);
            assert!((r.alpha - a).abs() <= 1e-3);
            for k in 0..3 {
                assert!((r.color[k] - c[k]).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn static_field_frames_are_identical_over_time() {
        let spec = SceneSpec::translating_sphere().frozen();
        let cam = Camera::orbit(0.0, 0.0, 2.0, 8, 8);
        let frames = render_video(&spec, &[cam.clone(), cam], &[0.1, 0.8], &RenderSettings::evaluation(), 5).unwrap();
        assert_eq!(frames[0], frames[1]);
    }

    #[test]
    fn zero_deformation_gives_zero_flow() {
        let field = DynamicField::new(tiny_config(), 4).unwrap();
        let cam = Camera::orbit(10.0, 5.0, 2.0, 6, 6);
        let flow = render_scene_flow(&FieldView::dynamic(&field), &cam, 0.3, 0.1, 32).unwrap();
        assert!(flow.flow.iter().all(|f| *f == [0.0; 2]));
        assert!(flow.flagged.iter().all(|f| !f));
    }

    fn pixel_loss(
        field: &DynamicField,
        cam: &Camera,
        queries: &[RayQuery],
        settings: &BatchSettings,
        up: &[RayGrad],
    ) -> f64 {
        let out = forward_rays(field, FieldMode::Dynamic, std::slice::from_ref(cam), queries, settings).unwrap();
        out.iter()
            .zip(up)
            .map(|(o, u)| {
                (0..3).map(|k| u.color[k] * o.color[k]).sum::<f64>()
                    + u.alpha * o.alpha
                    + u.displacement[0] * o.displacement[0]
                    + u.displacement[1] * o.displacement[1]
            })
            .sum()
    }

    #[test]
    fn rendered_pixels_backpropagate_into_every_head() {
        let mut field = DynamicField::new(tiny_config(), 21).unwrap();
        perturb_dynamic(&mut field, 22, 0.15);
        let cam = Camera::orbit(25.0, 15.0, 1.6, 5, 5);
        let rays = generate_rays(&cam, &[(1, 2), (2, 2), (3, 1)]);
        let queries: Vec<RayQuery> = rays
            .iter()
            .enumerate()
            .map(|(i, &ray)| RayQuery {
                ray,
                camera: 0,
                time: 0.37,
                background: [0.4, 0.5, 0.6],
                seed: i as u64,
            })
            .collect();
        let settings = BatchSettings {
            samples: 24,
            jitter: true,
            motion: Some(MotionOptions::new(0.1, 1)),
        };
        let up: Vec<RayGrad> = (0..queries.len())
            .map(|i| RayGrad {
                color: [0.5, -0.3 * i as f64, 0.8],
                alpha: 0.2,
                displacement: [0.05, -0.07],
            })
            .collect();
        let grads = backward_rays(&field, FieldMode::Dynamic, std::slice::from_ref(&cam), &queries, &settings, &up).unwrap();
        field.store.zero_grads();
        field.apply_grads(&grads).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let ids: Vec<_> = field.dynamic_params().into_iter().chain(field.canonical_params()).collect();
        for id in ids {
            let len = field.store.value(id).len();
            for _ in 0..6 {
                let j = rng.gen_range(0..len);
                let g = field.store.grad(id)[j];
                let h = 1e-6;
                let orig = field.store.value(id)[j];
                field.store.value_mut(id)[j] = orig + h;
                let lp = pixel_loss(&field, &cam, &queries, &settings, &up);
                field.store.value_mut(id)[j] = orig - h;
                let lm = pixel_loss(&field, &cam, &queries, &settings, &up);
                field.store.value_mut(id)[j] = orig;
                analytic.push(g);
                numeric.push((lp - lm) / (2.0 * h));
            }
        }
        assert!(analytic.iter().any(|&g| g != 0.0));
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err:e}");
    }

    #[test]
    fn backward_is_independent_of_chunking() {
        let mut field = DynamicField::new(tiny_config(), 31).unwrap();
        perturb_dynamic(&mut field, 32, 0.1);
        let cam = Camera::orbit(0.0, 0.0, 1.6, 10, 10);
        let rays = generate_rays(&cam, &all_pixels(&cam));
        let queries: Vec<RayQuery> = rays
            .iter()
            .map(|&ray| RayQuery {
                ray,
                camera: 0,
                time: 0.5,
                background: [1.0; 3],
                seed: 0,
            })
            .collect();
        let settings = BatchSettings {
            samples: 16,
            jitter: false,
            motion: None,
        };
        let up = vec![
            RayGrad {
                color: [1.0, 0.5, 0.25],
                ..Default::default()
            };
            queries.len()
        ];
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let mut f = field.clone();
            pool.install(|| {
                let g = backward_rays(&f, FieldMode::Dynamic, std::slice::from_ref(&cam), &queries, &settings, &up).unwrap();
                f.apply_grads(&g).unwrap();
            });
            f.store.flat_grads()
        };
        let a = run(1);
        let b = run(3);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
