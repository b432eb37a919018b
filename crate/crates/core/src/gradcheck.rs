//! Finite-difference verification of every differentiable operation.
//!
//! Each registered check evaluates a scalar `L = ⟨u, op(θ)⟩` for a fixed
//! random probe `u`, compares the analytic gradient against central
//! differences on a sample of coordinates and reports the norm-wise
//! relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::field::{DynamicField, FieldConfig, FieldMode, MotionOptions};
use crate::grid::{GridConfig, GridLayout};
use crate::nn::{Activation, FinalInit, GradBuffer, Mlp, MlpConfig, ParamStore};
use crate::priors::{
    flow_loss, mask_loss, rgb_loss, sds_grad, tv_loss, ConditioningTag, NoiseSchedule, PointMassProvider, Tensor,
};
use crate::render::{backward_rays, forward_rays, generate_rays, BatchSettings, Camera, RayGrad, RayQuery};

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;
/// Smaller step for the render check, where every sample point moves and
/// cell boundaries of the fine grid levels are close.
const RENDER_STEP: f64 = 1e-7;

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, with a floor so two
/// all-zero vectors compare equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / norm(analytic).max(norm(numeric)).max(1e-12)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub op: String,
    pub coordinates: usize,
    pub relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.relative_error).fold(0.0, f64::max)
    }
}

fn result(op: &str, analytic: &[f64], numeric: &[f64]) -> CheckResult {
    let e = relative_error(analytic, numeric);
    CheckResult {
        op: op.to_string(),
        coordinates: analytic.len(),
        relative_error: e,
        passed: e <= TOLERANCE && analytic.iter().chain(numeric).all(|v| v.is_finite()),
    }
}

fn central<F: FnMut(&[f64]) -> f64>(x: &[f64], coords: &[usize], mut f: F) -> Vec<f64> {
    let mut p = x.to_vec();
    coords
        .iter()
        .map(|&j| {
            let orig = p[j];
            p[j] = orig + STEP;
            let lp = f(&p);
            p[j] = orig - STEP;
            let lm = f(&p);
            p[j] = orig;
            (lp - lm) / (2.0 * STEP)
        })
        .collect()
}

fn probe(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Coordinates to test: every nonzero analytic entry up to `max`, then
/// random others.
fn pick(grad: &[f64], max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut c: Vec<usize> = (0..grad.len()).filter(|&j| grad[j] != 0.0).collect();
    while c.len() > max {
        c.swap_remove(rng.gen_range(0..c.len()));
    }
    for _ in 0..4.min(grad.len()) {
        c.push(rng.gen_range(0..grad.len()));
    }
    c.sort_unstable();
    c.dedup();
    c
}

fn check_grid(name: &str, cfg: &GridConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let layout = GridLayout::new(cfg);
    let table = probe(rng, cfg.param_count());
    let x: Vec<f64> = (0..cfg.dimension).map(|_| rng.gen_range(0.05..0.95)).collect();
    let u = probe(rng, cfg.output_len());
    let loss = |t: &[f64], x: &[f64]| -> f64 {
        layout.encode(t, x).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum()
    };
    let mut tg = vec![0.0; table.len()];
    let mut xg = vec![0.0; x.len()];
    layout.accumulate_backward(&table, &x, &u, &mut tg, Some(&mut xg))?;
    let coords = pick(&tg, 48, rng);
    let an: Vec<f64> = coords.iter().map(|&j| tg[j]).collect();
    let nu = central(&table, &coords, |t| loss(t, &x));
    let all: Vec<usize> = (0..x.len()).collect();
    let nx = central(&x, &all, |p| loss(&table, p));
    Ok(vec![
        result(&format!("{name}.table"), &an, &nu),
        result(&format!("{name}.input"), &xg, &nx),
    ])
}

fn check_mlp(activation: Activation, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(
        &mut store,
        "probe",
        MlpConfig::new(vec![5, 7, 6, 3], activation),
        FinalInit::Uniform { bias: 0.1 },
        rng,
    )?;
    let x = probe(rng, 5);
    let u = probe(rng, 3);
    let tape = mlp.forward(&store, &x)?;
    let mut buf = GradBuffer::new(&store);
    let xg = mlp.backward(&store, &tape, &u, &mut buf)?;
    let loss = |s: &ParamStore, x: &[f64]| -> f64 { mlp.eval(s, x).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum() };
    let (mut an, mut nu) = (Vec::new(), Vec::new());
    for id in mlp.param_ids() {
        let g = buf.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.value(id).len()]);
        let coords = pick(&g, 12, rng);
        let base = store.value(id).to_vec();
        let n = central(&base, &coords, |v| {
            let mut s = store.clone();
            s.value_mut(id).copy_from_slice(v);
            loss(&s, &x)
        });
        an.extend(coords.iter().map(|&j| g[j]));
        nu.extend(n);
    }
    let all: Vec<usize> = (0..x.len()).collect();
    let nx = central(&x, &all, |p| loss(&store, p));
    let name = format!("mlp.{activation:?}").to_lowercase();
    Ok(vec![result(&format!("{name}.params"), &an, &nu), result(&format!("{name}.input"), &xg, &nx)])
}

/// Numeric derivative from `L(θ+h)`, `L(θ)`, `L(θ−h)`.
///
/// Grid interpolation is piecewise linear, so a step can cross a cell
/// boundary. When the one-sided differences disagree the loss has a kink
/// inside `[θ−h, θ+h]` and the analytic value must equal one of them.
fn kink_aware(analytic: f64, lp: f64, l0: f64, lm: f64) -> f64 {
    let central = (lp - lm) / (2.0 * RENDER_STEP);
    let forward = (lp - l0) / RENDER_STEP;
    let backward = (l0 - lm) / RENDER_STEP;
    if (forward - backward).abs() <= 1e-5 * central.abs().max(1.0) {
        return central;
    }
    if (analytic - forward).abs() < (analytic - backward).abs() {
        forward
    } else {
        backward
    }
}

/// Volume rendering of the full dynamic field (density, color, motion and
/// topology paths) through composited color, alpha and displacement.
fn check_render(config: &FieldConfig, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut field = DynamicField::new(config.clone(), rng.gen())?;
    for id in field.canonical_params().into_iter().chain(field.dynamic_params()) {
        let grid = id == field.canonical.grid || id == field.temporal_grid;
        let scale = if grid { 0.5 } else { 0.15 };
        for v in field.store.value_mut(id) {
            *v += rng.gen_range(-scale..scale);
        }
    }
    let cam = Camera::orbit(25.0, 15.0, 1.6, 5, 5);
    let cams = [cam];
    let queries: Vec<RayQuery> = generate_rays(&cams[0], &[(1, 2), (2, 2), (3, 1)])
        .into_iter()
        .enumerate()
        .map(|(i, ray)| RayQuery {
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
        .map(|_| RayGrad {
            color: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            alpha: rng.gen_range(-1.0..1.0),
            displacement: [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)],
        })
        .collect();
    let loss = |f: &DynamicField| -> f64 {
        forward_rays(f, FieldMode::Dynamic, &cams, &queries, &settings)
            .unwrap()
            .iter()
            .zip(&up)
            .map(|(o, u)| {
                (0..3).map(|k| u.color[k] * o.color[k]).sum::<f64>()
                    + u.alpha * o.alpha
                    + u.displacement[0] * o.displacement[0]
                    + u.displacement[1] * o.displacement[1]
            })
            .sum()
    };
    let grads = backward_rays(&field, FieldMode::Dynamic, &cams, &queries, &settings, &up)?;
    field.store.zero_grads();
    field.apply_grads(&grads)?;
    let (mut an, mut nu) = (Vec::new(), Vec::new());
    let l0 = loss(&field);
    let ids: Vec<_> = field.canonical_params().into_iter().chain(field.dynamic_params()).collect();
    for id in ids {
        let g = field.store.grad(id).to_vec();
        let coords = pick(&g, 6, rng);
        for j in coords {
            let orig = field.store.value(id)[j];
            field.store.value_mut(id)[j] = orig + RENDER_STEP;
            let lp = loss(&field);
            field.store.value_mut(id)[j] = orig - RENDER_STEP;
            let lm = loss(&field);
            field.store.value_mut(id)[j] = orig;
            an.push(g[j]);
            nu.push(kink_aware(g[j], lp, l0, lm));
        }
    }
    Ok(result("volume_render", &an, &nu))
}

fn check_losses(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let n = 12;
    let mut out = Vec::new();
    let flat3 = |v: &[f64]| -> Vec<[f64; 3]> { v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() };
    let flat2 = |v: &[f64]| -> Vec<[f64; 2]> { v.chunks_exact(2).map(|c| [c[0], c[1]]).collect() };

    let pred = probe(rng, 3 * n);
    let target = flat3(&probe(rng, 3 * n));
    let (_, g) = rgb_loss(&flat3(&pred), &target)?;
    let an: Vec<f64> = g.iter().flatten().copied().collect();
    let all: Vec<usize> = (0..pred.len()).collect();
    let nu = central(&pred, &all, |p| rgb_loss(&flat3(p), &target).unwrap().0);
    out.push(result("loss.rgb", &an, &nu));

    let pa = probe(rng, n);
    let ta = probe(rng, n);
    let (_, g) = mask_loss(&pa, &ta)?;
    let all: Vec<usize> = (0..n).collect();
    let nu = central(&pa, &all, |p| mask_loss(p, &ta).unwrap().0);
    out.push(result("loss.mask", &g, &nu));

    let pf = probe(rng, 2 * n);
    let tf = flat2(&probe(rng, 2 * n));
    let mask: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 0.2 } else { 0.9 }).collect();
    let (_, g) = flow_loss(&flat2(&pf), &tf, &mask)?;
    let an: Vec<f64> = g.iter().flatten().copied().collect();
    let all: Vec<usize> = (0..pf.len()).collect();
    let nu = central(&pf, &all, |p| flow_loss(&flat2(p), &tf, &mask).unwrap().0);
    out.push(result("loss.flow", &an, &nu));

    let (frames, w, h) = (3, 4, 3);
    let tv = probe(rng, frames * w * h * 2);
    let maps = |v: &[f64]| -> Vec<Vec<[f64; 2]>> { v.chunks_exact(w * h * 2).map(flat2).collect() };
    let (_, g) = tv_loss(&maps(&tv), w, h)?;
    let an: Vec<f64> = g.iter().flatten().flatten().copied().collect();
    let all: Vec<usize> = (0..tv.len()).collect();
    let nu = central(&tv, &all, |p| tv_loss(&maps(p), w, h).unwrap().0);
    out.push(result("loss.tv", &an, &nu));

    // With a point-mass prior X̂₀ is the target itself, so the SDS gradient
    // must equal the gradient of ‖X − target‖².
    let (sh, sw) = (3, 4);
    let target = probe(rng, sh * sw * 3);
    let provider = PointMassProvider::new(target.clone());
    let x = probe(rng, sh * sw * 3);
    let schedule = NoiseSchedule::default();
    let g = sds_grad(
        &provider,
        &schedule,
        &Tensor::image(sh, sw, x.clone())?,
        &ConditioningTag::None,
        (0.02, 0.98),
        rng,
    )?;
    let all: Vec<usize> = (0..x.len()).collect();
    let nu = central(&x, &all, |p| p.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum());
    out.push(result("loss.sds", &g.grad, &nu));
    Ok(out)
}

/// Run every registered check against the architecture in `config`.
pub fn run_all(config: &FieldConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    checks.extend(check_grid("grid.spatial", &config.spatial, &mut rng)?);
    checks.extend(check_grid("grid.temporal", &config.temporal, &mut rng)?);
    for act in [Activation::Identity, Activation::Sigmoid, Activation::Softplus] {
        checks.extend(check_mlp(act, &mut rng)?);
    }
    checks.push(check_render(config, &mut rng)?);
    checks.extend(check_losses(&mut rng)?);
    Ok(GradCheckReport {
        tolerance: TOLERANCE,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_a_small_field() {
        let report = run_all(&crate::field::tests::tiny_config(), 3).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{} failed: {:e}", c.op, c.relative_error);
            assert!(c.coordinates > 0, "{}", c.op);
        }
        assert!(report.checks.len() >= 14);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
