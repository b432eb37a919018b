//! Property tests over randomized inputs.

use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hybrid4d::checkpoint::{Checkpoint, Data};
use hybrid4d::config::Config;
use hybrid4d::field::{MotionOptions, PointEval};
use hybrid4d::grid::{corner_weights, encode, GridConfig, GridParams};
use hybrid4d::metrics::psnr;
use hybrid4d::priors::{
    bsd_grad, sds_grad, tv_loss, ConditioningTag, NoiseSchedule, OracleProvider, PointMassProvider, Tensor,
};
use hybrid4d::render::{generate_rays, render_ray, Camera, RenderSettings, VolumeField};
use hybrid4d::trainer::{Profile, WeightSchedule};

fn grid(dimension: usize) -> GridConfig {
    GridConfig {
        dimension,
        levels: 4,
        features_per_level: 2,
        base_resolution: 4,
        per_level_scale: 1.7,
        table_size_log2: 9,
    }
}

/// Piecewise-constant density slabs along z with fixed colors.
#[derive(Debug)]
struct Slabs {
    sigma: Vec<f64>,
    color: Vec<[f64; 3]>,
}

impl VolumeField for Slabs {
    fn query(&self, x: [f64; 3], _: f64, _: Option<MotionOptions>) -> hybrid4d::Result<PointEval> {
        let k = (((x[2] + 1.0) / 2.0 * self.sigma.len() as f64).floor().max(0.0) as usize).min(self.sigma.len() - 1);
        Ok(PointEval {
            sigma: self.sigma[k],
            color: self.color[k],
            motion: None,
        })
    }
}

fn slabs() -> impl Strategy<Value = Slabs> {
    prop::collection::vec((0.0..20.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), 1..8).prop_map(|v| Slabs {
        sigma: v.iter().map(|s| s.0).collect(),
        color: v.iter().map(|s| [s.1, s.2, s.3]).collect(),
    })
}

fn down_camera() -> Camera {
    Camera::look_at([0.0, 0.0, 1.5], [0.0, 0.0, 0.0], 4, 4, 0.5, 2.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corner_weights_partition_unity(x in prop::collection::vec(0.0..=1.0f64, 4), level in 0usize..4) {
        for d in [3, 4] {
            let w = corner_weights(&grid(d), level, &x[..d]).unwrap();
            prop_assert_eq!(w.len(), 1 << d);
            let sum: f64 = w.iter().map(|c| c.1).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|c| c.1 >= 0.0));
        }
    }

    #[test]
    fn encoding_is_continuous_and_deterministic(x in prop::collection::vec(0.01..0.99f64, 3), seed in 0u64..100) {
        let cfg = grid(3);
        let params = GridParams::random(&cfg, &mut ChaCha8Rng::seed_from_u64(seed), 1.0);
        let a = encode(&cfg, &params, &x).unwrap();
        prop_assert_eq!(&a, &encode(&cfg, &params, &x).unwrap());
        let y: Vec<f64> = x.iter().map(|v| v + 1e-9).collect();
        let b = encode(&cfg, &params, &y).unwrap();
        let gap = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(gap < 1e-6, "gap {}", gap);
    }

    #[test]
    fn ray_outputs_are_bounded(field in slabs(), px in 0u32..4, py in 0u32..4, bg in 0.0..1.0f64) {
        let cam = down_camera();
        let ray = generate_rays(&cam, &[(px, py)]).remove(0);
        let norm: f64 = ray.direction.iter().map(|d| d * d).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() <= 1e-9);
        let settings = RenderSettings { samples: 32, jitter: false, background: [bg; 3], motion: None };
        let out = render_ray(&field, &cam, &ray, 0.0, &settings, 0).unwrap();
        prop_assert!((0.0..=1.0).contains(&out.alpha), "alpha {:e}", out.alpha);
        for c in out.color {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&c));
        }
    }

    #[test]
    fn render_is_linear_in_colors(field in slabs(), scale in 0.1..3.0f64) {
        let cam = down_camera();
        let ray = generate_rays(&cam, &[(1, 2)]).remove(0);
        let settings = RenderSettings { samples: 32, jitter: true, background: [0.0; 3], motion: None };
        let scaled = Slabs {
            sigma: field.sigma.clone(),
            color: field.color.iter().map(|c| c.map(|v| v * scale)).collect(),
        };
        let a = render_ray(&field, &cam, &ray, 0.0, &settings, 3).unwrap();
        let b = render_ray(&scaled, &cam, &ray, 0.0, &settings, 3).unwrap();
        for k in 0..3 {
            prop_assert!((b.color[k] - scale * a.color[k]).abs() <= 1e-12);
        }
        prop_assert_eq!(a.alpha, b.alpha);
    }

    #[test]
    fn camera_rotation_is_orthonormal(az in 0.0..360.0f64, el in -80.0..80.0f64, r in 1.0..4.0f64) {
        let m = Camera::orbit(az, el, r, 8, 8).rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - expect).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn perfect_provider_gives_zero_sds(data in prop::collection::vec(-1.0..2.0f64, 12), seed in 0u64..1000) {
        let x = Tensor::image(2, 2, data.clone()).unwrap();
        let g = sds_grad(
            &OracleProvider { clean: data },
            &NoiseSchedule::default(),
            &x,
            &ConditioningTag::None,
            (0.02, 0.98),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        prop_assert!(g.grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bsd_swap_negates(data in prop::collection::vec(0.0..1.0f64, 12), a in prop::collection::vec(0.0..1.0f64, 12), b in prop::collection::vec(0.0..1.0f64, 12), seed in 0u64..1000) {
        let x = Tensor::image(2, 2, data).unwrap();
        let (pa, pb) = (PointMassProvider::new(a), PointMassProvider::new(b));
        let s = NoiseSchedule::default();
        let run = |p: &PointMassProvider, q: &PointMassProvider| {
            bsd_grad(p, q, &s, &x, &ConditioningTag::None, (0.02, 0.98), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().grad
        };
        let (ab, ba) = (run(&pa, &pb), run(&pb, &pa));
        prop_assert!(ab.iter().zip(&ba).all(|(p, q)| p.to_bits() == (-q).to_bits()));
        prop_assert!(run(&pa, &pa).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tv_is_nonnegative_and_vanishes_on_constants(maps in prop::collection::vec(prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 6), 2..5), c in -1.0..1.0f64) {
        let m: Vec<Vec<[f64; 2]>> = maps.iter().map(|f| f.iter().map(|p| [p.0, p.1]).collect()).collect();
        prop_assert!(tv_loss(&m, 3, 2).unwrap().0 >= 0.0);
        let flat: Vec<Vec<[f64; 2]>> = m.iter().map(|f| vec![[c, -c]; f.len()]).collect();
        prop_assert_eq!(tv_loss(&flat, 3, 2).unwrap().0, 0.0);
    }

    #[test]
    fn decays_are_monotone(initial in 0.0..1e4f64, frac in 0.0..=1.0f64, window in 0.05..=1.0f64, cosine in any::<bool>(), total in 1usize..3000) {
        let profile = if cosine { Profile::Cosine } else { Profile::Linear };
        let s = WeightSchedule::decay(initial, initial * frac, profile, window);
        let mut prev = s.at(0, total);
        prop_assert_eq!(prev, initial);
        for i in 1..=total {
            let w = s.at(i, total);
            prop_assert!(w <= prev && w >= initial * frac);
            prev = w;
        }
        prop_assert_eq!(prev, initial * frac);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise(a in prop::collection::vec(any::<f64>(), 0..40), b in prop::collection::vec(any::<u64>(), 0..10), c in prop::collection::vec(any::<f32>(), 0..10)) {
        let mut ck = Checkpoint::new();
        ck.push("a", vec![a.len() as u64], Data::F64(a.clone())).unwrap();
        ck.push("b", vec![b.len() as u64], Data::U64(b.clone())).unwrap();
        ck.push("c", vec![c.len() as u64], Data::F32(c.clone())).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let a2 = back.f64s("a").unwrap();
        prop_assert!(a.iter().zip(a2).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn psnr_is_symmetric(p in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), 1..20), shift in 0.001..0.5f64) {
        let a: Vec<[f64; 3]> = p.iter().map(|v| [v.0, v.1, v.2]).collect();
        let b: Vec<[f64; 3]> = a.iter().map(|v| v.map(|c| c + shift)).collect();
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(psnr(&a, &a).unwrap(), 99.0);
    }

    #[test]
    fn overrides_land_in_the_config(samples in 2usize..500, lr in 1e-5..1.0f64) {
        let cfg = Config::load(None, &[format!("render.train_samples={samples}"), format!("schedule.learning_rate={lr:e}")]).unwrap();
        prop_assert_eq!(cfg.render.train_samples, samples);
        prop_assert_eq!(cfg.schedule.learning_rate, lr);
        prop_assert_eq!(Config::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
