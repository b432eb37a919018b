//! Fit the canonical field to multi-view stills of frame 0 with direct
//! losses only, and report held-out PSNR as training proceeds.
//!
//! cargo run --release --example static_fit -- [iterations] [resolution]

use std::time::Instant;

use hybrid4d::config::Config;
use hybrid4d::field::DynamicField;
use hybrid4d::metrics::psnr;
use hybrid4d::render::{render_image, FieldView, RenderSettings};
use hybrid4d::scenes::{bake_views, ring_cameras, SceneSpec};
use hybrid4d::trainer::{run_static_stage, Stage, StaticProviders, TrainState};

fn main() -> hybrid4d::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let iterations = args.first().copied().unwrap_or(600);
    let res = args.get(1).copied().unwrap_or(64) as u32;

    let mut cfg = Config::default();
    cfg.schedule.static_iterations = iterations;
    cfg.schedule.static_weights.sds_2d = 0.0;
    cfg.schedule.static_weights.sds_3d = 0.0;
    cfg.grids.spatial.table_size_log2 = 14;

    let spec = SceneSpec::translating_sphere();
    let train = bake_views(&spec, &ring_cameras(8, 15.0, 2.0, res, res, 0.0), 0.0)?;
    let held_out = ring_cameras(1, 25.0, 2.0, res, res, 22.5).remove(0);
    let truth = render_image(&spec, &held_out, 0.0, &RenderSettings::evaluation(), 0)?;

    let mut field = DynamicField::new(cfg.grids.clone(), 1)?;
    let mut state = TrainState::new(Stage::Static, 1, &field, cfg.schedule.learning_rate);
    let start = Instant::now();
    let step = (iterations / 6).max(1);
    while state.iteration < iterations {
        let until = state.iteration + step;
        run_static_stage(&mut field, &train, &StaticProviders::default(), &cfg, &mut state, until)?;
        let out = render_image(&FieldView::canonical(&field), &held_out, 0.0, &RenderSettings::evaluation(), 0)?;
        let last = state.history.last().unwrap();
        println!(
            "iter {:5}  loss {:.4e}  held-out PSNR {:.2} dB  ({:.1}s)",
            state.iteration,
            last.total,
            psnr(&out.rgb, &truth.rgb)?,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
