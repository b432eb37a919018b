//! Two-stage fit of a reference clip with direct priors only: the static
//! stage on frame 0, then the dynamic stage on all frames. Reports
//! input-view PSNR and flow endpoint error.
//!
//! cargo run --release --example dynamic_fit -- [variant] [static_iters] [dynamic_iters] [no-topology]

use std::time::Instant;

use hybrid4d::config::Config;
use hybrid4d::field::DynamicField;
use hybrid4d::metrics::{endpoint_error, mask_iou, mean, psnr};
use hybrid4d::render::{render_image, render_scene_flow, FieldView, RenderSettings};
use hybrid4d::scenes::{bake_reference, SceneSpec};
use hybrid4d::trainer::{run_dynamic_stage, run_static_stage, DynamicProviders, Stage, StaticProviders, TrainState};
use hybrid4d::priors::DirectPriorTargets;

fn main() -> hybrid4d::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant = args.first().map(String::as_str).unwrap_or("translating_sphere");
    let static_iters = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(300);
    let dynamic_iters = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(600);

    let mut cfg = Config::default();
    cfg.scene.variant = variant.parse()?;
    cfg.schedule.static_iterations = static_iters;
    cfg.schedule.dynamic_iterations = dynamic_iters;
    cfg.schedule.static_weights.sds_2d = 0.0;
    cfg.schedule.static_weights.sds_3d = 0.0;
    cfg.schedule.video_sds = 0.0;
    cfg.schedule.bsd = 0.0;
    cfg.grids.spatial.table_size_log2 = 14;
    cfg.grids.temporal.table_size_log2 = 14;
    cfg.grids.use_topology = args.get(3).map(String::as_str) != Some("no-topology");

    let spec = SceneSpec::of_variant(cfg.scene.variant);
    let camera = cfg.scene.input_camera();
    let clip = bake_reference(&spec, &camera, cfg.scene.frames)?;
    let first = DirectPriorTargets {
        cameras: vec![clip.cameras[0].clone()],
        times: vec![0.0],
        frames: vec![clip.frames[0].clone()],
        masks: vec![clip.masks[0].clone()],
        flows: vec![],
    };

    let t0 = Instant::now();
    let mut field = DynamicField::new(cfg.grids.clone(), 3)?;
    let mut st = TrainState::new(Stage::Static, 3, &field, cfg.schedule.learning_rate);
    run_static_stage(&mut field, &first, &StaticProviders::default(), &cfg, &mut st, usize::MAX)?;
    println!("static stage: {:.1}s", t0.elapsed().as_secs_f64());

    let mut dy = TrainState::new(Stage::Dynamic, 3, &field, cfg.schedule.learning_rate);
    let mut providers = DynamicProviders::default();
    let step = (dynamic_iters / 4).max(1);
    while dy.iteration < dynamic_iters {
        let until = dy.iteration + step;
        run_dynamic_stage(&mut field, &clip, &mut providers, &cfg, &mut dy, until)?;
        let settings = RenderSettings::evaluation();
        let (mut p, mut iou, mut epe) = (vec![], vec![], vec![]);
        for k in 0..clip.len() {
            let out = render_image(&FieldView::dynamic(&field), &camera, clip.times[k], &settings, 0)?;
            p.push(psnr(&out.rgb, &clip.frames[k].rgb)?);
            iou.push(mask_iou(&out.alpha, &clip.masks[k].values)?);
            if k < clip.flows.len() {
                let dt = clip.times[1] - clip.times[0];
                let flow = render_scene_flow(&FieldView::dynamic(&field), &camera, clip.times[k], dt, 128)?;
                epe.push(endpoint_error(&flow.flow, &clip.flows[k].flow, &clip.masks[k].values)?);
            }
        }
        println!(
            "iter {:5}  PSNR {:.2} dB  IoU {:.3} (last half {:.3})  EPE {:.3} px  ({:.1}s)",
            dy.iteration,
            mean(&p),
            mean(&iou),
            mean(&iou[iou.len() / 2 + 1..]),
            mean(&epe),
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
