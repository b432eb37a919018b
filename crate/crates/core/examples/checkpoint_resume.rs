//! Train, checkpoint halfway, reload and finish; the loss history and final
//! parameters match an uninterrupted run bit for bit.

use hybrid4d::config::Config;
use hybrid4d::field::DynamicField;
use hybrid4d::scenes::{bake_views, ring_cameras, SceneSpec};
use hybrid4d::trainer::{load_checkpoint, loss_csv, run_static_stage, save_checkpoint, Stage, StaticProviders, TrainState};

fn main() -> hybrid4d::Result<()> {
    let mut cfg = Config::default();
    cfg.schedule.static_iterations = 40;
    cfg.schedule.static_weights.sds_2d = 0.0;
    cfg.schedule.static_weights.sds_3d = 0.0;
    let targets = bake_views(&SceneSpec::translating_sphere(), &ring_cameras(4, 15.0, 2.0, 24, 24, 0.0), 0.0)?;
    let none = StaticProviders::default();

    let mut a = DynamicField::new(cfg.grids.clone(), 7)?;
    let mut sa = TrainState::new(Stage::Static, 7, &a, cfg.schedule.learning_rate);
    run_static_stage(&mut a, &targets, &none, &cfg, &mut sa, usize::MAX)?;

    let mut b = DynamicField::new(cfg.grids.clone(), 7)?;
    let mut sb = TrainState::new(Stage::Static, 7, &b, cfg.schedule.learning_rate);
    run_static_stage(&mut b, &targets, &none, &cfg, &mut sb, 20)?;
    let dir = std::env::temp_dir().join("h4d_checkpoint_resume");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("half.h4dc");
    save_checkpoint(&path, &b, 7, &sb, None)?;
    println!("checkpoint: {} bytes", std::fs::metadata(&path)?.len());
    let loaded = load_checkpoint(&path)?;
    let (mut b, mut sb) = (loaded.field, loaded.state);
    run_static_stage(&mut b, &targets, &none, &cfg, &mut sb, usize::MAX)?;

    let same_loss = loss_csv(&sa.history) == loss_csv(&sb.history);
    let same_params = a.store.flat_values().iter().zip(b.store.flat_values()).all(|(x, y)| x.to_bits() == y.to_bits());
    println!("final loss {:.6e}; history identical: {same_loss}; parameters identical: {same_params}", sa.history.last().unwrap().total);
    Ok(())
}
