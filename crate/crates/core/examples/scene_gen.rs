//! Bake every synthetic scene to a dataset directory and summarise it.
//!
//! cargo run --release --example scene_gen -- [out_dir]

use std::path::PathBuf;

use hybrid4d::io::{read_dataset, write_dataset, Dataset, DatasetManifest};
use hybrid4d::metrics::mean;
use hybrid4d::render::Camera;
use hybrid4d::scenes::{bake_reference, bake_views, ring_cameras, SceneSpec, SceneVariant};

fn main() -> hybrid4d::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "scenes".into()));
    for variant in [SceneVariant::TranslatingSphere, SceneVariant::PulsingBlob, SceneVariant::SplittingBlob] {
        let spec = SceneSpec::of_variant(variant);
        let clip = bake_reference(&spec, &Camera::orbit(0.0, 10.0, 2.0, 32, 32), 16)?;
        let views = bake_views(&spec, &ring_cameras(8, 15.0, 2.0, 32, 32, 0.0), 0.0)?;
        let coverage: Vec<f64> = clip.masks.iter().map(|m| mean(&m.values)).collect();
        let speed: Vec<f64> = clip
            .flows
            .iter()
            .map(|f| {
                let moving: Vec<f64> = f.flow.iter().map(|v| v[0].hypot(v[1])).filter(|s| *s > 0.0).collect();
                mean(&moving)
            })
            .collect();
        let dir = root.join(variant.to_string());
        write_dataset(
            &dir,
            &Dataset {
                manifest: DatasetManifest {
                    variant: variant.to_string(),
                    frames: 16,
                    width: 32,
                    height: 32,
                    views: 8,
                    seed: 0,
                    topology_change: spec.topology_change(),
                    scene: serde_json::to_value(&spec)?,
                },
                clip,
                views: Some(views),
            },
        )?;
        let back = read_dataset(&dir)?;
        println!(
            "{variant:20} coverage {:.3} -> {:.3}  mean flow {:.3} px/frame  topology change {}  ({} frames read back)",
            coverage[0],
            coverage[15],
            mean(&speed),
            back.manifest.topology_change,
            back.clip.len()
        );
    }
    Ok(())
}
