//! Render the analytic translating sphere at three times, compare the
//! renderer with a 10x oversampled midpoint quadrature and write PNGs.
//!
//! cargo run --release --example render_oracle -- [out_dir]

use std::path::PathBuf;

use hybrid4d::io::{write_png_rgb, Frame};
use hybrid4d::render::{all_pixels, generate_rays, render_image, render_ray, Camera, RenderSettings};
use hybrid4d::scenes::SceneSpec;

fn main() -> hybrid4d::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "render_oracle".into()));
    let spec = SceneSpec::translating_sphere();
    let cam = Camera::orbit(30.0, 15.0, 2.0, 48, 48);
    let coarse = RenderSettings::evaluation();
    let fine = RenderSettings {
        samples: 10 * coarse.samples,
        ..coarse
    };
    for t in [0.0, 0.5, 1.0] {
        let img = render_image(&spec, &cam, t, &coarse, 0)?;
        let mut worst = 0.0f64;
        for ray in generate_rays(&cam, &all_pixels(&cam)).iter().step_by(5) {
            let a = render_ray(&spec, &cam, ray, t, &coarse, 0)?;
            let b = render_ray(&spec, &cam, ray, t, &fine, 0)?;
            for k in 0..3 {
                worst = worst.max((a.color[k] - b.color[k]).abs());
            }
        }
        let path = out.join(format!("sphere_t{:.1}.png", t));
        write_png_rgb(
            &path,
            &Frame {
                width: img.width,
                height: img.height,
                rgb: img.rgb,
            },
        )?;
        println!("t = {t:.1}: max |128 - 1280 samples| = {worst:.2e}  -> {}", path.display());
    }
    Ok(())
}
