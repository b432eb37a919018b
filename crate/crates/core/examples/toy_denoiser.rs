//! Train the toy denoiser on a baked reference clip and use it as a prior:
//! prints the per-epoch loss, then compares SDS against a noise-free copy of
//! the clip and against a shuffled-pixel image.
//!
//! cargo run --release --example toy_denoiser -- [epochs]

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hybrid4d::priors::{sds_grad, train_toy_denoiser, ConditioningTag, DenoiserOptions, NoiseSchedule, Tensor};
use hybrid4d::render::Camera;
use hybrid4d::scenes::{bake_reference, SceneSpec};

fn main() -> hybrid4d::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(40);
    let clip = bake_reference(&SceneSpec::translating_sphere(), &Camera::orbit(0.0, 10.0, 2.0, 16, 16), 16)?;
    let frames: Vec<_> = clip.frames.iter().map(|f| (f.clone(), ConditioningTag::None)).collect();
    let schedule = NoiseSchedule::default();
    let options = DenoiserOptions {
        epochs,
        ..DenoiserOptions::default()
    };
    let (den, report) = train_toy_denoiser(&frames, &schedule, options)?;
    println!("{} parameters", den.param_count());
    for (e, l) in report.epoch_losses.iter().enumerate().step_by((epochs / 8).max(1)) {
        println!("epoch {e:3}  loss {l:.4e}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let real = Tensor::from_frame(&clip.frames[5]);
    let mut pixels = clip.frames[5].rgb.clone();
    pixels.shuffle(&mut rng);
    let mut scrambled = clip.frames[5].clone();
    scrambled.rgb = pixels;
    let scrambled = Tensor::from_frame(&scrambled);
    for (name, x) in [("reference frame", &real), ("shuffled pixels", &scrambled)] {
        let mut total = 0.0;
        for _ in 0..32 {
            total += sds_grad(&den, &schedule, x, &ConditioningTag::None, (0.02, 0.5), &mut rng)?.loss;
        }
        println!("{name:16} mean SDS residual {:.4e}", total / 32.0);
    }
    Ok(())
}
