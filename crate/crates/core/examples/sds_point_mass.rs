//! Score distillation on a free 16x16 image. With a point-mass prior the
//! denoiser always predicts the target, so gradient descent must converge
//! to it; with a perfect provider the gradient vanishes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hybrid4d::priors::{sds_grad, ConditioningTag, NoiseSchedule, OracleProvider, PointMassProvider, Tensor};

fn main() -> hybrid4d::Result<()> {
    let (h, w) = (16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let target: Vec<f64> = (0..h * w * 3).map(|_| rng.gen()).collect();
    let mut x = vec![0.5; h * w * 3];
    let prior = PointMassProvider::new(target.clone());
    let schedule = NoiseSchedule::default();
    for step in 0..=60 {
        let g = sds_grad(&prior, &schedule, &Tensor::image(h, w, x.clone())?, &ConditioningTag::None, (0.02, 0.98), &mut rng)?;
        if step % 10 == 0 {
            let linf = x.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            println!("step {step:3}  t = {:4}  L-inf {linf:.3e}", g.t);
        }
        for (v, d) in x.iter_mut().zip(&g.grad) {
            *v -= 0.05 * d;
        }
    }
    let perfect = OracleProvider { clean: x.clone() };
    let g = sds_grad(&perfect, &schedule, &Tensor::image(h, w, x)?, &ConditioningTag::None, (0.02, 0.98), &mut rng)?;
    println!("perfect provider: max |g| = {:e}", g.grad.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    Ok(())
}
