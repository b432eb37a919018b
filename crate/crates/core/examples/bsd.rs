//! Bootstrapped score distillation between two toy denoisers: identical
//! providers give zero, swapping them negates the gradient bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hybrid4d::priors::{bsd_grad, ConditioningTag, DenoiserOptions, NoiseSchedule, Tensor, ToyDenoiser};

fn main() -> hybrid4d::Result<()> {
    let opts = |seed| DenoiserOptions {
        seed,
        buckets: 1,
        ..DenoiserOptions::default()
    };
    let (boot, lora) = (ToyDenoiser::new(opts(1))?, ToyDenoiser::new(opts(2))?);
    let schedule = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::image(16, 16, (0..768).map(|_| rng.gen()).collect())?;
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();

    let same = bsd_grad(&boot, &boot, &schedule, &x, &ConditioningTag::None, (0.02, 0.98), &mut rng)?;
    println!("identical providers: ||g|| = {:e}", norm(&same.grad));
    let ab = bsd_grad(&boot, &lora, &schedule, &x, &ConditioningTag::None, (0.02, 0.98), &mut ChaCha8Rng::seed_from_u64(9))?;
    let ba = bsd_grad(&lora, &boot, &schedule, &x, &ConditioningTag::None, (0.02, 0.98), &mut ChaCha8Rng::seed_from_u64(9))?;
    let negated = ab.grad.iter().zip(&ba.grad).all(|(p, q)| p.to_bits() == (-q).to_bits());
    println!("t = {}: ||g(boot, lora)|| = {:.4}, swap negates bitwise: {negated}", ab.t, norm(&ab.grad));
    Ok(())
}
