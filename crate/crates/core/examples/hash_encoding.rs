//! Multiresolution hash encoding of a few points: per-level resolutions,
//! which levels are dense versus hashed, and how many table rows the corners
//! of one query touch.
//!
//! cargo run --release --example hash_encoding

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hybrid4d::grid::{corner_weights, encode, GridConfig, GridParams};

fn main() -> hybrid4d::Result<()> {
    for cfg in [GridConfig::spatial(), GridConfig::temporal()] {
        println!(
            "{}D grid: {} levels x {} features, table 2^{}, {} parameters",
            cfg.dimension,
            cfg.levels,
            cfg.features_per_level,
            cfg.table_size_log2,
            cfg.param_count()
        );
        for l in 0..cfg.levels {
            println!(
                "  level {l}: resolution {:4}  {}",
                cfg.resolution(l),
                if cfg.is_dense(l) { "dense" } else { "hashed" }
            );
        }
    }

    let cfg = GridConfig::spatial();
    let params = GridParams::random(&cfg, &mut ChaCha8Rng::seed_from_u64(0), 1e-1);
    for x in [[0.5, 0.5, 0.5], [0.1, 0.7, 0.3], [1.0, 0.0, 1.0]] {
        let feat = encode(&cfg, &params, &x)?;
        let top = corner_weights(&cfg, cfg.levels - 1, &x)?;
        let sum: f64 = top.iter().map(|c| c.1).sum();
        println!(
            "x = {x:?}: {} features, first {:+.4} {:+.4}; finest level weights sum to {sum:.15}",
            feat.len(),
            feat[0],
            feat[1]
        );
    }
    Ok(())
}
