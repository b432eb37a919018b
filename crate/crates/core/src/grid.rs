//! Multiresolution hash-encoded feature grids in 3 or 4 dimensions.
//!
//! Each level ℓ has resolution `N_ℓ = ⌊N_min · b^ℓ⌋` cells per axis and a
//! feature table of `F` entries per row. Levels whose `(N_ℓ + 1)^d` vertices
//! fit in `2^T` rows are indexed densely (row-major, x fastest); finer levels
//! use the XOR-of-primes spatial hash modulo `2^T`.
//!
//! Queries live in `[0, 1]^d`. Values outside that range are rejected rather
//! than clamped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-axis hash multipliers. The fourth is used for the time axis of 4D grids.
pub const HASH_PRIMES: [u64; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];

const MAX_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dimension: usize,
    pub levels: usize,
    pub features_per_level: usize,
    pub base_resolution: u32,
    pub per_level_scale: f64,
    pub table_size_log2: u32,
}

impl GridConfig {
    /// Default spatial (3D) grid: L=8, F=2, N_min=16, b=1.5, T=17.
    pub fn spatial() -> Self {
        Self {
            dimension: 3,
            levels: 8,
            features_per_level: 2,
            base_resolution: 16,
            per_level_scale: 1.5,
            table_size_log2: 17,
        }
    }

    /// Default spatio-temporal (4D) grid: L=6, F=2, N_min=8, b=1.4, T=17.
    pub fn temporal() -> Self {
        Self {
            dimension: 4,
            levels: 6,
            features_per_level: 2,
            base_resolution: 8,
            per_level_scale: 1.4,
            table_size_log2: 17,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("grid: {msg}")));
        if !(3..=MAX_DIM).contains(&self.dimension) {
            return fail(format!("dimension must be 3 or 4, got {}", self.dimension));
        }
        if self.levels == 0 {
            return fail("levels must be >= 1".into());
        }
        if self.features_per_level == 0 {
            return fail("features_per_level must be >= 1".into());
        }
        if self.base_resolution < 2 {
            return fail(format!("base_resolution must be >= 2, got {}", self.base_resolution));
        }
        if !(self.per_level_scale > 1.0 && self.per_level_scale.is_finite()) {
            return fail(format!("per_level_scale must be > 1, got {}", self.per_level_scale));
        }
        if !(1..=30).contains(&self.table_size_log2) {
            return fail(format!("table_size_log2 must be in 1..=30, got {}", self.table_size_log2));
        }
        Ok(())
    }

    pub fn resolution(&self, level: usize) -> u32 {
        (self.base_resolution as f64 * self.per_level_scale.powi(level as i32)).floor() as u32
    }

    fn dense_rows(&self, level: usize) -> Option<usize> {
        let side = self.resolution(level) as u64 + 1;
        let rows = side.checked_pow(self.dimension as u32)?;
        (rows <= self.table_capacity() as u64).then_some(rows as usize)
    }

    fn table_capacity(&self) -> usize {
        1usize << self.table_size_log2
    }

    pub fn is_dense(&self, level: usize) -> bool {
        self.dense_rows(level).is_some()
    }

    pub fn level_rows(&self, level: usize) -> usize {
        self.dense_rows(level).unwrap_or_else(|| self.table_capacity())
    }

    /// First row of `level` in the concatenated table.
    pub fn level_offset(&self, level: usize) -> usize {
        (0..level).map(|l| self.level_rows(l)).sum()
    }

    pub fn total_rows(&self) -> usize {
        self.level_offset(self.levels)
    }

    pub fn param_count(&self) -> usize {
        self.total_rows() * self.features_per_level
    }

    pub fn output_len(&self) -> usize {
        self.levels * self.features_per_level
    }

    /// Row of `corner` within the level's table (not including the level offset).
    pub fn hash_index(&self, level: usize, corner: &[u32]) -> usize {
        debug_assert_eq!(corner.len(), self.dimension);
        if self.is_dense(level) {
            let side = self.resolution(level) as usize + 1;
            let mut index = 0usize;
            let mut stride = 1usize;
            for &c in corner {
                index += c as usize * stride;
                stride *= side;
            }
            index
        } else {
            let mut h = 0u64;
            for (&c, &p) in corner.iter().zip(HASH_PRIMES.iter()) {
                h ^= (c as u64).wrapping_mul(p);
            }
            (h & (self.table_capacity() as u64 - 1)) as usize
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dimension {
            return Err(Error::Shape(format!(
                "grid query has {} coordinates, grid is {}D",
                x.len(),
                self.dimension
            )));
        }
        if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("grid coordinate {v} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Learnable feature tables for every level, concatenated coarse to fine.
#[derive(Clone, Debug, PartialEq)]
pub struct GridParams {
    data: Vec<f64>,
}

impl GridParams {
    pub fn zeros(cfg: &GridConfig) -> Self {
        Self {
            data: vec![0.0; cfg.param_count()],
        }
    }

    /// Uniform entries in `[-scale, scale]`.
    pub fn random<R: Rng>(cfg: &GridConfig, rng: &mut R, scale: f64) -> Self {
        Self {
            data: (0..cfg.param_count())
                .map(|_| rng.gen_range(-scale..=scale))
                .collect(),
        }
    }

    pub fn from_vec(cfg: &GridConfig, data: Vec<f64>) -> Result<Self> {
        if data.len() != cfg.param_count() {
            return Err(Error::Shape(format!(
                "grid table has {} entries, config needs {}",
                data.len(),
                cfg.param_count()
            )));
        }
        Ok(Self { data })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Feature row of `corner` at `level`.
    pub fn row(&self, cfg: &GridConfig, level: usize, corner: &[u32]) -> &[f64] {
        let f = cfg.features_per_level;
        let r = cfg.level_offset(level) + cfg.hash_index(level, corner);
        &self.data[r * f..(r + 1) * f]
    }
}

#[derive(Clone, Copy, Debug)]
struct LevelInfo {
    resolution: u32,
    dense_side: Option<usize>,
    offset: usize,
    mask: u64,
}

/// Per-level resolutions and table offsets, precomputed from a [`GridConfig`]
/// for repeated queries.
#[derive(Clone, Debug)]
pub struct GridLayout {
    cfg: GridConfig,
    levels: Vec<LevelInfo>,
}

impl GridLayout {
    pub fn new(cfg: &GridConfig) -> Self {
        let levels = (0..cfg.levels)
            .map(|l| LevelInfo {
                resolution: cfg.resolution(l),
                dense_side: cfg.dense_rows(l).map(|_| cfg.resolution(l) as usize + 1),
                offset: cfg.level_offset(l),
                mask: cfg.table_capacity() as u64 - 1,
            })
            .collect();
        Self { cfg: *cfg, levels }
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    /// Visit the `2^d` corners of the cell containing `x` at `level`, passing
    /// the absolute table row, the d-linear weight, and (when `with_dx`)
    /// ∂weight/∂x.
    fn for_each_corner(
        &self,
        level: usize,
        x: &[f64],
        with_dx: bool,
        mut visit: impl FnMut(usize, f64, &[f64; MAX_DIM]),
    ) {
        let d = self.cfg.dimension;
        let info = &self.levels[level];
        let n = info.resolution;
        let scale = n as f64;
        let mut base = [0u32; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for k in 0..d {
            let p = x[k] * scale;
            let i = (p.floor() as u32).min(n - 1);
            base[k] = i;
            frac[k] = p - i as f64;
        }
        let mut factors = [0.0; MAX_DIM];
        let mut signs = [0.0; MAX_DIM];
        let mut dweight = [0.0; MAX_DIM];
        for mask in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut dense_index = 0usize;
            let mut stride = 1usize;
            let mut hash = 0u64;
            for k in 0..d {
                let upper = mask & (1 << k) != 0;
                let c = base[k] + upper as u32;
                if upper {
                    factors[k] = frac[k];
                    signs[k] = 1.0;
                } else {
                    factors[k] = 1.0 - frac[k];
                    signs[k] = -1.0;
                }
                weight *= factors[k];
                match info.dense_side {
                    Some(side) => {
                        dense_index += c as usize * stride;
                        stride *= side;
                    }
                    None => hash ^= (c as u64).wrapping_mul(HASH_PRIMES[k]),
                }
            }
            if with_dx {
                for k in 0..d {
                    let mut prod = signs[k] * scale;
                    for (j, &f) in factors.iter().enumerate().take(d) {
                        if j != k {
                            prod *= f;
                        }
                    }
                    dweight[k] = prod;
                }
            }
            let local = match info.dense_side {
                Some(_) => dense_index,
                None => (hash & info.mask) as usize,
            };
            visit(info.offset + local, weight, &dweight);
        }
    }

    pub fn encode_into(&self, table: &[f64], x: &[f64], out: &mut [f64]) -> Result<()> {
        self.cfg.check_point(x)?;
        let f = self.cfg.features_per_level;
        debug_assert_eq!(table.len(), self.cfg.param_count());
        debug_assert_eq!(out.len(), self.cfg.output_len());
        out.fill(0.0);
        for level in 0..self.cfg.levels {
            let slot = &mut out[level * f..(level + 1) * f];
            self.for_each_corner(level, x, false, |row, w, _| {
                let src = &table[row * f..(row + 1) * f];
                for (o, s) in slot.iter_mut().zip(src) {
                    *o += w * s;
                }
            });
        }
        Ok(())
    }

    pub fn encode(&self, table: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.cfg.output_len()];
        self.encode_into(table, x, &mut out)?;
        Ok(out)
    }

    fn check_upstream(&self, upstream: &[f64]) -> Result<()> {
        if upstream.len() != self.cfg.output_len() {
            return Err(Error::Shape(format!(
                "upstream has {} entries, encoding has {}",
                upstream.len(),
                self.cfg.output_len()
            )));
        }
        Ok(())
    }

    /// Accumulate `weight × upstream` into each touched table row. When
    /// `x_grad` is given, also accumulate ∂/∂x from the derivative of the
    /// d-linear weights (defined within a cell; the hash is piecewise
    /// constant across cells).
    pub fn accumulate_backward(
        &self,
        table: &[f64],
        x: &[f64],
        upstream: &[f64],
        table_grad: &mut [f64],
        mut x_grad: Option<&mut [f64]>,
    ) -> Result<()> {
        self.cfg.check_point(x)?;
        self.check_upstream(upstream)?;
        let f = self.cfg.features_per_level;
        let d = self.cfg.dimension;
        let want_dx = x_grad.is_some();
        for level in 0..self.cfg.levels {
            let up = &upstream[level * f..(level + 1) * f];
            if up.iter().all(|&u| u == 0.0) {
                continue;
            }
            self.for_each_corner(level, x, want_dx, |row, w, dw| {
                let dst = &mut table_grad[row * f..(row + 1) * f];
                for (g, u) in dst.iter_mut().zip(up) {
                    *g += w * u;
                }
                if let Some(xg) = x_grad.as_deref_mut() {
                    let src = &table[row * f..(row + 1) * f];
                    let dot: f64 = src.iter().zip(up).map(|(s, u)| s * u).sum();
                    for k in 0..d {
                        xg[k] += dw[k] * dot;
                    }
                }
            });
        }
        Ok(())
    }

    /// Gradient of `⟨upstream, encode(x)⟩` with respect to `x` only.
    pub fn input_gradient(&self, table: &[f64], x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.cfg.check_point(x)?;
        self.check_upstream(upstream)?;
        let f = self.cfg.features_per_level;
        let d = self.cfg.dimension;
        let mut grad = vec![0.0; d];
        for level in 0..self.cfg.levels {
            let up = &upstream[level * f..(level + 1) * f];
            if up.iter().all(|&u| u == 0.0) {
                continue;
            }
            self.for_each_corner(level, x, true, |row, _, dw| {
                let src = &table[row * f..(row + 1) * f];
                let dot: f64 = src.iter().zip(up).map(|(s, u)| s * u).sum();
                for k in 0..d {
                    grad[k] += dw[k] * dot;
                }
            });
        }
        Ok(grad)
    }

    pub fn corner_weights(&self, level: usize, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        self.cfg.check_point(x)?;
        let mut out = Vec::with_capacity(1 << self.cfg.dimension);
        self.for_each_corner(level, x, false, |row, w, _| out.push((row, w)));
        Ok(out)
    }
}

/// Interpolation weights of the `2^d` corners at one level, as
/// `(absolute row, weight)` pairs.
pub fn corner_weights(cfg: &GridConfig, level: usize, x: &[f64]) -> Result<Vec<(usize, f64)>> {
    GridLayout::new(cfg).corner_weights(level, x)
}

/// Encode `x ∈ [0,1]^d` into `L·F` features, coarse levels first.
pub fn encode(cfg: &GridConfig, params: &GridParams, x: &[f64]) -> Result<Vec<f64>> {
    GridLayout::new(cfg).encode(params.as_slice(), x)
}

/// Dense gradients of `⟨upstream, encode(x)⟩` with respect to the table and to `x`.
pub fn encode_backward(
    cfg: &GridConfig,
    params: &GridParams,
    x: &[f64],
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut table_grad = vec![0.0; cfg.param_count()];
    let mut x_grad = vec![0.0; cfg.dimension];
    GridLayout::new(cfg).accumulate_backward(
        params.as_slice(),
        x,
        upstream,
        &mut table_grad,
        Some(&mut x_grad),
    )?;
    Ok((table_grad, x_grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small3() -> GridConfig {
        GridConfig {
            dimension: 3,
            levels: 4,
            features_per_level: 2,
            base_resolution: 4,
            per_level_scale: 2.0,
            table_size_log2: 10,
        }
    }

    #[test]
    fn resolutions_follow_floor_rule() {
        let cfg = GridConfig::spatial();
        let res: Vec<u32> = (0..cfg.levels).map(|l| cfg.resolution(l)).collect();
        assert_eq!(res, vec![16, 24, 36, 54, 81, 121, 182, 273]);
    }

    #[test]
    fn dense_origin_and_x_fastest() {
        let cfg = GridConfig {
            base_resolution: 4,
            ..small3()
        };
        assert!(cfg.is_dense(0));
        assert_eq!(cfg.resolution(0), 4);
        assert_eq!(cfg.hash_index(0, &[0, 0, 0]), 0);
        assert_eq!(cfg.hash_index(0, &[1, 0, 0]), 1);
        assert_eq!(cfg.hash_index(0, &[0, 1, 0]), 5);
        assert_eq!(cfg.hash_index(0, &[0, 0, 1]), 25);
    }

    #[test]
    fn hashed_levels_match_reference_values() {
        // Values from a standalone evaluation of the XOR-prime formula.
        let cfg = GridConfig::spatial();
        assert!(!cfg.is_dense(7));
        assert_eq!(cfg.hash_index(7, &[5, 7, 11]), 102_581);
        let small = GridConfig {
            table_size_log2: 12,
            ..GridConfig::spatial()
        };
        assert!(!small.is_dense(7));
        assert_eq!(small.hash_index(7, &[100, 3, 250]), 2_805);
        let t = GridConfig::temporal();
        assert!(!t.is_dense(5));
        assert_eq!(t.hash_index(5, &[3, 9, 2, 6]), 96_686);
    }

    #[test]
    fn zero_tables_encode_to_zero() {
        let cfg = small3();
        let params = GridParams::zeros(&cfg);
        let out = encode(&cfg, &params, &[0.3, 0.7, 0.1]).unwrap();
        assert_eq!(out, vec![0.0; cfg.output_len()]);
    }

    #[test]
    fn vertex_query_returns_vertex_row() {
        let cfg = small3();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = GridParams::random(&cfg, &mut rng, 1.0);
        // (1/4, 2/4, 3/4) is a vertex of every level (resolutions 4, 8, 16, 32).
        let x = [0.25, 0.5, 0.75];
        let out = encode(&cfg, &params, &x).unwrap();
        for level in 0..cfg.levels {
            let n = cfg.resolution(level);
            let corner: Vec<u32> = x.iter().map(|v| (v * n as f64) as u32).collect();
            let weights = corner_weights(&cfg, level, &x).unwrap();
            assert_eq!(weights.iter().filter(|(_, w)| *w == 1.0).count(), 1);
            let row = params.row(&cfg, level, &corner);
            assert_eq!(&out[level * 2..level * 2 + 2], row);
        }
    }

    #[test]
    fn upper_boundary_is_a_vertex() {
        let cfg = small3();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = GridParams::random(&cfg, &mut rng, 1.0);
        let out = encode(&cfg, &params, &[1.0, 1.0, 1.0]).unwrap();
        let n = cfg.resolution(0);
        assert_eq!(&out[0..2], params.row(&cfg, 0, &[n, n, n]));
    }

    #[test]
    fn cell_center_is_corner_mean() {
        let cfg = GridConfig {
            dimension: 4,
            ..small3()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = GridParams::random(&cfg, &mut rng, 1.0);
        let level = 1;
        let n = cfg.resolution(level) as f64;
        let x = [2.5 / n, 0.5 / n, 5.5 / n, 7.5 / n];
        let out = encode(&cfg, &params, &x).unwrap();
        // Brute-force: average the 16 corner rows.
        let mut mean = [0.0; 2];
        for mask in 0..16u32 {
            let corner: Vec<u32> = [2u32, 0, 5, 7]
                .iter()
                .enumerate()
                .map(|(k, &b)| b + ((mask >> k) & 1))
                .collect();
            let row = params.row(&cfg, level, &corner);
            mean[0] += row[0] / 16.0;
            mean[1] += row[1] / 16.0;
        }
        assert!((out[2] - mean[0]).abs() < 1e-12);
        assert!((out[3] - mean[1]).abs() < 1e-12);
        for (_, w) in corner_weights(&cfg, level, &x).unwrap() {
            assert!((w - 1.0 / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_is_rejected() {
        let cfg = small3();
        let params = GridParams::zeros(&cfg);
        assert!(matches!(
            encode(&cfg, &params, &[0.5, 1.0001, 0.5]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            encode(&cfg, &params, &[-1e-9, 0.5, 0.5]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            encode(&cfg, &params, &[f64::NAN, 0.5, 0.5]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            encode(&cfg, &params, &[0.5, 0.5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = small3();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = GridParams::random(&cfg, &mut rng, 1.0);
        let up = vec![0.0; cfg.output_len()];
        let (gt, gx) = encode_backward(&cfg, &params, &[0.1, 0.2, 0.3], &up).unwrap();
        assert!(gt.iter().all(|&g| g == 0.0));
        assert!(gx.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn vertex_query_touches_one_row_per_level() {
        let cfg = small3();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = GridParams::random(&cfg, &mut rng, 1.0);
        let up = vec![1.0; cfg.output_len()];
        let (gt, _) = encode_backward(&cfg, &params, &[0.25, 0.5, 0.75], &up).unwrap();
        let touched_rows = gt.chunks(2).filter(|r| r.iter().any(|&g| g != 0.0)).count();
        assert_eq!(touched_rows, cfg.levels);
    }

    #[test]
    fn backward_matches_central_differences() {
        for dim in [3usize, 4] {
            let cfg = GridConfig {
                dimension: dim,
                table_size_log2: 8,
                ..small3()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(6 + dim as u64);
            let params = GridParams::random(&cfg, &mut rng, 1.0);
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.05..0.95)).collect();
            let up: Vec<f64> = (0..cfg.output_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scalar = |p: &GridParams, x: &[f64]| -> f64 {
                encode(&cfg, p, x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let (gt, gx) = encode_backward(&cfg, &params, &x, &up).unwrap();
            let h = 1e-6;
            let mut num = vec![0.0; gt.len()];
            for i in 0..gt.len() {
                let mut p = params.clone();
                p.as_mut_slice()[i] += h;
                let fp = scalar(&p, &x);
                p.as_mut_slice()[i] -= 2.0 * h;
                let fm = scalar(&p, &x);
                num[i] = (fp - fm) / (2.0 * h);
            }
            assert!(rel_err(&gt, &num) <= 1e-4, "table grad dim {dim}");
            let h = 1e-7;
            let mut num_x = vec![0.0; dim];
            for k in 0..dim {
                let mut xp = x.clone();
                xp[k] += h;
                let fp = scalar(&params, &xp);
                xp[k] -= 2.0 * h;
                let fm = scalar(&params, &xp);
                num_x[k] = (fp - fm) / (2.0 * h);
            }
            assert!(rel_err(&gx, &num_x) <= 1e-4, "x grad dim {dim}: {gx:?} vs {num_x:?}");
        }
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt())
            .max(1e-12);
        diff / scale
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weights_partition_unity(x in prop::array::uniform4(0.0f64..=1.0), level in 0usize..4) {
                let cfg = GridConfig { dimension: 4, ..small3() };
                let sum: f64 = corner_weights(&cfg, level, &x).unwrap().iter().map(|(_, w)| w).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
            }

            #[test]
            fn encode_is_deterministic(x in prop::array::uniform3(0.0f64..=1.0), seed in 0u64..100) {
                let cfg = small3();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let params = GridParams::random(&cfg, &mut rng, 1.0);
                let a = encode(&cfg, &params, &x).unwrap();
                let b = encode(&cfg, &params, &x).unwrap();
                prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn continuous_across_cell_faces() {
        let cfg = small3();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = GridParams::random(&cfg, &mut rng, 1.0);
        // x = 0.5 is a face at every level.
        let mut prev = f64::INFINITY;
        for delta in [1e-2, 1e-3, 1e-4, 1e-6] {
            let a = encode(&cfg, &params, &[0.5 - delta, 0.3, 0.6]).unwrap();
            let b = encode(&cfg, &params, &[0.5 + delta, 0.3, 0.6]).unwrap();
            let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(diff <= prev);
            prev = diff;
        }
        assert!(prev < 1e-3);
    }
}
