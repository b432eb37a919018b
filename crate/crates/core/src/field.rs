//! The 4D representation: a canonical static field, plus a deformation
//! network and a topology network that both read a shared spatio-temporal
//! feature grid.
//!
//! A point `x` at time `t` is evaluated as follows. The 4D grid encodes
//! `(x, t)` into a temporal feature; the deformation head maps it to a
//! displacement `Δx` and the topology head to a vector `w`. The displaced
//! point `x + Δx` lives in canonical space, where it is encoded by the 3D
//! grid; `w` is appended to that feature and the result feeds the density
//! and color heads.
//!
//! Scene bounds are the unit cube centred at the origin. Observation points
//! outside it have zero density. Canonical points pushed outside it are
//! clamped for encoding and their density is masked to zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridConfig, GridLayout, GridParams};
use crate::nn::{Activation, FinalInit, GradBuffer, Mlp, MlpConfig, MlpTape, ParamId, ParamStore};

pub const HALF_EXTENT: f64 = 0.5;

pub fn in_bounds(x: [f64; 3]) -> bool {
    x.iter().all(|v| (-HALF_EXTENT..=HALF_EXTENT).contains(v))
}

fn to_unit(x: [f64; 3]) -> [f64; 3] {
    x.map(|v| (v + HALF_EXTENT).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub spatial: GridConfig,
    pub temporal: GridConfig,
    pub hidden_width: usize,
    pub topology_width: usize,
    /// When false the topology head is absent and `w ≡ 0` (deformation only).
    pub use_topology: bool,
    /// Initial bias of the density head's output (pre-softplus).
    pub density_bias: f64,
    /// Half-width of the uniform init of grid tables.
    pub grid_init_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            spatial: GridConfig::spatial(),
            temporal: GridConfig::temporal(),
            hidden_width: 32,
            topology_width: 4,
            use_topology: true,
            density_bias: -1.0,
            grid_init_scale: 1e-4,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.spatial.validate()?;
        self.temporal.validate()?;
        if self.spatial.dimension != 3 || self.temporal.dimension != 4 {
            return Err(Error::Config("spatial grid must be 3D and temporal grid 4D".into()));
        }
        if self.hidden_width == 0 {
            return Err(Error::Config("hidden_width must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which parts of the field participate in a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldMode {
    /// Canonical field only, `w = 0` (static stage).
    Canonical,
    /// Full deformation + topology composition.
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanonicalSample {
    pub sigma: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicSample {
    pub sigma: f64,
    pub color: [f64; 3],
    pub displacement: [f64; 3],
    pub topology: Vec<f64>,
}

/// Canonical static NeRF: 3D hash grid plus view-independent density and
/// color heads.
#[derive(Clone, Debug)]
pub struct CanonicalField {
    pub layout: GridLayout,
    pub grid: ParamId,
    pub density: Mlp,
    pub color: Mlp,
    pub topology_width: usize,
}

#[derive(Clone, Debug)]
pub struct DeformationField {
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct TopologyField {
    pub mlp: Mlp,
}

/// Options for tracking a point's motion between `t` and `t + dt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionOptions {
    pub dt: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl MotionOptions {
    pub fn new(dt: f64, max_iterations: usize) -> Self {
        Self {
            dt,
            max_iterations,
            tolerance: 1e-7,
        }
    }
}

/// 3D motion of an observation-space point over one interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motion {
    pub delta: [f64; 3],
    /// False when the fixed-point iteration did not converge and the
    /// backward-difference approximation was used instead.
    pub converged: bool,
}

/// Everything needed to evaluate one sample point along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointEval {
    pub sigma: f64,
    pub color: [f64; 3],
    pub motion: Option<Motion>,
}

#[derive(Clone, Debug)]
struct TemporalTape {
    point: [f64; 4],
    deform: MlpTape,
    topology: Option<MlpTape>,
}

#[derive(Clone, Debug)]
struct CanonicalTape {
    point: [f64; 3],
    density: MlpTape,
    color: MlpTape,
}

#[derive(Clone, Debug)]
enum MotionTape {
    /// `motion = x_can − Δ(x', t + dt) − x` at the last fixed-point iterate `x'`.
    FixedPoint(TemporalTape),
    /// `motion = Δ(x, t − dt) − Δ(x, t)`.
    BackwardDifference(TemporalTape),
}

/// Recorded intermediates of one point evaluation.
#[derive(Clone, Debug)]
pub struct PointTape {
    x: [f64; 3],
    t: f64,
    temporal: Option<TemporalTape>,
    canonical: Option<CanonicalTape>,
    motion: Option<MotionTape>,
}

/// Gradient contributions from a batch of point evaluations.
///
/// Head gradients are accumulated densely; grid contributions are kept as
/// `(point, upstream)` records and scattered into the tables in order by
/// [`DynamicField::apply_grads`], which keeps the merge deterministic.
#[derive(Clone, Debug, Default)]
pub struct FieldGrads {
    pub heads: GradBuffer,
    spatial: Vec<f64>,
    temporal: Vec<f64>,
}

impl FieldGrads {
    pub fn new(field: &DynamicField) -> Self {
        Self {
            heads: GradBuffer::new(&field.store),
            spatial: Vec::new(),
            temporal: Vec::new(),
        }
    }

    pub fn merge(&mut self, other: FieldGrads) {
        self.heads.merge(&other.heads);
        self.spatial.extend_from_slice(&other.spatial);
        self.temporal.extend_from_slice(&other.temporal);
    }
}

#[derive(Clone, Debug)]
pub struct DynamicField {
    pub config: FieldConfig,
    pub store: ParamStore,
    pub canonical: CanonicalField,
    pub temporal_layout: GridLayout,
    pub temporal_grid: ParamId,
    pub deformation: DeformationField,
    pub topology: Option<TopologyField>,
}

impl DynamicField {
    /// Fresh field. Deformation and topology heads are zero-initialized, so
    /// the field equals its canonical part at every time.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.topology_width;
        let h = config.hidden_width;

        let spatial = GridParams::random(&config.spatial, &mut rng, config.grid_init_scale);
        let grid = store.add(
            "canonical.grid",
            &[config.spatial.total_rows(), config.spatial.features_per_level],
            spatial.into_vec(),
        )?;
        let feat3 = config.spatial.output_len();
        let density = Mlp::new(
            &mut store,
            "canonical.density",
            MlpConfig::new(vec![feat3 + w, h, 1], Activation::Softplus),
            FinalInit::Uniform {
                bias: config.density_bias,
            },
            &mut rng,
        )?;
        let color = Mlp::new(
            &mut store,
            "canonical.color",
            MlpConfig::new(vec![feat3 + w, h, 3], Activation::Sigmoid),
            FinalInit::Uniform { bias: 0.0 },
            &mut rng,
        )?;

        let temporal = GridParams::random(&config.temporal, &mut rng, config.grid_init_scale);
        let temporal_grid = store.add(
            "temporal.grid",
            &[config.temporal.total_rows(), config.temporal.features_per_level],
            temporal.into_vec(),
        )?;
        let feat4 = config.temporal.output_len();
        let deformation = DeformationField {
            mlp: Mlp::new(
                &mut store,
                "deformation",
                MlpConfig::new(vec![feat4, h, 3], Activation::Identity),
                FinalInit::Zero,
                &mut rng,
            )?,
        };
        let topology = if config.use_topology && w > 0 {
            Some(TopologyField {
                mlp: Mlp::new(
                    &mut store,
                    "topology",
                    MlpConfig::new(vec![feat4, h, w], Activation::Identity),
                    FinalInit::Zero,
                    &mut rng,
                )?,
            })
        } else {
            None
        };

        Ok(Self {
            canonical: CanonicalField {
                layout: GridLayout::new(&config.spatial),
                grid,
                density,
                color,
                topology_width: w,
            },
            temporal_layout: GridLayout::new(&config.temporal),
            temporal_grid,
            deformation,
            topology,
            config,
            store,
        })
    }

    /// Parameters of the canonical (static) part.
    pub fn canonical_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.canonical.grid];
        ids.extend(self.canonical.density.param_ids());
        ids.extend(self.canonical.color.param_ids());
        ids
    }

    /// Parameters of the deformation/topology part, including the 4D grid.
    pub fn dynamic_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.temporal_grid];
        ids.extend(self.deformation.mlp.param_ids());
        if let Some(t) = &self.topology {
            ids.extend(t.mlp.param_ids());
        }
        ids
    }

    fn canonical_input(&self, x_can: [f64; 3], w: &[f64]) -> Result<Vec<f64>> {
        let c = &self.canonical;
        if w.len() != c.topology_width {
            return Err(Error::Shape(format!(
                "topology vector has {} entries, field expects {}",
                w.len(),
                c.topology_width
            )));
        }
        let unit = to_unit(x_can);
        let mut input = vec![0.0; self.config.spatial.output_len() + c.topology_width];
        let (feat, tail) = input.split_at_mut(self.config.spatial.output_len());
        c.layout.encode_into(self.store.value(c.grid), &unit, feat)?;
        tail.copy_from_slice(w);
        Ok(input)
    }

    /// Density and color of the canonical field at `x` with topology vector `w`.
    /// Out-of-bounds points have zero density and black color.
    pub fn sample_canonical(&self, x: [f64; 3], w: &[f64]) -> Result<CanonicalSample> {
        if !in_bounds(x) {
            return Ok(CanonicalSample {
                sigma: 0.0,
                color: [0.0; 3],
            });
        }
        let input = self.canonical_input(x, w)?;
        let sigma = self.canonical.density.eval(&self.store, &input)?[0];
        let c = self.canonical.color.eval(&self.store, &input)?;
        let sample = CanonicalSample {
            sigma,
            color: [c[0], c[1], c[2]],
        };
        check_finite(&sample, x, f64::NAN)?;
        Ok(sample)
    }

    fn temporal_feature(&self, x: [f64; 3], t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        let u = to_unit(x);
        self.temporal_layout
            .encode(self.store.value(self.temporal_grid), &[u[0], u[1], u[2], t])
    }

    /// Displacement `Δx` and topology vector `w` at `(x, t)`.
    pub fn deformation_at(&self, x: [f64; 3], t: f64) -> Result<([f64; 3], Vec<f64>)> {
        let feat = self.temporal_feature(x, t)?;
        let d = self.deformation.mlp.eval(&self.store, &feat)?;
        let w = match &self.topology {
            Some(top) => top.mlp.eval(&self.store, &feat)?,
            None => vec![0.0; self.canonical.topology_width],
        };
        Ok(([d[0], d[1], d[2]], w))
    }

    fn displacement_at(&self, x: [f64; 3], t: f64) -> Result<[f64; 3]> {
        let feat = self.temporal_feature(x, t)?;
        let d = self.deformation.mlp.eval(&self.store, &feat)?;
        Ok([d[0], d[1], d[2]])
    }

    /// Full composition at `(x, t)`: returns the canonical sample at `x + Δx`
    /// together with `Δx` and `w`.
    pub fn sample_dynamic(&self, x: [f64; 3], t: f64) -> Result<DynamicSample> {
        if !in_bounds(x) {
            return Ok(DynamicSample {
                sigma: 0.0,
                color: [0.0; 3],
                displacement: [0.0; 3],
                topology: vec![0.0; self.canonical.topology_width],
            });
        }
        let (dx, w) = self.deformation_at(x, t)?;
        let x_can = add(x, dx);
        let s = if in_bounds(x_can) {
            self.sample_canonical(x_can, &w)?
        } else {
            CanonicalSample {
                sigma: 0.0,
                color: [0.0; 3],
            }
        };
        check_finite(&s, x, t)?;
        if dx.iter().chain(&w).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample {
                head: "deformation/topology",
                x,
                t,
            });
        }
        Ok(DynamicSample {
            sigma: s.sigma,
            color: s.color,
            displacement: dx,
            topology: w,
        })
    }

    /// Track the canonical point of `x` at time `t` forward to `t + dt`.
    ///
    /// Solves `x' + Δ(x', t + dt) = x + Δ(x, t)` by fixed-point iteration
    /// from `x' = x`. If the iteration has not converged after
    /// `max_iterations`, falls back to the backward difference
    /// `Δ(x, t − dt) − Δ(x, t)` and flags the result.
    pub fn motion(&self, x: [f64; 3], t: f64, opts: MotionOptions) -> Result<Motion> {
        let dx = self.displacement_at(x, t)?;
        self.motion_from(x, t, dx, opts)
    }

    fn motion_from(&self, x: [f64; 3], t: f64, dx: [f64; 3], opts: MotionOptions) -> Result<Motion> {
        let t_next = (t + opts.dt).min(1.0);
        let x_can = add(x, dx);
        let mut cur = x;
        for _ in 0..opts.max_iterations.max(1) {
            let d = self.displacement_at(clamp_bounds(cur), t_next)?;
            let next = sub(x_can, d);
            let change = norm(sub(next, cur));
            cur = next;
            if change <= opts.tolerance {
                return Ok(Motion {
                    delta: sub(cur, x),
                    converged: true,
                });
            }
        }
        if opts.max_iterations <= 1 {
            return Ok(Motion {
                delta: sub(cur, x),
                converged: true,
            });
        }
        let t_prev = (t - opts.dt).max(0.0);
        let back = self.displacement_at(x, t_prev)?;
        Ok(Motion {
            delta: sub(back, dx),
            converged: false,
        })
    }

    /// Evaluate one ray sample without recording a tape.
    pub fn eval_point(
        &self,
        x: [f64; 3],
        t: f64,
        mode: FieldMode,
        motion: Option<MotionOptions>,
    ) -> Result<PointEval> {
        let zero_motion = motion.map(|_| Motion {
            delta: [0.0; 3],
            converged: true,
        });
        if !in_bounds(x) {
            return Ok(PointEval {
                sigma: 0.0,
                color: [0.0; 3],
                motion: zero_motion,
            });
        }
        match mode {
            FieldMode::Canonical => {
                let s = self.sample_canonical(x, &vec![0.0; self.canonical.topology_width])?;
                Ok(PointEval {
                    sigma: s.sigma,
                    color: s.color,
                    motion: zero_motion,
                })
            }
            FieldMode::Dynamic => {
                let s = self.sample_dynamic(x, t)?;
                let motion = match motion {
                    Some(opts) => Some(self.motion_from(x, t, s.displacement, opts)?),
                    None => None,
                };
                Ok(PointEval {
                    sigma: s.sigma,
                    color: s.color,
                    motion,
                })
            }
        }
    }

    fn temporal_forward(&self, x: [f64; 3], t: f64, with_topology: bool) -> Result<TemporalTape> {
        let u = to_unit(x);
        let point = [u[0], u[1], u[2], t];
        let feat = self
            .temporal_layout
            .encode(self.store.value(self.temporal_grid), &point)?;
        let deform = self.deformation.mlp.forward(&self.store, &feat)?;
        let topology = match (&self.topology, with_topology) {
            (Some(top), true) => Some(top.mlp.forward(&self.store, &feat)?),
            _ => None,
        };
        Ok(TemporalTape {
            point,
            deform,
            topology,
        })
    }

    /// Like [`eval_point`](Self::eval_point), recording what
    /// [`backward_point`](Self::backward_point) needs. In training the
    /// motion's gradient flows through the final fixed-point step only.
    pub fn eval_point_taped(
        &self,
        x: [f64; 3],
        t: f64,
        mode: FieldMode,
        motion: Option<MotionOptions>,
    ) -> Result<(PointEval, PointTape)> {
        let empty = PointTape {
            x,
            t,
            temporal: None,
            canonical: None,
            motion: None,
        };
        let zero_motion = motion.map(|_| Motion {
            delta: [0.0; 3],
            converged: true,
        });
        if !in_bounds(x) {
            let eval = PointEval {
                sigma: 0.0,
                color: [0.0; 3],
                motion: zero_motion,
            };
            return Ok((eval, empty));
        }
        if t.is_nan() || !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        let (temporal, dx, w) = match mode {
            FieldMode::Canonical => (None, [0.0; 3], vec![0.0; self.canonical.topology_width]),
            FieldMode::Dynamic => {
                let tape = self.temporal_forward(x, t, true)?;
                let d = tape.deform.output();
                let dx = [d[0], d[1], d[2]];
                let w = match &tape.topology {
                    Some(top) => top.output().to_vec(),
                    None => vec![0.0; self.canonical.topology_width],
                };
                (Some(tape), dx, w)
            }
        };
        let x_can = add(x, dx);
        let (sigma, color, canonical) = if in_bounds(x_can) {
            let input = self.canonical_input(x_can, &w)?;
            let density = self.canonical.density.forward(&self.store, &input)?;
            let color = self.canonical.color.forward(&self.store, &input)?;
            let sigma = density.output()[0];
            let c = color.output();
            (
                sigma,
                [c[0], c[1], c[2]],
                Some(CanonicalTape {
                    point: to_unit(x_can),
                    density,
                    color,
                }),
            )
        } else {
            (0.0, [0.0; 3], None)
        };
        check_finite(&CanonicalSample { sigma, color }, x, t)?;

        let mut tape = PointTape {
            x,
            t,
            temporal,
            canonical,
            motion: None,
        };
        let motion = match motion {
            Some(opts) => Some(self.attach_motion(&mut tape, opts)?),
            None => None,
        };
        Ok((PointEval { sigma, color, motion }, tape))
    }

    /// Track the motion of a taped point and record the step gradients flow
    /// through. Points without a temporal part (canonical mode, out of
    /// bounds) do not move.
    pub fn attach_motion(&self, tape: &mut PointTape, opts: MotionOptions) -> Result<Motion> {
        let Some(temporal) = &tape.temporal else {
            return Ok(Motion {
                delta: [0.0; 3],
                converged: true,
            });
        };
        let (x, t) = (tape.x, tape.t);
        let d = temporal.deform.output();
        let dx = [d[0], d[1], d[2]];
        let x_can = add(x, dx);
        let t_next = (t + opts.dt).min(1.0);
        // Converge without a tape, then record the last step.
        let mut prev = x;
        let mut cur = x;
        let mut converged = false;
        for _ in 0..opts.max_iterations.max(1) {
            let d = self.displacement_at(clamp_bounds(cur), t_next)?;
            prev = cur;
            cur = sub(x_can, d);
            if norm(sub(cur, prev)) <= opts.tolerance {
                converged = true;
                break;
            }
        }
        let converged = converged || opts.max_iterations <= 1;
        let (delta, mtape) = if converged {
            let mt = self.temporal_forward(clamp_bounds(prev), t_next, false)?;
            let d = mt.deform.output();
            let end = sub(x_can, [d[0], d[1], d[2]]);
            (sub(end, x), MotionTape::FixedPoint(mt))
        } else {
            let t_prev = (t - opts.dt).max(0.0);
            let mt = self.temporal_forward(x, t_prev, false)?;
            let d = mt.deform.output();
            (sub([d[0], d[1], d[2]], dx), MotionTape::BackwardDifference(mt))
        };
        tape.motion = Some(mtape);
        Ok(Motion { delta, converged })
    }

    /// Backpropagate `(∂L/∂σ, ∂L/∂c, ∂L/∂motion)` of one point into `grads`.
    pub fn backward_point(
        &self,
        tape: &PointTape,
        d_sigma: f64,
        d_color: [f64; 3],
        d_motion: [f64; 3],
        grads: &mut FieldGrads,
    ) -> Result<()> {
        let feat3 = self.config.spatial.output_len();
        let w_len = self.canonical.topology_width;
        // ∂L/∂x_can and ∂L/∂w from the canonical heads.
        let mut d_xcan = [0.0; 3];
        let mut d_w = vec![0.0; w_len];
        if let Some(c) = &tape.canonical {
            let mut d_in =
                self.canonical
                    .density
                    .backward(&self.store, &c.density, &[d_sigma], &mut grads.heads)?;
            let d_col = self
                .canonical
                .color
                .backward(&self.store, &c.color, &d_color, &mut grads.heads)?;
            for (a, b) in d_in.iter_mut().zip(&d_col) {
                *a += b;
            }
            let (d_feat, d_top) = d_in.split_at(feat3);
            if d_feat.iter().any(|&v| v != 0.0) {
                grads.spatial.extend_from_slice(&c.point);
                grads.spatial.extend_from_slice(d_feat);
                if tape.temporal.is_some() {
                    let gx = self.canonical.layout.input_gradient(
                        self.store.value(self.canonical.grid),
                        &c.point,
                        d_feat,
                    )?;
                    d_xcan = [gx[0], gx[1], gx[2]];
                }
            }
            d_w.copy_from_slice(d_top);
        }
        // Both motion forms depend on Δ(x, t) = x_can − x with unit sign
        // in the fixed-point case and negative sign in the fallback.
        match &tape.motion {
            Some(MotionTape::FixedPoint(_)) => (0..3).for_each(|k| d_xcan[k] += d_motion[k]),
            Some(MotionTape::BackwardDifference(_)) => (0..3).for_each(|k| d_xcan[k] -= d_motion[k]),
            None => {}
        }
        if let Some(temp) = &tape.temporal {
            // x_can = x + Δ(x, t)
            let mut d_feat4 = self
                .deformation
                .mlp
                .backward(&self.store, &temp.deform, &d_xcan, &mut grads.heads)?;
            if let (Some(top), Some(top_tape)) = (&self.topology, &temp.topology) {
                let extra = top.mlp.backward(&self.store, top_tape, &d_w, &mut grads.heads)?;
                for (a, b) in d_feat4.iter_mut().zip(&extra) {
                    *a += b;
                }
            }
            if d_feat4.iter().any(|&v| v != 0.0) {
                grads.temporal.extend_from_slice(&temp.point);
                grads.temporal.extend_from_slice(&d_feat4);
            }
        }
        if let Some(mt) = &tape.motion {
            let (m, neg) = match mt {
                MotionTape::FixedPoint(m) => (m, d_motion.map(|v| -v)),
                MotionTape::BackwardDifference(m) => (m, d_motion),
            };
            let d_feat4 = self
                .deformation
                .mlp
                .backward(&self.store, &m.deform, &neg, &mut grads.heads)?;
            if d_feat4.iter().any(|&v| v != 0.0) {
                grads.temporal.extend_from_slice(&m.point);
                grads.temporal.extend_from_slice(&d_feat4);
            }
        }
        Ok(())
    }

    /// Add `grads` into the parameter store's gradient buffers, scattering
    /// grid records in the order they were produced.
    pub fn apply_grads(&mut self, grads: &FieldGrads) -> Result<()> {
        self.store.accumulate(&grads.heads);
        let stride3 = 3 + self.config.spatial.output_len();
        let layout = self.canonical.layout.clone();
        let (table, grad) = self.store.value_and_grad_mut(self.canonical.grid);
        for rec in grads.spatial.chunks_exact(stride3) {
            layout.accumulate_backward(table, &rec[..3], &rec[3..], grad, None)?;
        }
        let stride4 = 4 + self.config.temporal.output_len();
        let layout = self.temporal_layout.clone();
        let (table, grad) = self.store.value_and_grad_mut(self.temporal_grid);
        for rec in grads.temporal.chunks_exact(stride4) {
            layout.accumulate_backward(table, &rec[..4], &rec[4..], grad, None)?;
        }
        Ok(())
    }

    /// Scale the learning rate of every canonical parameter.
    pub fn set_canonical_lr_scale(&mut self, scale: f64) {
        for id in self.canonical_params() {
            self.store.set_lr_scale(id, scale);
        }
    }
}

fn check_finite(s: &CanonicalSample, x: [f64; 3], t: f64) -> Result<()> {
    if !s.sigma.is_finite() {
        return Err(Error::NonFiniteSample { head: "density", x, t });
    }
    if s.color.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFiniteSample { head: "color", x, t });
    }
    Ok(())
}

fn clamp_bounds(x: [f64; 3]) -> [f64; 3] {
    x.map(|v| v.clamp(-HALF_EXTENT, HALF_EXTENT))
}

pub(crate) fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::sigmoid;
    use rand::Rng;

    pub(crate) fn tiny_config() -> FieldConfig {
        FieldConfig {
            spatial: GridConfig {
                dimension: 3,
                levels: 3,
                features_per_level: 2,
                base_resolution: 4,
                per_level_scale: 2.0,
                table_size_log2: 8,
            },
            temporal: GridConfig {
                dimension: 4,
                levels: 2,
                features_per_level: 2,
                base_resolution: 3,
                per_level_scale: 2.0,
                table_size_log2: 8,
            },
            hidden_width: 8,
            topology_width: 2,
            use_topology: true,
            density_bias: 0.2,
            grid_init_scale: 0.5,
        }
    }

    /// Give the deformation and topology heads non-trivial weights.
    pub(crate) fn perturb_dynamic(field: &mut DynamicField, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in field.dynamic_params() {
            for v in field.store.value_mut(id) {
                *v += rng.gen_range(-scale..scale);
            }
        }
    }

    fn set_head_output(field: &mut DynamicField, mlp: &Mlp, bias: &[f64]) {
        let ids: Vec<ParamId> = mlp.param_ids().collect();
        let (w, b) = (ids[ids.len() - 2], ids[ids.len() - 1]);
        field.store.value_mut(w).fill(0.0);
        field.store.value_mut(b).copy_from_slice(bias);
    }

    #[test]
    fn zero_topology_is_static_path() {
        let field = DynamicField::new(tiny_config(), 1).unwrap();
        let x = [0.1, -0.2, 0.3];
        let a = field.sample_canonical(x, &[0.0, 0.0]).unwrap();
        let b = field.eval_point(x, 0.7, FieldMode::Canonical, None).unwrap();
        assert_eq!(a.sigma, b.sigma);
        assert_eq!(a.color, b.color);
    }

    #[test]
    fn zero_heads_give_constant_density() {
        let mut field = DynamicField::new(tiny_config(), 2).unwrap();
        let density = field.canonical.density.clone();
        set_head_output(&mut field, &density, &[0.4]);
        let expect = crate::nn::softplus(0.4);
        for x in [[0.0, 0.0, 0.0], [0.3, -0.4, 0.1], [-0.45, 0.45, 0.2]] {
            let s = field.sample_canonical(x, &[0.0, 0.0]).unwrap();
            assert!((s.sigma - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn canonical_matches_straight_line_oracle() {
        let field = DynamicField::new(tiny_config(), 3).unwrap();
        let x = [0.12, -0.33, 0.27];
        let w = [0.5, -0.25];
        let unit = [x[0] + 0.5, x[1] + 0.5, x[2] + 0.5];
        let table = GridParams::from_vec(&field.config.spatial, field.store.value(field.canonical.grid).to_vec()).unwrap();
        let mut input = crate::grid::encode(&field.config.spatial, &table, &unit).unwrap();
        input.extend_from_slice(&w);
        let head = |prefix: &str, out: usize| -> Vec<f64> {
            let get = |n: &str| field.store.value(field.store.id(&format!("{prefix}.{n}")).unwrap()).to_vec();
            let (w0, b0, w1, b1) = (get("l0.weight"), get("l0.bias"), get("l1.weight"), get("l1.bias"));
            let n_in = input.len();
            let hidden: Vec<f64> = (0..8)
                .map(|i| (b0[i] + (0..n_in).map(|j| w0[i * n_in + j] * input[j]).sum::<f64>()).max(0.0))
                .collect();
            (0..out)
                .map(|i| b1[i] + (0..8).map(|j| w1[i * 8 + j] * hidden[j]).sum::<f64>())
                .collect()
        };
        let z_sigma = head("canonical.density", 1)[0];
        let z_color = head("canonical.color", 3);
        let s = field.sample_canonical(x, &w).unwrap();
        assert!((s.sigma - (z_sigma.max(0.0) + (-z_sigma.abs()).exp().ln_1p())).abs() < 1e-14);
        for k in 0..3 {
            assert!((s.color[k] - sigmoid(z_color[k])).abs() < 1e-14);
        }
    }

    #[test]
    fn out_of_bounds_is_empty() {
        let field = DynamicField::new(tiny_config(), 4).unwrap();
        let s = field.sample_canonical([0.6, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(s.sigma, 0.0);
        let d = field.sample_dynamic([0.0, -0.51, 0.0], 0.5).unwrap();
        assert_eq!(d.sigma, 0.0);
    }

    #[test]
    fn identity_at_init() {
        let field = DynamicField::new(tiny_config(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let x = [0, 1, 2].map(|_| rng.gen_range(-0.5..0.5));
            let t = rng.gen_range(0.0..=1.0);
            let d = field.sample_dynamic(x, t).unwrap();
            let c = field.sample_canonical(x, &[0.0, 0.0]).unwrap();
            assert!((d.sigma - c.sigma).abs() <= 1e-6);
            for k in 0..3 {
                assert!((d.color[k] - c.color[k]).abs() <= 1e-6);
            }
            assert_eq!(d.displacement, [0.0; 3]);
            assert!(d.topology.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn constant_deformation_translates_field() {
        let mut field = DynamicField::new(tiny_config(), 6).unwrap();
        let delta = [0.05, -0.1, 0.02];
        let deform = field.deformation.mlp.clone();
        set_head_output(&mut field, &deform, &delta);
        // Observation point x shows the canonical content at x + Δ, i.e. the
        // canonical field translated by −Δ.
        for x in [[0.1, 0.2, -0.1], [-0.3, 0.0, 0.25]] {
            let d = field.sample_dynamic(x, 0.4).unwrap();
            let c = field.sample_canonical(add(x, delta), &[0.0, 0.0]).unwrap();
            assert_eq!(d.sigma, c.sigma);
            assert_eq!(d.color, c.color);
        }
        // Motion of a constant deformation is zero.
        let m = field.motion([0.1, 0.1, 0.1], 0.2, MotionOptions::new(0.1, 10)).unwrap();
        assert!(norm(m.delta) < 1e-12 && m.converged);
    }

    #[test]
    fn constant_topology_matches_canonical_query() {
        let mut field = DynamicField::new(tiny_config(), 7).unwrap();
        let w0 = [0.7, -0.3];
        let top = field.topology.as_ref().unwrap().mlp.clone();
        set_head_output(&mut field, &top, &w0);
        let x = [0.2, -0.1, 0.05];
        let d = field.sample_dynamic(x, 0.9).unwrap();
        let c = field.sample_canonical(x, &w0).unwrap();
        assert_eq!((d.sigma, d.color), (c.sigma, c.color));
        assert_eq!(d.topology, w0.to_vec());
    }

    #[test]
    fn deformation_only_has_no_topology_head() {
        let cfg = FieldConfig {
            use_topology: false,
            ..tiny_config()
        };
        let mut field = DynamicField::new(cfg, 8).unwrap();
        assert!(field.topology.is_none());
        perturb_dynamic(&mut field, 1, 0.5);
        let d = field.sample_dynamic([0.1, 0.1, 0.1], 0.5).unwrap();
        assert_eq!(d.topology, vec![0.0, 0.0]);
    }

    #[test]
    fn displacement_continuous_in_time() {
        let mut field = DynamicField::new(tiny_config(), 10).unwrap();
        perturb_dynamic(&mut field, 2, 0.3);
        let x = [0.05, 0.1, -0.2];
        let base = field.deformation_at(x, 0.41).unwrap().0;
        let mut prev = f64::INFINITY;
        for delta in [1e-2, 1e-3, 1e-4, 1e-5] {
            let d = field.deformation_at(x, 0.41 + delta).unwrap().0;
            let diff = norm(sub(d, base));
            assert!(diff <= prev + 1e-15);
            prev = diff;
        }
        assert!(prev < 1e-4);
    }

    #[test]
    fn linear_motion_fixed_point_matches_closed_form() {
        let mut field = DynamicField::new(tiny_config(), 11).unwrap();
        perturb_dynamic(&mut field, 3, 0.3);
        let x = [0.1, -0.05, 0.2];
        let opts = MotionOptions::new(0.05, 10);
        let m = field.motion(x, 0.3, opts).unwrap();
        if m.converged {
            let (d0, _) = field.deformation_at(x, 0.3).unwrap();
            let end = add(x, m.delta);
            let (d1, _) = field.deformation_at(end, 0.35).unwrap();
            let lhs = add(end, d1);
            let rhs = add(x, d0);
            assert!(norm(sub(lhs, rhs)) < 1e-6);
        }
    }

    #[test]
    fn taped_eval_matches_untaped() {
        let mut field = DynamicField::new(tiny_config(), 12).unwrap();
        perturb_dynamic(&mut field, 4, 0.2);
        let opts = Some(MotionOptions::new(0.1, 5));
        for x in [[0.1, 0.2, 0.0], [-0.2, 0.3, 0.1]] {
            let a = field.eval_point(x, 0.5, FieldMode::Dynamic, opts).unwrap();
            let (b, _) = field.eval_point_taped(x, 0.5, FieldMode::Dynamic, opts).unwrap();
            assert_eq!(a.sigma, b.sigma);
            assert_eq!(a.color, b.color);
            let (ma, mb) = (a.motion.unwrap(), b.motion.unwrap());
            assert!(norm(sub(ma.delta, mb.delta)) < 1e-6);
        }
    }
}
