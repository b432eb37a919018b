//! Dense layers with exact reverse-mode gradients, named parameter storage,
//! and Adam.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub lr_scale: f64,
}

/// Named parameter arrays with paired gradient buffers.
///
/// The store carries a version counter that advances on every mutation of
/// parameter values; tapes recorded against an older version are rejected
/// by backward passes.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    names: HashMap<String, ParamId>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        let count: usize = shape.iter().product();
        if count != value.len() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {shape:?} but {} values",
                value.len()
            )));
        }
        if self.names.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.names.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            grad: vec![0.0; value.len()],
            value,
            lr_scale: 1.0,
        });
        self.version += 1;
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.version += 1;
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].grad
    }

    /// Parameter values alongside the gradient buffer, for scatter-style backward passes.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&[f64], &mut [f64]) {
        let e = &mut self.entries[id.0];
        (&e.value, &mut e.grad)
    }

    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.entries[id.0].lr_scale = scale;
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Add a chunk-local gradient buffer into the store's gradients.
    pub fn accumulate(&mut self, grads: &GradBuffer) {
        for (i, slot) in grads.slots.iter().enumerate() {
            if let Some(g) = slot {
                for (dst, src) in self.entries[i].grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    /// Flattened copy of all parameter values, in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.value.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.grad.iter().copied()).collect()
    }

    pub(crate) fn replace_value(&mut self, name: &str, value: Vec<f64>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let entry = &mut self.entries[id.0];
        if entry.value.len() != value.len() {
            return Err(Error::Shape(format!(
                "parameter `{name}` expects {} values, got {}",
                entry.value.len(),
                value.len()
            )));
        }
        entry.value = value;
        self.version += 1;
        Ok(())
    }
}

/// Lazily allocated gradient accumulator mirroring a [`ParamStore`], used for
/// per-worker accumulation before an ordered merge.
#[derive(Clone, Debug, Default)]
pub struct GradBuffer {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn slot(&mut self, store: &ParamStore, id: ParamId) -> &mut [f64] {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        let len = store.value(id).len();
        self.slots[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    /// `self += other`, slot by slot.
    pub fn merge(&mut self, other: &GradBuffer) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Softplus => softplus(z),
        }
    }

    /// Derivative given the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Softplus => sigmoid(z),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Input width followed by each layer's output width.
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpConfig {
    pub fn new(widths: Vec<usize>, output: Activation) -> Self {
        Self {
            widths,
            hidden: Activation::Relu,
            output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config("mlp needs at least one layer".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("mlp widths must be >= 1: {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// How the last layer is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FinalInit {
    /// Same fan-in scaled uniform init as hidden layers, with the given bias.
    Uniform { bias: f64 },
    /// Weights and bias exactly zero, so the head outputs `act(0)` everywhere.
    Zero,
}

#[derive(Clone, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<Layer>,
}

/// Activations cached by [`Mlp::forward`] for the matching backward pass.
#[derive(Clone, Debug)]
pub struct MlpTape {
    version: u64,
    /// Layer inputs; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        &self.out
    }
}

impl Mlp {
    /// Register parameters `<prefix>.l<k>.weight` / `.bias` in `store`.
    /// Weights are uniform in `±sqrt(6 / fan_in)`, biases zero.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: MlpConfig,
        final_init: FinalInit,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let n = config.widths.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (k, w) in config.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let last = k + 1 == n;
            let bound = (6.0 / fan_in as f64).sqrt();
            let (weights, bias) = match (last, final_init) {
                (true, FinalInit::Zero) => (vec![0.0; fan_in * fan_out], vec![0.0; fan_out]),
                (true, FinalInit::Uniform { bias }) => (
                    (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound) * 0.5).collect(),
                    vec![bias; fan_out],
                ),
                _ => (
                    (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
                    vec![0.0; fan_out],
                ),
            };
            let weight = store.add(format!("{prefix}.l{k}.weight"), &[fan_out, fan_in], weights)?;
            let bias = store.add(format!("{prefix}.l{k}.bias"), &[fan_out], bias)?;
            layers.push(Layer {
                weight,
                bias,
                fan_in,
                fan_out,
            });
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.config.input_width() {
            return Err(Error::Shape(format!(
                "mlp expects input width {}, got {}",
                self.config.input_width(),
                input.len()
            )));
        }
        Ok(())
    }

    fn activation(&self, k: usize) -> Activation {
        if k + 1 == self.layers.len() {
            self.config.output
        } else {
            self.config.hidden
        }
    }

    /// Forward pass without recording a tape.
    pub fn eval(&self, store: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let act = self.activation(k);
            cur = affine(store, layer, &cur)
                .into_iter()
                .map(|z| act.apply(z))
                .collect();
        }
        Ok(cur)
    }

    pub fn forward(&self, store: &ParamStore, input: &[f64]) -> Result<MlpTape> {
        self.check_input(input)?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut cur = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let act = self.activation(k);
            let z = affine(store, layer, &cur);
            let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            inputs.push(std::mem::replace(&mut cur, a));
            pre.push(z);
        }
        Ok(MlpTape {
            version: store.version(),
            inputs,
            pre,
            out: cur,
        })
    }

    /// Accumulate parameter gradients of `⟨upstream, output⟩` into `grads`
    /// and return the gradient with respect to the input.
    pub fn backward(
        &self,
        store: &ParamStore,
        tape: &MlpTape,
        upstream: &[f64],
        grads: &mut GradBuffer,
    ) -> Result<Vec<f64>> {
        if tape.version != store.version() {
            return Err(Error::StaleCache {
                tape: tape.version,
                store: store.version(),
            });
        }
        if upstream.len() != self.config.output_width() {
            return Err(Error::Shape(format!(
                "upstream width {} != mlp output width {}",
                upstream.len(),
                self.config.output_width()
            )));
        }
        let mut delta = upstream.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let act = self.activation(k);
            let z = &tape.pre[k];
            let a_out = if k + 1 == self.layers.len() {
                &tape.out
            } else {
                &tape.inputs[k + 1]
            };
            for i in 0..layer.fan_out {
                delta[i] *= act.derivative(z[i], a_out[i]);
            }
            let x = &tape.inputs[k];
            {
                let gw = grads.slot(store, layer.weight);
                for i in 0..layer.fan_out {
                    let d = delta[i];
                    if d != 0.0 {
                        let row = &mut gw[i * layer.fan_in..(i + 1) * layer.fan_in];
                        for (g, xv) in row.iter_mut().zip(x) {
                            *g += d * xv;
                        }
                    }
                }
            }
            {
                let gb = grads.slot(store, layer.bias);
                for (g, d) in gb.iter_mut().zip(&delta) {
                    *g += d;
                }
            }
            let w = store.value(layer.weight);
            let mut next = vec![0.0; layer.fan_in];
            for i in 0..layer.fan_out {
                let d = delta[i];
                if d != 0.0 {
                    let row = &w[i * layer.fan_in..(i + 1) * layer.fan_in];
                    for (n, wv) in next.iter_mut().zip(row) {
                        *n += d * wv;
                    }
                }
            }
            delta = next;
        }
        Ok(delta)
    }
}

fn affine(store: &ParamStore, layer: &Layer, x: &[f64]) -> Vec<f64> {
    let w = store.value(layer.weight);
    let b = store.value(layer.bias);
    (0..layer.fan_out)
        .map(|i| {
            let row = &w[i * layer.fan_in..(i + 1) * layer.fan_in];
            b[i] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            m: store.entries.iter().map(|e| vec![0.0; e.value.len()]).collect(),
            v: store.entries.iter().map(|e| vec![0.0; e.value.len()]).collect(),
        }
    }

    /// Bias-corrected Adam update of every parameter, scaled by its
    /// `lr_scale`; gradients are zeroed afterwards. A non-finite gradient
    /// aborts the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(e) = store
            .entries
            .iter()
            .find(|e| e.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFiniteGradient(e.name.clone()));
        }
        if self.m.len() != store.entries.len() {
            return Err(Error::Shape(format!(
                "adam state tracks {} parameters, store has {}",
                self.m.len(),
                store.entries.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((entry, m), v) in store.entries.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let lr = learning_rate * entry.lr_scale;
            for (((p, g), mi), vi) in entry
                .value
                .iter_mut()
                .zip(entry.grad.iter_mut())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * *g;
                *vi = beta2 * *vi + (1.0 - beta2) * *g * *g;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *p -= lr * mh / (vh.sqrt() + epsilon);
                *g = 0.0;
            }
        }
        store.version += 1;
        Ok(())
    }
}
