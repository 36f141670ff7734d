//! Parameter storage and the layers the encoders and heads are built from.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, ConvGeom, Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers (running statistics) are stored alongside parameters but are
    /// never touched by the optimizer.
    pub trainable: bool,
}

/// Owns every named tensor of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), value, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), value, trainable: false });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.trainable && p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    }

    /// FNV-1a over the bit patterns of every tensor whose name starts with
    /// `prefix`. Used to compare parameter sets bit for bit.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            for b in p.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in p.value.iter() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::validation(
                "parameters",
                format!("expected {} tensors, found {}", self.params.len(), other.params.len()),
            ));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::validation(
                    "parameters",
                    format!("{} {:?} does not match {} {:?}", mine.name, mine.value.shape(), theirs.name, theirs.value.shape()),
                ));
            }
            mine.value.assign(&theirs.value);
        }
        Ok(())
    }
}

/// One forward pass: a graph plus the lazily bound parameters it reads.
///
/// Parameters that are never bound receive no gradient, so an optimizer step
/// driven by [`Session::param_grads`] leaves them bit-identical.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    pub train: bool,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Self { graph: Graph::new(), store, bound: vec![None; store.len()], train, buffer_updates: Vec::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if p.trainable { self.graph.leaf(p.value.clone()) } else { self.graph.constant(p.value.clone()) };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }

    pub fn record_buffer(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Gradients for every bound trainable parameter, in id order.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out = Vec::new();
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(v) = slot {
                if self.store.params[i].trainable {
                    if let Some(g) = grads.take(*v) {
                        out.push((ParamId(i), g));
                    }
                }
            }
        }
        out
    }
}

pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) {
    for (id, v) in updates {
        store.value_mut(id).assign(&v);
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("init shape")
}

/// Affine map `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[out_dim, in_dim], bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[out_dim], bound));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.graph.matmul_t(x, w)?;
        s.graph.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * geom.kernel * geom.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[out_channels, fan_in], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[out_channels], bound)));
        Self { weight, bias, geom, in_channels, out_channels }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.geom)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels]))),
            beta: store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: store.add_buffer(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[channels]))),
            running_var: store.add_buffer(format!("{name}.running_var"), ArrayD::ones(IxDyn(&[channels]))),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.train {
            let (y, stats) = s.graph.batch_norm(x, gamma, beta, self.eps, None)?;
            let stats = stats.expect("training-mode batch statistics");
            let rows = (s.graph.value(x).len() / stats.mean.len()) as f64;
            let m = self.momentum;
            let rm = s.store().value(self.running_mean);
            let rv = s.store().value(self.running_var);
            let new_mean = ArrayD::from_shape_fn(rm.raw_dim(), |i| (1.0 - m) * rm[&i] + m * stats.mean[i[0]]);
            let unbias = if rows > 1.0 { rows / (rows - 1.0) } else { 1.0 };
            let new_var = ArrayD::from_shape_fn(rv.raw_dim(), |i| (1.0 - m) * rv[&i] + m * stats.var[i[0]] * unbias);
            s.record_buffer(self.running_mean, new_mean);
            s.record_buffer(self.running_var, new_var);
            Ok(y)
        } else {
            let stats = BatchStats {
                mean: s.store().value(self.running_mean).iter().copied().collect(),
                var: s.store().value(self.running_var).iter().copied().collect(),
            };
            Ok(s.graph.batch_norm(x, gamma, beta, self.eps, Some(&stats))?.0)
        }
    }
}
