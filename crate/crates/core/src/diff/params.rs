//! Trainable parameters, non-trainable buffers and initializers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Learning-rate group. Backbones (encoders) and heads can be stepped at
/// different rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Head,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "backbone" => Some(ParamGroup::Backbone),
            "head" => Some(ParamGroup::Head),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Adam first moment.
    pub m: Tensor<T>,
    /// Adam second moment.
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Real> Parameter<T> {
    fn new(name: String, group: ParamGroup, value: Tensor<T>) -> Self {
        let z = Tensor::zeros(value.shape());
        Self {
            name,
            group,
            grad: z.clone(),
            m: z.clone(),
            v: z,
            value,
            step: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Initialization scheme for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in ±sqrt(6 / fan_in).
    KaimingUniform {
        fan_in: usize,
    },
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    XavierUniform {
        fan_in: usize,
        fan_out: usize,
    },
    /// Normal(0, std).
    Normal {
        std: f64,
    },
    /// Square orthogonal blocks of size `block` stacked along the last axis.
    OrthogonalBlocks {
        block: usize,
    },
}

/// Owns every parameter and buffer of one model instance.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn push_param(&mut self, name: &str, group: ParamGroup, value: Tensor<T>) -> ParamId {
        self.params
            .push(Parameter::new(name.to_string(), group, value));
        ParamId(self.params.len() - 1)
    }

    pub fn push_buffer(&mut self, name: &str, value: Tensor<T>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.to_string(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Order-sensitive checksum of all parameter values (FNV-1a over the
    /// fp32 bit patterns).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.value.data() {
                let bits = v.to_f32().unwrap().to_bits();
                for b in bits.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Converts the whole store to another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    m: p.m.cast(),
                    v: p.v.cast(),
                    step: p.step,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
        }
    }
}

/// Helper used by model builders: allocates named parameters into a store
/// with a seeded RNG and a current group and name prefix.
pub struct ParamBuilder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    group: ParamGroup,
    prefix: Vec<String>,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            group: ParamGroup::Head,
            prefix: Vec::new(),
        }
    }

    pub fn set_group(&mut self, group: ParamGroup) {
        self.group = group;
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn push_scope(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` inside a named scope.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push_scope(name);
        let r = f(self);
        self.pop_scope();
        r
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix.join("."), name)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| self.rng.random_range(-bound..bound))
                    .collect()
            }
            Init::XavierUniform { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                (0..n)
                    .map(|_| self.rng.random_range(-bound..bound))
                    .collect()
            }
            Init::Normal { std } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
            Init::OrthogonalBlocks { block } => orthogonal_blocks(&mut self.rng, shape, block),
        };
        let full = self.full_name(name);
        let group = self.group;
        self.store
            .push_param(&full, group, Tensor::from_f64(shape, &data))
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> BufferId {
        let full = self.full_name(name);
        self.store.push_buffer(&full, value)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Fills a `(rows, k*block)` matrix with `k` orthogonal `block x block`
/// squares (rows == block), via Gram-Schmidt on Gaussian draws.
fn orthogonal_blocks(rng: &mut ChaCha8Rng, shape: &[usize], block: usize) -> Vec<f64> {
    assert_eq!(shape.len(), 2);
    let (rows, cols) = (shape[0], shape[1]);
    assert_eq!(rows, block, "orthogonal init expects square blocks");
    assert_eq!(cols % block, 0);
    let mut out = vec![0.0; rows * cols];
    for b in 0..cols / block {
        // columns of the square as vectors
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(block);
        while q.len() < block {
            let mut v: Vec<f64> = (0..block).map(|_| StandardNormal.sample(rng)).collect();
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|a| *a /= norm);
                q.push(v);
            }
        }
        for (j, col) in q.iter().enumerate() {
            for (i, &val) in col.iter().enumerate() {
                out[i * cols + b * block + j] = val;
            }
        }
    }
    out
}
