//! Layer primitives on top of the differentiation engine: the parameter
//! registry, batch normalization, convolution and fully connected layers,
//! loss and He initialization.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, invalid_state, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Running-statistics momentum used by every batch-norm layer.
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance guard used by every batch-norm layer.
pub const BN_EPSILON: f64 = 1e-5;

/// Identity of a trainable parameter. Weight sharing is two graph sites
/// binding the same id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub u64);

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Identity of a batch-norm state (affine parameters plus running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BnId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    Bn,
    Fc,
}

impl ParamRole {
    pub fn tag(self) -> u8 {
        match self {
            ParamRole::ConvWeight => 0,
            ParamRole::ConvBias => 1,
            ParamRole::Bn => 2,
            ParamRole::Fc => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamRole::ConvWeight,
            1 => ParamRole::ConvBias,
            2 => ParamRole::Bn,
            3 => ParamRole::Fc,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor<T>,
}

/// Per-channel batch-norm state. `gamma` and `beta` live in the
/// [`ParamStore`]; the running statistics are owned here.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds one batch's statistics into the running estimates. `batch_var` is
    /// the biased variance over `count` values; the running variance tracks the
    /// unbiased estimate.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T], count: usize) {
        let m = T::of(self.momentum);
        let keep = T::one() - m;
        let correction = if count > 1 {
            T::of(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
            *r = keep * *r + m * b * correction;
        }
    }
}

/// Registry of all parameters and batch-norm states of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<ParamId, ParamEntry<T>>,
    bn: Vec<BatchNormState<T>>,
    next_id: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            bn: Vec::new(),
            next_id: 0,
        }
    }

    pub fn register(&mut self, name: impl Into<String>, role: ParamRole, tensor: Tensor<T>) -> ParamId {
        let id = ParamId(self.next_id);
        self.next_id += 1;
        self.entries.insert(
            id,
            ParamEntry {
                name: name.into(),
                role,
                tensor,
            },
        );
        id
    }

    /// Reinserts an entry under a known id (checkpoint loading).
    pub(crate) fn insert_raw(&mut self, id: ParamId, entry: ParamEntry<T>) -> Result<()> {
        if self.entries.contains_key(&id) {
            return Err(invalid_state!("duplicate parameter id {id}"));
        }
        self.next_id = self.next_id.max(id.0 + 1);
        self.entries.insert(id, entry);
        Ok(())
    }

    pub(crate) fn push_bn_raw(&mut self, state: BatchNormState<T>) -> Result<BnId> {
        for id in [state.gamma, state.beta] {
            if !self.entries.contains_key(&id) {
                return Err(invalid_state!("batch norm `{}` refers to unknown parameter {id}", state.name));
            }
        }
        self.bn.push(state);
        Ok(BnId(self.bn.len() as u32 - 1))
    }

    /// Registers a batch-norm layer with gamma = 1, beta = 0, running mean 0 and
    /// running variance 1.
    pub fn add_batch_norm(&mut self, name: &str, channels: usize) -> BnId {
        let gamma = self.register(format!("{name}.gamma"), ParamRole::Bn, Tensor::full(&[channels], T::one()));
        let beta = self.register(format!("{name}.beta"), ParamRole::Bn, Tensor::zeros(&[channels]));
        self.bn.push(BatchNormState {
            name: name.to_string(),
            gamma,
            beta,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        });
        BnId(self.bn.len() as u32 - 1)
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamEntry<T>> {
        self.entries.get(&id)
    }

    pub fn tensor(&self, id: ParamId) -> Result<&Tensor<T>> {
        self.entries
            .get(&id)
            .map(|e| &e.tensor)
            .ok_or_else(|| invalid_state!("unknown parameter {id}"))
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(&id)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| invalid_state!("unknown parameter {id}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().map(|(&id, e)| (id, e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn bn(&self, id: BnId) -> Result<&BatchNormState<T>> {
        self.bn
            .get(id.0 as usize)
            .ok_or_else(|| invalid_state!("unknown batch norm {}", id.0))
    }

    pub fn bn_mut(&mut self, id: BnId) -> Result<&mut BatchNormState<T>> {
        self.bn
            .get_mut(id.0 as usize)
            .ok_or_else(|| invalid_state!("unknown batch norm {}", id.0))
    }

    pub fn bn_states(&self) -> impl Iterator<Item = (BnId, &BatchNormState<T>)> {
        self.bn.iter().enumerate().map(|(i, s)| (BnId(i as u32), s))
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) -> Result<()> {
        for u in updates {
            self.bn_mut(u.id)?.update(&u.mean, &u.var, u.count);
        }
        Ok(())
    }
}

/// Whether batch norm uses batch statistics (and records running-stat updates)
/// or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistics update produced by a train-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate<T> {
    pub id: BnId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// State threaded through a model's forward pass. Parameters are read from a
/// shared store; train-mode batch-norm updates are collected and applied by the
/// caller afterwards.
pub struct Forward<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    trainable: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph,
            store,
            mode,
            trainable: true,
            bn_updates: Vec::new(),
        }
    }

    /// When disabled, subsequently bound parameters are recorded as constants, so
    /// no gradient flows into them from this part of the graph.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn bind(&mut self, id: ParamId) -> Result<Var> {
        let value = self.store.tensor(id)?.clone();
        Ok(if self.trainable {
            self.graph.param(id, value)
        } else {
            self.graph.constant(value)
        })
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Convolution layer descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// Registers a He-initialized, bias-free convolution.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.register(
            format!("{name}.weight"),
            ParamRole::ConvWeight,
            he_init(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        );
        Self {
            weight,
            bias: None,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.bind(self.weight)?;
        let b = self.bias.map(|b| ctx.bind(b)).transpose()?;
        ctx.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Batch-norm layer descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub state: BnId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            state: store.add_batch_norm(name, channels),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (gamma_id, beta_id, eps) = {
            let s = ctx.store.bn(self.state)?;
            (s.gamma, s.beta, s.eps)
        };
        let channels = ctx.graph.shape(x).get(1).copied();
        if channels != Some(self.channels) {
            return Err(invalid_arg!(
                "batch norm expects {} channels, input shape is {:?}",
                self.channels,
                ctx.graph.shape(x)
            ));
        }
        let gamma = ctx.bind(gamma_id)?;
        let beta = ctx.bind(beta_id)?;
        match ctx.mode {
            Mode::Train => {
                let shape = ctx.graph.shape(x);
                let count = shape[0] * shape[2] * shape[3];
                let (y, mean, var) = ctx.graph.batch_norm_train(x, gamma, beta, eps)?;
                ctx.bn_updates.push(BnUpdate {
                    id: self.state,
                    mean,
                    var,
                    count,
                });
                Ok(y)
            }
            Mode::Eval => {
                let s = ctx.store.bn(self.state)?;
                ctx.graph
                    .batch_norm_eval(x, gamma, beta, &s.running_mean, &s.running_var, eps)
            }
        }
    }
}

/// Fully connected layer descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// He-initialized weight, zero bias.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            ParamRole::Fc,
            he_init(&[out_features, in_features], in_features, rng),
        );
        let bias = store.register(format!("{name}.bias"), ParamRole::Fc, Tensor::zeros(&[out_features]));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.bind(self.weight)?;
        let b = ctx.bind(self.bias)?;
        ctx.graph.linear(x, w, Some(b))
    }
}

/// Zero-mean normal initialization with standard deviation `sqrt(2 / fan_in)`.
pub fn he_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    assert!(fan_in > 0, "fan_in must be positive");
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    Tensor::from_fn(shape, |_| T::of(normal.sample(rng)))
}
