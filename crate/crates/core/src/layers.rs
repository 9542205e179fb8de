//! Parameterised building blocks shared by the NLCE module and the network.
//!
//! A layer is a descriptor (name prefix plus hyper-parameters); its weights
//! live in a [`ParamStore`] under `"{prefix}.{field}"` and are pulled into a
//! [`Graph`] on each forward pass.

use std::hash::{DefaultHasher, Hash, Hasher};

use nlcen_tensor::{Graph, NormMode, ParamStore, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Running-statistics momentum of every batch-norm layer.
pub const BN_MOMENTUM: f64 = 0.1;

/// Train/eval switch threaded through every forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardCtx {
    pub training: bool,
    /// Base-network layers (everything outside `nlce*`) behave as in eval
    /// mode; used while fine-tuning NLCE modules on a frozen network.
    pub freeze_base: bool,
}

impl ForwardCtx {
    pub const TRAIN: ForwardCtx = ForwardCtx {
        training: true,
        freeze_base: false,
    };
    pub const EVAL: ForwardCtx = ForwardCtx {
        training: false,
        freeze_base: false,
    };
    pub const FROZEN_BASE: ForwardCtx = ForwardCtx {
        training: true,
        freeze_base: true,
    };

    pub(crate) fn batch_stats_for(&self, layer: &str) -> bool {
        self.training && !(self.freeze_base && !is_nlce_param(layer))
    }
}

/// Whether a parameter name belongs to an NLCE module.
pub fn is_nlce_param(name: &str) -> bool {
    name.starts_with("nlce")
}

/// Deterministic generator for one named parameter.
///
/// Seeding per name keeps the initial value of a layer independent of
/// which other layers exist, so model variants share their common weights.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = DefaultHasher::new();
    name.hash(&mut h);
    ChaCha8Rng::seed_from_u64(seed ^ h.finish())
}

/// He-uniform initialisation for a weight with the given fan-in.
pub(crate) fn he_uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = param_rng(seed, name);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Conv {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
            bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let w = format!("{}.weight", self.name);
        let fan_in = self.in_ch * self.kernel * self.kernel;
        let shape = [self.out_ch, self.in_ch, self.kernel, self.kernel];
        store.register(&w, he_uniform(seed, &w, &shape, fan_in))?;
        if self.bias {
            store.register(&format!("{}.bias", self.name), Tensor::zeros([self.out_ch]))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let y = g.conv2d(x, w, self.stride, self.kernel / 2)?;
        if !self.bias {
            return Ok(y);
        }
        let b = g.param(store, &format!("{}.bias", self.name))?;
        let b = g.reshape(b, &[self.out_ch, 1, 1])?;
        Ok(g.add(y, b)?)
    }
}

/// Batch normalisation over one channel axis.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub axis: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize, axis: usize) -> Self {
        BatchNorm {
            name: name.into(),
            channels,
            axis,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        let c = self.channels;
        store.register(&format!("{}.weight", self.name), Tensor::ones([c]))?;
        store.register(&format!("{}.bias", self.name), Tensor::zeros([c]))?;
        store.register_buffer(&format!("{}.running_mean", self.name), Tensor::zeros([c]))?;
        store.register_buffer(&format!("{}.running_var", self.name), Tensor::ones([c]))?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: ForwardCtx) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.weight", self.name))?;
        let beta = g.param(store, &format!("{}.bias", self.name))?;
        if ctx.batch_stats_for(&self.name) {
            let (y, stats) = g.batch_norm(x, gamma, beta, self.axis, NormMode::Batch)?;
            if let Some(stats) = stats {
                g.record_batch_stats(&self.name, stats);
            }
            Ok(y)
        } else {
            let mean = running(store, &self.name, "running_mean")?;
            let var = running(store, &self.name, "running_var")?;
            let mode = NormMode::Running { mean, var };
            Ok(g.batch_norm(x, gamma, beta, self.axis, mode)?.0)
        }
    }
}

fn running<'a>(store: &'a ParamStore, layer: &str, field: &str) -> Result<&'a [f64]> {
    let name = format!("{layer}.{field}");
    store
        .tensor(&name)
        .map(|t| t.data())
        .ok_or_else(|| crate::Error::ArchitectureMismatch(format!("missing buffer `{name}`")))
}

/// Folds observed batch moments into the running statistics of `store`.
pub fn apply_batch_stats(store: &mut ParamStore, updates: &[(String, nlcen_tensor::BatchStats)]) {
    for (layer, stats) in updates {
        for (field, observed) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            if let Some(t) = store.tensor_mut(&format!("{layer}.{field}")) {
                for (r, o) in t.data_mut().iter_mut().zip(observed.iter()) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
                }
            }
        }
    }
}

/// Conv (no bias) → batch norm → optional relu.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        ConvBn {
            conv: Conv::new(format!("{name}.conv"), in_ch, out_ch, kernel, stride),
            bn: BatchNorm::new(format!("{name}.bn"), out_ch, 1),
            relu,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.conv.init(store, seed)?;
        self.bn.init(store)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: ForwardCtx) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, ctx)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}

/// Row-wise linear map `rows · Wᵀ` for `W: [out, in]` stored in `store`.
pub(crate) fn linear(g: &mut Graph, store: &ParamStore, name: &str, rows: Var) -> Result<Var> {
    let w = g.param(store, name)?;
    let wt = g.transpose(w)?;
    Ok(g.matmul(rows, wt)?)
}
