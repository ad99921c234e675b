//! Named parameter storage and per-forward binding onto a [`Graph`].

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::norm::BatchStats;
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The seeded random stream used for initialization, sampling and dropout.
pub type SeededRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Named<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics), each in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Named<T>>,
    buffers: Vec<Named<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    fn check_unique(&self, name: &str) {
        assert!(
            !self.params.iter().chain(&self.buffers).any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        self.check_unique(&name);
        self.params.push(Named { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        let name = name.into();
        self.check_unique(&name);
        self.buffers.push(Named { name, value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Named<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Named<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Named<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Named<T>] {
        &mut self.buffers
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a gradient-requiring leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.param(p.value.clone())).collect(),
        }
    }

    /// Collects the gradients of a bound store after `backward`, zero-filled
    /// for parameters the loss did not reach.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
            })
            .collect()
    }

    pub fn apply_stats(&mut self, updates: &[StatUpdate<T>], momentum: f64) {
        for u in updates {
            let (lo, hi) = (u.mean.0.min(u.var.0), u.mean.0.max(u.var.0));
            let (head, tail) = self.buffers.split_at_mut(hi);
            let (a, b) = (&mut head[lo].value, &mut tail[0].value);
            let (mean, var) = if u.mean.0 < u.var.0 { (a, b) } else { (b, a) };
            crate::nn::norm::update_running(mean.data_mut(), var.data_mut(), &u.stats, momentum);
        }
    }

    /// Replaces every value with one of identical name and shape from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        fn copy<T: Scalar>(dst: &mut [Named<T>], src: &[Named<T>], what: &str) -> Result<()> {
            if dst.len() != src.len() {
                return Err(Error::Data(format!(
                    "{what} count {} does not match {}",
                    src.len(),
                    dst.len()
                )));
            }
            for (d, s) in dst.iter_mut().zip(src) {
                if d.name != s.name || d.value.shape() != s.value.shape() {
                    return Err(Error::Data(format!(
                        "{what} mismatch: expected {} {:?}, found {} {:?}",
                        d.name,
                        d.value.shape(),
                        s.name,
                        s.value.shape()
                    )));
                }
                d.value = s.value.clone();
            }
            Ok(())
        }
        copy(&mut self.params, &other.params, "parameter")?;
        copy(&mut self.buffers, &other.buffers, "buffer")
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &Vec<Named<T>>| {
            v.iter()
                .map(|n| Named {
                    name: n.name.clone(),
                    value: n.value.cast(),
                })
                .collect()
        };
        ParamStore {
            params: conv(&self.params),
            buffers: conv(&self.buffers),
        }
    }
}

/// Graph handles for a store's parameters, valid for one [`Graph`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles for a store's parameters, in registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats<T>,
}

/// Default cap on `queries × keys` attention entries per batch item.
pub const DEFAULT_ATTENTION_LIMIT: usize = 1 << 27;

/// Everything a layer's forward pass needs besides its input.
pub struct ForwardCtx<'a, T> {
    pub mode: Mode,
    pub rng: &'a mut SeededRng,
    pub store: &'a ParamStore<T>,
    pub bound: &'a Bound,
    /// Batch-norm statistics gathered in train mode, applied by the caller.
    pub stat_updates: Vec<StatUpdate<T>>,
    pub attention_limit: usize,
    /// When set, aggregation blocks append their (post-dropout) attention
    /// matrices here, one `[B, N_Q, N]` tensor per block.
    pub attention_maps: Option<Vec<Tensor<T>>>,
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    pub fn new(mode: Mode, rng: &'a mut SeededRng, store: &'a ParamStore<T>, bound: &'a Bound) -> Self {
        Self {
            mode,
            rng,
            store,
            bound,
            stat_updates: Vec::new(),
            attention_limit: DEFAULT_ATTENTION_LIMIT,
            attention_maps: None,
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.bound.get(id)
    }
}
