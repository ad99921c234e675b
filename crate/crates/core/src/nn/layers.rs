//! Parameterized layers: descriptors holding [`ParamId`]s into a
//! [`ParamStore`], applied through a [`ForwardCtx`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::activation::{relu6, Mode};
use crate::nn::conv::{conv3d, conv_transpose3d};
use crate::nn::norm::{batch_norm_eval, batch_norm_train, BN_EPSILON};
use crate::params::{BufferId, ForwardCtx, ParamId, ParamStore, StatUpdate};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A 3D convolution or transposed convolution with bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub transposed: bool,
}

impl ConvParams {
    /// He-normal weights (std `sqrt(2 / (k³·C_in))`), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        transposed: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * kernel * c_in;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = store.add_param(
            format!("{name}.weight"),
            Tensor::randn([kernel, kernel, kernel, c_in, c_out], std, rng),
        );
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros([c_out]));
        Self {
            weight,
            bias,
            kernel,
            stride,
            c_in,
            c_out,
            transposed,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        if self.transposed {
            conv_transpose3d(g, x, w, b, self.stride)
        } else {
            conv3d(g, x, w, b, self.stride)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub epsilon: f64,
}

impl BatchNormParams {
    /// `gamma = 1`, `beta = 0`; running mean 0 and variance 1.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones([channels])),
            epsilon: BN_EPSILON,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = batch_norm_train(g, x, gamma, beta, self.epsilon)?;
                ctx.stat_updates.push(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => batch_norm_eval(
                g,
                x,
                gamma,
                beta,
                ctx.store.buffer(self.running_mean).data(),
                ctx.store.buffer(self.running_var).data(),
                self.epsilon,
            ),
        }
    }
}

/// Batch norm followed by ReLU6: the pre-activation unit placed before every
/// convolution.
pub fn bn_relu6<T: Scalar>(g: &mut Graph<T>, ctx: &mut ForwardCtx<'_, T>, bn: &BatchNormParams, x: Var) -> Result<Var> {
    let y = bn.forward(g, ctx, x)?;
    relu6(g, y)
}
