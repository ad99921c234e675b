//! The residual blocks and their plain (non-residual) counterparts.
//!
//! Every block is pre-activated: batch norm and ReLU6 run before each
//! convolution or aggregation branch, never on a shortcut.

use rand::Rng;

use crate::aggregation::{global_aggregate, AggregationParams, QueryTransform};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{bn_relu6, BatchNormParams, ConvParams};
use crate::params::{ForwardCtx, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResidualKind {
    /// Identity + two 3×3×3 convolutions; size-preserving.
    A,
    /// Stride-2 1×1×1 shortcut + stride-2 main path; halves the extents and
    /// doubles the channels.
    B,
    /// Identity + size-preserving global aggregation.
    C,
    /// Stride-2 3×3×3 transposed-conv shortcut + up-sampling global
    /// aggregation; doubles the extents and halves the channels.
    D,
}

/// One pre-activated convolution: `conv(relu6(bn(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreActConv {
    pub bn: BatchNormParams,
    pub conv: ConvParams,
}

impl PreActConv {
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
        Self {
            bn: BatchNormParams::new(store, &format!("{name}.bn"), c_in),
            conv: ConvParams::new(
                store,
                &format!("{name}.conv"),
                kernel,
                c_in,
                c_out,
                stride,
                transposed,
                rng,
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let h = bn_relu6(g, ctx, &self.bn, x)?;
        self.conv.forward(g, ctx, h)
    }
}

/// A pre-activated aggregation branch: `aggregate(relu6(bn(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreActAggregation {
    pub bn: BatchNormParams,
    pub agg: AggregationParams,
}

impl PreActAggregation {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let h = bn_relu6(g, ctx, &self.bn, x)?;
        global_aggregate(g, ctx, h, &self.agg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    /// Kind (a): `x + f2(f1(x))`.
    A { first: PreActConv, second: PreActConv },
    /// Kind (b): `shortcut(x) + f2(f1(x))`.
    B {
        shortcut: ConvParams,
        first: PreActConv,
        second: PreActConv,
    },
    /// Kind (c): `x + aggregate(x)`.
    C { branch: PreActAggregation },
    /// Kind (d): `deconv(x) + aggregate_up(x)`.
    D {
        shortcut: ConvParams,
        branch: PreActAggregation,
    },
    /// A residual-free chain of pre-activated convolutions.
    Plain(Vec<PreActConv>),
    /// A residual-free aggregation branch.
    PlainAggregation(PreActAggregation),
}

impl Block {
    pub fn residual<T: Scalar, R: Rng + ?Sized>(
        kind: ResidualKind,
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            ResidualKind::A => Block::A {
                first: PreActConv::new(store, &format!("{name}.first"), 3, channels, channels, 1, false, rng),
                second: PreActConv::new(store, &format!("{name}.second"), 3, channels, channels, 1, false, rng),
            },
            ResidualKind::B => {
                let wide = channels * 2;
                Block::B {
                    shortcut: ConvParams::new(store, &format!("{name}.shortcut"), 1, channels, wide, 2, false, rng),
                    first: PreActConv::new(store, &format!("{name}.first"), 3, channels, wide, 2, false, rng),
                    second: PreActConv::new(store, &format!("{name}.second"), 3, wide, wide, 1, false, rng),
                }
            }
            ResidualKind::C => Block::C {
                branch: aggregation_branch(
                    store,
                    name,
                    channels,
                    channels,
                    QueryTransform::Conv1,
                    dropout_rate,
                    rng,
                ),
            },
            ResidualKind::D => {
                if channels % 2 != 0 {
                    return Err(Error::Config(format!(
                        "up-sampling block needs an even channel count, got {channels}"
                    )));
                }
                let narrow = channels / 2;
                Block::D {
                    shortcut: ConvParams::new(store, &format!("{name}.shortcut"), 3, channels, narrow, 2, true, rng),
                    branch: aggregation_branch(
                        store,
                        name,
                        channels,
                        narrow,
                        QueryTransform::Deconv3S2,
                        dropout_rate,
                        rng,
                    ),
                }
            }
        })
    }

    pub fn kind(&self) -> Option<ResidualKind> {
        match self {
            Block::A { .. } => Some(ResidualKind::A),
            Block::B { .. } => Some(ResidualKind::B),
            Block::C { .. } => Some(ResidualKind::C),
            Block::D { .. } => Some(ResidualKind::D),
            Block::Plain(_) | Block::PlainAggregation(_) => None,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::A { first, second } => {
                let h = first.forward(g, ctx, x)?;
                let h = second.forward(g, ctx, h)?;
                residual_sum(g, x, h)
            }
            Block::B {
                shortcut,
                first,
                second,
            } => {
                let s = shortcut.forward(g, ctx, x)?;
                let h = first.forward(g, ctx, x)?;
                let h = second.forward(g, ctx, h)?;
                residual_sum(g, s, h)
            }
            Block::C { branch } => {
                let h = branch.forward(g, ctx, x)?;
                residual_sum(g, x, h)
            }
            Block::D { shortcut, branch } => {
                let s = shortcut.forward(g, ctx, x)?;
                let h = branch.forward(g, ctx, x)?;
                residual_sum(g, s, h)
            }
            Block::Plain(layers) => layers.iter().try_fold(x, |h, l| l.forward(g, ctx, h)),
            Block::PlainAggregation(branch) => branch.forward(g, ctx, x),
        }
    }
}

pub(crate) fn aggregation_branch<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    c_in: usize,
    channels: usize,
    query: QueryTransform,
    dropout_rate: f64,
    rng: &mut R,
) -> PreActAggregation {
    PreActAggregation {
        bn: BatchNormParams::new(store, &format!("{name}.bn"), c_in),
        agg: AggregationParams::new(store, &format!("{name}.agg"), c_in, channels, query, dropout_rate, rng),
    }
}

fn residual_sum<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape {
            op: "residual_sum",
            shape: g.shape(a).to_vec(),
            reason: format!("branch produced {:?}; the block is mis-assembled", g.shape(b)),
        });
    }
    g.add(a, b)
}

/// Applies a residual block of the given kind. Convenience wrapper over
/// [`Block::forward`].
pub fn residual_block<T: Scalar>(g: &mut Graph<T>, ctx: &mut ForwardCtx<'_, T>, x: Var, block: &Block) -> Result<Var> {
    block.forward(g, ctx, x)
}
