//! U-Net assembly: input block, residual down-sampling, a bottom block,
//! up-sampling with summation skips, and the output block.

pub mod blocks;
pub mod checkpoint;
pub mod config;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout, BatchNormParams, ConvParams, Mode};
use crate::params::{ForwardCtx, ParamStore, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use blocks::{residual_block, Block, PreActAggregation, PreActConv, ResidualKind};
pub use config::{make_ablation, BottomKind, ModelId, NetworkConfig, UpsampleKind};

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    input_conv: ConvParams,
    input_block: Block,
    downs: Vec<Block>,
    bottom: Block,
    /// Deepest first.
    ups: Vec<Block>,
    /// Applied after each skip summation, deepest first.
    merges: Vec<Block>,
    output_block: Block,
    output_bn: BatchNormParams,
    output_conv: ConvParams,
}

/// An instantiated network: configuration plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    store: ParamStore<T>,
    layout: Layout,
}

fn size_preserving<T: Scalar, R: Rng + ?Sized>(
    cfg: &NetworkConfig,
    store: &mut ParamStore<T>,
    name: &str,
    channels: usize,
    rng: &mut R,
) -> Result<Block> {
    if cfg.short_residuals {
        Block::residual(ResidualKind::A, store, name, channels, cfg.dropout_rate, rng)
    } else {
        Ok(Block::Plain(vec![
            PreActConv::new(store, &format!("{name}.first"), 3, channels, channels, 1, false, rng),
            PreActConv::new(store, &format!("{name}.second"), 3, channels, channels, 1, false, rng),
        ]))
    }
}

impl<T: Scalar> Network<T> {
    /// Instantiates `cfg`, drawing every initial weight from `rng`.
    pub fn build<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let mut store = ParamStore::new();
        let s = &mut store;

        let input_conv = ConvParams::new(s, "input.conv", 3, cfg.in_channels, widths[0], 1, false, rng);
        let input_block = size_preserving(cfg, s, "input.block", widths[0], rng)?;

        let mut downs = Vec::with_capacity(cfg.num_scales);
        for (i, &w) in widths[..cfg.num_scales].iter().enumerate() {
            let name = format!("down{}", i + 1);
            downs.push(if cfg.short_residuals {
                Block::residual(ResidualKind::B, s, &name, w, cfg.dropout_rate, rng)?
            } else {
                Block::Plain(vec![PreActConv::new(s, &name, 3, w, 2 * w, 2, false, rng)])
            });
        }

        let deepest = widths[cfg.num_scales];
        let bottom = match (cfg.bottom_kind, cfg.short_residuals) {
            (BottomKind::Conv, _) => {
                Block::Plain(vec![PreActConv::new(s, "bottom", 3, deepest, deepest, 1, false, rng)])
            }
            (BottomKind::Aggregation, true) => {
                Block::residual(ResidualKind::C, s, "bottom", deepest, cfg.dropout_rate, rng)?
            }
            (BottomKind::Aggregation, false) => Block::PlainAggregation(blocks::aggregation_branch(
                s,
                "bottom",
                deepest,
                deepest,
                crate::aggregation::QueryTransform::Conv1,
                cfg.dropout_rate,
                rng,
            )),
        };

        let mut ups = Vec::with_capacity(cfg.num_scales);
        let mut merges = Vec::with_capacity(cfg.num_scales);
        for stage in 0..cfg.num_scales {
            let w = widths[cfg.num_scales - stage];
            let name = format!("up{}", stage + 1);
            ups.push(if cfg.up_uses_aggregation(stage) {
                if cfg.short_residuals {
                    Block::residual(ResidualKind::D, s, &name, w, cfg.dropout_rate, rng)?
                } else {
                    Block::PlainAggregation(blocks::aggregation_branch(
                        s,
                        &name,
                        w,
                        w / 2,
                        crate::aggregation::QueryTransform::Deconv3S2,
                        cfg.dropout_rate,
                        rng,
                    ))
                }
            } else {
                Block::Plain(vec![PreActConv::new(s, &name, 3, w, w / 2, 2, true, rng)])
            });
            merges.push(size_preserving(cfg, s, &format!("merge{}", stage + 1), w / 2, rng)?);
        }

        let output_block = size_preserving(cfg, s, "output.block", widths[0], rng)?;
        let output_bn = BatchNormParams::new(s, "output.bn", widths[0]);
        let output_conv = ConvParams::new(s, "output.conv", 1, widths[0], cfg.num_classes, 1, false, rng);

        let mut net = Self {
            config: cfg.clone(),
            store,
            layout: Layout {
                input_conv,
                input_block,
                downs,
                bottom,
                ups,
                merges,
                output_block,
                output_bn,
                output_conv,
            },
        };
        net.set_bn_epsilon(cfg.bn_epsilon);
        net.check_skip_legality()?;
        Ok(net)
    }

    /// Builds from a seed rather than a caller-held stream.
    pub fn from_seed(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        Self::build(cfg, &mut SeededRng::seed_from_u64(seed))
    }

    fn set_bn_epsilon(&mut self, eps: f64) {
        fn visit_block(b: &mut Block, eps: f64) {
            match b {
                Block::A { first, second } => {
                    first.bn.epsilon = eps;
                    second.bn.epsilon = eps;
                }
                Block::B { first, second, .. } => {
                    first.bn.epsilon = eps;
                    second.bn.epsilon = eps;
                }
                Block::C { branch } | Block::D { branch, .. } | Block::PlainAggregation(branch) => {
                    branch.bn.epsilon = eps
                }
                Block::Plain(layers) => layers.iter_mut().for_each(|l| l.bn.epsilon = eps),
            }
        }
        let l = &mut self.layout;
        visit_block(&mut l.input_block, eps);
        l.downs.iter_mut().for_each(|b| visit_block(b, eps));
        visit_block(&mut l.bottom, eps);
        l.ups.iter_mut().for_each(|b| visit_block(b, eps));
        l.merges.iter_mut().for_each(|b| visit_block(b, eps));
        visit_block(&mut l.output_block, eps);
        l.output_bn.epsilon = eps;
    }

    /// Encoder and decoder channel plans must agree at every skip.
    fn check_skip_legality(&self) -> Result<()> {
        let widths = self.config.widths();
        for stage in 0..self.config.num_scales {
            let enc = widths[self.config.num_scales - stage - 1];
            let dec = widths[self.config.num_scales - stage] / 2;
            if enc != dec {
                return Err(Error::Config(format!(
                    "skip at stage {stage}: encoder width {enc} vs decoder width {dec}"
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Number of trainable scalars, batch-norm scale and shift included,
    /// running statistics excluded.
    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.size_multiple();
        if shape.len() != 5
            || shape[0] == 0
            || shape[4] != self.config.in_channels
            || shape[1..4].iter().any(|&e| e == 0 || e % m != 0)
        {
            return Err(Error::Shape {
                op: "network input",
                shape: shape.to_vec(),
                reason: format!(
                    "expected [B, D, H, W, {}] with D, H, W positive multiples of {m}",
                    self.config.in_channels
                ),
            });
        }
        Ok(())
    }

    /// Logits `[B, D, H, W, num_classes]` for input `[B, D, H, W, in_channels]`.
    pub fn forward(&self, g: &mut Graph<T>, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        ctx.attention_limit = self.config.attention_limit;
        let l = &self.layout;
        let h = l.input_conv.forward(g, ctx, x)?;
        let mut h = l.input_block.forward(g, ctx, h)?;
        let mut skips = Vec::with_capacity(l.downs.len());
        for down in &l.downs {
            skips.push(h);
            h = down.forward(g, ctx, h)?;
        }
        h = l.bottom.forward(g, ctx, h)?;
        for (up, merge) in l.ups.iter().zip(&l.merges) {
            h = up.forward(g, ctx, h)?;
            let skip = skips.pop().expect("one skip per scale");
            if g.shape(h) != g.shape(skip) {
                return Err(Error::Shape {
                    op: "skip_sum",
                    shape: g.shape(skip).to_vec(),
                    reason: format!("decoder produced {:?}", g.shape(h)),
                });
            }
            h = g.add(h, skip)?;
            h = merge.forward(g, ctx, h)?;
        }
        h = l.output_block.forward(g, ctx, h)?;
        h = crate::nn::bn_relu6(g, ctx, &l.output_bn, h)?;
        h = dropout(g, h, self.config.dropout_rate, ctx.mode, &mut *ctx.rng)?;
        l.output_conv.forward(g, ctx, h)
    }

    /// Eval-mode logits without recording gradients.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        use rand::SeedableRng;
        let mut g = Graph::no_grad();
        let bound = self.store.bind(&mut g);
        let xv = g.constant(x.clone());
        // Eval mode draws nothing; the stream only satisfies the signature.
        let mut rng = SeededRng::seed_from_u64(0);
        let mut ctx = ForwardCtx::new(Mode::Eval, &mut rng, &self.store, &bound);
        let y = self.forward(&mut g, &mut ctx, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }
}

/// Number of trainable scalars of a configuration (weights drawn from a
/// throwaway stream).
pub fn count_parameters_for(cfg: &NetworkConfig) -> Result<usize> {
    Ok(Network::<f32>::from_seed(cfg, 0)?.count_parameters())
}
