//! Sliding-window inference over a whole volume.

use rayon::prelude::*;

use crate::data::{argmax_labels, crop, sliding_positions, LabelVolume, PatchSpec, Stitcher, Volume};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

/// Windows predicted concurrently before being folded into the average.
const CHUNK: usize = 32;

/// Eval-mode prediction on every window of `spec`, averaged per voxel, then
/// arg-max. Windows run on the rayon pool but are accumulated in window
/// order, so the output does not depend on the thread count.
pub fn infer(net: &Network<f32>, volume: &Volume, spec: PatchSpec) -> Result<(Volume, LabelVolume)> {
    let cfg = net.config();
    if volume.channels != cfg.in_channels {
        return Err(Error::Dimension {
            op: "infer",
            lhs: volume.shape().to_vec(),
            rhs: vec![cfg.in_channels],
        });
    }
    let s = spec.patch_size;
    if s % cfg.size_multiple() != 0 {
        return Err(Error::Config(format!(
            "patch size {s} must be a multiple of {}",
            cfg.size_multiple()
        )));
    }
    let corners = sliding_positions(volume.dims, s, spec.overlap_step)?;
    let mut stitcher = Stitcher::new(volume.dims, cfg.num_classes);
    for chunk in corners.chunks(CHUNK) {
        let probs: Vec<Tensor<f32>> = chunk
            .par_iter()
            .map(|&c| {
                let x = Tensor::new(
                    [1, s, s, s, volume.channels],
                    crop(&volume.data, volume.dims, volume.channels, c, s),
                )?;
                net.predict(&x)?
                    .softmax_lastdim()?
                    .into_reshape([s, s, s, cfg.num_classes])
            })
            .collect::<Result<_>>()?;
        for (&c, p) in chunk.iter().zip(&probs) {
            stitcher.add(c, p)?;
        }
    }
    let probs = stitcher.finish()?;
    let labels = argmax_labels(&probs);
    Ok((probs, labels))
}
