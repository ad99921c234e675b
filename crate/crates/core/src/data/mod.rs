//! Volumes, synthetic phantoms, patch extraction, sliding-window stitching
//! and volume files.

mod io;
mod patches;
mod phantom;

pub use io::{read_labels, read_volume, write_labels, write_volume};
pub(crate) use patches::crop;
pub use patches::{
    argmax_labels, axis_offsets, batch_tensor, sample_patches, sliding_positions, stitch, PatchSample, PatchSpec,
    Stitcher,
};
pub use phantom::{generate_phantom, CHANNEL_MEANS, CLASS_NAMES, DEFAULT_NOISE};

use crate::error::{Error, Result};

/// Per-channel z-score parameters applied to a volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: f32,
    pub std: f32,
}

/// A multi-channel volume, stored `[D, H, W, C]` with the channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<f32>,
    /// Present once [`Volume::normalize`] has run.
    pub stats: Option<Vec<ChannelStats>>,
}

/// Per-voxel class labels, stored `[D, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub labels: Vec<u8>,
}

pub fn voxel_count(dims: [usize; 3]) -> usize {
    dims.iter().product()
}

impl Volume {
    pub fn new(dims: [usize; 3], channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || data.len() != voxel_count(dims) * channels {
            return Err(Error::Shape {
                op: "volume",
                shape: vec![dims[0], dims[1], dims[2], channels],
                reason: format!("{} values supplied", data.len()),
            });
        }
        Ok(Self {
            dims,
            channels,
            data,
            stats: None,
        })
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.dims[0], self.dims[1], self.dims[2], self.channels]
    }

    /// Per-channel z-score over the whole volume. Statistics accumulate in
    /// `f64`; a constant channel is only centred.
    pub fn normalize(&mut self) {
        let c = self.channels;
        let n = self.voxels() as f64;
        let mut stats = Vec::with_capacity(c);
        for ch in 0..c {
            let mean = self.data.iter().skip(ch).step_by(c).map(|&v| v as f64).sum::<f64>() / n;
            let var = self
                .data
                .iter()
                .skip(ch)
                .step_by(c)
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            for v in self.data.iter_mut().skip(ch).step_by(c) {
                *v = ((*v as f64 - mean) / std) as f32;
            }
            stats.push(ChannelStats {
                mean: mean as f32,
                std: std as f32,
            });
        }
        self.stats = Some(stats);
    }
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if labels.len() != voxel_count(dims) {
            return Err(Error::Shape {
                op: "label volume",
                shape: dims.to_vec(),
                reason: format!("{} labels supplied", labels.len()),
            });
        }
        Ok(Self { dims, labels })
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    /// Voxel count per class id `0..num_classes`; labels outside are an error.
    pub fn histogram(&self, num_classes: usize) -> Result<Vec<usize>> {
        let mut h = vec![0; num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            *h.get_mut(l as usize)
                .ok_or_else(|| Error::Data(format!("label {l} at voxel {i} exceeds {} classes", num_classes)))? += 1;
        }
        Ok(h)
    }
}
