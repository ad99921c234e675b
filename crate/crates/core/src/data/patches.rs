//! Random training crops and the sliding-window tiling used at inference.

use rand::Rng;

use super::{voxel_count, LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cubic window size `s` and step `t`, `1 <= t <= s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub overlap_step: usize,
}

impl PatchSpec {
    pub fn new(patch_size: usize, overlap_step: usize) -> Result<Self> {
        if overlap_step == 0 || overlap_step > patch_size {
            return Err(Error::Config(format!(
                "overlap step {overlap_step} must lie in 1..={patch_size} (the patch size)"
            )));
        }
        Ok(Self {
            patch_size,
            overlap_step,
        })
    }
}

/// Window corners along one axis: `0, t, 2t, ...` up to `dim - s`, with
/// `dim - s` appended when the stride does not land on it.
pub fn axis_offsets(dim: usize, s: usize, t: usize) -> Result<Vec<usize>> {
    if s == 0 || t == 0 || t > s || s > dim {
        return Err(Error::Config(format!(
            "sliding window needs 1 <= step <= size <= extent, got step {t}, size {s}, extent {dim}"
        )));
    }
    let last = dim - s;
    let mut v: Vec<usize> = (0..=last).step_by(t).collect();
    if v.last() != Some(&last) {
        v.push(last);
    }
    Ok(v)
}

/// Every window corner, `D` offset slowest.
pub fn sliding_positions(dims: [usize; 3], s: usize, t: usize) -> Result<Vec<[usize; 3]>> {
    let [a, b, c] = [0, 1, 2].map(|i| axis_offsets(dims[i], s, t));
    let (a, b, c) = (a?, b?, c?);
    let mut out = Vec::with_capacity(a.len() * b.len() * c.len());
    for &d in &a {
        for &h in &b {
            for &w in &c {
                out.push([d, h, w]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub corner: [usize; 3],
    /// `[s, s, s, C]`.
    pub image: Vec<f32>,
    /// `[s, s, s]`.
    pub labels: Vec<u8>,
}

/// Copies the `s`-cube at `corner` out of a `[D, H, W, C]` buffer.
pub(crate) fn crop<V: Copy>(data: &[V], dims: [usize; 3], channels: usize, corner: [usize; 3], s: usize) -> Vec<V> {
    let mut out = Vec::with_capacity(s * s * s * channels);
    let row = s * channels;
    for d in corner[0]..corner[0] + s {
        for h in corner[1]..corner[1] + s {
            let start = ((d * dims[1] + h) * dims[2] + corner[2]) * channels;
            out.extend_from_slice(&data[start..start + row]);
        }
    }
    out
}

/// `n` crops at uniformly random corners.
pub fn sample_patches<R: Rng + ?Sized>(
    vol: &Volume,
    labels: &LabelVolume,
    n: usize,
    s: usize,
    rng: &mut R,
) -> Result<Vec<PatchSample>> {
    if vol.dims != labels.dims {
        return Err(Error::Dimension {
            op: "sample_patches",
            lhs: vol.dims.to_vec(),
            rhs: labels.dims.to_vec(),
        });
    }
    if s == 0 || vol.dims.iter().any(|&d| s > d) {
        return Err(Error::Config(format!(
            "patch size {s} does not fit volume {:?}",
            vol.dims
        )));
    }
    Ok((0..n)
        .map(|_| {
            let corner = vol.dims.map(|d| rng.gen_range(0..=d - s));
            PatchSample {
                corner,
                image: crop(&vol.data, vol.dims, vol.channels, corner, s),
                labels: crop(&labels.labels, labels.dims, 1, corner, s),
            }
        })
        .collect())
}

/// Stacks equally sized samples into `[B, s, s, s, C]` and flat labels.
pub fn batch_tensor(samples: &[PatchSample], s: usize, channels: usize) -> Result<(Tensor<f32>, Vec<u8>)> {
    let mut data = Vec::with_capacity(samples.len() * s * s * s * channels);
    let mut labels = Vec::with_capacity(samples.len() * s * s * s);
    for p in samples {
        data.extend_from_slice(&p.image);
        labels.extend_from_slice(&p.labels);
    }
    Ok((Tensor::new([samples.len(), s, s, s, channels], data)?, labels))
}

/// Accumulates per-window class probabilities and averages them per voxel.
#[derive(Debug, Clone)]
pub struct Stitcher {
    dims: [usize; 3],
    classes: usize,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl Stitcher {
    pub fn new(dims: [usize; 3], classes: usize) -> Self {
        let n = voxel_count(dims);
        Self {
            dims,
            classes,
            sum: vec![0.0; n * classes],
            count: vec![0; n],
        }
    }

    /// Adds one `[s, s, s, K]` probability window at `corner`.
    pub fn add(&mut self, corner: [usize; 3], probs: &Tensor<f32>) -> Result<()> {
        let sh = probs.shape();
        let k = self.classes;
        let fits = sh.len() == 4 && sh[3] == k && (0..3).all(|i| sh[i] > 0 && corner[i] + sh[i] <= self.dims[i]);
        if !fits {
            return Err(Error::Shape {
                op: "stitch",
                shape: sh.to_vec(),
                reason: format!("window at {corner:?} does not fit {:?} with {k} classes", self.dims),
            });
        }
        let p = probs.data();
        let mut src = 0;
        for d in corner[0]..corner[0] + sh[0] {
            for h in corner[1]..corner[1] + sh[1] {
                let base = (d * self.dims[1] + h) * self.dims[2] + corner[2];
                for v in base..base + sh[2] {
                    self.count[v] += 1;
                    for (acc, &x) in self.sum[v * k..(v + 1) * k].iter_mut().zip(&p[src..src + k]) {
                        *acc += x as f64;
                    }
                    src += k;
                }
            }
        }
        Ok(())
    }

    /// Number of windows that touched each voxel.
    pub fn coverage(&self) -> &[u32] {
        &self.count
    }

    /// Mean probability per voxel as a `K`-channel volume.
    pub fn finish(self) -> Result<Volume> {
        let k = self.classes;
        if let Some(v) = self.count.iter().position(|&c| c == 0) {
            return Err(Error::Contract(format!("voxel {v} was not covered by any window")));
        }
        let data = self
            .sum
            .chunks_exact(k)
            .zip(&self.count)
            .flat_map(|(row, &c)| row.iter().map(move |&s| (s / c as f64) as f32))
            .collect();
        Volume::new(self.dims, k, data)
    }
}

/// Averages windows `prob_patches[i]` placed at `corners[i]`.
pub fn stitch(
    prob_patches: &[Tensor<f32>],
    corners: &[[usize; 3]],
    dims: [usize; 3],
    classes: usize,
) -> Result<Volume> {
    if prob_patches.len() != corners.len() {
        return Err(Error::Contract(format!(
            "{} windows but {} corners",
            prob_patches.len(),
            corners.len()
        )));
    }
    let mut st = Stitcher::new(dims, classes);
    for (p, &c) in prob_patches.iter().zip(corners) {
        st.add(c, p)?;
    }
    st.finish()
}

/// Per-voxel arg-max over channels; ties go to the lowest class index.
pub fn argmax_labels(probs: &Volume) -> LabelVolume {
    let labels = probs
        .data
        .chunks_exact(probs.channels)
        .map(|row| {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume {
        dims: probs.dims,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::SeededRng;
    use rand::SeedableRng;

    #[test]
    fn offsets_examples() {
        assert_eq!(axis_offsets(64, 32, 8).unwrap(), vec![0, 8, 16, 24, 32]);
        assert_eq!(axis_offsets(33, 32, 8).unwrap(), vec![0, 1]);
        assert_eq!(axis_offsets(32, 32, 8).unwrap(), vec![0]);
        assert_eq!(sliding_positions([64; 3], 32, 8).unwrap().len(), 125);
        assert!(axis_offsets(16, 32, 8).is_err());
        assert!(axis_offsets(64, 8, 16).is_err());
    }

    #[test]
    fn whole_volume_patch() {
        let vol = Volume::new([4, 4, 4], 1, (0..64).map(|i| i as f32).collect()).unwrap();
        let lab = LabelVolume::new([4, 4, 4], (0..64).map(|i| (i % 4) as u8).collect()).unwrap();
        let mut rng = SeededRng::seed_from_u64(0);
        let p = sample_patches(&vol, &lab, 3, 4, &mut rng).unwrap();
        assert!(p
            .iter()
            .all(|p| p.corner == [0, 0, 0] && p.image == vol.data && p.labels == lab.labels));
        assert!(sample_patches(&vol, &lab, 1, 5, &mut rng).is_err());
    }

    #[test]
    fn crop_aligns_image_and_labels() {
        let vol = Volume::new([5, 6, 7], 2, (0..420).map(|i| i as f32).collect()).unwrap();
        let lab = LabelVolume::new([5, 6, 7], (0..210).map(|i| (i % 200) as u8).collect()).unwrap();
        let mut rng = SeededRng::seed_from_u64(1);
        for p in sample_patches(&vol, &lab, 20, 3, &mut rng).unwrap() {
            for (j, &l) in p.labels.iter().enumerate() {
                assert_eq!(p.image[2 * j] as usize, 2 * voxel_of(p.corner, j));
                assert_eq!(l, (voxel_of(p.corner, j) % 200) as u8);
            }
        }
        fn voxel_of(c: [usize; 3], j: usize) -> usize {
            let (d, h, w) = (j / 9, (j / 3) % 3, j % 3);
            ((c[0] + d) * 6 + c[1] + h) * 7 + c[2] + w
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        let v = Volume::new([1, 1, 2], 4, vec![0.5, 0.5, 0.0, 0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(argmax_labels(&v).labels, vec![0, 3]);
    }

    #[test]
    fn uncovered_voxel_is_reported() {
        let st = Stitcher::new([2, 2, 2], 2);
        assert!(st.finish().is_err());
    }
}
