//! Synthetic head-like phantoms.
//!
//! Labels come from a perturbed ellipsoid: background outside, then a CSF
//! rim, a GM band of varying thickness and a WM core. Each of the two
//! channels is a class mean plus a smooth bias field plus Gaussian noise.
//! The channels order the tissue means differently and GM/WM sit close in
//! both, which mimics the low-contrast multimodal setting.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use super::{voxel_count, LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::params::SeededRng;

pub const CLASS_NAMES: [&str; 4] = ["background", "csf", "gm", "wm"];

/// Noise-free class means, `[channel][class]`.
pub const CHANNEL_MEANS: [[f64; 4]; 2] = [[0.0, 0.25, 0.55, 0.70], [0.0, 0.95, 0.65, 0.45]];

/// Noise level used by the standard desk-scale experiments.
pub const DEFAULT_NOISE: f64 = 0.05;

const BIAS_AMPLITUDE: f64 = 0.05;
const MIN_EXTENT: usize = 8;
const MIN_CLASS_FRACTION: f64 = 0.01;

/// Shell boundaries on the perturbed normalized radius.
const OUTER: f64 = 0.92;
const CSF_INNER: f64 = 0.76;
const GM_INNER: f64 = 0.54;

/// A sum of plane waves with small integer frequencies over the unit cube.
struct Waves(Vec<([f64; 3], f64, f64)>);

impl Waves {
    fn random(rng: &mut SeededRng, count: usize, max_freq: i32, amplitude: f64) -> Self {
        let mut waves = Vec::with_capacity(count);
        let mut total = 0.0;
        for _ in 0..count {
            let k = [0; 3].map(|_: i32| rng.gen_range(-max_freq..=max_freq) as f64);
            let phase = rng.gen_range(0.0..TAU);
            let a = rng.gen_range(0.5..1.0);
            total += a;
            waves.push((k, phase, a));
        }
        for w in &mut waves {
            w.2 *= amplitude / total;
        }
        Waves(waves)
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        self.0
            .iter()
            .map(|(k, phase, a)| a * (TAU * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2]) + phase).cos())
            .sum()
    }
}

/// Deterministic phantom for `seed`. Only four classes are supported.
pub fn generate_phantom(
    seed: u64,
    dims: [usize; 3],
    num_classes: usize,
    noise_level: f64,
) -> Result<(Volume, LabelVolume)> {
    if num_classes != CLASS_NAMES.len() {
        return Err(Error::Config(format!(
            "phantoms have 4 classes, {num_classes} requested"
        )));
    }
    if dims.iter().any(|&d| d < MIN_EXTENT) {
        return Err(Error::Config(format!(
            "phantom extents must be at least {MIN_EXTENT}, got {dims:?}"
        )));
    }
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(Error::Config(format!(
            "noise level must be finite and non-negative, got {noise_level}"
        )));
    }
    let mut rng = SeededRng::seed_from_u64(seed);
    let centre = [0; 3].map(|_: u8| 0.5 + rng.gen_range(-0.03..0.03));
    let radius = [0; 3].map(|_: u8| rng.gen_range(0.44..0.48));
    let shape = Waves::random(&mut rng, 6, 2, 0.06);
    let folds = Waves::random(&mut rng, 8, 4, 0.07);
    let bias = [
        Waves::random(&mut rng, 4, 1, BIAS_AMPLITUDE),
        Waves::random(&mut rng, 4, 1, BIAS_AMPLITUDE),
    ];

    let n = voxel_count(dims);
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(2 * n);
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let p = [
                    (d as f64 + 0.5) / dims[0] as f64,
                    (h as f64 + 0.5) / dims[1] as f64,
                    (w as f64 + 0.5) / dims[2] as f64,
                ];
                let r = (0..3)
                    .map(|i| ((p[i] - centre[i]) / radius[i]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let r = r + shape.eval(p);
                let class = if r >= OUTER {
                    0
                } else if r >= CSF_INNER {
                    1
                } else if r + folds.eval(p) >= GM_INNER {
                    2
                } else {
                    3
                };
                labels.push(class as u8);
                for (ch, means) in CHANNEL_MEANS.iter().enumerate() {
                    let noise: f64 = rng.sample(StandardNormal);
                    data.push((means[class] + bias[ch].eval(p) + noise_level * noise) as f32);
                }
            }
        }
    }
    let labels = LabelVolume::new(dims, labels)?;
    let hist = labels.histogram(num_classes)?;
    if let Some(c) = hist.iter().position(|&k| (k as f64) < MIN_CLASS_FRACTION * n as f64) {
        return Err(Error::Config(format!(
            "class {} covers {} of {n} voxels at dims {dims:?}; phantom too coarse",
            CLASS_NAMES[c], hist[c]
        )));
    }
    Ok((Volume::new(dims, 2, data)?, labels))
}
