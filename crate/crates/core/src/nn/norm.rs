//! Per-channel batch normalization over channel-last tensors.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Batch statistics observed by a train-mode call.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    pub count: usize,
}

fn channels<T: Scalar>(g: &Graph<T>, x: Var, gamma: Var, beta: Var) -> Result<usize> {
    let shape = g.shape(x);
    let c = *shape.last().ok_or_else(|| Error::Shape {
        op: "batch_norm",
        shape: vec![],
        reason: "needs a channel axis".into(),
    })?;
    for p in [gamma, beta] {
        if g.shape(p) != [c] {
            return Err(Error::Dimension {
                op: "batch_norm",
                lhs: shape.to_vec(),
                rhs: g.shape(p).to_vec(),
            });
        }
    }
    Ok(c)
}

/// Normalizes with the statistics of `x` itself and returns them alongside.
pub fn batch_norm_train<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, BatchStats<T>)> {
    let c = channels(g, x, gamma, beta)?;
    let xv = g.value(x);
    let n = xv.len() / c;
    if n < 2 {
        return Err(Error::Shape {
            op: "batch_norm",
            shape: xv.shape().to_vec(),
            reason: "train mode needs at least two values per channel".into(),
        });
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut mean = vec![T::zero(); c];
    for row in xv.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_n);
    let mut var = vec![T::zero(); c];
    for row in xv.data().chunks(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s *= inv_n);
    let eps_t = T::from_f64_lossy(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();

    let (gm, bt) = (g.value(gamma).data(), g.value(beta).data());
    let mut xhat = xv.data().to_vec();
    let mut y = vec![T::zero(); xhat.len()];
    for (xr, yr) in xhat.chunks_mut(c).zip(y.chunks_mut(c)) {
        for j in 0..c {
            xr[j] = (xr[j] - mean[j]) * inv_std[j];
            yr[j] = gm[j] * xr[j] + bt[j];
        }
    }
    let out = Tensor::new(xv.shape().to_vec(), y)?;
    let stats = BatchStats { mean, var, count: n };

    let v = g.push(
        "batch_norm",
        vec![x, gamma, beta],
        out,
        Box::new(move |args| {
            let gm = args.inputs[1].data();
            let dy = args.grad.data();
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for (dr, xr) in dy.chunks(c).zip(xhat.chunks(c)) {
                for j in 0..c {
                    sum_dy[j] += dr[j];
                    sum_dy_xhat[j] += dr[j] * xr[j];
                }
            }
            let dx = args.needs[0].then(|| {
                let nn = T::from_usize(n).unwrap();
                let mut dx = vec![T::zero(); dy.len()];
                for ((out, dr), xr) in dx.chunks_mut(c).zip(dy.chunks(c)).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        let k = gm[j] * inv_std[j] * inv_n;
                        out[j] = k * (nn * dr[j] - sum_dy[j] - xr[j] * sum_dy_xhat[j]);
                    }
                }
                Tensor::new(args.inputs[0].shape().to_vec(), dx)
            });
            Ok(vec![
                dx.transpose()?,
                Some(Tensor::new([c], sum_dy_xhat)?),
                Some(Tensor::new([c], sum_dy)?),
            ])
        }),
    )?;
    Ok((v, stats))
}

/// Normalizes with fixed (running) statistics; an affine map of `x`.
pub fn batch_norm_eval<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Var> {
    let c = channels(g, x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::Dimension {
            op: "batch_norm",
            lhs: vec![c],
            rhs: vec![running_mean.len(), running_var.len()],
        });
    }
    let eps_t = T::from_f64_lossy(eps);
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mean = running_mean.to_vec();
    let xv = g.value(x);
    let (gm, bt) = (g.value(gamma).data(), g.value(beta).data());
    let mut y = xv.data().to_vec();
    for row in y.chunks_mut(c) {
        for j in 0..c {
            row[j] = gm[j] * (row[j] - mean[j]) * inv_std[j] + bt[j];
        }
    }
    let out = Tensor::new(xv.shape().to_vec(), y)?;
    g.push(
        "batch_norm_eval",
        vec![x, gamma, beta],
        out,
        Box::new(move |args| {
            let (xv, gm) = (args.inputs[0].data(), args.inputs[1].data());
            let dy = args.grad.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = vec![T::zero(); dy.len()];
            for ((dr, xr), out) in dy.chunks(c).zip(xv.chunks(c)).zip(dx.chunks_mut(c)) {
                for j in 0..c {
                    let xh = (xr[j] - mean[j]) * inv_std[j];
                    dgamma[j] += dr[j] * xh;
                    dbeta[j] += dr[j];
                    out[j] = dr[j] * gm[j] * inv_std[j];
                }
            }
            Ok(vec![
                Some(Tensor::new(args.inputs[0].shape().to_vec(), dx)?),
                Some(Tensor::new([c], dgamma)?),
                Some(Tensor::new([c], dbeta)?),
            ])
        }),
    )
}

/// Folds one batch's statistics into running estimates. The running variance
/// uses the unbiased estimate.
pub fn update_running<T: Scalar>(running_mean: &mut [T], running_var: &mut [T], stats: &BatchStats<T>, momentum: f64) {
    let m = T::from_f64_lossy(momentum);
    let one_m = T::one() - m;
    let n = stats.count as f64;
    let unbias = T::from_f64_lossy(n / (n - 1.0).max(1.0));
    for j in 0..running_mean.len() {
        running_mean[j] = m * running_mean[j] + one_m * stats.mean[j];
        running_var[j] = m * running_var[j] + one_m * stats.var[j] * unbias;
    }
}
