//! 3D convolution and transposed convolution over `[B, D, H, W, C]` tensors.
//!
//! Padding is "same": a kernel of extent `k` is padded by `(k-1)/2` on each
//! side, so stride 1 preserves extents, stride 2 halves them, and the stride-2
//! transposed convolution doubles them exactly. Weights are laid out as
//! `[k, k, k, C_in, C_out]`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::Tensor;

/// Static description of one convolution's geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub kernel: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

type Dims = [usize; 3];

fn voxels(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

fn spatial(x: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, Dims, usize)> {
    x.expect_rank(5, op)?;
    let s = x.shape();
    if s[1..4].iter().any(|&e| e == 0) {
        return Err(Error::Shape {
            op,
            shape: s.to_vec(),
            reason: "spatial extents must be at least 1".into(),
        });
    }
    Ok((s[0], [s[1], s[2], s[3]], s[4]))
}

fn check_weight<T: Scalar>(w: &Tensor<T>, b: &Tensor<T>, c_in: usize, op: &'static str) -> Result<ConvShape> {
    w.expect_rank(5, op)?;
    let ws = w.shape();
    let k = ws[0];
    if ws[1] != k || ws[2] != k || k % 2 == 0 {
        return Err(Error::Shape {
            op,
            shape: ws.to_vec(),
            reason: "kernel must be cubic with odd extent".into(),
        });
    }
    if ws[3] != c_in {
        return Err(Error::Dimension {
            op,
            lhs: vec![c_in],
            rhs: ws.to_vec(),
        });
    }
    if b.shape() != [ws[4]] {
        return Err(Error::Dimension {
            op,
            lhs: b.shape().to_vec(),
            rhs: vec![ws[4]],
        });
    }
    Ok(ConvShape {
        kernel: k,
        stride: 1,
        c_in,
        c_out: ws[4],
    })
}

/// Range of `kw` whose input column `s·o + kw − pad` lies in `0..extent`.
#[inline]
fn valid_taps(o: usize, s: usize, k: usize, pad: usize, extent: usize) -> (usize, usize) {
    let base = s * o;
    let lo = pad.saturating_sub(base).min(k);
    let hi = (extent + pad).saturating_sub(base).min(k).max(lo);
    (lo, hi)
}

/// Gathers, for each voxel of the `small` grid, the `k³` taps of the `big`
/// grid it touches (`big = stride·small + tap − pad`); rows are small voxels,
/// columns `(tap, channel)`. Out-of-range taps read zero.
fn im2col<T: Scalar>(big: &[T], bd: Dims, c: usize, sd: Dims, k: usize, s: usize, cols: &mut [T]) {
    let pad = (k - 1) / 2;
    let kc = k * k * k * c;
    let run = k * c;
    debug_assert_eq!(cols.len(), voxels(sd) * kc);
    let mut rows = cols.chunks_exact_mut(kc);
    for od in 0..sd[0] {
        for oh in 0..sd[1] {
            for ow in 0..sd[2] {
                let dst_row = rows.next().expect("one row per output voxel");
                let (lo, hi) = valid_taps(ow, s, k, pad, bd[2]);
                for kd in 0..k {
                    let id = (s * od + kd).wrapping_sub(pad);
                    for kh in 0..k {
                        let ih = (s * oh + kh).wrapping_sub(pad);
                        let dst = &mut dst_row[(kd * k + kh) * run..(kd * k + kh + 1) * run];
                        if id >= bd[0] || ih >= bd[1] || lo == hi {
                            dst.fill(T::zero());
                            continue;
                        }
                        let iw0 = s * ow + lo - pad;
                        let src = ((id * bd[1] + ih) * bd[2] + iw0) * c;
                        dst[..lo * c].fill(T::zero());
                        dst[lo * c..hi * c].copy_from_slice(&big[src..src + (hi - lo) * c]);
                        dst[hi * c..].fill(T::zero());
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the big grid.
fn col2im<T: Scalar>(cols: &[T], bd: Dims, c: usize, sd: Dims, k: usize, s: usize, big: &mut [T]) {
    let pad = (k - 1) / 2;
    let kc = k * k * k * c;
    let run = k * c;
    let mut rows = cols.chunks_exact(kc);
    for od in 0..sd[0] {
        for oh in 0..sd[1] {
            for ow in 0..sd[2] {
                let src_row = rows.next().expect("one row per output voxel");
                let (lo, hi) = valid_taps(ow, s, k, pad, bd[2]);
                if lo == hi {
                    continue;
                }
                for kd in 0..k {
                    let id = (s * od + kd).wrapping_sub(pad);
                    for kh in 0..k {
                        let ih = (s * oh + kh).wrapping_sub(pad);
                        if id >= bd[0] || ih >= bd[1] {
                            continue;
                        }
                        let iw0 = s * ow + lo - pad;
                        let dst = ((id * bd[1] + ih) * bd[2] + iw0) * c;
                        let src = &src_row[(kd * k + kh) * run + lo * c..(kd * k + kh) * run + hi * c];
                        for (d, &v) in big[dst..dst + src.len()].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T]) {
    for row in y.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(dy: &[T], c: usize) -> Tensor<T> {
    let mut g = vec![T::zero(); c];
    for row in dy.chunks(c) {
        for (a, &v) in g.iter_mut().zip(row) {
            *a += v;
        }
    }
    Tensor::new([c], g).expect("bias gradient length")
}

/// Output extents of a forward (non-transposed) convolution.
pub fn conv_output_dims(input: [usize; 3], stride: usize) -> Result<[usize; 3]> {
    if stride == 0 {
        return Err(Error::Config("convolution stride must be positive".into()));
    }
    if stride > 1 && input.iter().any(|&e| e % stride != 0) {
        return Err(Error::Shape {
            op: "conv3d",
            shape: input.to_vec(),
            reason: format!("stride {stride} needs extents divisible by {stride}"),
        });
    }
    Ok(input.map(|e| e / stride))
}

/// Forward convolution with "same" zero padding.
pub fn conv3d<T: Scalar>(g: &mut Graph<T>, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
    let xv = g.value(x);
    let (batch, bd, c_in) = spatial(xv, "conv3d")?;
    let mut cs = check_weight(g.value(weight), g.value(bias), c_in, "conv3d")?;
    cs.stride = stride;
    let sd = conv_output_dims(bd, stride)?;
    let (k, c_out) = (cs.kernel, cs.c_out);
    let kc = k * k * k * c_in;
    let (nin, nout) = (voxels(bd), voxels(sd));
    let direct = k == 1 && stride == 1;

    let w = g.value(weight).data();
    let mut y = vec![T::zero(); batch * nout * c_out];
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); nout * kc] };
    for b in 0..batch {
        let xb = &xv.data()[b * nin * c_in..(b + 1) * nin * c_in];
        let lhs: &[T] = if direct {
            xb
        } else {
            im2col(xb, bd, c_in, sd, k, stride, &mut cols);
            &cols
        };
        gemm(
            nout,
            kc,
            c_out,
            T::one(),
            lhs,
            Trans::No,
            w,
            Trans::No,
            T::zero(),
            &mut y[b * nout * c_out..(b + 1) * nout * c_out],
        );
    }
    add_bias(&mut y, g.value(bias).data());
    let out = Tensor::new([batch, sd[0], sd[1], sd[2], c_out], y)?;

    g.push(
        "conv3d",
        vec![x, weight, bias],
        out,
        Box::new(move |args| {
            let (xv, wv) = (args.inputs[0], args.inputs[1]);
            let dy = args.grad.data();
            let mut dx = args.needs[0].then(|| vec![T::zero(); xv.len()]);
            let mut dw = args.needs[1].then(|| vec![T::zero(); wv.len()]);
            let mut cols = vec![T::zero(); if direct { 0 } else { nout * kc }];
            for b in 0..batch {
                let xb = &xv.data()[b * nin * c_in..(b + 1) * nin * c_in];
                let dyb = &dy[b * nout * c_out..(b + 1) * nout * c_out];
                if let Some(dw) = dw.as_mut() {
                    let lhs: &[T] = if direct {
                        xb
                    } else {
                        im2col(xb, bd, c_in, sd, k, stride, &mut cols);
                        &cols
                    };
                    gemm(kc, nout, c_out, T::one(), lhs, Trans::Yes, dyb, Trans::No, T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[b * nin * c_in..(b + 1) * nin * c_in];
                    if direct {
                        gemm(
                            nout,
                            c_out,
                            kc,
                            T::one(),
                            dyb,
                            Trans::No,
                            wv.data(),
                            Trans::Yes,
                            T::zero(),
                            dxb,
                        );
                    } else {
                        gemm(
                            nout,
                            c_out,
                            kc,
                            T::one(),
                            dyb,
                            Trans::No,
                            wv.data(),
                            Trans::Yes,
                            T::zero(),
                            &mut cols,
                        );
                        col2im(&cols, bd, c_in, sd, k, stride, dxb);
                    }
                }
            }
            let db = args.needs[2].then(|| bias_grad(dy, c_out));
            Ok(vec![
                dx.map(|d| Tensor::new(xv.shape().to_vec(), d)).transpose()?,
                dw.map(|d| Tensor::new(wv.shape().to_vec(), d)).transpose()?,
                db,
            ])
        }),
    )
}

/// `[k³, C_in, C_out]` → `[C_in, k³·C_out]`.
fn permute_taps<T: Scalar>(w: &[T], taps: usize, c_in: usize, c_out: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for t in 0..taps {
        for ci in 0..c_in {
            let src = (t * c_in + ci) * c_out;
            let dst = ci * taps * c_out + t * c_out;
            out[dst..dst + c_out].copy_from_slice(&w[src..src + c_out]);
        }
    }
    out
}

fn unpermute_taps<T: Scalar>(w: &[T], taps: usize, c_in: usize, c_out: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for t in 0..taps {
        for ci in 0..c_in {
            let dst = (t * c_in + ci) * c_out;
            let src = ci * taps * c_out + t * c_out;
            out[dst..dst + c_out].copy_from_slice(&w[src..src + c_out]);
        }
    }
    out
}

/// Transposed convolution: the adjoint of [`conv3d`] with the same stride,
/// reading the weight as `[k, k, k, C_in, C_out]` from this op's point of
/// view. Output extents are exactly `stride ×` the input extents.
pub fn conv_transpose3d<T: Scalar>(g: &mut Graph<T>, x: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
    if stride == 0 {
        return Err(Error::Config("convolution stride must be positive".into()));
    }
    let xv = g.value(x);
    let (batch, sd, c_in) = spatial(xv, "conv_transpose3d")?;
    let cs = check_weight(g.value(weight), g.value(bias), c_in, "conv_transpose3d")?;
    let (k, c_out) = (cs.kernel, cs.c_out);
    let taps = k * k * k;
    let kc_out = taps * c_out;
    let bd = sd.map(|e| e * stride);
    let (nsmall, nbig) = (voxels(sd), voxels(bd));

    let wperm = permute_taps(g.value(weight).data(), taps, c_in, c_out);
    let mut y = vec![T::zero(); batch * nbig * c_out];
    let mut cols = vec![T::zero(); nsmall * kc_out];
    for b in 0..batch {
        let xb = &xv.data()[b * nsmall * c_in..(b + 1) * nsmall * c_in];
        gemm(
            nsmall,
            c_in,
            kc_out,
            T::one(),
            xb,
            Trans::No,
            &wperm,
            Trans::No,
            T::zero(),
            &mut cols,
        );
        col2im(
            &cols,
            bd,
            c_out,
            sd,
            k,
            stride,
            &mut y[b * nbig * c_out..(b + 1) * nbig * c_out],
        );
    }
    add_bias(&mut y, g.value(bias).data());
    let out = Tensor::new([batch, bd[0], bd[1], bd[2], c_out], y)?;

    g.push(
        "conv_transpose3d",
        vec![x, weight, bias],
        out,
        Box::new(move |args| {
            let (xv, wv) = (args.inputs[0], args.inputs[1]);
            let dy = args.grad.data();
            let wperm = permute_taps(wv.data(), taps, c_in, c_out);
            let mut dx = args.needs[0].then(|| vec![T::zero(); xv.len()]);
            let mut dwp = args.needs[1].then(|| vec![T::zero(); wv.len()]);
            let mut cols = vec![T::zero(); nsmall * kc_out];
            if dx.is_some() || dwp.is_some() {
                for b in 0..batch {
                    let dyb = &dy[b * nbig * c_out..(b + 1) * nbig * c_out];
                    im2col(dyb, bd, c_out, sd, k, stride, &mut cols);
                    if let Some(dx) = dx.as_mut() {
                        let dxb = &mut dx[b * nsmall * c_in..(b + 1) * nsmall * c_in];
                        gemm(
                            nsmall,
                            kc_out,
                            c_in,
                            T::one(),
                            &cols,
                            Trans::No,
                            &wperm,
                            Trans::Yes,
                            T::zero(),
                            dxb,
                        );
                    }
                    if let Some(dwp) = dwp.as_mut() {
                        let xb = &xv.data()[b * nsmall * c_in..(b + 1) * nsmall * c_in];
                        gemm(
                            c_in,
                            nsmall,
                            kc_out,
                            T::one(),
                            xb,
                            Trans::Yes,
                            &cols,
                            Trans::No,
                            T::one(),
                            dwp,
                        );
                    }
                }
            }
            let db = args.needs[2].then(|| bias_grad(dy, c_out));
            Ok(vec![
                dx.map(|d| Tensor::new(xv.shape().to_vec(), d)).transpose()?,
                dwp.map(|d| Tensor::new(wv.shape().to_vec(), unpermute_taps(&d, taps, c_in, c_out)))
                    .transpose()?,
                db,
            ])
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_conv(x: Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>, stride: usize) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let (x, w, b) = (g.constant(x), g.constant(w), g.constant(b));
        let y = conv3d(&mut g, x, w, b, stride)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let x = Tensor::from_fn([1, 2, 3, 4, 1], |i| i as f64 * 0.25);
        let y = run_conv(x.clone(), Tensor::ones([1, 1, 1, 1, 1]), Tensor::zeros([1]), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let c = 1.5;
        let x = Tensor::full([1, 4, 4, 4, 1], c);
        let y = run_conv(x, Tensor::ones([3, 3, 3, 1, 1]), Tensor::zeros([1]), 1).unwrap();
        let at = |d: usize, h: usize, w: usize| y.data()[(d * 4 + h) * 4 + w];
        assert_eq!(at(1, 1, 1), 27.0 * c);
        assert_eq!(at(2, 2, 1), 27.0 * c);
        assert_eq!(at(0, 0, 0), 8.0 * c);
        assert_eq!(at(3, 3, 3), 8.0 * c);
        assert_eq!(at(0, 1, 2), 18.0 * c);
    }

    #[test]
    fn stride_two_halves_and_rejects_odd() {
        let y = run_conv(
            Tensor::ones([2, 4, 6, 8, 3]),
            Tensor::ones([3, 3, 3, 3, 5]),
            Tensor::zeros([5]),
            2,
        )
        .unwrap();
        assert_eq!(y.shape(), &[2, 2, 3, 4, 5]);
        let err = run_conv(
            Tensor::ones([1, 3, 4, 4, 1]),
            Tensor::ones([3, 3, 3, 1, 1]),
            Tensor::zeros([1]),
            2,
        );
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let err = run_conv(
            Tensor::ones([1, 2, 2, 2, 3]),
            Tensor::ones([3, 3, 3, 2, 1]),
            Tensor::zeros([1]),
            1,
        );
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn transposed_zero_input_gives_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 2, 2, 2, 3]));
        let w = g.constant(Tensor::ones([3, 3, 3, 3, 2]));
        let b = g.constant(Tensor::new([2], vec![0.5, -1.0]).unwrap());
        let y = conv_transpose3d(&mut g, x, w, b, 2).unwrap();
        let y = g.value(y);
        assert_eq!(y.shape(), &[1, 4, 4, 4, 2]);
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.5, -1.0]);
        }
    }

    #[test]
    fn tap_permutation_round_trips() {
        let w: Vec<f64> = (0..27 * 2 * 3).map(|i| i as f64).collect();
        assert_eq!(unpermute_taps(&permute_taps(&w, 27, 2, 3), 27, 2, 3), w);
    }
}
