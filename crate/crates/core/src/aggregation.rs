//! Global aggregation: self-attention over every voxel of a feature map,
//! with the output resolution set by the query transform.
//!
//! For an input `X` of size `D×H×W×C`:
//!
//! ```text
//! Q = Unfold(QueryTransform(X))     (N_Q × C_K)
//! K = Unfold(Conv1(X))              (N   × C_K)
//! V = Unfold(Conv1(X))              (N   × C_V)
//! A = Softmax(Q Kᵀ / √C_K)          (N_Q × N), dropout on A in training
//! Y = Conv1(Fold(A V))              (D_Q × H_Q × W_Q × C_O)
//! ```
//!
//! Attention is computed independently for each batch item.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::activation::keep_mask;
use crate::nn::{ConvParams, Mode};
use crate::params::{ForwardCtx, ParamStore};
use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::{softmax_in_place, Tensor};

/// How queries are produced from the block input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryTransform {
    /// 1×1×1 convolution, stride 1: output keeps the input size.
    Conv1,
    /// 3×3×3 transposed convolution, stride 2: output doubles each extent.
    Deconv3S2,
    /// 3×3×3 convolution, stride 2: output halves each extent.
    Conv3S2,
}

impl QueryTransform {
    pub fn output_dims(self, dims: [usize; 3]) -> [usize; 3] {
        match self {
            QueryTransform::Conv1 => dims,
            QueryTransform::Deconv3S2 => dims.map(|e| e * 2),
            QueryTransform::Conv3S2 => dims.map(|e| e / 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationParams {
    pub query_transform: QueryTransform,
    pub query: ConvParams,
    pub key: ConvParams,
    pub value: ConvParams,
    pub out: ConvParams,
    pub c_k: usize,
    pub c_v: usize,
    pub c_o: usize,
    pub attn_dropout_rate: f64,
}

impl AggregationParams {
    /// A block with `C_K = C_V = C_O = channels`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        channels: usize,
        query_transform: QueryTransform,
        attn_dropout_rate: f64,
        rng: &mut R,
    ) -> Self {
        let query = match query_transform {
            QueryTransform::Conv1 => ConvParams::new(store, &format!("{name}.query"), 1, c_in, channels, 1, false, rng),
            QueryTransform::Deconv3S2 => {
                ConvParams::new(store, &format!("{name}.query"), 3, c_in, channels, 2, true, rng)
            }
            QueryTransform::Conv3S2 => {
                ConvParams::new(store, &format!("{name}.query"), 3, c_in, channels, 2, false, rng)
            }
        };
        let key = ConvParams::new(store, &format!("{name}.key"), 1, c_in, channels, 1, false, rng);
        let value = ConvParams::new(store, &format!("{name}.value"), 1, c_in, channels, 1, false, rng);
        let out = ConvParams::new(store, &format!("{name}.out"), 1, channels, channels, 1, false, rng);
        Self {
            query_transform,
            query,
            key,
            value,
            out,
            c_k: channels,
            c_v: channels,
            c_o: channels,
            attn_dropout_rate,
        }
    }
}

fn spatial_of(shape: &[usize], op: &'static str) -> Result<(usize, [usize; 3], usize)> {
    if shape.len() != 5 {
        return Err(Error::Shape {
            op,
            shape: shape.to_vec(),
            reason: "expected [B, D, H, W, C]".into(),
        });
    }
    Ok((shape[0], [shape[1], shape[2], shape[3]], shape[4]))
}

/// `[B, D, H, W, C]` → `[B, D·H·W, C]`; rows run D-major, then H, then W.
pub fn unfold<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (b, d, c) = spatial_of(g.shape(x), "unfold")?;
    g.reshape(x, [b, d[0] * d[1] * d[2], c])
}

/// Inverse of [`unfold`].
pub fn fold<T: Scalar>(g: &mut Graph<T>, x: Var, dims: [usize; 3]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != dims[0] * dims[1] * dims[2] {
        return Err(Error::Dimension {
            op: "fold",
            lhs: shape,
            rhs: dims.to_vec(),
        });
    }
    g.reshape(x, [shape[0], dims[0], dims[1], dims[2], shape[2]])
}

/// Options for [`attention`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionOptions {
    pub scale: f64,
    pub dropout_rate: f64,
    pub mode: Mode,
    /// Largest admissible `N_Q × N` per batch item.
    pub limit: usize,
}

/// Scaled dot-product attention per batch item:
/// `softmax(scale · Q Kᵀ)` (with dropout in train mode) times `V`.
///
/// `q` is `[B, N_Q, C]`, `k` is `[B, N, C]`, `v` is `[B, N, C_V]`; the
/// result is `[B, N_Q, C_V]`. When `capture` is given, the applied attention
/// matrix `[B, N_Q, N]` is pushed onto it.
pub fn attention<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    opts: AttentionOptions,
    rng: &mut R,
    capture: Option<&mut Vec<Tensor<T>>>,
) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(Error::Shape {
            op: "attention",
            shape: qs,
            reason: "q, k and v must be [B, N, C]".into(),
        });
    }
    if qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::Dimension {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    if vs[0] != ks[0] || vs[1] != ks[1] {
        return Err(Error::Dimension {
            op: "attention",
            lhs: ks,
            rhs: vs,
        });
    }
    if !(0.0..1.0).contains(&opts.dropout_rate) {
        return Err(Error::Contract(format!(
            "attention dropout rate must lie in [0, 1), got {}",
            opts.dropout_rate
        )));
    }
    let (batch, nq, c) = (qs[0], qs[1], qs[2]);
    let (n, cv) = (ks[1], vs[2]);
    let entries = nq.saturating_mul(n);
    if entries > opts.limit {
        return Err(Error::Resource(format!(
            "attention over N_Q={nq} queries and N={n} keys needs {entries} entries, limit {}",
            opts.limit
        )));
    }

    let scale = T::from_f64_lossy(opts.scale);
    let masked = opts.mode == Mode::Train && opts.dropout_rate > 0.0;
    let keep = T::from_f64_lossy(1.0 / (1.0 - opts.dropout_rate));
    let save = g.grad_enabled() && [q, k, v].iter().any(|&x| g.requires_grad(x));

    let (qd, kd, vd) = (g.value(q).data(), g.value(k).data(), g.value(v).data());
    let mut out = vec![T::zero(); batch * nq * cv];
    let mut saved_a: Vec<T> = Vec::new();
    let mut saved_mask: Vec<bool> = Vec::new();
    let mut captured: Vec<T> = Vec::new();
    let mut scores = vec![T::zero(); entries];
    for b in 0..batch {
        let qb = &qd[b * nq * c..(b + 1) * nq * c];
        let kb = &kd[b * n * c..(b + 1) * n * c];
        let vb = &vd[b * n * cv..(b + 1) * n * cv];
        gemm(nq, c, n, scale, qb, Trans::No, kb, Trans::Yes, T::zero(), &mut scores);
        for row in scores.chunks_mut(n) {
            softmax_in_place(row);
        }
        if save {
            saved_a.extend_from_slice(&scores);
        }
        if masked {
            let mask = keep_mask(rng, entries, opts.dropout_rate);
            for (a, &kept) in scores.iter_mut().zip(&mask) {
                *a = if kept { *a * keep } else { T::zero() };
            }
            if save {
                saved_mask.extend_from_slice(&mask);
            }
        }
        if capture.is_some() {
            captured.extend_from_slice(&scores);
        }
        gemm(
            nq,
            n,
            cv,
            T::one(),
            &scores,
            Trans::No,
            vb,
            Trans::No,
            T::zero(),
            &mut out[b * nq * cv..(b + 1) * nq * cv],
        );
    }
    std::mem::drop(scores);
    if let Some(cap) = capture {
        cap.push(Tensor::new([batch, nq, n], captured)?);
    }
    let out = Tensor::new([batch, nq, cv], out)?;

    g.push(
        "attention",
        vec![q, k, v],
        out,
        Box::new(move |args| {
            let (qd, kd, vd) = (args.inputs[0].data(), args.inputs[1].data(), args.inputs[2].data());
            let dout = args.grad.data();
            let mut dq = vec![T::zero(); batch * nq * c];
            let mut dk = vec![T::zero(); batch * n * c];
            let mut dv = vec![T::zero(); batch * n * cv];
            let mut applied = vec![T::zero(); entries];
            let mut da = vec![T::zero(); entries];
            for b in 0..batch {
                let a = &saved_a[b * entries..(b + 1) * entries];
                let qb = &qd[b * nq * c..(b + 1) * nq * c];
                let kb = &kd[b * n * c..(b + 1) * n * c];
                let vb = &vd[b * n * cv..(b + 1) * n * cv];
                let dob = &dout[b * nq * cv..(b + 1) * nq * cv];
                if masked {
                    let m = &saved_mask[b * entries..(b + 1) * entries];
                    for ((ap, &av), &kept) in applied.iter_mut().zip(a).zip(m) {
                        *ap = if kept { av * keep } else { T::zero() };
                    }
                } else {
                    applied.copy_from_slice(a);
                }
                gemm(
                    n,
                    nq,
                    cv,
                    T::one(),
                    &applied,
                    Trans::Yes,
                    dob,
                    Trans::No,
                    T::zero(),
                    &mut dv[b * n * cv..(b + 1) * n * cv],
                );
                gemm(nq, cv, n, T::one(), dob, Trans::No, vb, Trans::Yes, T::zero(), &mut da);
                if masked {
                    let m = &saved_mask[b * entries..(b + 1) * entries];
                    for (d, &kept) in da.iter_mut().zip(m) {
                        *d = if kept { *d * keep } else { T::zero() };
                    }
                }
                // Softmax backward, in place: dS = A ⊙ (dA − rowsum(dA ⊙ A)).
                for (drow, arow) in da.chunks_mut(n).zip(a.chunks(n)) {
                    let dot: T = drow.iter().zip(arow).map(|(&x, &y)| x * y).sum();
                    for (x, &y) in drow.iter_mut().zip(arow) {
                        *x = y * (*x - dot);
                    }
                }
                gemm(
                    nq,
                    n,
                    c,
                    scale,
                    &da,
                    Trans::No,
                    kb,
                    Trans::No,
                    T::zero(),
                    &mut dq[b * nq * c..(b + 1) * nq * c],
                );
                gemm(
                    n,
                    nq,
                    c,
                    scale,
                    &da,
                    Trans::Yes,
                    qb,
                    Trans::No,
                    T::zero(),
                    &mut dk[b * n * c..(b + 1) * n * c],
                );
            }
            Ok(vec![
                Some(Tensor::new([batch, nq, c], dq)?),
                Some(Tensor::new([batch, n, c], dk)?),
                Some(Tensor::new([batch, n, cv], dv)?),
            ])
        }),
    )
}

/// Runs one global aggregation block on `x` (`[B, D, H, W, C]`).
pub fn global_aggregate<T: Scalar>(
    g: &mut Graph<T>,
    ctx: &mut ForwardCtx<'_, T>,
    x: Var,
    p: &AggregationParams,
) -> Result<Var> {
    if !g.value(x).is_finite() {
        return Err(Error::Data(
            "global aggregation input contains non-finite values".into(),
        ));
    }
    let (_, dims, _) = spatial_of(g.shape(x), "global_aggregate")?;
    let q = p.query.forward(g, ctx, x)?;
    let k = p.key.forward(g, ctx, x)?;
    let v = p.value.forward(g, ctx, x)?;
    let (_, qdims, _) = spatial_of(g.shape(q), "global_aggregate")?;
    debug_assert_eq!(qdims, p.query_transform.output_dims(dims));

    let (qu, ku, vu) = (unfold(g, q)?, unfold(g, k)?, unfold(g, v)?);
    let opts = AttentionOptions {
        scale: 1.0 / (p.c_k as f64).sqrt(),
        dropout_rate: p.attn_dropout_rate,
        mode: ctx.mode,
        limit: ctx.attention_limit,
    };
    let o = attention(g, qu, ku, vu, opts, &mut *ctx.rng, ctx.attention_maps.as_mut())?;
    let o = fold(g, o, qdims)?;
    p.out.forward(g, ctx, o)
}

/// Row sums of an attention tensor `[..., N]`, one per query row.
pub fn attention_rowsums<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *a.shape().last().ok_or_else(|| Error::Shape {
        op: "attention_rowsums",
        shape: vec![],
        reason: "needs a key axis".into(),
    })?;
    let sums = a.data().chunks(n.max(1)).map(|r| r.iter().copied().sum()).collect();
    Tensor::new(a.shape()[..a.ndim() - 1].to_vec(), sums)
}
