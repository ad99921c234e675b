//! Independent reference implementations shared by the integration tests.
//! Everything here is written as plain loops over explicit indices, without
//! touching the library's kernels.
#![allow(dead_code)]

use std::collections::BTreeSet;

use nlunet::aggregation::{AggregationParams, QueryTransform};
use nlunet::metrics::BinaryMap;
use nlunet::ParamStore;
use nlunet::Tensor;

/// Dense `[B, D, H, W, C]` volume with f64 entries and index helpers.
pub struct Vol {
    pub shape: [usize; 5],
    pub data: Vec<f64>,
}

impl Vol {
    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        Self {
            shape: [s[0], s[1], s[2], s[3], s[4]],
            data: t.data().to_vec(),
        }
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn idx(&self, b: usize, d: usize, h: usize, w: usize, c: usize) -> usize {
        let [_, dd, hh, ww, cc] = self.shape;
        (((b * dd + d) * hh + h) * ww + w) * cc + c
    }

    pub fn get(&self, b: usize, d: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[self.idx(b, d, h, w, c)]
    }

    pub fn add(&mut self, b: usize, d: usize, h: usize, w: usize, c: usize, v: f64) {
        let i = self.idx(b, d, h, w, c);
        self.data[i] += v;
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(self.shape.to_vec(), self.data.clone()).unwrap()
    }
}

fn weight(w: &Tensor<f64>, kd: usize, kh: usize, kw: usize, ci: usize, co: usize) -> f64 {
    let s = w.shape();
    w.data()[(((kd * s[1] + kh) * s[2] + kw) * s[3] + ci) * s[4] + co]
}

/// Gathering convolution with zero padding `(k-1)/2`:
/// `y[o] = b + Σ x[o·stride + t - pad] · w[t]`.
pub fn conv3d_naive(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let x = Vol::from_tensor(x);
    let [batch, d, h, wd, cin] = x.shape;
    let (k, cout) = (w.shape()[0], w.shape()[4]);
    let pad = (k - 1) / 2;
    let out_dims = [d / stride, h / stride, wd / stride];
    let mut y = Vol::zeros([batch, out_dims[0], out_dims[1], out_dims[2], cout]);
    for b in 0..batch {
        for od in 0..out_dims[0] {
            for oh in 0..out_dims[1] {
                for ow in 0..out_dims[2] {
                    for co in 0..cout {
                        let mut acc = bias.data()[co];
                        for kd in 0..k {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let id = (od * stride + kd) as isize - pad as isize;
                                    let ih = (oh * stride + kh) as isize - pad as isize;
                                    let iw = (ow * stride + kw) as isize - pad as isize;
                                    if id < 0 || ih < 0 || iw < 0 {
                                        continue;
                                    }
                                    let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                                    if id >= d || ih >= h || iw >= wd {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        acc += x.get(b, id, ih, iw, ci) * weight(w, kd, kh, kw, ci, co);
                                    }
                                }
                            }
                        }
                        y.add(b, od, oh, ow, co, acc);
                    }
                }
            }
        }
    }
    y.to_tensor()
}

/// Scattering transposed convolution: every input voxel `i` adds
/// `x[i] · w[t]` to output voxel `i·stride + t - pad`.
pub fn conv_transpose3d_naive(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let x = Vol::from_tensor(x);
    let [batch, d, h, wd, cin] = x.shape;
    let (k, cout) = (w.shape()[0], w.shape()[4]);
    let pad = (k - 1) / 2;
    let big = [d * stride, h * stride, wd * stride];
    let mut y = Vol::zeros([batch, big[0], big[1], big[2], cout]);
    for b in 0..batch {
        for i in 0..big[0] {
            for j in 0..big[1] {
                for l in 0..big[2] {
                    for co in 0..cout {
                        y.add(b, i, j, l, co, bias.data()[co]);
                    }
                }
            }
        }
        for id in 0..d {
            for ih in 0..h {
                for iw in 0..wd {
                    for kd in 0..k {
                        for kh in 0..k {
                            for kw in 0..k {
                                let od = (id * stride + kd) as isize - pad as isize;
                                let oh = (ih * stride + kh) as isize - pad as isize;
                                let ow = (iw * stride + kw) as isize - pad as isize;
                                if od < 0 || oh < 0 || ow < 0 {
                                    continue;
                                }
                                let (od, oh, ow) = (od as usize, oh as usize, ow as usize);
                                if od >= big[0] || oh >= big[1] || ow >= big[2] {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for co in 0..cout {
                                        y.add(
                                            b,
                                            od,
                                            oh,
                                            ow,
                                            co,
                                            x.get(b, id, ih, iw, ci) * weight(w, kd, kh, kw, ci, co),
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y.to_tensor()
}

/// Rows of an unfolded `[B, D, H, W, C]` item, D-major then H then W.
pub fn rows(x: &Tensor<f64>, b: usize) -> Vec<Vec<f64>> {
    let v = Vol::from_tensor(x);
    let [_, d, h, w, c] = v.shape;
    let mut out = Vec::new();
    for i in 0..d {
        for j in 0..h {
            for l in 0..w {
                out.push((0..c).map(|ch| v.get(b, i, j, l, ch)).collect());
            }
        }
    }
    out
}

/// `o_i = Σ_j softmax_j(q_i·k_j · scale) v_j`, one query at a time.
pub fn attention_naive(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut o = vec![0.0; v[0].len()];
            for (ej, vj) in e.iter().zip(v) {
                for (oc, vc) in o.iter_mut().zip(vj) {
                    *oc += ej / z * vc;
                }
            }
            o
        })
        .collect()
}

/// Global aggregation assembled from the loop oracles above.
pub fn global_aggregate_naive(store: &ParamStore<f64>, p: &AggregationParams, x: &Tensor<f64>) -> Tensor<f64> {
    let w = |id| store.param(id);
    let q = match p.query_transform {
        QueryTransform::Conv1 => conv3d_naive(x, w(p.query.weight), w(p.query.bias), 1),
        QueryTransform::Deconv3S2 => conv_transpose3d_naive(x, w(p.query.weight), w(p.query.bias), 2),
        QueryTransform::Conv3S2 => conv3d_naive(x, w(p.query.weight), w(p.query.bias), 2),
    };
    let k = conv3d_naive(x, w(p.key.weight), w(p.key.bias), 1);
    let v = conv3d_naive(x, w(p.value.weight), w(p.value.bias), 1);
    let qs = q.shape().to_vec();
    let mut o = Vec::new();
    for b in 0..qs[0] {
        let out = attention_naive(&rows(&q, b), &rows(&k, b), &rows(&v, b), 1.0 / (p.c_k as f64).sqrt());
        o.extend(out.into_iter().flatten());
    }
    let o = Tensor::new([qs[0], qs[1], qs[2], qs[3], p.c_v], o).unwrap();
    conv3d_naive(&o, w(p.out.weight), w(p.out.bias), 1)
}

/// Euclidean MHD between two point sets, straight from the definition.
pub fn mhd_naive(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let dist = |x: &Vec<f64>, y: &Vec<f64>| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let directed = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        x.iter()
            .map(|p| y.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    directed(a, b).max(directed(b, a))
}

/// The set of binary fibers of a map along axis 0 (D), 1 (H) or 2 (W).
pub fn fiber_set(m: &BinaryMap, axis: usize) -> Vec<Vec<f64>> {
    let [d, h, w] = m.dims;
    let mut set = BTreeSet::new();
    match axis {
        0 => {
            for j in 0..h {
                for l in 0..w {
                    set.insert((0..d).map(|i| m.get(i, j, l)).collect::<Vec<bool>>());
                }
            }
        }
        1 => {
            for i in 0..d {
                for l in 0..w {
                    set.insert((0..h).map(|j| m.get(i, j, l)).collect::<Vec<bool>>());
                }
            }
        }
        _ => {
            for i in 0..d {
                for j in 0..h {
                    set.insert((0..w).map(|l| m.get(i, j, l)).collect::<Vec<bool>>());
                }
            }
        }
    }
    set.into_iter()
        .map(|f| f.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn mhd_directional_naive(p: &BinaryMap, l: &BinaryMap, axis: usize) -> f64 {
    mhd_naive(&fiber_set(p, axis), &fiber_set(l, axis))
}

pub fn mhd_3d_naive(p: &BinaryMap, l: &BinaryMap) -> f64 {
    (0..3).map(|a| mhd_directional_naive(p, l, a)).sum::<f64>() / 3.0
}

/// Reorders the axes of a map: output axis `i` is input axis `perm[i]`.
pub fn permute_map(m: &BinaryMap, perm: [usize; 3]) -> BinaryMap {
    let dims = [m.dims[perm[0]], m.dims[perm[1]], m.dims[perm[2]]];
    let mut bits = vec![false; m.bits.len()];
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for l in 0..dims[2] {
                let mut src = [0; 3];
                src[perm[0]] = i;
                src[perm[1]] = j;
                src[perm[2]] = l;
                bits[(i * dims[1] + j) * dims[2] + l] = m.get(src[0], src[1], src[2]);
            }
        }
    }
    BinaryMap::new(dims, bits).unwrap()
}

/// Classic Adam with L2 decay on one scalar, written out longhand.
pub struct ScalarAdam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub decay: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn new(lr: f64, b1: f64, b2: f64, eps: f64, decay: f64) -> Self {
        Self {
            lr,
            b1,
            b2,
            eps,
            decay,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn step(&mut self, theta: f64, grad: f64) -> f64 {
        self.t += 1;
        let g = grad + self.decay * theta;
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let m_hat = self.m / (1.0 - self.b1.powi(self.t));
        let v_hat = self.v / (1.0 - self.b2.powi(self.t));
        theta - self.lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}
