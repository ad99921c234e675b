//! Differentiable tensor primitives recorded on a [`Graph`].

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{Scalar, Trans};
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(
            "add",
            vec![a, b],
            out,
            Box::new(|args| Ok(vec![Some(args.grad.clone()), Some(args.grad.clone())])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(
            "sub",
            vec![a, b],
            out,
            Box::new(|args| Ok(vec![Some(args.grad.clone()), Some(args.grad.map(|g| -g))])),
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(
            "mul",
            vec![a, b],
            out,
            Box::new(|args| {
                let ga = args.needs[0]
                    .then(|| args.grad.zip_map(args.inputs[1], "mul", |g, y| g * y))
                    .transpose()?;
                let gb = args.needs[1]
                    .then(|| args.grad.zip_map(args.inputs[0], "mul", |g, x| g * x))
                    .transpose()?;
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64_lossy(factor);
        let out = self.value(a).map(|x| x * f);
        self.push(
            "scale",
            vec![a],
            out,
            Box::new(move |args| Ok(vec![Some(args.grad.map(|g| g * f))])),
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(
            "sum",
            vec![a],
            out,
            Box::new(|args| {
                let g = args.grad.data()[0];
                Ok(vec![Some(Tensor::full(args.inputs[0].shape().to_vec(), g))])
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(
            "reshape",
            vec![a],
            out,
            Box::new(|args| Ok(vec![Some(args.grad.reshape(args.inputs[0].shape().to_vec())?)])),
        )
    }

    /// Product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(
            "matmul",
            vec![a, b],
            out,
            Box::new(|args| {
                let (a, b) = (args.inputs[0], args.inputs[1]);
                let ga = args.needs[0]
                    .then(|| args.grad.matmul_t(Trans::No, b, Trans::Yes))
                    .transpose()?;
                let gb = args.needs[1]
                    .then(|| a.matmul_t(Trans::Yes, args.grad, Trans::No))
                    .transpose()?;
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        self.push(
            "transpose",
            vec![a],
            out,
            Box::new(|args| Ok(vec![Some(args.grad.transpose2()?)])),
        )
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_lastdim()?;
        self.push(
            "softmax",
            vec![a],
            out,
            Box::new(|args| {
                let n = *args.output.shape().last().expect("softmax output has an axis");
                let mut gx = args.grad.clone();
                for (gx_row, y_row) in gx.data_mut().chunks_mut(n).zip(args.output.data().chunks(n)) {
                    let dot: T = gx_row.iter().zip(y_row).map(|(&g, &y)| g * y).sum();
                    for (g, &y) in gx_row.iter_mut().zip(y_row) {
                        *g = y * (*g - dot);
                    }
                }
                Ok(vec![Some(gx)])
            }),
        )
    }

    /// Selects batch item `index` from a tensor whose leading axis is the batch.
    pub fn select_batch(&mut self, a: Var, index: usize) -> Result<Var> {
        let src = self.value(a);
        let batch = *src.shape().first().unwrap_or(&0);
        if index >= batch {
            return Err(Error::Shape {
                op: "select_batch",
                shape: src.shape().to_vec(),
                reason: format!("batch index {index} out of range"),
            });
        }
        let item = src.len() / batch;
        let shape = src.shape()[1..].to_vec();
        let out = Tensor::new(shape, src.data()[index * item..(index + 1) * item].to_vec())?;
        self.push(
            "select_batch",
            vec![a],
            out,
            Box::new(move |args| {
                let mut g = Tensor::zeros(args.inputs[0].shape().to_vec());
                g.data_mut()[index * item..(index + 1) * item].copy_from_slice(args.grad.data());
                Ok(vec![Some(g)])
            }),
        )
    }
}
