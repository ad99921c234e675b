use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax_in_place, Tensor};

/// Voxel-wise softmax cross-entropy, averaged over every voxel of every batch
/// item. `labels` holds one class id per voxel in layout order.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let lv = g.value(logits);
    let k = *lv.shape().last().ok_or_else(|| Error::Shape {
        op: "cross_entropy",
        shape: vec![],
        reason: "needs a class axis".into(),
    })?;
    let voxels = lv.len() / k.max(1);
    if labels.len() != voxels {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: lv.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= k) {
        return Err(Error::Data(format!("label {l} at voxel {i} is outside 0..{k}")));
    }
    let mut probs = lv.data().to_vec();
    for row in probs.chunks_mut(k) {
        softmax_in_place(row);
    }
    // log-sum-exp in f64 keeps the value finite for saturated predictions.
    let mut total = 0.0f64;
    for (row, &l) in lv.data().chunks(k).zip(labels) {
        let max = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.to_f64_lossy() - max).exp()).sum::<f64>().ln();
        total += lse - row[l as usize].to_f64_lossy();
    }
    let loss = Tensor::scalar(T::from_f64_lossy(total / voxels as f64));
    let labels = labels.to_vec();
    g.push(
        "cross_entropy",
        vec![logits],
        loss,
        Box::new(move |args| {
            let scale = args.grad.data()[0] / T::from_usize(voxels).unwrap();
            let mut gx = probs.clone();
            for (row, &l) in gx.chunks_mut(k).zip(&labels) {
                row[l as usize] -= T::one();
                row.iter_mut().for_each(|v| *v *= scale);
            }
            Ok(vec![Some(Tensor::new(args.inputs[0].shape().to_vec(), gx)?)])
        }),
    )
}
