use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether stochastic and batch-statistics behaviour is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `min(max(x, 0), 6)`. The subgradient is 0 at both kinks.
pub fn relu6<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let six = T::from_f64_lossy(6.0);
    let out = g.value(x).map(|v| v.max(T::zero()).min(six));
    g.push(
        "relu6",
        vec![x],
        out,
        Box::new(move |args| {
            let gx = args.grad.zip_map(args.inputs[0], "relu6", |g, v| {
                if v > T::zero() && v < six {
                    g
                } else {
                    T::zero()
                }
            })?;
            Ok(vec![Some(gx)])
        }),
    )
}

/// Bernoulli keep-mask: each entry survives with probability `1 - rate`,
/// decided by one 32-bit draw against a fixed threshold.
pub(crate) fn keep_mask<R: Rng + ?Sized>(rng: &mut R, n: usize, rate: f64) -> Vec<bool> {
    let threshold = (rate * 4_294_967_296.0).round() as u64;
    let mut draws = vec![0u32; n];
    rng.fill(&mut draws[..]);
    draws.into_iter().map(|d| d as u64 >= threshold).collect()
}

/// Inverted dropout. Each element is zeroed with probability `rate` and the
/// survivors scaled by `1/(1-rate)`; the mask is drawn from `rng`. Identity in
/// eval mode or at rate 0.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let mask: Vec<T> = keep_mask(rng, g.value(x).len(), rate)
        .into_iter()
        .map(|k| if k { keep } else { T::zero() })
        .collect();
    let mask = Tensor::new(g.shape(x).to_vec(), mask)?;
    let out = g.value(x).zip_map(&mask, "dropout", |v, m| v * m)?;
    g.push(
        "dropout",
        vec![x],
        out,
        Box::new(move |args| Ok(vec![Some(args.grad.zip_map(&mask, "dropout", |g, m| g * m)?)])),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu6_values_and_mask() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new([5], vec![-1.0, 0.0, 3.0, 6.0, 8.0]).unwrap());
        let y = relu6(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 3.0, 6.0, 6.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn relu6_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f32>::no_grad();
        let x = g.constant(Tensor::randn([64], 5.0, &mut rng));
        let once = relu6(&mut g, x).unwrap();
        let twice = relu6(&mut g, once).unwrap();
        assert_eq!(g.value(once), g.value(twice));
    }

    #[test]
    fn dropout_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn([100], 1.0, &mut rng));
        let e = dropout(&mut g, x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(e), g.value(x));
        let z = dropout(&mut g, x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.value(z), g.value(x));
        assert!(dropout(&mut g, x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(Tensor::ones([n]));
        let y = dropout(&mut g, x, 0.5, Mode::Train, &mut rng).unwrap();
        let y = g.value(y);
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((0.49..=0.51).contains(&survivors), "{survivors}");
        let mean = y.sum() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn dropout_mask_reproducible_from_seed() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut g = Graph::<f32>::no_grad();
            let x = g.constant(Tensor::ones([256]));
            let y = dropout(&mut g, x, 0.5, Mode::Train, &mut rng).unwrap();
            g.value(y).clone()
        };
        assert_eq!(draw(), draw());
    }
}
