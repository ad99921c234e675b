mod common;

use common::{conv3d_naive, conv_transpose3d_naive};
use nlunet::nn::{conv3d, conv_transpose3d};
use nlunet::{Graph, SeededRng, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;

fn run(f: impl Fn(&mut Graph<f64>, &[nlunet::Var]) -> nlunet::Var, inputs: &[&Tensor<f64>]) -> Tensor<f64> {
    let mut g = Graph::no_grad();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let y = f(&mut g, &vars);
    g.value(y).clone()
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    run(|g, v| conv3d(g, v[0], v[1], v[2], stride).unwrap(), &[x, w, b])
}

fn deconv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    run(
        |g, v| conv_transpose3d(g, v[0], v[1], v[2], stride).unwrap(),
        &[x, w, b],
    )
}

/// `[k, k, k, a, b]` → `[k, k, k, b, a]`.
fn swap_channels(w: &Tensor<f64>) -> Tensor<f64> {
    let s = w.shape();
    let (taps, a, b) = (s[0] * s[1] * s[2], s[3], s[4]);
    let mut out = vec![0.0; w.len()];
    for t in 0..taps {
        for i in 0..a {
            for j in 0..b {
                out[(t * b + j) * a + i] = w.data()[(t * a + i) * b + j];
            }
        }
    }
    Tensor::new([s[0], s[1], s[2], b, a], out).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn conv3d_matches_gathering_loops() {
    for seed in 0..6u64 {
        let mut rng = SeededRng::seed_from_u64(seed);
        let stride = 1 + (seed % 2) as usize;
        let k = if seed % 3 == 0 { 1 } else { 3 };
        let x = Tensor::<f64>::randn([2, 4, 6, 4, 3], 1.0, &mut rng);
        let w = Tensor::randn([k, k, k, 3, 5], 1.0, &mut rng);
        let b = Tensor::randn([5], 1.0, &mut rng);
        let err = conv(&x, &w, &b, stride)
            .max_abs_diff(&conv3d_naive(&x, &w, &b, stride))
            .unwrap();
        assert!(err < 1e-12, "seed {seed}: {err}");
    }
}

#[test]
fn conv_transpose3d_matches_scattering_loops() {
    for seed in 0..6u64 {
        let mut rng = SeededRng::seed_from_u64(seed);
        let stride = 1 + (seed % 2) as usize;
        let x = Tensor::<f64>::randn([2, 3, 2, 4, 3], 1.0, &mut rng);
        let w = Tensor::randn([3, 3, 3, 3, 2], 1.0, &mut rng);
        let b = Tensor::randn([2], 1.0, &mut rng);
        let err = deconv(&x, &w, &b, stride)
            .max_abs_diff(&conv_transpose3d_naive(&x, &w, &b, stride))
            .unwrap();
        assert!(err < 1e-12, "seed {seed}: {err}");
    }
}

#[test]
fn single_voxel_transpose_selects_kernel_taps() {
    // One input voxel, stride 2: output voxel o receives tap o + 1 on each axis.
    let w = Tensor::<f64>::from_fn([3, 3, 3, 1, 1], |i| i as f64);
    let x = Tensor::full([1, 1, 1, 1, 1], 1.0);
    let b = Tensor::full([1], 0.5);
    let y = deconv(&x, &w, &b, 2);
    assert_eq!(y.shape(), [1, 2, 2, 2, 1]);
    for d in 0..2 {
        for h in 0..2 {
            for l in 0..2 {
                let tap = ((d + 1) * 3 + h + 1) * 3 + l + 1;
                assert_eq!(y.data()[(d * 2 + h) * 2 + l], tap as f64 + 0.5);
            }
        }
    }
}

#[test]
fn all_ones_kernel_counts_padded_neighbours() {
    let x = Tensor::<f64>::full([1, 4, 4, 4, 1], 2.0);
    let w = Tensor::ones([3, 3, 3, 1, 1]);
    let y = conv(&x, &w, &Tensor::zeros([1]), 1);
    assert_eq!(y.data()[0], 16.0);
    // Voxel (1, 1, 1) is interior along every axis.
    assert_eq!(y.data()[21], 54.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// `<conv(x), y> == <x, convT(y)>` with the channel axes of the weight swapped.
    #[test]
    fn transpose_is_the_adjoint(seed in 0u64..1000, stride in 1usize..=2, ext in 1usize..=3, cin in 1usize..=3, cout in 1usize..=3) {
        let mut rng = SeededRng::seed_from_u64(seed);
        let big = ext * 2;
        let x = Tensor::<f64>::randn([1, big, big, big, cin], 1.0, &mut rng);
        let w = Tensor::randn([3, 3, 3, cin, cout], 1.0, &mut rng);
        let small = big / stride;
        let y = Tensor::randn([1, small, small, small, cout], 1.0, &mut rng);
        let lhs = dot(&conv(&x, &w, &Tensor::zeros([cout]), stride), &y);
        let rhs = dot(&x, &deconv(&y, &swap_channels(&w), &Tensor::zeros([cin]), stride));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{} vs {}", lhs, rhs);
    }
}
