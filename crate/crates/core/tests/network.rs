mod common;

use common::{conv_transpose3d_naive, global_aggregate_naive};
use nlunet::network::{count_parameters_for, Block, ResidualKind};
use nlunet::nn::{ConvParams, Mode};
use nlunet::{make_ablation, ForwardCtx, Graph, ModelId, Network, NetworkConfig, ParamStore, SeededRng, Tensor};
use rand::{Rng, SeedableRng};

fn apply(block: &Block, store: &ParamStore<f64>, x: &Tensor<f64>, mode: Mode) -> Tensor<f64> {
    let mut g = Graph::no_grad();
    let bound = store.bind(&mut g);
    let xv = g.constant(x.clone());
    let mut rng = SeededRng::seed_from_u64(0);
    let mut ctx = ForwardCtx::new(mode, &mut rng, store, &bound);
    let y = block.forward(&mut g, &mut ctx, xv).unwrap();
    g.value(y).clone()
}

#[test]
fn zeroed_kind_a_is_the_identity() {
    let mut rng = SeededRng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let block = Block::residual(ResidualKind::A, &mut store, "a", 3, 0.5, &mut rng).unwrap();
    for p in store.params_mut() {
        if !p.name.ends_with("gamma") {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
    }
    let x = Tensor::randn([2, 4, 4, 4, 3], 1.0, &mut rng);
    for mode in [Mode::Train, Mode::Eval] {
        assert_eq!(apply(&block, &store, &x, mode), x);
    }
}

#[test]
fn kind_b_halves_extent_and_doubles_channels() {
    let mut rng = SeededRng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let block = Block::residual(ResidualKind::B, &mut store, "b", 3, 0.5, &mut rng).unwrap();
    let x = Tensor::randn([2, 8, 8, 8, 3], 1.0, &mut rng);
    assert_eq!(apply(&block, &store, &x, Mode::Train).shape(), [2, 4, 4, 4, 6]);
}

#[test]
fn kind_d_matches_hand_assembled_composition() {
    let mut rng = SeededRng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let block = Block::residual(ResidualKind::D, &mut store, "d", 4, 0.5, &mut rng).unwrap();
    for p in store.params_mut() {
        let jitter = Tensor::randn(p.value.shape().to_vec(), 0.2, &mut rng);
        p.value.add_assign(&jitter).unwrap();
    }
    for b in store.buffers_mut() {
        let var = b.name.ends_with("running_var");
        b.value = Tensor::from_fn(b.value.shape().to_vec(), |_| {
            if var {
                rng.gen_range(0.5..2.0)
            } else {
                rng.gen_range(-0.5..0.5)
            }
        });
    }
    let x = Tensor::randn([2, 4, 4, 4, 4], 1.0, &mut rng);
    let Block::D { shortcut, branch } = &block else {
        unreachable!()
    };

    let w = |id| store.param(id);
    let s = conv_transpose3d_naive(&x, w(shortcut.weight), w(shortcut.bias), 2);
    let (mean, var) = (
        store.buffer(branch.bn.running_mean),
        store.buffer(branch.bn.running_var),
    );
    let (gamma, beta) = (w(branch.bn.gamma), w(branch.bn.beta));
    let h = Tensor::from_fn(x.shape().to_vec(), |i| {
        let c = i % 4;
        let n = (x.data()[i] - mean.data()[c]) / (var.data()[c] + branch.bn.epsilon).sqrt();
        (gamma.data()[c] * n + beta.data()[c]).clamp(0.0, 6.0)
    });
    let a = global_aggregate_naive(&store, &branch.agg, &h);
    let want = s.zip_map(&a, "sum", |p, q| p + q).unwrap();

    let got = apply(&block, &store, &x, Mode::Eval);
    assert_eq!(got.shape(), [2, 8, 8, 8, 2]);
    let err = got.max_abs_diff(&want).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv_parameter_arithmetic() {
    let mut rng = SeededRng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    ConvParams::new(&mut store, "c", 3, 2, 32, 1, false, &mut rng);
    assert_eq!(store.count(), 1760);
    for c in [1usize, 4, 9] {
        let mut store = ParamStore::<f32>::new();
        ConvParams::new(&mut store, "p", 1, c, c, 1, false, &mut rng);
        assert_eq!(store.count(), c * c + c);
    }
}

#[test]
fn parameter_count_does_not_depend_on_seed() {
    let cfg = NetworkConfig::default();
    let n = count_parameters_for(&cfg).unwrap();
    for seed in 1..4 {
        assert_eq!(Network::<f32>::from_seed(&cfg, seed).unwrap().count_parameters(), n);
    }
}

#[test]
fn five_patch_batch_maps_to_class_logits() {
    let cfg = make_ablation(
        ModelId::Full,
        &NetworkConfig {
            base_width: 4,
            ..NetworkConfig::default()
        },
    );
    let net = Network::<f32>::from_seed(&cfg, 0).unwrap();
    let mut rng = SeededRng::seed_from_u64(0);
    let x = Tensor::randn([5, 32, 32, 32, 2], 1.0, &mut rng);
    let y = net.predict(&x).unwrap();
    assert_eq!(y.shape(), [5, 32, 32, 32, 4]);
    assert!(y.is_finite());
    assert_eq!(net.predict(&x).unwrap(), y);
}
