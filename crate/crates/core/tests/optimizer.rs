mod common;

use common::ScalarAdam;
use nlunet::params::Named;
use nlunet::train::{adam_step, AdamConfig, AdamState};
use nlunet::Tensor;

fn scalar(v: f64) -> Vec<Named<f64>> {
    vec![Named {
        name: "theta".into(),
        value: Tensor::scalar(v),
    }]
}

/// Runs `f(θ) = a (θ - c)²` for ten steps with both implementations.
fn quadratic_trajectories(cfg: AdamConfig) -> (Vec<f64>, Vec<f64>) {
    let (a, c) = (1.7, -0.4);
    let mut params = scalar(2.5);
    let mut state = AdamState::new(cfg, &params);
    let mut reference = ScalarAdam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay);
    let mut theta = 2.5;
    let (mut ours, mut theirs) = (Vec::new(), Vec::new());
    for _ in 0..10 {
        let p = params[0].value.item().unwrap();
        let grad = Tensor::scalar(2.0 * a * (p - c));
        adam_step(&mut params, &[Some(grad)], &mut state).unwrap();
        ours.push(params[0].value.item().unwrap());
        theta = reference.step(theta, 2.0 * a * (theta - c));
        theirs.push(theta);
    }
    (ours, theirs)
}

#[test]
fn matches_hand_rolled_reference_on_a_quadratic() {
    for cfg in [
        AdamConfig::default(),
        AdamConfig {
            lr: 0.05,
            weight_decay: 0.01,
            ..AdamConfig::default()
        },
        AdamConfig {
            lr: 0.2,
            beta1: 0.5,
            beta2: 0.9,
            epsilon: 1e-3,
            weight_decay: 0.0,
        },
    ] {
        let (ours, theirs) = quadratic_trajectories(cfg);
        for (step, (a, b)) in ours.iter().zip(&theirs).enumerate() {
            assert!((a - b).abs() < 1e-12, "{cfg:?} step {step}: {a} vs {b}");
        }
    }
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut params = vec![Named {
        name: "w".into(),
        value: Tensor::from_fn([3, 4], |i| i as f64 - 5.5),
    }];
    let before = params.clone();
    let mut state = AdamState::new(cfg, &params);
    for _ in 0..5 {
        adam_step(&mut params, &[Some(Tensor::zeros([3, 4]))], &mut state).unwrap();
    }
    assert_eq!(params, before);
}

#[test]
fn missing_gradient_names_the_parameter_and_changes_nothing() {
    let mut params = scalar(1.0);
    params.push(Named {
        name: "second".into(),
        value: Tensor::scalar(2.0),
    });
    let before = params.clone();
    let mut state = AdamState::new(AdamConfig::default(), &params);
    let err = adam_step(&mut params, &[Some(Tensor::scalar(1.0)), None], &mut state).unwrap_err();
    assert!(err.to_string().contains("second"), "{err}");
    assert_eq!(params, before);
    assert_eq!(state.t, 0);
}
