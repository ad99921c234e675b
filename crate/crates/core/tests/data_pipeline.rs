use nlunet::data::{
    argmax_labels, axis_offsets, generate_phantom, sample_patches, sliding_positions, stitch, LabelVolume, Stitcher,
    Volume, DEFAULT_NOISE,
};
use nlunet::{SeededRng, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

/// Offsets by enumeration: every multiple of `t` that still fits, plus the
/// flush-right window if it is not already there.
fn enumerated_offsets(dim: usize, s: usize, t: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut o = 0;
    while o + s <= dim {
        v.push(o);
        o += t;
    }
    if *v.last().unwrap() != dim - s {
        v.push(dim - s);
    }
    v
}

fn random_simplex(s: usize, k: usize, rng: &mut SeededRng) -> Tensor<f32> {
    Tensor::<f32>::randn([s, s, s, k], 2.0, rng).softmax_lastdim().unwrap()
}

#[test]
fn patch_count_formula_matches_enumeration() {
    for dim in 1..=128usize {
        for s in 1..=dim {
            for t in 1..=s {
                let got = axis_offsets(dim, s, t).unwrap();
                assert_eq!(got, enumerated_offsets(dim, s, t), "dim {dim} s {s} t {t}");
                assert_eq!(got.len(), (dim - s).div_ceil(t) + 1, "dim {dim} s {s} t {t}");
            }
        }
    }
}

#[test]
fn documented_tilings() {
    assert_eq!(axis_offsets(64, 32, 8).unwrap(), [0, 8, 16, 24, 32]);
    assert_eq!(sliding_positions([64, 64, 64], 32, 8).unwrap().len(), 125);
    assert_eq!(axis_offsets(33, 32, 8).unwrap(), [0, 1]);
}

#[test]
fn coverage_field_for_64_32_8() {
    let mut st = Stitcher::new([64, 64, 64], 1);
    let ones = Tensor::<f32>::ones([32, 32, 32, 1]);
    for c in sliding_positions([64, 64, 64], 32, 8).unwrap() {
        st.add(c, &ones).unwrap();
    }
    let cov = st.coverage();
    assert_eq!(*cov.iter().min().unwrap(), 1);
    assert_eq!(*cov.iter().max().unwrap(), 64);
}

#[test]
fn exact_tiling_covers_once() {
    let mut st = Stitcher::new([8, 12, 4], 1);
    let ones = Tensor::<f32>::ones([4, 4, 4, 1]);
    for c in sliding_positions([8, 12, 4], 4, 4).unwrap() {
        st.add(c, &ones).unwrap();
    }
    assert!(st.coverage().iter().all(|&c| c == 1));
}

#[test]
fn constant_windows_stitch_to_the_constant() {
    let p = [0.1f32, 0.2, 0.3, 0.4];
    let dims = [20, 18, 16];
    let corners = sliding_positions(dims, 8, 3).unwrap();
    let window = Tensor::from_fn([8, 8, 8, 4], |i| p[i % 4]);
    let out = stitch(&vec![window; corners.len()], &corners, dims, 4).unwrap();
    for row in out.data.chunks(4) {
        for (a, b) in row.iter().zip(&p) {
            assert!((a - b).abs() < 1e-7, "{row:?}");
        }
    }
}

#[test]
fn argmax_matches_loop_and_breaks_ties_low() {
    let mut rng = SeededRng::seed_from_u64(4);
    let data: Vec<f32> = (0..5 * 4 * 3 * 4).map(|_| rng.gen()).collect();
    let vol = Volume::new([5, 4, 3], 4, data.clone()).unwrap();
    let labels = argmax_labels(&vol);
    for (v, row) in data.chunks(4).enumerate() {
        let mut best = 0;
        for c in 1..4 {
            if row[c] > row[best] {
                best = c;
            }
        }
        assert_eq!(labels.labels[v] as usize, best);
    }
    let tie = Volume::new([1, 1, 1], 4, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
    assert_eq!(argmax_labels(&tie).labels, [0]);
}

/// Upper 1% point of chi-square with `k` degrees of freedom (Wilson–Hilferty).
fn chi2_critical_1pct(k: f64) -> f64 {
    let z = 2.326_347_874;
    let a = 2.0 / (9.0 * k);
    k * (1.0 - a + z * a.sqrt()).powi(3)
}

#[test]
fn sampled_corners_are_uniform() {
    let (vol, labels) = generate_phantom(3, [12, 12, 12], 4, DEFAULT_NOISE).unwrap();
    let mut rng = SeededRng::seed_from_u64(0);
    let draws = 10_000;
    let samples = sample_patches(&vol, &labels, draws, 8, &mut rng).unwrap();
    let mut joint = vec![0usize; 125];
    for p in &samples {
        assert!(p.corner.iter().all(|&c| c <= 4));
        joint[(p.corner[0] * 5 + p.corner[1]) * 5 + p.corner[2]] += 1;
    }
    let expected = draws as f64 / 125.0;
    let stat: f64 = joint.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    assert!(stat < chi2_critical_1pct(124.0), "chi-square {stat}");
}

#[test]
fn whole_volume_patch() {
    let (vol, labels) = generate_phantom(2, [8, 8, 8], 4, DEFAULT_NOISE).unwrap();
    let mut rng = SeededRng::seed_from_u64(1);
    let p = sample_patches(&vol, &labels, 3, 8, &mut rng).unwrap();
    assert!(p
        .iter()
        .all(|p| p.corner == [0, 0, 0] && p.image == vol.data && p.labels == labels.labels));
}

#[test]
fn phantom_histogram_regression() {
    let (_, labels) = generate_phantom(0, [64, 64, 64], 4, DEFAULT_NOISE).unwrap();
    let hist = labels.histogram(4).unwrap();
    assert_eq!(hist, [178455, 36701, 30320, 16668]);
    assert!(hist.iter().all(|&h| h * 100 >= labels.voxels()));
}

#[test]
fn phantom_is_deterministic() {
    let a = generate_phantom(9, [16, 16, 16], 4, DEFAULT_NOISE).unwrap();
    let b = generate_phantom(9, [16, 16, 16], 4, DEFAULT_NOISE).unwrap();
    assert_eq!(a.0.data, b.0.data);
    assert_eq!(a.1, b.1);
}

fn cube_ok(dims: [usize; 3], s: usize, t: usize) -> Result<(), TestCaseError> {
    let pos = sliding_positions(dims, s, t).unwrap();
    let axes: Vec<Vec<usize>> = (0..3).map(|i| axis_offsets(dims[i], s, t).unwrap()).collect();
    prop_assert_eq!(pos.len(), axes.iter().map(Vec::len).product::<usize>());
    // Coverage factors over axes because the windows form a product grid.
    for (i, offs) in axes.iter().enumerate() {
        let mut hit = vec![false; dims[i]];
        for &o in offs {
            hit[o..o + s].iter_mut().for_each(|h| *h = true);
        }
        prop_assert!(hit.iter().all(|&h| h), "axis {} uncovered", i);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn windows_cover_every_voxel((dims, s, t) in (1usize..=128, 1usize..=128, 1usize..=128).prop_flat_map(|(a, b, c)| {
        let m = a.min(b).min(c);
        (Just([a, b, c]), 1..=m).prop_flat_map(|(d, s)| (Just(d), Just(s), 1..=s))
    })) {
        cube_ok(dims, s, t)?;
    }

    #[test]
    fn small_volumes_are_covered_voxel_by_voxel((dims, s, t) in (1usize..=20, 1usize..=20, 1usize..=20).prop_flat_map(|(a, b, c)| {
        let m = a.min(b).min(c);
        (Just([a, b, c]), 1..=m).prop_flat_map(|(d, s)| (Just(d), Just(s), 1..=s))
    })) {
        let mut st = Stitcher::new(dims, 1);
        let ones = Tensor::<f32>::ones([s, s, s, 1]);
        for c in sliding_positions(dims, s, t).unwrap() {
            st.add(c, &ones).unwrap();
        }
        prop_assert!(st.coverage().iter().all(|&c| c >= 1));
    }

    #[test]
    fn stitched_probabilities_stay_on_the_simplex(seed in 0u64..10_000, (dims, s, t) in (4usize..=12, 4usize..=12, 4usize..=12).prop_flat_map(|(a, b, c)| {
        let m = a.min(b).min(c);
        (Just([a, b, c]), 1..=m).prop_flat_map(|(d, s)| (Just(d), Just(s), 1..=s))
    })) {
        let mut rng = SeededRng::seed_from_u64(seed);
        let corners = sliding_positions(dims, s, t).unwrap();
        let windows: Vec<_> = corners.iter().map(|_| random_simplex(s, 4, &mut rng)).collect();
        let out = stitch(&windows, &corners, dims, 4).unwrap();
        for row in out.data.chunks(4) {
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row {:?}", row);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn label_volume_rejects_bad_lengths() {
    assert!(LabelVolume::new([2, 2, 2], vec![0; 7]).is_err());
}
