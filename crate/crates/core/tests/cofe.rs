mod common;

use pointssm_core::cofe::{compress, cross_interact, group_reshape, group_unreshape, Cofe};
use pointssm_core::gradcheck::{self, random_tensor, GradCheckConfig};
use pointssm_core::nn::ParamStore;
use pointssm_core::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn build(seed: u64, c: usize, g: usize, perturb: bool) -> (ParamStore, Cofe) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cofe = Cofe::new(&mut store, "cofe", c, g, &mut rng).unwrap();
    if perturb {
        common::perturb(&mut store, &mut rng, 0.3);
    }
    (store, cofe)
}

fn eval(cofe: &Cofe, store: &ParamStore, x: &Tensor) -> Tensor {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    cofe.forward(&p, tape.constant(x.clone())).unwrap().value()
}

#[test]
fn group_reshape_shapes() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = tape.constant(random_tensor(&mut rng, &[2, 8, 5], 1.0));
    let g = group_reshape(x, 2).unwrap();
    assert_eq!(g.shape(), vec![4, 4, 5]);
    assert!(group_unreshape(g, 2).unwrap().value().bit_eq(&x.value()));
    assert_eq!(group_reshape(x, 1).unwrap().shape(), vec![2, 8, 5]);
    assert!(matches!(group_reshape(x, 3), Err(Error::Config(_))));
}

#[test]
fn gated_path_absorbs_uniform_gate() {
    let (mut store, cofe) = build(1, 8, 2, false);
    store
        .set(cofe.gate_weight, Tensor::zeros([4, 4, 1]))
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[2, 4, 6], 1.0);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let gated = cofe
        .gated_norm_path(&p, tape.constant(x.clone()))
        .unwrap()
        .value();
    // The uniform 0.5 gate is absorbed by the normalization up to the ε term.
    let (mut exact, mut plain) = (vec![0.0; 48], vec![0.0; 48]);
    for b in 0..2 {
        let row = &x.data()[b * 24..][..24];
        let half: Vec<f64> = row.iter().map(|v| 0.5 * v).collect();
        let stats = |r: &[f64]| {
            let m = r.iter().sum::<f64>() / 24.0;
            (m, r.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 24.0)
        };
        let (mh, vh) = stats(&half);
        let (m, v) = stats(row);
        for i in 0..24 {
            exact[b * 24 + i] = (half[i] - mh) / (vh + 1e-5).sqrt();
            plain[b * 24 + i] = (row[i] - m) / v.sqrt();
        }
    }
    assert!(gated.max_abs_diff(&Tensor::new([2, 4, 6], exact).unwrap()) < 1e-12);
    assert!(gated.max_abs_diff(&Tensor::new([2, 4, 6], plain).unwrap()) < 1e-3);
    let zero = cofe
        .gated_norm_path(&p, tape.constant(Tensor::zeros([1, 4, 3])))
        .unwrap()
        .value();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_path_cases() {
    let (mut store, cofe) = build(3, 3, 1, false);
    let delta = Tensor::from_fn([3, 3, 3], |i| {
        if i / 3 % 4 == 0 && i % 3 == 1 {
            1.0
        } else {
            0.0
        }
    });
    store.set(cofe.conv_weight, delta).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, &[1, 3, 7], 1.0);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    assert!(cofe
        .conv_path(&p, tape.constant(x.clone()))
        .unwrap()
        .value()
        .bit_eq(&x));
    store
        .set(cofe.conv_weight, Tensor::zeros([3, 3, 3]))
        .unwrap();
    store
        .set(
            cofe.conv_bias,
            Tensor::new([3, 1], vec![1.0, 2.0, 3.0]).unwrap(),
        )
        .unwrap();
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let y = cofe.conv_path(&p, tape.constant(x)).unwrap().value();
    for c in 0..3 {
        assert!(y.data()[c * 7..][..7].iter().all(|&v| v == (c + 1) as f64));
    }
}

#[test]
fn compress_cases() {
    let tape = Tape::new();
    let u = compress(tape.constant(Tensor::full([2, 3, 4], 7.0)))
        .unwrap()
        .value();
    assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let mut spike = vec![0.0; 5];
    spike[2] = 1000.0;
    let s = compress(tape.constant(Tensor::new([1, 1, 5], spike).unwrap()))
        .unwrap()
        .value();
    assert!((s.data()[2] - 1.0).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = compress(tape.constant(random_tensor(&mut rng, &[3, 4, 9], 3.0)))
        .unwrap()
        .value();
    for g in 0..3 {
        let sum: f64 = r.data()[g * 9..][..9].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cross_interaction_cases() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = tape.constant(random_tensor(&mut rng, &[2, 3, 5], 2.0));
    let w = cross_interact(x, x).unwrap().value();
    let phi = compress(x).unwrap().value();
    let mean = x.mean(1, true).unwrap().value();
    for i in 0..10 {
        let s = phi.data()[i] * mean.data()[i];
        assert!((w.data()[i] - 1.0 / (1.0 + (-2.0 * s).exp())).abs() < 1e-15);
    }
    let z = tape.constant(Tensor::zeros([1, 2, 4]));
    assert!(cross_interact(z, z)
        .unwrap()
        .value()
        .data()
        .iter()
        .all(|&v| v == 0.5));
    let big = tape.constant(random_tensor(&mut rng, &[2, 3, 5], 50.0));
    let w = cross_interact(big, x).unwrap().value();
    assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn forward_preserves_shape_and_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(b, c, l, g) in &[(1, 4, 3, 1), (2, 8, 5, 2), (3, 12, 7, 4), (1, 6, 1, 6)] {
        let (store, cofe) = build(b as u64, c, g, true);
        let x = random_tensor(&mut rng, &[b, c, l], 2.0);
        let y = eval(&cofe, &store, &x);
        assert_eq!(y.shape(), x.shape());
        assert!(y
            .data()
            .iter()
            .zip(x.data())
            .all(|(a, b)| a.abs() <= b.abs()));
    }
    let (store, cofe) = build(0, 8, 2, true);
    let x = random_tensor(&mut rng, &[8, 5], 1.0);
    assert_eq!(eval(&cofe, &store, &x).shape(), &[8, 5]);
}

#[test]
fn neutral_gate_is_identity() {
    let (_, cofe) = build(8, 8, 4, true);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(&mut rng, &[2, 8, 5], 1.0);
    let tape = Tape::new();
    let grouped = group_reshape(tape.constant(x.clone()), cofe.groups).unwrap();
    let ones = tape.constant(Tensor::ones([8, 1, 5]));
    let y = group_unreshape(grouped.mul(ones).unwrap(), 2)
        .unwrap()
        .value();
    assert!(y.bit_eq(&x));
}

#[test]
fn groups_are_independent() {
    let (store, cofe) = build(9, 12, 3, true);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&mut rng, &[1, 12, 6], 1.0);
    let base = eval(&cofe, &store, &x);
    let mut zeroed = x.to_vec();
    zeroed[4 * 6..8 * 6].iter_mut().for_each(|v| *v = 0.0);
    let out = eval(&cofe, &store, &Tensor::new([1, 12, 6], zeroed).unwrap());
    for c in (0..4).chain(8..12) {
        for t in 0..6 {
            assert_eq!(out.data()[c * 6 + t], base.data()[c * 6 + t]);
        }
    }
}

#[test]
fn matches_straight_line_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for seed in 0..10 {
        let (b, g) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (c, l) = (g * rng.gen_range(1..=4), rng.gen_range(1..=9));
        let (store, cofe) = build(seed, c, g, true);
        let x = random_tensor(&mut rng, &[b, c, l], 2.0);
        let got = eval(&cofe, &store, &x);
        let want = common::reference::cofe(&store, "cofe", x.data(), b, c, l, g);
        let diff = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "seed {seed}: {diff:e}");
    }
}

#[test]
fn parameter_count_is_independent_of_length() {
    let (store, cofe) = build(0, 384, 16, false);
    assert_eq!(store.numel(), cofe.num_params());
    assert_eq!(cofe.num_params(), 24 * 24 + 3 * 24 * 24 + 2 * 24 + 2 * 24);
}

#[test]
fn cofe_gradients() {
    for seed in 0..5 {
        let (store, cofe) = build(seed, 6, 2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 20);
        let x = random_tensor(&mut rng, &[2, 6, 5], 1.0);
        let w = random_tensor(&mut rng, &[2, 6, 5], 1.0);
        let report = gradcheck::check_params(
            &store,
            &[("x".into(), x)],
            |tape, p, v| {
                Ok(cofe
                    .forward(p, v[0])?
                    .mul(tape.constant(w.clone()))?
                    .sum_all()?)
            },
            &GradCheckConfig {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(gradcheck::worst(&report) < 1e-4, "{report:?}");
    }
}
