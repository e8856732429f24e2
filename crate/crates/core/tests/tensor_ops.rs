use pointssm_core::gradcheck::{self, random_tensor, GradCheckConfig};
use pointssm_core::tensor::{Tape, Tensor, TensorError, Var};
use pointssm_core::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let eye = tape.constant(Tensor::eye(2));
    let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    assert_eq!(eye.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);
    let a = tape.constant(t(&[1, 2], &[1., 0.]));
    let b = tape.constant(t(&[2, 1], &[0., 5.]));
    assert_eq!(a.matmul(b).unwrap().value().data(), &[0.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    let err = a.matmul(b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let zero = tape.constant(Tensor::scalar(0.0));
    assert_eq!(zero.sigmoid().unwrap().value().item(), 0.5);
    close(
        &[zero.softplus().unwrap().value().item()],
        &[std::f64::consts::LN_2],
        1e-15,
    );
    let a = tape.constant(t(&[3], &[1., 2., 3.]));
    let b = tape.constant(t(&[3], &[4., 5., 6.]));
    assert_eq!(a.mul(b).unwrap().value().data(), &[4., 10., 18.]);
}

#[test]
fn broadcasting_and_errors() {
    let tape = Tape::new();
    let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let row = tape.constant(t(&[3], &[10., 20., 30.]));
    let col = tape.constant(t(&[2, 1], &[100., 200.]));
    assert_eq!(
        a.add(row).unwrap().value().data(),
        &[11., 22., 33., 14., 25., 36.]
    );
    assert_eq!(
        a.add(col).unwrap().value().data(),
        &[101., 102., 103., 204., 205., 206.]
    );
    let bad = tape.constant(Tensor::zeros([2]));
    assert!(matches!(a.add(bad), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn checked_mode_rejects_zero_division_and_overflow() {
    let tape = Tape::checked();
    let a = tape.constant(t(&[2], &[1., 2.]));
    let b = tape.constant(t(&[2], &[1., 0.]));
    assert_eq!(a.div(b).unwrap_err(), TensorError::DivByZero);
    let big = tape.constant(Tensor::scalar(1000.0));
    assert!(matches!(big.exp(), Err(TensorError::NonFinite { .. })));
    // unchecked tapes let IEEE semantics through
    let loose = Tape::new();
    let x = loose.constant(Tensor::scalar(1.0));
    let z = loose.constant(Tensor::scalar(0.0));
    assert!(x.div(z).unwrap().value().item().is_infinite());
}

#[test]
fn reduce_examples() {
    let tape = Tape::new();
    let v = tape.constant(t(&[3], &[1., 2., 3.]));
    assert_eq!(v.mean(0, false).unwrap().value().item(), 2.0);
    let ones = tape.constant(t(&[3], &[1., 1., 1.]));
    assert_eq!(ones.variance(0, false).unwrap().value().item(), 0.0);
    let m = tape.constant(t(&[2, 2], &[1., 5., 3., 2.]));
    let mx = m.max(0, false).unwrap();
    assert_eq!(mx.shape(), vec![2]);
    assert_eq!(mx.value().data(), &[3., 5.]);
    assert_eq!(m.sum(1, true).unwrap().shape(), vec![2, 1]);
    // biased estimator
    let w = tape.constant(t(&[2], &[-1., 1.]));
    assert_eq!(w.variance(0, false).unwrap().value().item(), 1.0);
    assert!(matches!(m.sum(2, false), Err(TensorError::Axis { .. })));
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let s = |v: &[f64]| {
        tape.constant(t(&[v.len()], v))
            .softmax(0)
            .unwrap()
            .value()
            .to_vec()
    };
    close(&s(&[0., 0.]), &[0.5, 0.5], 1e-15);
    close(&s(&[1000., 1000.]), &[0.5, 0.5], 1e-15);
    close(&s(&[0., 3f64.ln()]), &[0.25, 0.75], 1e-15);
}

#[test]
fn conv1d_examples() {
    let tape = Tape::new();
    let x = tape.constant(t(&[1, 3], &[1., 2., 3.]));
    let k1 = tape.constant(t(&[1, 1, 1], &[1.]));
    assert_eq!(x.conv1d(k1).unwrap().value().data(), &[1., 2., 3.]);
    let delta = tape.constant(t(&[1, 1, 3], &[0., 1., 0.]));
    assert_eq!(x.conv1d(delta).unwrap().value().data(), &[1., 2., 3.]);
    let boxk = tape.constant(t(&[1, 1, 3], &[1., 1., 1.]));
    assert_eq!(x.conv1d(boxk).unwrap().value().data(), &[3., 6., 5.]);
    let even = tape.constant(Tensor::ones([1, 1, 2]));
    assert!(matches!(x.conv1d(even), Err(TensorError::Invalid { .. })));
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.param(Tensor::ones([2, 2]));
    let loss = x.sum_all().unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.; 4]);

    let tape = Tape::new();
    let x = tape.param(t(&[2], &[1., -2.]));
    let loss = x.mul(x).unwrap().sum_all().unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2., -4.]);
    assert_eq!(tape.backward(loss), Err(TensorError::BackwardTwice));
    tape.reset_grads();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2., -4.]);
}

#[test]
fn backward_rejects_bad_roots() {
    let tape = Tape::new();
    let x = tape.param(Tensor::ones([2]));
    assert!(matches!(
        tape.backward(x),
        Err(TensorError::NonScalarRoot(_))
    ));
    let c = tape.constant(Tensor::scalar(3.0));
    assert_eq!(tape.backward(c), Err(TensorError::DetachedRoot));
    let other = Tape::new();
    let y = other.param(Tensor::scalar(1.0));
    assert_eq!(tape.backward(y), Err(TensorError::ForeignVar));
}

type LossFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

/// Weighted sum so every output element carries a distinct cotangent.
fn weigh<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, &out.shape(), 1.0);
    Ok(out.mul(out.tape().constant(w))?.sum_all()?)
}

fn check_op(name: &str, shapes: &[&[usize]], f: LossFn, scale: f64) {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("{name}.{i}"), random_tensor(&mut rng, s, scale)))
            .collect();
        let cfg = GradCheckConfig {
            max_coords: 64,
            seed,
            ..Default::default()
        };
        let report = gradcheck::check(&leaves, f, &cfg).unwrap();
        let worst = gradcheck::worst(&report);
        assert!(worst < 1e-4, "{name} seed {seed}: {report:?}");
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    check_op(
        "matmul",
        &[&[3, 4], &[4, 2]],
        |_, v| weigh(v[0].matmul(v[1])?, 7),
        1.0,
    );
}

#[test]
fn matmul_gradient_tight_tolerance() {
    // linear in each operand, so central differences are exact up to rounding
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let leaves = vec![
        ("a".to_string(), random_tensor(&mut rng, &[3, 4], 1.0)),
        ("b".to_string(), random_tensor(&mut rng, &[4, 2], 1.0)),
    ];
    let cfg = GradCheckConfig {
        max_coords: 16,
        ..Default::default()
    };
    let report = gradcheck::check(&leaves, |_, v| weigh(v[0].matmul(v[1])?, 3), &cfg).unwrap();
    assert!(gradcheck::worst(&report) < 1e-6, "{report:?}");
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    check_op(
        "add",
        &[&[2, 3], &[3]],
        |_, v| weigh(v[0].add(v[1])?, 1),
        1.0,
    );
    check_op(
        "sub",
        &[&[2, 1], &[1, 3]],
        |_, v| weigh(v[0].sub(v[1])?, 1),
        1.0,
    );
    check_op(
        "mul",
        &[&[2, 3], &[2, 1]],
        |_, v| weigh(v[0].mul(v[1])?, 1),
        1.0,
    );
    check_op(
        "div",
        &[&[2, 3], &[3]],
        |_, v| weigh(v[0].div(v[1].exp()?)?, 1),
        1.0,
    );
    check_op("exp", &[&[5]], |_, v| weigh(v[0].exp()?, 2), 1.0);
    check_op("neg", &[&[5]], |_, v| weigh(v[0].neg()?, 2), 1.0);
    check_op("sigmoid", &[&[5]], |_, v| weigh(v[0].sigmoid()?, 2), 3.0);
    check_op("softplus", &[&[5]], |_, v| weigh(v[0].softplus()?, 2), 3.0);
    check_op("relu", &[&[6]], |_, v| weigh(v[0].relu()?, 2), 1.0);
    check_op("sqrt", &[&[5]], |_, v| weigh(v[0].exp()?.sqrt()?, 2), 1.0);
    check_op(
        "ln",
        &[&[5]],
        |_, v| weigh(v[0].exp()?.add_scalar(0.5)?.ln()?, 2),
        1.0,
    );
    check_op("scale", &[&[5]], |_, v| weigh(v[0].scale(-2.5)?, 2), 1.0);
}

#[test]
fn reduction_gradients_match_finite_differences() {
    check_op("sum", &[&[3, 4]], |_, v| weigh(v[0].sum(1, false)?, 3), 1.0);
    check_op(
        "mean",
        &[&[3, 4, 2]],
        |_, v| weigh(v[0].mean(1, true)?, 3),
        1.0,
    );
    check_op("max", &[&[3, 4]], |_, v| weigh(v[0].max(0, false)?, 3), 1.0);
    check_op(
        "variance",
        &[&[3, 5]],
        |_, v| weigh(v[0].variance(1, false)?, 3),
        1.0,
    );
    check_op(
        "softmax",
        &[&[3, 4]],
        |_, v| weigh(v[0].softmax(1)?, 3),
        2.0,
    );
    check_op(
        "log_softmax",
        &[&[3, 4]],
        |_, v| weigh(v[0].log_softmax(0)?, 3),
        2.0,
    );
}

#[test]
fn layout_and_conv_gradients_match_finite_differences() {
    check_op(
        "conv1d",
        &[&[2, 3, 7], &[4, 3, 3]],
        |_, v| weigh(v[0].conv1d(v[1])?, 4),
        1.0,
    );
    check_op(
        "conv1d_2d",
        &[&[3, 5], &[2, 3, 1]],
        |_, v| weigh(v[0].conv1d(v[1])?, 4),
        1.0,
    );
    check_op(
        "permute",
        &[&[2, 3, 4]],
        |_, v| weigh(v[0].permute(&[2, 0, 1])?, 4),
        1.0,
    );
    check_op(
        "reshape",
        &[&[2, 6]],
        |_, v| weigh(v[0].reshape([3, 4])?, 4),
        1.0,
    );
    check_op(
        "concat",
        &[&[2, 3], &[2, 1]],
        |_, v| weigh(Var::concat(&[v[0], v[1]], 1)?, 4),
        1.0,
    );
    check_op(
        "index_select",
        &[&[4, 3]],
        |_, v| weigh(v[0].index_select(0, &[3, 1, 1, 0])?, 4),
        1.0,
    );
    check_op(
        "narrow",
        &[&[4, 3]],
        |_, v| weigh(v[0].narrow(0, 1, 2)?, 4),
        1.0,
    );
}

#[test]
fn tape_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let a = tape.param(random_tensor(&mut rng, &[4, 6], 1.0));
        let b = tape.param(random_tensor(&mut rng, &[6, 3], 1.0));
        let y = a.matmul(b).unwrap().sigmoid().unwrap().softmax(1).unwrap();
        let loss = weigh(y, 11).unwrap();
        tape.backward(loss).unwrap();
        (loss.value(), a.grad().unwrap(), b.grad().unwrap())
    };
    let (l1, a1, b1) = run();
    let (l2, a2, b2) = run();
    assert!(l1.bit_eq(&l2) && a1.bit_eq(&a2) && b1.bit_eq(&b2));
}

proptest! {
    #[test]
    fn addition_is_associative(vals in proptest::collection::vec(-1e3f64..1e3, 18)) {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &vals[..6]));
        let b = tape.constant(t(&[2, 3], &vals[6..12]));
        let c = tape.constant(t(&[2, 3], &vals[12..]));
        let left = a.add(b).unwrap().add(c).unwrap().value();
        let right = a.add(b.add(c).unwrap()).unwrap().value();
        prop_assert!(left.max_abs_diff(&right) <= 1e-12);
    }

    #[test]
    fn softmax_sums_to_one(vals in proptest::collection::vec(-700f64..700.0, 12)) {
        let tape = Tape::new();
        let x = tape.constant(t(&[3, 4], &vals));
        for axis in 0..2 {
            let s = x.softmax(axis).unwrap().sum(axis, false).unwrap().value();
            for v in s.data() {
                prop_assert!((v - 1.0).abs() <= 1e-12);
            }
        }
    }
}
