use super::gradcheck::{check, DEFAULT_STEP};
use super::*;
use crate::error::Error;
use proptest::prelude::*;

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn identity_matmul() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(2));
    let a = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = tape.matmul(i, a).unwrap();
    assert_eq!(tape.value(out).values(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn zero_matmul_annihilates() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::new(vec![3, 4], (0..12).map(f64::from).collect()).unwrap());
    let out = tape.matmul(z, b).unwrap();
    assert_eq!(tape.value(out).shape(), &[2, 4]);
    assert!(tape.value(out).values().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn identity_matmul_gradcheck() {
    let b = m(&[&[0.3, -1.2], &[2.0, 0.7]]);
    let r = check(
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            let sq = t.mul(p, p)?;
            Ok(t.sum(sq))
        },
        &[Tensor::identity(2), b],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(r.max_rel_error() < 1e-6, "{:?}", r.rel_errors);
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let z = tape.param(Tensor::scalar(0.0));
    let e = tape.exp(z);
    assert_eq!(tape.value(e).item().unwrap(), 1.0);

    let x = tape.param(Tensor::scalar(-3.0));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).item().unwrap(), 0.0);
    tape.backward(r).unwrap();
    assert_eq!(tape.grad(x).unwrap().values(), &[0.0]);
}

#[test]
fn tanh_gradient_at_zero_is_one() {
    let r = check(|t, v| Ok(t.tanh(v[0])), &[Tensor::scalar(0.0)], DEFAULT_STEP).unwrap();
    assert!((r.numeric[0].values()[0] - 1.0).abs() < 1e-9);
    assert_eq!(r.analytic[0].values()[0], 1.0);
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(tape.log(a), Err(Error::Domain(_))));
    let b = tape.constant(Tensor::vector(vec![-1.0]));
    assert!(matches!(tape.log(b), Err(Error::Domain(_))));
}

#[test]
fn log_softmax_symmetric_and_stable() {
    let mut tape = Tape::new();
    let a = tape.constant(m(&[&[0.0, 0.0], &[1000.0, 0.0], &[-1e4, 1e4]]));
    let ls = tape.log_softmax(a).unwrap();
    let v = tape.value(ls);
    assert!((v.get(0, 0) - 0.5f64.ln()).abs() < 1e-15);
    assert!((v.get(0, 1) - 0.5f64.ln()).abs() < 1e-15);
    for i in 0..3 {
        assert!(v.row(i).iter().all(|x| x.is_finite()));
        let s: f64 = v.row(i).iter().map(|x| x.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn log_softmax_rejects_single_column() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[3, 1]));
    assert!(tape.log_softmax(a).is_err());
}

#[test]
fn reductions() {
    let mut tape = Tape::new();
    let v = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let mean = tape.mean(v);
    assert_eq!(tape.value(mean).item().unwrap(), 2.0);

    let a = tape.constant(m(&[&[1.0, 3.0], &[3.0, 5.0]]));
    let col = tape.mean_axis(a, 0).unwrap();
    assert_eq!(tape.value(col).values(), &[2.0, 4.0]);
    assert!(matches!(tape.sum_axis(a, 2), Err(Error::Dimension(_))));

    let s = tape.sum(v);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap().values(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_contract() {
    let mut tape = Tape::new();
    let p = tape.param(m(&[&[1.0, -2.0], &[0.5, 4.0]]));
    let q = tape.param(Tensor::vector(vec![7.0]));
    let s = tape.sum(p);
    // Loss must be scalar.
    assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(s).unwrap().values(), &[1.0]);
    assert_eq!(tape.grad(p).unwrap().values(), &[1.0; 4]);
    // Unreachable parameters get zeros.
    assert_eq!(tape.grad(q).unwrap().values(), &[0.0]);
    // A second pass requires an explicit reset.
    assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    tape.reset_grads();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(p).unwrap().values(), &[1.0; 4]);
}

#[test]
fn shared_subexpression_accumulates() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.add(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().values(), &[2.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap().values(), &[3.0, 4.0]);
}

#[test]
fn xlogx_at_zero() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::vector(vec![0.0, 0.5]));
    let h = tape.xlogx(p).unwrap();
    assert_eq!(tape.value(h).values()[0], 0.0);
    let s = tape.sum(h);
    tape.backward(s).unwrap();
    assert!(tape.grad(p).unwrap().all_finite());
}

fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

/// Keeps values away from kinks (relu at 0, clamp bounds) so central
/// differences are valid.
fn away_from(t: Tensor, points: &[f64]) -> Tensor {
    t.map(|v| {
        let mut v = v;
        for &p in points {
            if (v - p).abs() < 1e-3 {
                v = p + 1e-2;
            }
        }
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composite_gradients_match_finite_differences(
        a in matrix_strategy(3, 4),
        w in matrix_strategy(4, 2),
        b in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let r = check(
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add_row(h, v[2])?;
                let h = t.tanh(h);
                let ls = t.log_softmax(h)?;
                let e = t.exp(ls);
                let ent = t.xlogx(e)?;
                let m = t.mean_axis(ent, 0)?;
                Ok(t.sum(m))
            },
            &[a, w, Tensor::vector(b)],
            DEFAULT_STEP,
        ).unwrap();
        prop_assert!(r.max_rel_error() < 1e-4, "{:?}", r.rel_errors);
    }

    #[test]
    fn piecewise_and_layernorm_gradients(a in matrix_strategy(3, 5), g in prop::collection::vec(0.5f64..1.5, 5)) {
        let a = away_from(a, &[0.0, -1.0, 1.0]);
        let r = check(
            |t, v| {
                let r = t.relu(v[0]);
                let c = t.clamp(v[0], -1.0, 1.0);
                let s = t.add(r, c)?;
                let n = t.layer_norm(s, 1e-5)?;
                let n = t.mul_row(n, v[1])?;
                let sq = t.mul(n, n)?;
                let q = t.sum_axis(sq, 1)?;
                let q = t.add_scalar(q, 1.0);
                let l = t.log(q)?;
                let l = t.scale(l, 0.7);
                Ok(t.mean(l))
            },
            &[a, Tensor::vector(g)],
            DEFAULT_STEP,
        ).unwrap();
        prop_assert!(r.max_rel_error() < 1e-4, "{:?}", r.rel_errors);
    }

    #[test]
    fn scalar_broadcast_gradients(a in matrix_strategy(2, 3), s in -2.0f64..2.0) {
        let r = check(
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                let q = t.sub(v[1], p)?;
                let q = t.add(q, v[1])?;
                let q = t.mul(q, q)?;
                Ok(t.sum(q))
            },
            &[a, Tensor::scalar(s)],
            DEFAULT_STEP,
        ).unwrap();
        prop_assert!(r.max_rel_error() < 1e-4, "{:?}", r.rel_errors);
    }

    #[test]
    fn log_softmax_rows_normalized(v in prop::collection::vec(-1e4f64..1e4, 12)) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(3, 4, v).unwrap());
        let ls = tape.log_softmax(a).unwrap();
        for i in 0..3 {
            let s: f64 = tape.value(ls).row(i).iter().map(|x| x.exp()).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}
