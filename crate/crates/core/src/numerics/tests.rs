use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn arr(shape: &[usize], v: &[f64]) -> Array<f64> {
    Array::from_f64(shape, v).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array<f64> {
    Array::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights so
/// every output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(tape.shape(y), &mut rng));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn check(params: Vec<Array<f64>>, f: impl FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>) -> GradCheckReport {
    let mut params = params;
    let report = grad_check(&mut params, f, 1e-5, 1e-6).unwrap();
    assert!(report.passed, "{report:?}");
    report
}

#[test]
fn identity_times_matrix() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.constant(arr(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let a_val = arr(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    let a = tape.constant(a_val.clone());
    let out = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.value(out), &a_val);
}

#[test]
fn small_matmul_by_hand() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Array::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let b = tape.constant(Array::from_f64(&[2, 1], &[0., 1.]).unwrap());
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(out), &[2, 1]);
    assert_eq!(tape.value(out).data(), &[2.0, 4.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Array::zeros(&[2, 3]));
    let b = tape.constant(Array::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, NumericsError::Shape { .. }));
}

#[test]
fn matmul_gradient_is_b_transposed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let mut tape = Tape::new();
    let av = tape.param(a);
    let bv = tape.constant(b.clone());
    let prod = tape.matmul(av, bv).unwrap();
    let s = tape.sum(prod);
    let g = tape.backward(s).unwrap();
    // d sum(AB)/dA[i][k] = sum_j B[k][j]
    let ga = g.get(av).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..2).map(|j| b.data()[k * 2 + j]).sum();
            assert!((ga.data()[i * 4 + k] - expect).abs() < 1e-12);
        }
    }
    check(vec![random(&[3, 4], &mut rng), b], |t, p| {
        let y = t.matmul(p[0], p[1])?;
        Ok(t.sum(y))
    });
}

#[test]
fn softmax_symmetry_and_overflow() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Array::from_f64(&[2], &[0.0, 0.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    let x = tape.constant(Array::from_f64(&[2], &[1000.0, 1000.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    assert!(matches!(tape.softmax(x, 1), Err(NumericsError::Axis { .. })));
}

#[test]
fn layer_norm_constant_rows() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Array::full(&[2, 4], 3.0));
    let g = tape.constant(Array::full(&[4], 1.0));
    let b0 = tape.constant(Array::zeros(&[4]));
    let b = tape.constant(Array::full(&[4], 0.7));
    let y = tape.layer_norm(x, g, b0, LAYER_NORM_EPS).unwrap();
    assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-9));
    let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
    assert!(tape.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-9));
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random(&[3, 16], &mut rng));
    let g = tape.constant(Array::full(&[16], 1.0));
    let b = tape.constant(Array::zeros(&[16]));
    let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
    for row in tape.value(y).data().chunks(16) {
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn gelu_ce_mse_trivial_values() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Array::zeros(&[1]));
    let g = tape.gelu(z);
    assert_eq!(tape.value(g).item(), 0.0);

    let logits = tape.constant(arr(&[2, 3], &[0.0, 800.0, 0.0, 900.0, 0.0, 0.0]));
    let ce = tape.cross_entropy(logits, &[1, 0]).unwrap();
    assert!(tape.value(ce).item().abs() < 1e-12);

    let p = arr(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
    let pv = tape.constant(p.clone());
    let l = tape.mse(pv, &p, &[true, false, true, true]).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn mse_full_mask_is_plain_mean() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(arr(&[4], &[1.0, 2.0, 3.0, 4.0]));
    let t = arr(&[4], &[0.0, 0.0, 1.0, 1.0]);
    let l = tape.mse(p, &t, &[true; 4]).unwrap();
    assert!((tape.value(l).item() - (1.0 + 4.0 + 4.0 + 9.0) / 4.0).abs() < 1e-12);
    // partial mask normalizes by the selected count
    let l = tape.mse(p, &t, &[false, true, false, true]).unwrap();
    assert!((tape.value(l).item() - (4.0 + 9.0) / 2.0).abs() < 1e-12);
}

#[test]
fn mse_empty_mask_is_degenerate() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Array::zeros(&[3]));
    let err = tape.mse(p, &Array::zeros(&[3]), &[false; 3]).unwrap_err();
    assert_eq!(err, NumericsError::DegenerateMask);
}

#[test]
fn shared_node_accumulates_both_consumers() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(arr(&[3], &[1.0, 2.0, 3.0]));
    let a = tape.scale(x, 2.0);
    let b = tape.scale(x, 5.0);
    let s = tape.add(a, b).unwrap();
    let out = tape.sum(s);
    let g = tape.backward(out).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[7.0, 7.0, 7.0]);
}

#[test]
fn every_contributing_param_gets_a_gradient() {
    let mut tape = Tape::<f32>::new();
    let a = tape.param(Array::full(&[2, 2], 1.0));
    let b = tape.param(Array::full(&[2], 1.0));
    let unused = tape.param(Array::full(&[2], 1.0));
    let c = tape.constant(Array::full(&[2], 1.0));
    let y = tape.add(a, b).unwrap();
    let y = tape.add(y, c).unwrap();
    let out = tape.sum(y);
    let g = tape.backward(out).unwrap();
    assert_eq!(g.get(a).unwrap().shape(), &[2, 2]);
    assert_eq!(g.get(b).unwrap().shape(), &[2]);
    assert!(g.get(c).is_none());
    assert!(g.get(unused).is_none());
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f32>::new();
    let a = tape.param(Array::zeros(&[2]));
    assert!(matches!(tape.backward(a), Err(NumericsError::NotScalar(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(rows in 1usize..5, cols in 1usize..9, shift in -50.0f64..50.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array::from_fn(&[rows, cols], |_| rng.random_range(-10.0..10.0));
        let shifted = Array::new(x.shape().to_vec(), x.data().iter().map(|v| v + shift).collect()).unwrap();
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(x);
        let b = tape.constant(shifted);
        let ya = tape.softmax(a, 1).unwrap();
        let yb = tape.softmax(b, 1).unwrap();
        for row in tape.value(ya).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
        for (p, q) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn batched_matmul_gradients(batch in 1usize..3, m in 1usize..4, k in 1usize..4, n in 1usize..4, shared in any::<bool>(), trans in any::<bool>(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[batch, m, k], &mut rng);
        let b_shape: Vec<usize> = match (shared, trans) {
            (true, false) => vec![k, n],
            (true, true) => vec![n, k],
            (false, false) => vec![batch, k, n],
            (false, true) => vec![batch, n, k],
        };
        let b = random(&b_shape, &mut rng);
        check(vec![a, b], |t, p| {
            let y = if trans { t.matmul_nt(p[0], p[1])? } else { t.matmul(p[0], p[1])? };
            weighted_sum(t, y, seed)
        });
    }

    #[test]
    fn elementwise_and_norm_gradients(rows in 1usize..4, cols in 2usize..7, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[rows, cols], &mut rng);
        let bias = random(&[cols], &mut rng);
        let gamma = random(&[cols], &mut rng);
        let beta = random(&[cols], &mut rng);
        let s = Array::scalar(rng.random_range(0.5..2.0));
        check(vec![x.clone(), bias.clone()], |t, p| {
            let y = t.add(p[0], p[1])?;
            let y = t.mul(y, p[1])?;
            let y = t.gelu(y);
            weighted_sum(t, y, seed)
        });
        check(vec![x.clone(), s], |t, p| {
            let y = t.div_scalar(p[0], p[1])?;
            let y = t.softmax(y, 1)?;
            weighted_sum(t, y, seed)
        });
        check(vec![x.clone()], |t, p| {
            let y = t.softmax(p[0], 0)?;
            weighted_sum(t, y, seed)
        });
        check(vec![x.clone(), gamma, beta], |t, p| {
            let y = t.layer_norm(p[0], p[1], p[2], LAYER_NORM_EPS)?;
            weighted_sum(t, y, seed)
        });
        check(vec![x], |t, p| {
            let y = t.l2_normalize(p[0]);
            weighted_sum(t, y, seed)
        });
    }

    #[test]
    fn layout_op_gradients(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[d0, d1, d2], &mut rng);
        let other = random(&[d0, 2, d2], &mut rng);
        check(vec![x.clone()], |t, p| {
            let y = t.permute(p[0], &[2, 0, 1])?;
            let y = t.reshape(y, &[d2 * d0, d1])?;
            weighted_sum(t, y, seed)
        });
        check(vec![x.clone(), other], |t, p| {
            let y = t.concat(&[p[0], p[1]], 1)?;
            let y = t.narrow(y, 1, 1, d1)?;
            weighted_sum(t, y, seed)
        });
        let idx: Vec<usize> = (0..5).map(|i| (i * 7 + seed as usize) % d0).collect();
        check(vec![x.clone()], |t, p| {
            let y = t.gather_rows(p[0], &idx)?;
            weighted_sum(t, y, seed)
        });
        check(vec![x], |t, p| {
            let y = t.mean_axis(p[0], 1)?;
            weighted_sum(t, y, seed)
        });
    }

    #[test]
    fn loss_gradients(rows in 1usize..5, classes in 2usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&[rows, classes], &mut rng);
        let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        check(vec![logits.clone()], |t, p| t.cross_entropy(p[0], &targets));
        let target = random(&[rows, classes], &mut rng);
        let mut mask: Vec<bool> = (0..rows * classes).map(|_| rng.random_bool(0.5)).collect();
        mask[0] = true;
        check(vec![logits], |t, p| t.mse(p[0], &target, &mask));
    }
}
