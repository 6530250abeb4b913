use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Checks d(loss)/d(inputs) for a graph built by `build` against central
/// differences on every input entry.
fn check_op<F>(inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        let out = build(&mut tape, &vars);
        // Weighted sum so every output entry carries a distinct gradient.
        let shape = tape.value(out).shape();
        let w = Tensor::from_vec(
            shape[0],
            shape[1],
            (0..shape[0] * shape[1]).map(|i| 0.3 + (i as f64 * 0.71).sin()).collect(),
        )
        .unwrap();
        let w = tape.leaf(w).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        (tape, vars, loss)
    };
    let (tape, vars, loss) = eval(&inputs);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-5;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, vars[k]);
        for i in 0..input.len() {
            let mut up = inputs.clone();
            up[k].data_mut()[i] += h;
            let mut down = inputs.clone();
            down[k].data_mut()[i] -= h;
            let (tu, _, lu) = eval(&up);
            let (td, _, ld) = eval(&down);
            let numeric = (tu.value(lu).get(0, 0) - td.value(ld).get(0, 0)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "input {k} entry {i}: analytic {a}, numeric {numeric}");
        }
    }
}

#[test]
fn gradients_of_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(3, 4, &mut rng);
    let b = random(3, 4, &mut rng);
    check_op(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check_op(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    check_op(vec![a.clone()], |t, v| t.affine(v[0], -0.7, 2.0).unwrap());
    check_op(vec![a.clone()], |t, v| t.tanh(v[0]).unwrap());
    check_op(vec![a.clone()], |t, v| t.sigmoid(v[0]).unwrap());
    check_op(vec![a.clone()], |t, v| t.relu(v[0]).unwrap());
    check_op(vec![a.clone()], |t, v| t.softmax_rows(v[0]).unwrap());
    check_op(vec![a.map(|x| x.abs() + 0.1)], |t, v| t.pow(v[0], 2.0).unwrap());
    check_op(vec![a.map(|x| x.abs() + 0.1)], |t, v| t.log_floor(v[0], 1e-12).unwrap());
    check_op(vec![a.clone()], |t, v| t.squared_norm(v[0]).unwrap());
    check_op(vec![a], |t, v| t.norm(v[0]).unwrap());
}

#[test]
fn gradients_of_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(3, 2, &mut rng);
    let b = random(3, 3, &mut rng);
    let c = random(2, 2, &mut rng);
    let row = random(1, 2, &mut rng);
    check_op(vec![a.clone(), b.clone(), random(3, 1, &mut rng)], |t, v| {
        t.concat_cols(&[v[0], v[1], v[2]]).unwrap()
    });
    check_op(vec![a.clone(), c.clone()], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap());
    check_op(vec![b.clone()], |t, v| t.slice_rows(v[0], 1, 2).unwrap());
    check_op(vec![b.clone()], |t, v| t.slice_cols(v[0], 1, 1).unwrap());
    check_op(vec![a.clone(), row], |t, v| t.add_row(v[0], v[1]).unwrap());
    check_op(vec![b.clone(), a], |t, v| t.matmul(v[0], v[1]).unwrap());
    check_op(vec![b], |t, v| t.gather(v[0], &[2, 0, 1]).unwrap());
}

#[test]
fn gradient_of_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(4, 5, &mut rng);
    let g = random(1, 5, &mut rng);
    let b = random(1, 5, &mut rng);
    check_op(vec![x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap());
}

#[test]
fn concat_backward_splits_by_width() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
    let b = tape.leaf(Tensor::from_rows(&[[3.0]]).unwrap()).unwrap();
    let c = tape.leaf(Tensor::from_rows(&[[4.0]]).unwrap()).unwrap();
    let cat = tape.concat_cols(&[a, b, c]).unwrap();
    assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0, 4.0]);
    let w = tape.leaf(Tensor::from_rows(&[[10.0, 20.0, 30.0, 40.0]]).unwrap()).unwrap();
    let p = tape.mul(cat, w).unwrap();
    let loss = tape.sum(p).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[10.0, 20.0]);
    assert_eq!(g.get(b).unwrap().data(), &[30.0]);
    assert_eq!(g.get(c).unwrap().data(), &[40.0]);
}

#[test]
fn concat_rejects_row_mismatch() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(2, 1)).unwrap();
    let b = tape.leaf(Tensor::zeros(3, 1)).unwrap();
    assert!(matches!(tape.concat_cols(&[a, b]), Err(Error::Shape { .. })));
}

#[test]
fn activation_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::row_vector(&[-1.0, 0.0, 2.0])).unwrap();
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = tape.leaf(Tensor::zeros(1, 3)).unwrap();
    let s = tape.softmax_rows(z).unwrap();
    for &p in tape.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(sigmoid(0.0), 0.5);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let ones = tape.leaf(Tensor::full(1, 3, 1.0)).unwrap();
    let zeros = tape.leaf(Tensor::zeros(1, 3)).unwrap();
    let x = tape.leaf(Tensor::row_vector(&[5.0, 5.0, 5.0])).unwrap();
    let y = tape.layer_norm(x, ones, zeros).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

    let ones2 = tape.leaf(Tensor::full(1, 2, 1.0)).unwrap();
    let zeros2 = tape.leaf(Tensor::zeros(1, 2)).unwrap();
    let x = tape.leaf(Tensor::row_vector(&[1.0, -1.0])).unwrap();
    let y = tape.layer_norm(x, ones2, zeros2).unwrap();
    // mean 0, variance 1: output is x / sqrt(1 + eps).
    let s = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    assert!(tape.value(y).max_abs_diff(&Tensor::row_vector(&[s, -s])) < 1e-15);
    assert!(tape.value(y).max_abs_diff(&Tensor::row_vector(&[1.0, -1.0])) < 1e-5);

    let gain = tape.leaf(Tensor::zeros(1, 2)).unwrap();
    let bias = tape.leaf(Tensor::full(1, 2, 0.25)).unwrap();
    let y = tape.layer_norm(x, gain, bias).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25, 0.25]);
}

#[test]
fn dropout_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(4, 5, 2.0)).unwrap();
    assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.4, false, &mut rng).unwrap(), x);
    assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());

    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(4, 5, 2.0)).unwrap();
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        tape.value(y).clone()
    };
    let a = run(11);
    assert_eq!(a, run(11));
    assert!(a.data().iter().all(|&v| v == 0.0 || v == 4.0));
}

#[test]
fn backward_semantics() {
    // constant loss: every leaf that does not feed it gets zeros.
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::full(2, 2, 3.0)).unwrap();
    let c = tape.leaf(Tensor::scalar(5.0)).unwrap();
    let grads = tape.backward(c).unwrap();
    assert!(grads.get(w).is_none());
    assert_eq!(grads.get_or_zeros(&tape, w), Tensor::zeros(2, 2));

    // ||W||^2 has gradient 2W.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let wv = random(3, 2, &mut rng);
    let mut tape = Tape::new();
    let w = tape.leaf(wv.clone()).unwrap();
    let loss = tape.squared_norm(w).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(w).unwrap().max_abs_diff(&wv.scale(2.0)) < 1e-15);

    // sum(W x): gradient is x^T repeated over rows.
    let mut tape = Tape::new();
    let w = tape.leaf(random(2, 3, &mut rng)).unwrap();
    let xv = Tensor::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
    let x = tape.leaf(xv).unwrap();
    let y = tape.matmul(w, x).unwrap();
    let loss = tape.sum(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

    // non-scalar loss
    assert!(tape.backward(y).is_err());
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::new();
    assert!(matches!(
        tape.leaf(Tensor::scalar(f64::NAN)),
        Err(Error::NonFinite { .. })
    ));
    let x = tape.leaf(Tensor::scalar(1e300)).unwrap();
    assert!(matches!(tape.mul(x, x), Err(Error::NonFinite { op: "mul" })));
}

#[test]
fn backward_is_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let a = tape.leaf(random(4, 3, &mut rng)).unwrap();
        let b = tape.leaf(random(3, 3, &mut rng)).unwrap();
        let h = tape.matmul(a, b).unwrap();
        let h = tape.tanh(h).unwrap();
        let p = tape.softmax_rows(h).unwrap();
        let l = tape.gather(p, &[0, 1, 2, 0]).unwrap();
        let l = tape.log_floor(l, 1e-12).unwrap();
        let loss = tape.mean(l).unwrap();
        let g = tape.backward(loss).unwrap();
        (g.get(a).unwrap().clone(), g.get(b).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-30.0f64..30.0, 12)) {
        let x = Tensor::from_vec(3, 4, values).unwrap();
        let p = softmax_rows(&x);
        for r in 0..3 {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn layer_norm_standardises_rows(values in prop::collection::vec(-50.0f64..50.0, 8)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(2, 4, values.clone()).unwrap()).unwrap();
        let g = tape.leaf(Tensor::full(1, 4, 1.0)).unwrap();
        let b = tape.leaf(Tensor::zeros(1, 4)).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        for r in 0..2 {
            let row = &values[r * 4..r * 4 + 4];
            let mu = row.iter().sum::<f64>() / 4.0;
            let var_in = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
            let out = tape.value(y).row(r);
            let mean = out.iter().sum::<f64>() / 4.0;
            let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            prop_assert!(mean.abs() <= 1e-9);
            // The variance floor shrinks the output variance to v / (v + eps);
            // the unit-variance tolerance is only reachable for spread rows.
            prop_assert!((var - var_in / (var_in + LAYER_NORM_EPS)).abs() < 1e-9);
            if var_in >= 10.0 {
                prop_assert!((var - 1.0).abs() <= 1e-6);
            }
        }
    }
}
