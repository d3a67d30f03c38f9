use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces `v` to a scalar through a fixed random weighting, so that every
/// output entry contributes a distinct amount to the loss.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = random(g.shape(v), &mut rng);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn check(f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>, x: &Tensor<f64>) -> FdReport {
    let report = check_input_gradient(f, x, &FdOptions::default()).unwrap();
    assert!(report.passed, "{report:?}");
    report
}

const SHAPES: [(usize, usize); 5] = [(1, 1), (2, 3), (3, 2), (4, 5), (1, 7)];

#[test]
fn softmax_of_uniform_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 4], 0.3));
    let s = g.softmax(x).unwrap();
    assert!(g.value(s).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
}

#[test]
fn layer_norm_of_standardized_input_is_identity() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::matrix(1, 4, &[-1.0, 1.0, -1.0, 1.0]).unwrap());
    let gain = g.constant(Tensor::full(&[4], 1.0));
    let bias = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn activations_vanish_at_zero() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 1]));
    let a = g.gelu(x);
    let b = g.tanh(x);
    assert_eq!(g.value(a).item(), 0.0);
    assert_eq!(g.value(b).item(), 0.0);
}

#[test]
fn square_has_derivative_six_at_three() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
}

#[test]
fn cross_entropy_gradient_at_uniform_logits() {
    let k = 5;
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[1, k]));
    let loss = g.cross_entropy(x, &[Some(2)]).unwrap();
    assert!((g.value(loss).item() - (k as f64).ln()).abs() < 1e-12);
    let grad = g.backward(loss).unwrap().get(x).unwrap().clone();
    for (c, &v) in grad.data().iter().enumerate() {
        let expected = if c == 2 { 1.0 / k as f64 - 1.0 } else { 1.0 / k as f64 };
        assert!((v - expected).abs() < 1e-12);
    }
}

#[test]
fn shared_subexpressions_accumulate() {
    // y = x*x + 3x  =>  dy/dx = 2x + 3
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(2.0));
    let sq = g.mul(x, x).unwrap();
    let lin = g.scale(x, 3.0);
    let y = g.add(sq, lin).unwrap();
    assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 7.0);
}

#[test]
fn unused_leaves_get_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(2.0));
    let unused = g.leaf(Tensor::zeros(&[2, 2]));
    let y = g.scale(x, 2.0);
    let grads = g.backward(y).unwrap();
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.get_or_zero(&g, unused), Tensor::zeros(&[2, 2]));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2, 2]));
    assert_eq!(g.backward(x).unwrap_err(), AutodiffError::NonScalarLoss(vec![2, 2]));
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(&[2, 3]));
    let b = g.leaf(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        AutodiffError::Shape {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("matmul"));
    let c = g.leaf(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, c), Err(AutodiffError::Shape { op: "add", .. })));
    assert!(matches!(g.embedding_lookup(a, &[5]), Err(AutodiffError::Index { .. })));
}

#[test]
fn softmax_rows_sum_to_one_and_masking_zeroes_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f32>::new();
    let x = g.constant(random(&[4, 6], &mut rng).cast());
    let s = g.masked_softmax(x, 4).unwrap();
    for r in 0..4 {
        let row = g.value(s).row(r);
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(&row[4..], &[0.0, 0.0]);
    }
}

#[test]
fn cross_entropy_is_non_negative_and_respects_ignore() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(random(&[3, 4], &mut rng));
    let loss = g.cross_entropy(x, &[Some(1), None, Some(3)]).unwrap();
    assert!(g.value(loss).item() >= 0.0);
    let grad = g.backward(loss).unwrap().get(x).unwrap().clone();
    assert!(grad.row(1).iter().all(|&v| v == 0.0));
    assert!(g.cross_entropy(x, &[None, None, None]).is_err());
}

#[test]
fn dropout_is_identity_in_eval_mode() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::full(&[3, 3], 2.0));
    let y = g.dropout(x, 0.5);
    assert_eq!(x, y);
}

#[test]
fn dropout_is_seeded_and_unbiased_in_training() {
    let run = |seed| {
        let mut g = Graph::<f64>::training(seed);
        let x = g.leaf(Tensor::full(&[100, 100], 1.0));
        let y = g.dropout(x, 0.1);
        g.value(y).clone()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    let mean = run(5).data().iter().sum::<f64>() / 10_000.0;
    assert!((mean - 1.0).abs() < 0.05);
}

#[test]
fn linear_function_gradient_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&[3, 4], &mut rng);
    let x = random(&[4, 1], &mut rng);
    let report = check_input_gradient(
        |g, x| {
            let a = g.constant(a.clone());
            let y = g.matmul(a, x)?;
            Ok(g.sum(y))
        },
        &x,
        &FdOptions {
            tolerance: 1e-6,
            ..FdOptions::default()
        },
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn three_layer_mlp_passes_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f64>::new();
    for (i, (a, b)) in [(5, 8), (8, 6), (6, 3)].into_iter().enumerate() {
        store.insert(format!("w{i}"), random(&[a, b], &mut rng));
        store.insert(format!("b{i}"), random(&[b], &mut rng));
    }
    let input = random(&[4, 5], &mut rng);
    let report = check_param_gradients(
        &store,
        |g, p| {
            let mut h = g.constant(input.clone());
            for i in 0..3 {
                h = g.matmul(h, p[&format!("w{i}")])?;
                h = g.add(h, p[&format!("b{i}")])?;
                if i < 2 {
                    h = g.tanh(h);
                }
            }
            g.cross_entropy(h, &[Some(0), Some(2), None, Some(1)])
        },
        &FdOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn corrupted_backward_rule_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&[2, 3], &mut rng);
    // Claims d/dx sum(x^2) = x instead of 2x.
    let report = check_input_gradient(
        |g, x| {
            let v = g.value(x).clone();
            let value = v.data().iter().map(|a| a * a).sum();
            g.custom_scalar(&[x], value, vec![v])
        },
        &x,
        &FdOptions::default(),
    )
    .unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 0.4);
}

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (m, n) = SHAPES[seed as usize];
        let x = random(&[m, n], &mut rng);
        let other = random(&[m, n], &mut rng);
        let right = random(&[n, 3], &mut rng);
        let bias = random(&[n], &mut rng);
        let gain = random(&[n], &mut rng);

        check(|g, x| { let w = g.constant(right.clone()); let y = g.matmul(x, w)?; project(g, y, seed) }, &x);
        check(|g, x| { let w = g.constant(random(&[3, m], &mut ChaCha8Rng::seed_from_u64(seed))); let y = g.matmul(w, x)?; project(g, y, seed) }, &x);
        check(|g, x| { let o = g.constant(other.clone()); let y = g.add(x, o)?; project(g, y, seed) }, &x);
        check(|g, x| { let b = g.constant(bias.clone()); let y = g.add(x, b)?; project(g, y, seed) }, &x);
        check(|g, b| { let x = g.constant(other.clone()); let y = g.add(x, b)?; project(g, y, seed) }, &bias);
        check(|g, x| { let o = g.constant(other.clone()); let y = g.sub(o, x)?; project(g, y, seed) }, &x);
        check(|g, x| { let o = g.constant(other.clone()); let y = g.mul(x, o)?; project(g, y, seed) }, &x);
        check(|g, x| { let y = g.mul(x, x)?; project(g, y, seed) }, &x);
        check(|g, x| { let y = g.scale(x, -1.7); project(g, y, seed) }, &x);
        check(|g, x| { let o = g.constant(other.clone()); let y = g.concat(&[o, x, x], 0)?; project(g, y, seed) }, &x);
        check(|g, x| { let o = g.constant(other.clone()); let y = g.concat(&[x, o], 1)?; project(g, y, seed) }, &x);
        check(|g, x| { let y = g.slice(x, 1, n / 2, n - n / 2)?; project(g, y, seed) }, &x);
        check(|g, x| { let y = g.slice(x, 0, m - 1, 1)?; project(g, y, seed) }, &x);
        check(|g, x| { let y = g.transpose(x)?; project(g, y, seed) }, &x);
        check(|g, x| { let y = g.embedding_lookup(x, &[m - 1, 0, m - 1])?; project(g, y, seed) }, &x);
        check(|g, x| { let y = g.softmax(x)?; project(g, y, seed) }, &x);
        check(|g, x| { let y = g.masked_softmax(x, n.div_ceil(2))?; project(g, y, seed) }, &x);
        check(|g, x| { let gn = g.constant(gain.clone()); let b = g.constant(bias.clone()); let y = g.layer_norm(x, gn, b)?; project(g, y, seed) }, &x);
        check(|g, gn| { let x = g.constant(other.clone()); let b = g.constant(bias.clone()); let y = g.layer_norm(x, gn, b)?; project(g, y, seed) }, &gain);
        check(|g, b| { let x = g.constant(other.clone()); let gn = g.constant(gain.clone()); let y = g.layer_norm(x, gn, b)?; project(g, y, seed) }, &bias);
        check(|g, x| { let y = g.gelu(x); project(g, y, seed) }, &x);
        check(|g, x| { let y = g.tanh(x); project(g, y, seed) }, &x);
        check(|g, x| { let y = g.relu(x); project(g, y, seed) }, &x);
        check(|g, x| { let y = g.sigmoid(x); project(g, y, seed) }, &x);
        check(|g, x| {
            let targets: Vec<Option<usize>> = (0..m).map(|r| if r % 3 == 1 { None } else { Some(r % n) }).collect();
            g.cross_entropy(x, &targets)
        }, &x);
        check(|g, x| { let y = g.sum(x); let z = g.mul(y, y)?; Ok(z) }, &x);
        check(|g, x| { let y = g.mean(x); let z = g.mul(y, y)?; Ok(z) }, &x);
        check(|g, x| { let y = g.sum_rows(x)?; project(g, y, seed) }, &x);
        check(|g, x| { let y = g.sum_rows_sorted(x)?; project(g, y, seed) }, &x);
        check(|g, x| { let y = g.max_rows(x)?; project(g, y, seed) }, &x);
        // Dropout with a pinned seed is deterministic, so it is checkable.
        let dropped = check_input_gradient(
            |g, x| {
                let mut gt = Graph::<f64>::training(seed);
                std::mem::swap(&mut g.rng, &mut gt.rng);
                let y = g.dropout(x, 0.3);
                project(g, y, seed)
            },
            &x,
            &FdOptions::default(),
        )
        .unwrap();
        assert!(dropped.passed, "{dropped:?}");
    }
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut g = Graph::<f32>::training(5);
        let x = g.leaf(random(&[4, 6], &mut rng).cast());
        let w = g.leaf(random(&[6, 3], &mut rng).cast());
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h);
        let h = g.dropout(h, 0.2);
        let loss = g.cross_entropy(h, &[Some(0), Some(1), Some(2), Some(0)]).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(loss).clone(), grads.get(x).unwrap().clone(), grads.get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn sorted_column_sums_ignore_row_order() {
    let rows = [[0.1f32, 1e8], [0.2, 1.0], [0.3, -1e8], [1e-7, 3.0]];
    let flat = |order: &[usize]| -> Vec<f32> { order.iter().flat_map(|&r| rows[r]).collect() };
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::new(vec![4, 2], flat(&[0, 1, 2, 3])).unwrap());
    let b = g.constant(Tensor::new(vec![4, 2], flat(&[3, 1, 0, 2])).unwrap());
    let sa = g.sum_rows_sorted(a).unwrap();
    let sb = g.sum_rows_sorted(b).unwrap();
    assert_eq!(g.value(sa).data(), g.value(sb).data());
    let plain = g.sum_rows(a).unwrap();
    assert!((g.value(plain).data()[0] - g.value(sa).data()[0]).abs() < 1e-6);
}
