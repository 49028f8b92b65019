use graphshot_tensor::gradcheck::{check_inputs, DEFAULT_STEP};
use graphshot_tensor::{Mode, NormStats, ParamStore, Tape, Tensor, TensorError, Var, LEAKY_SLOPE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values kept at least `gap` away from zero, for kinked primitives.
fn random_away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..1.0);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Weighted sum with fixed pseudo-random weights so that every output
/// coordinate contributes a distinct amount to the loss.
fn weighted_sum(tape: &mut Tape, v: Var) -> Var {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| ((i as f64) * 0.731 + 0.3).sin()).collect()).unwrap();
    let w = tape.constant(w);
    let prod = tape.mul(v, w).unwrap();
    tape.sum(prod)
}

fn assert_grads<F>(inputs: &[Tensor], tol: f64, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> graphshot_tensor::Result<Var>,
{
    let report = check_inputs(inputs, DEFAULT_STEP, build).unwrap();
    let worst = report.worst().unwrap();
    assert!(report.passed(tol), "worst probe {worst:?}");
}

// ---------------------------------------------------------------- matmul

#[test]
fn matmul_identity_and_dot() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(2));
    let b = tape.constant(Tensor::matrix(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap());
    let out = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.constant(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
    let c = tape.constant(Tensor::matrix(&[&[3.0], &[4.0]]).unwrap());
    let out = tape.matmul(a, c).unwrap();
    assert_eq!(tape.value(out).data(), &[11.0]);
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    let b = Tensor::matrix(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap();
    let build = |t: &mut Tape, v: &[Var]| {
        let b = t.constant(Tensor::matrix(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap());
        let p = t.matmul(v[0], b)?;
        Ok(t.sum(p))
    };
    // Central differences with step 1e-5 give [[2,2],[2,2]].
    let report = check_inputs(std::slice::from_ref(&a), 1e-5, build).unwrap();
    for p in &report.probes {
        assert!((p.numeric - 2.0).abs() < 1e-8, "{p:?}");
    }
    let mut tape = Tape::new();
    let va = tape.variable(a);
    let vb = tape.constant(b);
    let p = tape.matmul(va, vb).unwrap();
    let loss = tape.sum(p);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(va).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(err, TensorError::Shape { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] });
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn matmul_gradcheck_three_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (m, k, n) in [(2, 3, 4), (1, 5, 1), (4, 4, 2)] {
        let inputs = [random(&[m, k], &mut rng), random(&[k, n], &mut rng)];
        assert_grads(&inputs, TOL, |t, v| {
            let p = t.matmul(v[0], v[1])?;
            Ok(weighted_sum(t, p))
        });
    }
}

// ---------------------------------------------------------------- conv2d

#[test]
fn conv2d_zero_input_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 5, 5]));
    let k = tape.constant(random(&[4, 3, 3, 3], &mut rng));
    let y = tape.conv2d(x, k).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 5, 5]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_ones_counts_padded_neighbours() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = tape.conv2d(x, k).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[4], 9.0);
    for corner in [0, 2, 6, 8] {
        assert_eq!(v[corner], 4.0);
    }
    for edge in [1, 3, 5, 7] {
        assert_eq!(v[edge], 6.0);
    }
}

#[test]
fn conv2d_channel_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(tape.conv2d(x, k), Err(TensorError::Shape { op: "conv2d", .. })));
}

#[test]
fn conv2d_kernel_gradient_on_4x4() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[1, 1, 4, 4], &mut rng);
    let k = random(&[1, 1, 3, 3], &mut rng);
    let xc = x.clone();
    assert_grads(&[k], 1e-5, move |t, v| {
        let x = t.constant(xc.clone());
        let y = t.conv2d(x, v[0])?;
        Ok(weighted_sum(t, y))
    });
}

#[test]
fn conv2d_gradcheck_three_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (b, c, f, h, w) in [(1, 1, 1, 4, 4), (2, 2, 3, 3, 5), (1, 3, 2, 6, 2)] {
        let inputs = [random(&[b, c, h, w], &mut rng), random(&[f, c, 3, 3], &mut rng)];
        assert_grads(&inputs, TOL, |t, v| {
            let y = t.conv2d(v[0], v[1])?;
            Ok(weighted_sum(t, y))
        });
    }
}

// ---------------------------------------------------------------- batchnorm

fn bn(tape: &mut Tape, x: Var, c: usize, mode: Mode) -> graphshot_tensor::Result<Var> {
    let gamma = tape.constant(Tensor::ones(&[c]));
    let beta = tape.constant(Tensor::zeros(&[c]));
    let stats = match mode {
        Mode::Train => NormStats::Batch,
        Mode::Eval => unreachable!(),
    };
    Ok(tape.batchnorm(x, gamma, beta, stats)?.0)
}

#[test]
fn batchnorm_constant_channel_outputs_beta() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[3, 2, 2, 2], 7.5));
    let gamma = tape.constant(Tensor::new(&[2], vec![2.0, -1.0]).unwrap());
    let beta = tape.constant(Tensor::new(&[2], vec![0.25, -0.5]).unwrap());
    let (y, moments) = tape.batchnorm(x, gamma, beta, NormStats::Batch).unwrap();
    let y = tape.value(y);
    for b in 0..3 {
        for c in 0..2 {
            for s in 0..4 {
                let expected = [0.25, -0.5][c];
                assert_eq!(y.data()[(b * 2 + c) * 4 + s], expected);
            }
        }
    }
    let moments = moments.unwrap();
    assert_eq!(moments.mean, vec![7.5, 7.5]);
    assert_eq!(moments.var, vec![0.0, 0.0]);
}

#[test]
fn batchnorm_standardized_input_is_nearly_unchanged() {
    // Each channel has mean 0 and biased variance 1.
    let data = vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0];
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[4, 2], data.clone()).unwrap());
    let y = bn(&mut tape, x, 2, Mode::Train).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(&data) {
        assert!((a - b).abs() < 1e-3);
    }
}

#[test]
fn batchnorm_rejects_single_sample_batch_in_train_mode() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
    let err = bn(&mut tape, x, 2, Mode::Train).unwrap_err();
    assert_eq!(err, TensorError::DegenerateBatch { op: "batchnorm", batch: 1 });

    let gamma = tape.constant(Tensor::ones(&[2]));
    let beta = tape.constant(Tensor::zeros(&[2]));
    let running = NormStats::Running { mean: &[0.0, 0.0], var: &[1.0, 1.0] };
    assert!(tape.batchnorm(x, gamma, beta, running).is_ok());
}

#[test]
fn batchnorm_backward_on_4x2x2x2() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inputs = [random(&[4, 2, 2, 2], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)];
    assert_grads(&inputs, TOL, |t, v| {
        let (y, _) = t.batchnorm(v[0], v[1], v[2], NormStats::Batch)?;
        Ok(weighted_sum(t, y))
    });
}

#[test]
fn batchnorm_gradcheck_three_shapes_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for shape in [vec![3, 2], vec![2, 3, 2, 2], vec![5, 1, 3, 1]] {
        let c = shape[1];
        let inputs = [random(&shape, &mut rng), random(&[c], &mut rng), random(&[c], &mut rng)];
        assert_grads(&inputs, TOL, |t, v| {
            let (y, _) = t.batchnorm(v[0], v[1], v[2], NormStats::Batch)?;
            Ok(weighted_sum(t, y))
        });
        let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
        assert_grads(&inputs, TOL, |t, v| {
            let (y, _) = t.batchnorm(v[0], v[1], v[2], NormStats::Running { mean: &mean, var: &var })?;
            Ok(weighted_sum(t, y))
        });
    }
}

// ---------------------------------------------------------------- maxpool

#[test]
fn maxpool_picks_the_maximum() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
}

#[test]
fn maxpool_ties_route_to_top_left() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::full(&[1, 1, 2, 2], 0.5));
    let y = tape.maxpool2(x).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_floors_odd_extents_and_rejects_small_inputs() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 7, 5]));
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 3, 2]);
    let small = tape.constant(Tensor::zeros(&[1, 1, 1, 4]));
    assert!(tape.maxpool2(small).is_err());
}

#[test]
fn maxpool_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    assert_grads(&[random(&[1, 1, 4, 4], &mut rng)], 1e-6, |t, v| {
        let y = t.maxpool2(v[0])?;
        Ok(weighted_sum(t, y))
    });
    for shape in [[2, 2, 4, 6], [1, 3, 5, 5], [3, 1, 2, 3]] {
        assert_grads(&[random(&shape, &mut rng)], TOL, |t, v| {
            let y = t.maxpool2(v[0])?;
            Ok(weighted_sum(t, y))
        });
    }
}

// ---------------------------------------------------------------- leaky relu

#[test]
fn leaky_relu_values_and_slope() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::new(&[3], vec![3.0, -2.0, -1.0]).unwrap());
    let y = tape.leaky_relu(x, LEAKY_SLOPE);
    assert_eq!(tape.value(y).data()[0], 3.0);
    assert!((tape.value(y).data()[1] + 0.4).abs() < 1e-15);
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 0.2, 0.2]);
}

#[test]
fn leaky_relu_gradcheck_three_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for shape in [vec![5], vec![3, 4], vec![2, 2, 3, 3]] {
        assert_grads(&[random_away_from_zero(&shape, 1e-2, &mut rng)], TOL, |t, v| {
            let y = t.leaky_relu(v[0], LEAKY_SLOPE);
            Ok(weighted_sum(t, y))
        });
    }
}

// ---------------------------------------------------------------- softmax

#[test]
fn softmax_uniform_and_saturated_rows() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, 0.0]]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    let y = tape.value(y);
    for j in 0..3 {
        assert!((y.at2(0, j) - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((y.at2(1, 0) - 1.0).abs() < 1e-12);
    assert!(y.at2(1, 1).abs() < 1e-12 && y.at2(1, 2).abs() < 1e-12);
}

#[test]
fn softmax_rejects_nan() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(&[&[0.0, f64::NAN]]).unwrap());
    assert_eq!(tape.softmax_rows(x).unwrap_err(), TensorError::NonFinite { op: "softmax_rows" });
}

#[test]
fn softmax_jvp_matches_finite_differences() {
    // Directional derivative along a random tangent.
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = random(&[3, 4], &mut rng);
    let dir = random(&[3, 4], &mut rng);
    let weights = random(&[3, 4], &mut rng);
    let f = |x: &Tensor| -> f64 {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.softmax_rows(v).unwrap();
        t.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape::new();
    let v = tape.variable(x.clone());
    let y = tape.softmax_rows(v).unwrap();
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w).unwrap();
    let loss = tape.sum(p);
    let g = tape.backward(loss).unwrap();
    let analytic: f64 = g.wrt(v).unwrap().data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
    let h = 1e-5;
    let shifted = |s: f64| {
        let data = x.data().iter().zip(dir.data()).map(|(a, d)| a + s * d).collect();
        Tensor::new(&[3, 4], data).unwrap()
    };
    let numeric = (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h);
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
    assert!(rel < 1e-6, "analytic {analytic} numeric {numeric}");
}

#[test]
fn softmax_and_log_softmax_gradcheck_three_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for shape in [[1, 5], [3, 3], [4, 2]] {
        let x = random(&shape, &mut rng);
        assert_grads(std::slice::from_ref(&x), TOL, |t, v| {
            let y = t.softmax_rows(v[0])?;
            Ok(weighted_sum(t, y))
        });
        assert_grads(std::slice::from_ref(&x), TOL, |t, v| {
            let y = t.log_softmax_rows(v[0])?;
            Ok(weighted_sum(t, y))
        });
    }
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = random(&[3, 3], &mut rng);
    let keep: Vec<bool> = (0..9).map(|i| i % 4 != 0).collect();
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.softmax_rows_masked(v, Some(&keep)).unwrap();
    let y = tape.value(y);
    for i in 0..3 {
        assert_eq!(y.at2(i, i), 0.0);
        assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_grads(&[x], TOL, |t, v| {
        let y = t.softmax_rows_masked(v[0], Some(&keep))?;
        Ok(weighted_sum(t, y))
    });
}

// ---------------------------------------------------------------- backward

#[test]
fn backward_sum_gives_ones_and_unreachable_gives_zero() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::new(&[2, 2], vec![0.3, -1.0, 2.0, 5.0]).unwrap());
    let q = store.add("q", Tensor::ones(&[3]));
    let mut tape = Tape::new();
    let vp = tape.param(&store, p);
    let _vq = tape.param(&store, q);
    let loss = tape.sum(vp);
    let g = tape.backward(loss).unwrap();
    let dense = g.to_param_grads(&store);
    assert_eq!(dense.get(p).data(), &[1.0; 4]);
    assert_eq!(dense.get(q).data(), &[0.0; 3]);
    assert!(g.param(q).is_none());
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::ones(&[2]));
    assert_eq!(tape.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
}

#[test]
fn detached_values_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let d = tape.detach(x);
    let y = tape.mul(x, d).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    // d/dx (x * stop(x)) = stop(x)
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 2.0]);
    assert!(g.wrt(d).is_none());
}

#[test]
fn abs_subgradient_is_zero_at_zero() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::new(&[3], vec![-2.0, 0.0, 3.0]).unwrap());
    let y = tape.abs(x);
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
}

#[test]
fn repeated_param_binding_shares_one_node() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::new(&[1], vec![3.0]).unwrap());
    let mut tape = Tape::new();
    let a = tape.param(&store, p);
    let b = tape.param(&store, p);
    assert_eq!(a, b);
    let y = tape.mul(a, b).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.param(p).unwrap().data(), &[6.0]);
}

// ---------------------------------------------------------------- remaining primitives

#[test]
fn elementwise_gradcheck_three_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for shape in [vec![4], vec![2, 3], vec![2, 1, 2, 2]] {
        let inputs = [random(&shape, &mut rng), random(&shape, &mut rng)];
        assert_grads(&inputs, TOL, |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(a, v[1])?;
            let m = t.mul(s, v[1])?;
            let m = t.mul(m, v[0])?;
            let sc = t.scale(m, -1.5);
            Ok(weighted_sum(t, sc))
        });
        let away = [random_away_from_zero(&shape, 1e-2, &mut rng)];
        assert_grads(&away, TOL, |t, v| {
            let y = t.abs(v[0]);
            Ok(weighted_sum(t, y))
        });
        let positive = [random(&shape, &mut rng).map(|v| v.abs() + 0.5)];
        assert_grads(&positive, TOL, |t, v| {
            let y = t.log(v[0])?;
            let e = t.exp(v[0]);
            let s = t.add(y, e)?;
            Ok(weighted_sum(t, s))
        });
    }
}

#[test]
fn reductions_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for shape in [vec![3], vec![2, 5], vec![1, 2, 3, 2]] {
        assert_grads(&[random(&shape, &mut rng)], TOL, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let s = t.sum(sq);
            let m = t.mean(v[0]);
            let both = t.mul(s, m)?;
            Ok(t.sum(both))
        });
    }
}

#[test]
fn concat_and_slice_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (n, w1, w2) in [(1, 2, 3), (3, 1, 1), (4, 5, 2)] {
        let inputs = [random(&[n, w1], &mut rng), random(&[n, w2], &mut rng)];
        assert_grads(&inputs, TOL, |t, v| {
            let c = t.concat_cols(&[v[0], v[1], v[0]])?;
            let s = t.slice_cols(c, 1, w1 + w2 + 1)?;
            Ok(weighted_sum(t, s))
        });
    }
}

#[test]
fn linear_layer_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for (n, i, o) in [(1, 3, 2), (4, 2, 5), (3, 6, 1)] {
        let inputs = [random(&[n, i], &mut rng), random(&[i, o], &mut rng), random(&[o], &mut rng)];
        assert_grads(&inputs, TOL, |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            Ok(weighted_sum(t, y))
        });
    }
}

#[test]
fn dropout_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let x = random(&[4, 6], &mut rng);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.dropout(v, 0.5, Mode::Eval, &mut rng).unwrap();
    assert_eq!(tape.value(y), &x);

    let masks: Vec<Tensor> = (0..2)
        .map(|_| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = t.dropout(v, 0.5, Mode::Train, &mut r).unwrap();
            t.value(y).clone()
        })
        .collect();
    assert_eq!(masks[0], masks[1]);
    for (o, i) in masks[0].data().iter().zip(x.data()) {
        assert!(*o == 0.0 || (*o - 2.0 * i).abs() < 1e-15);
    }

    for shape in [vec![5], vec![3, 3], vec![2, 2, 2, 2]] {
        let x = random(&shape, &mut rng);
        assert_grads(&[x], TOL, |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            let y = t.dropout(v[0], 0.3, Mode::Train, &mut r)?;
            Ok(weighted_sum(t, y))
        });
    }
}

#[test]
fn gather_scatter_element_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for (n, m, idx) in [(3, 2, vec![2, 0]), (4, 3, vec![1, 1, 3]), (2, 5, vec![0])] {
        let x = random(&[n, m], &mut rng);
        let idx2 = idx.clone();
        assert_grads(&[x], TOL, move |t, v| {
            let g = t.gather_rows(v[0], &idx2)?;
            let s = t.scatter_rows(g, &idx2, n + 1)?;
            let e = t.element(s, 1)?;
            let scaled = t.mul_scalar(s, e)?;
            Ok(weighted_sum(t, scaled))
        });
    }
}

#[test]
fn pairwise_ops_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    for (n, d) in [(2, 3), (4, 1), (5, 4)] {
        let x = random(&[n, d], &mut rng);
        assert_grads(std::slice::from_ref(&x), TOL, |t, v| {
            let p = t.pairwise_abs_diff(v[0])?;
            let s = t.sum(p);
            let r = t.reshape(p, &[n * (n + 1) / 2 * d])?;
            let w = weighted_sum(t, r);
            t.add(s, w)
        });
        assert_grads(std::slice::from_ref(&x), TOL, |t, v| {
            let d = t.pairwise_dist(v[0])?;
            Ok(weighted_sum(t, d))
        });
        let pairs = random(&[n * (n + 1) / 2, 1], &mut rng);
        assert_grads(&[pairs], TOL, |t, v| {
            let m = t.sym_from_pairs(v[0], n)?;
            Ok(weighted_sum(t, m))
        });
    }
}

#[test]
fn pairwise_abs_diff_layout() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(&[&[1.0], &[4.0], &[-2.0]]).unwrap());
    let p = tape.pairwise_abs_diff(x).unwrap();
    // pairs (0,0) (0,1) (0,2) (1,1) (1,2) (2,2)
    assert_eq!(tape.value(p).data(), &[0.0, 3.0, 3.0, 0.0, 6.0, 0.0]);
    let m = tape.sym_from_pairs(p, 3).unwrap();
    assert_eq!(tape.value(m).data(), &[0.0, 3.0, 3.0, 3.0, 0.0, 6.0, 3.0, 6.0, 0.0]);
}

#[test]
fn same_trace_twice_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.variable(random(&[2, 3, 4, 4], &mut rng));
        let k = tape.variable(random(&[2, 3, 3, 3], &mut rng));
        let y = tape.conv2d(x, k).unwrap();
        let y = tape.dropout(y, 0.5, Mode::Train, &mut rng).unwrap();
        let y = tape.maxpool2(y).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        (tape.value(loss).clone(), g.wrt(k).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-50.0..=50.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[rows, cols], data).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let y = tape.value(y);
        for i in 0..rows {
            prop_assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(y.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn pairwise_abs_diff_matrix_is_bitwise_symmetric(n in 1usize..7, d in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[n, d], &mut rng));
        let p = tape.pairwise_abs_diff(x).unwrap();
        let col = tape.slice_cols(p, 0, 1).unwrap();
        let m = tape.sym_from_pairs(col, n).unwrap();
        let m = tape.value(m);
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(m.at2(i, j).to_bits(), m.at2(j, i).to_bits());
            }
        }
    }
}
