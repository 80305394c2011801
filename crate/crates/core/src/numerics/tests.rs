use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
    )
}

/// Central differences with h = 1e-5; returns the worst relative error over
/// every input element. Entries below 1e-4 in magnitude are compared against
/// that floor, i.e. an absolute tolerance of 1e-8 at the 1e-4 threshold.
fn gradcheck<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.value(loss).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = build(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]);
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = analytic[j].abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((analytic[j] - numeric).abs() / denom);
        }
    }
    worst
}

/// Contract an arbitrary tensor to a scalar with fixed random weights so
/// every output element matters.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rank, r, c) = {
        let v = tape.value(x);
        (v.rank(), v.rows(), v.cols())
    };
    let w = tape.constant(random(&mut rng, r, c));
    // view vectors and scalars as matrices so shapes match `w`
    let x2 = if rank == 2 {
        x
    } else {
        tape.slice_block(x, 0, 0, r, c)?
    };
    let p = tape.hadamard(x2, w)?;
    Ok(tape.sum(p))
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let i = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn hadamard_small() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_rows(&[&[2.0, 3.0]]));
    let b = tape.constant(Tensor::from_rows(&[&[4.0, 5.0]]));
    let c = tape.hadamard(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[8.0, 15.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, 3, 4);
    let b = random(&mut rng, 4, 2);
    let mut want = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for l in 0..4 {
                want[i * 2 + j] += a.at(i, l) * b.at(l, j);
            }
        }
    }
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(va, vb).unwrap();
    for (x, y) in tape.value(c).data().iter().zip(&want) {
        assert!((x - y).abs() < 1e-12);
    }
    assert_eq!(tape.macs(), 24);
}

#[test]
fn integer_inputs_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ints = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Tensor::matrix(
            r,
            c,
            (0..r * c)
                .map(|_| rng.random_range(-1000i64..1000) as f64)
                .collect(),
        )
    };
    let (a, b) = (ints(&mut rng, 5, 7), ints(&mut rng, 7, 3));
    let mut want = vec![0i64; 15];
    for i in 0..5 {
        for j in 0..3 {
            for l in 0..7 {
                want[i * 3 + j] += a.at(i, l) as i64 * b.at(l, j) as i64;
            }
        }
    }
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(va, vb).unwrap();
    let got: Vec<i64> = tape.value(c).data().iter().map(|&x| x as i64).collect();
    assert_eq!(got, want);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    let err = tape.hadamard(a, c).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = tape.hadamard(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x), vec![2.0, 4.0, 6.0]);
}

#[test]
fn disconnected_tensor_has_zero_grad() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = tape.param(Tensor::vector(vec![5.0, 6.0]));
    let _side = tape.scale(unused, 3.0);
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(unused), vec![0.0, 0.0]);
    assert_eq!(tape.grad(x), vec![1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn backward_rejects_empty_tape() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::scalar(1.0));
    assert!(tape.backward(x).is_err());
}

#[test]
fn shared_subexpression_accumulates() {
    // loss = sum(y) + sum(y * 3) with y = 2x reached twice
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::vector(vec![1.0, -1.0]));
    let y = tape.scale(x, 2.0);
    let a = tape.sum(y);
    let y3 = tape.scale(y, 3.0);
    let b = tape.sum(y3);
    let ab = tape.concat_cols(&[a, b]).unwrap();
    let loss = tape.sum(ab);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x), vec![8.0, 8.0]);
}

#[test]
fn rmsnorm_closed_form() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_rows(&[&[3.0, 4.0], &[0.0, 0.0]]));
    let g = tape.constant(Tensor::vector(vec![1.0, 1.0]));
    let y = tape.rmsnorm(x, g).unwrap();
    let v = tape.value(y).data();
    let r = (12.5f64 + 1e-6).sqrt();
    assert!((v[0] - 3.0 / r).abs() < 1e-12 && (v[1] - 4.0 / r).abs() < 1e-12);
    assert!((v[0] - 0.8485).abs() < 1e-4 && (v[1] - 1.1314).abs() < 1e-4);
    assert_eq!(&v[2..], &[0.0, 0.0]);
}

#[test]
fn rmsnorm_unit_rms_on_random_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.constant(random(&mut rng, 6, 17));
    let g = tape.constant(Tensor::filled(&[17], 1.0));
    let y = tape.rmsnorm(x, g).unwrap();
    for r in 0..6 {
        let row = tape.value(y).row(r);
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / 17.0).sqrt();
        // epsilon shifts the RMS by at most eps / (2 ms)
        assert!((rms - 1.0).abs() < 1e-6, "rms {rms}");
    }
}

#[test]
fn relu2_values_and_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::vector(vec![-2.0, 3.0]));
    let y = tape.relu2(x);
    assert_eq!(tape.value(y).data(), &[0.0, 9.0]);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x), vec![0.0, 6.0]);
    let fd = ((3.0f64 + 1e-5).powi(2) - (3.0f64 - 1e-5).powi(2)) / 2e-5;
    assert!((fd - 6.0).abs() < 1e-6);
}

#[test]
fn row_l2_normalize_cases() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_rows(&[&[3.0, 4.0], &[0.0, 0.0]]));
    let y = tape.row_l2_normalize(x);
    assert_eq!(tape.value(y).data(), &[0.6, 0.8, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = tape.constant(random(&mut rng, 5, 9));
    let n = tape.row_l2_normalize(z);
    for r in 0..5 {
        let norm = dot(tape.value(n).row(r), tape.value(n).row(r)).sqrt();
        assert!((norm - 1.0).abs() < 1e-10);
    }
}

#[test]
fn cross_entropy_uniform_and_saturated() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::zeros(&[3, 256]));
    let loss = tape.softmax_cross_entropy(logits, &[0, 17, 255]).unwrap();
    assert!((tape.value(loss).data()[0] - 256f64.ln()).abs() < 1e-12);
    assert!((256f64.ln() - 5.5452).abs() < 1e-4);

    let mut hot = Tensor::zeros(&[1, 8]);
    hot.data_mut()[3] = 1000.0;
    let l = tape.constant(hot);
    let loss = tape.softmax_cross_entropy(l, &[3]).unwrap();
    assert!(tape.value(loss).data()[0].abs() < 1e-12);
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, 2, 5);
    let targets = [1usize, 4];
    let mut want = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let lse = x.row(r).iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - x.at(r, t);
    }
    want /= 2.0;
    let mut tape = Tape::new();
    let l = tape.constant(x);
    let loss = tape.softmax_cross_entropy(l, &targets).unwrap();
    assert!((tape.value(loss).data()[0] - want).abs() < 1e-10);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(
        tape.softmax_cross_entropy(l, &[4]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn gradcheck_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = random(&mut rng, 3, 4);
    let b = random(&mut rng, 4, 2);
    let c = random(&mut rng, 3, 2);
    let err = gradcheck(&[a.clone(), b.clone(), c.clone()], |t, v| {
        let m = t.matmul(v[0], v[1])?;
        let h = t.hadamard(m, v[2])?;
        let s = t.add(h, m)?;
        let s = t.scale(s, 0.7);
        weighted_sum(t, s, 1)
    });
    assert!(err < 1e-4, "matmul chain rel err {err}");

    let bt = random(&mut rng, 2, 4);
    let at = random(&mut rng, 4, 3);
    let err = gradcheck(&[at, bt], |t, v| {
        let m = t.matmul_t(v[0], true, v[1], true)?;
        weighted_sum(t, m, 2)
    });
    assert!(err < 1e-4, "transposed matmul rel err {err}");
}

#[test]
fn gradcheck_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, 4, 5);
    let b = random(&mut rng, 4, 3);
    let row = random(&mut rng, 1, 8);
    let s = random(&mut rng, 1, 1);
    let err = gradcheck(&[a, b, row, s], |t, v| {
        let cat = t.concat_cols(&[v[0], v[1]])?;
        let cat = t.add_row(cat, v[2])?;
        let left = t.slice_cols(cat, 1, 6)?;
        let top = t.slice_rows(left, 1, 3)?;
        let tr = t.transpose(top);
        let blk = t.slice_block(tr, 1, 0, 4, 2)?;
        let stacked = t.concat_rows(&[blk, blk])?;
        let scaled = t.scale_by(stacked, v[3])?;
        weighted_sum(t, scaled, 3)
    });
    assert!(err < 1e-4, "structural rel err {err}");
}

#[test]
fn gradcheck_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, 4, 6);
    let gain = random(&mut rng, 1, 6);
    let err = gradcheck(&[x.clone(), gain], |t, v| {
        let n = t.rmsnorm(v[0], v[1])?;
        weighted_sum(t, n, 4)
    });
    assert!(err < 1e-4, "rmsnorm rel err {err}");

    let err = gradcheck(&[x.clone()], |t, v| {
        let n = t.row_l2_normalize(v[0]);
        weighted_sum(t, n, 5)
    });
    assert!(err < 1e-4, "l2 normalize rel err {err}");

    let err = gradcheck(&[x.clone()], |t, v| {
        let a = t.relu2(v[0]);
        let b = t.relu(v[0]);
        let s = t.add(a, b)?;
        weighted_sum(t, s, 6)
    });
    assert!(err < 1e-4, "relu rel err {err}");

    let err = gradcheck(&[x], |t, v| t.softmax_cross_entropy(v[0], &[0, 5, 2, 3]));
    assert!(err < 1e-4, "cross entropy rel err {err}");
}

#[test]
fn gradcheck_embed_maxsim_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let table = random(&mut rng, 7, 5);
    let err = gradcheck(&[table], |t, v| {
        let e = t.embed(v[0], &[3, 1, 4, 1, 5, 6, 2, 0])?;
        let s1 = t.maxsim(e, 4..8, 0..2)?;
        let s2 = t.maxsim(e, 4..8, 2..4)?;
        let scores = t.concat_cols(&[s1, s2])?;
        let w = t.normalize_by_max(scores);
        let ws = weighted_sum(t, w, 7)?;
        let es = weighted_sum(t, e, 8)?;
        let both = t.concat_cols(&[ws, es])?;
        Ok(t.sum(both))
    });
    assert!(err < 1e-4, "embed/maxsim rel err {err}");
}

#[test]
fn maxsim_ignores_zero_rows() {
    let mut tape = Tape::<f64>::new();
    let e = tape.constant(Tensor::from_rows(&[
        &[1.0, 0.0],
        &[0.0, 0.0],
        &[2.0, 0.0],
        &[0.0, 0.0],
    ]));
    let s = tape.maxsim(e, 0..2, 2..4).unwrap();
    assert_eq!(tape.value(s).data(), &[1.0]);
}

#[test]
fn normalize_by_max_degenerate_guard() {
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::vector(vec![-1.0, -0.5]));
    let w = tape.normalize_by_max(s);
    assert_eq!(tape.value(w).data(), &[1.0, 1.0]);
    let s = tape.constant(Tensor::vector(vec![1.6, 0.8]));
    let w = tape.normalize_by_max(s);
    assert_eq!(tape.value(w).data(), &[1.0, 0.5]);
}

#[test]
fn truncate_rolls_back_arena() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::vector(vec![1.0]));
    let mark = tape.mark();
    let y = tape.scale(x, 2.0);
    let _ = tape.sum(y);
    assert_eq!(tape.len(), 3);
    tape.truncate(mark);
    assert_eq!(tape.len(), 1);
    assert_eq!(tape.recorded_ops(), 0);
}

mod props {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn random_chain_gradients_match_finite_differences(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (r, k, c) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(2..5));
            let a = random(&mut rng, r, k);
            let b = random(&mut rng, k, c);
            let g = random(&mut rng, 1, c);
            let err = gradcheck(&[a, b, g], |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let n = t.rmsnorm(m, v[2])?;
                let q = t.relu2(n);
                let u = t.row_l2_normalize(m);
                let s = t.hadamard(q, u)?;
                weighted_sum(t, s, seed)
            });
            prop_assert!(err < 1e-4, "rel err {}", err);
        }
    }
}
