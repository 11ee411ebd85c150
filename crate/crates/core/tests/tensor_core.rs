use calm::tensor::{grad_check, grad_check_report, seeded_rng, Tape, Tensor, Var};
use calm::Error;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}

fn triple_loop(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[test]
fn matmul_identity_and_dot() {
    let mut tape = Tape::new();
    let i = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.leaf(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);

    let r = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
    let col = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
    let d = tape.matmul(r, col).unwrap();
    assert_eq!(tape.shape(d), &[1, 1]);
    assert_eq!(tape.value(d), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = seeded_rng(11);
    let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
    let b = Tensor::randn(vec![4, 2], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
    let c = tape.matmul(va, vb).unwrap();
    close(tape.value(c), &triple_loop(3, 4, 2, a.data(), b.data()), 1e-12);
}

#[test]
fn batched_matmul_broadcasts_size_one_batches() {
    let mut rng = seeded_rng(12);
    let a = Tensor::randn(vec![2, 3, 4, 5], 1.0, &mut rng);
    let b = Tensor::randn(vec![1, 3, 5, 2], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
    let c = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 4, 2]);
    for i in 0..2 {
        for j in 0..3 {
            let am = &a.data()[(i * 3 + j) * 20..(i * 3 + j + 1) * 20];
            let bm = &b.data()[j * 10..(j + 1) * 10];
            let want = triple_loop(4, 5, 2, am, bm);
            close(&tape.value(c)[(i * 3 + j) * 8..(i * 3 + j + 1) * 8], &want, 1e-12);
        }
    }
    // Rank-2 right operand folds over every leading dimension.
    let w = Tensor::randn(vec![5, 3], 1.0, &mut rng);
    let vw = tape.leaf(&w);
    let e = tape.matmul(va, vw).unwrap();
    assert_eq!(tape.shape(e), &[2, 3, 4, 3]);
    let want = triple_loop(24, 5, 3, a.data(), w.data());
    close(tape.value(e), &want, 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(&Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    match &err {
        Error::ShapeMismatch { lhs, rhs, .. } => {
            assert_eq!(lhs, &[2, 3]);
            assert_eq!(rhs, &[2, 3]);
        }
        other => panic!("unexpected {other}"),
    }
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[0.0, 0.0]));
    let y = tape.softmax_lastdim(x);
    assert_eq!(tape.value(y), &[0.5, 0.5]);

    // Frozen from a 40-digit evaluation of exp(x_i) / sum_j exp(x_j).
    let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.softmax_lastdim(x);
    close(
        tape.value(y),
        &[
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ],
        1e-10,
    );

    let x = tape.leaf(&t(&[2], &[1000.0, 0.0]));
    let y = tape.softmax_lastdim(x);
    assert_eq!(tape.value(y)[0], 1.0);
    assert!(tape.value(y)[1] >= 0.0 && tape.value(y)[1] < 1e-300);
}

#[test]
fn causal_softmax_zeroes_future_keys() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[3, 3], &[1.0, 9.0, 9.0, 0.0, 0.0, 9.0, 1.0, 2.0, 3.0]));
    let y = tape.causal_softmax(x).unwrap();
    let v = tape.value(y);
    assert_eq!(&v[..3], &[1.0, 0.0, 0.0]);
    assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
    close(
        &v[6..],
        &[
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ],
        1e-12,
    );
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let ones = tape.leaf(&Tensor::filled(vec![2], 1.0));
    let zeros = tape.leaf(&Tensor::zeros(vec![2]));

    let x = tape.leaf(&t(&[1, 2], &[4.0, 4.0]));
    let y = tape.layer_norm(x, ones, zeros).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.0]);

    // Mean 2, variance 1: (x - 2) / sqrt(1 + 1e-5).
    let x = tape.leaf(&t(&[1, 2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, ones, zeros).unwrap();
    close(
        tape.value(y),
        &[-0.999_995_000_037_499_6, 0.999_995_000_037_499_6],
        1e-12,
    );
    close(tape.value(y), &[-1.0, 1.0], 1e-4);

    let gain = tape.leaf(&Tensor::zeros(vec![2]));
    let bias = tape.leaf(&t(&[2], &[0.25, -3.0]));
    let x = tape.leaf(&t(&[3, 2], &[1.0, 5.0, -2.0, 7.0, 0.5, 0.5]));
    let y = tape.layer_norm(x, gain, bias).unwrap();
    for row in tape.value(y).chunks(2) {
        assert_eq!(row, &[0.25, -3.0]);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let uniform = tape.leaf(&Tensor::zeros(vec![2, 4]));
    let loss = tape.cross_entropy(uniform, &[1, 3], usize::MAX).unwrap();
    close(tape.value(loss), &[1.386_294_361_119_890_6], 1e-12);

    let mut peaked = Tensor::zeros(vec![1, 4]);
    peaked.data_mut()[2] = 30.0;
    let p = tape.leaf(&peaked);
    let loss = tape.cross_entropy(p, &[2], usize::MAX).unwrap();
    assert!(tape.value(loss)[0] < 1e-12);

    let logits = Tensor::randn(vec![3, 5], 2.0, &mut seeded_rng(3));
    let targets = [4usize, 0, 2];
    let l = tape.leaf(&logits);
    let loss = tape.cross_entropy(l, &targets, usize::MAX).unwrap();
    let mut want = 0.0;
    for (r, &tg) in targets.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::MIN, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        want += lse - row[tg];
    }
    close(tape.value(loss), &[want / 3.0], 1e-10);
}

#[test]
fn cross_entropy_ignores_and_rejects() {
    let logits = Tensor::randn(vec![3, 5], 1.0, &mut seeded_rng(4));
    let mut tape = Tape::new();
    let l = tape.leaf(&logits);
    let masked = tape.cross_entropy(l, &[9, 1, 9], 9).unwrap();
    let row = logits.row(1);
    let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
    close(tape.value(masked), &[lse - row[1]], 1e-12);

    assert!(matches!(
        tape.cross_entropy(l, &[0, 7, 1], usize::MAX),
        Err(Error::TokenOutOfRange { id: 7, vocab: 5 })
    ));
}

#[test]
fn backward_linear_and_quadratic() {
    let w = t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&w);
    let s = tape.sum(v);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let v = tape.leaf(&w);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let v = tape.leaf(&Tensor::zeros(vec![2]).with_requires_grad(true));
    assert!(tape.backward(v).is_err());
}

#[test]
fn backward_visits_in_reverse_order_and_skips_frozen() {
    let mut rng = seeded_rng(5);
    let w = Tensor::randn(vec![3, 3], 1.0, &mut rng).with_requires_grad(true);
    let frozen = Tensor::randn(vec![3, 3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let vf = tape.leaf(&frozen);
    let vw = tape.leaf(&w);
    let h = tape.matmul(vf, vw).unwrap();
    let g = tape.gelu(h);
    let s = tape.sum(g);
    tape.backward(s).unwrap();
    let order: Vec<usize> = tape.backward_trace().iter().map(|v| v.index()).collect();
    assert_eq!(order, vec![s.index(), g.index(), h.index(), vw.index()]);
    assert!(tape.grad(vf).is_none());

    let mut wt = w.clone();
    let mut ft = frozen.clone();
    tape.write_grad(vw, &mut wt);
    tape.write_grad(vf, &mut ft);
    assert!(wt.grad().is_some());
    assert!(ft.grad().is_none());
}

#[test]
fn fan_out_accumulates() {
    let w = t(&[2], &[0.5, -1.5]).with_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&w);
    let a = tape.scale(v, 3.0);
    let b = tape.add(a, v).unwrap();
    let s = tape.sum(b);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[4.0, 4.0]);
}

#[test]
fn grad_check_sum_of_squares() {
    let w = t(&[5], &[1.0, 2.0, 3.0, -0.5, 1.5]);
    let err = grad_check(
        |tape, p| {
            let sq = tape.mul(p[0], p[0])?;
            Ok(tape.sum(sq))
        },
        &[w],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-9, "relative error {err}");
}

/// `sum(x * stop_gradient(x))`: the tape sees gradient `x`, the function's
/// true gradient is `2x`, so every coordinate disagrees by a third.
#[test]
fn grad_check_report_flags_wrong_gradients() {
    let w = t(&[3], &[1.0, -2.0, 0.5]);
    let r = grad_check_report(
        |tape, p| {
            let detached = Tensor::new(vec![3], tape.value(p[0]).to_vec())?;
            let d = tape.leaf(&detached);
            let prod = tape.mul(p[0], d)?;
            Ok(tape.sum(prod))
        },
        &[w],
        1e-5,
        1.0,
    )
    .unwrap();
    assert_eq!(r.coordinates, 3);
    assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-6, "{r:?}");
    // |a - n| = |x| = 2 at most; a floor of 1 only binds where |a| + |n| < 1
    assert!((r.max_abs_error - 2.0).abs() < 1e-6, "{r:?}");
    assert!(r.max_rel_error_floored <= r.max_rel_error + 1e-15);
    assert!((r.max_rel_error_floored - 1.0 / 3.0).abs() < 1e-6);
}

#[test]
fn grad_check_floor_only_relaxes_small_gradients() {
    // gradients 2e-9 and 6: with a loss near 9 and a 1e-4 step, roundoff
    // alone leaves ~1e-11 of error in each quotient, which is large relative
    // to 2e-9; the floor turns that coordinate into an absolute comparison
    let w = t(&[2], &[1e-9, 3.0]);
    let r = grad_check_report(
        |tape, p| {
            let sq = tape.mul(p[0], p[0])?;
            Ok(tape.sum(sq))
        },
        &[w],
        1e-4,
        1e-6,
    )
    .unwrap();
    assert!(r.max_abs_error <= 1e-10, "{r:?}");
    assert!(r.max_rel_error_floored <= 1e-5, "{r:?}");
    assert!(r.max_rel_error > r.max_rel_error_floored, "{r:?}");
}

/// Small graph touching every differentiable op.
fn mixed_graph(tape: &mut Tape, p: &[Var], targets: &[usize]) -> calm::Result<Var> {
    let (x, w, g, b, table) = (p[0], p[1], p[2], p[3], p[4]);
    let emb = tape.embedding(table, &[1, 0, 2, 1])?;
    let h = tape.add(x, emb)?;
    let h = tape.reshape(h, vec![2, 2, 3])?;
    let n = tape.layer_norm(h, g, b)?;
    let scores = tape.matmul_transposed(n, n)?;
    let att = tape.causal_softmax(scores)?;
    let mixed = tape.matmul(att, n)?;
    let mixed = tape.permute(mixed, &[1, 0, 2])?;
    let z = tape.matmul(mixed, w)?;
    let z = tape.gelu(z);
    let z = tape.reshape(z, vec![4, 4])?;
    let soft = tape.softmax_lastdim(z);
    let z2 = tape.mul(z, soft)?;
    let z2 = tape.scale(z2, 1.7);
    tape.cross_entropy(z2, targets, usize::MAX)
}

#[test]
fn grad_check_mixed_graph() {
    let mut rng = seeded_rng(8);
    let params = vec![
        Tensor::randn(vec![4, 3], 1.0, &mut rng),
        Tensor::randn(vec![3, 4], 1.0, &mut rng),
        Tensor::randn(vec![3], 1.0, &mut rng),
        Tensor::randn(vec![3], 1.0, &mut rng),
        Tensor::randn(vec![3, 3], 1.0, &mut rng),
    ];
    let err = grad_check(|tape, p| mixed_graph(tape, p, &[0, 3, 2, 1]), &params, 1e-5).unwrap();
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn tape_is_deterministic() {
    let mut rng = seeded_rng(9);
    let params: Vec<Tensor> = [vec![4, 3], vec![3, 4], vec![3], vec![3], vec![3, 3]]
        .into_iter()
        .map(|s| Tensor::randn(s, 1.0, &mut rng).with_requires_grad(true))
        .collect();
    let run = || {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
        let loss = mixed_graph(&mut tape, &vars, &[1, 1, 0, 3]).unwrap();
        tape.backward(loss).unwrap();
        let mut bytes = tape.value(loss)[0].to_le_bytes().to_vec();
        for v in &vars {
            bytes.extend(tape.grad(*v).unwrap().iter().flat_map(|x| x.to_le_bytes()));
        }
        bytes
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..12), 1..6)) {
        let mut tape = Tape::new();
        for row in rows {
            let x = tape.leaf(&Tensor::new(vec![row.len()], row).unwrap());
            let y = tape.softmax_lastdim(x);
            let s: f64 = tape.value(y).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(tape.value(y).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gradient_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = seeded_rng(seed);
        let w = Tensor::randn(vec![3, 3], 1.0, &mut rng).with_requires_grad(true);
        let x = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        // f = sum(gelu(x w)), g = sum((x w) * (x w))
        let grads = |wa: f64, wb: f64| {
            let mut tape = Tape::new();
            let (vx, vw) = (tape.leaf(&x), tape.leaf(&w));
            let h = tape.matmul(vx, vw).unwrap();
            let f = tape.gelu(h);
            let f = tape.sum(f);
            let g = tape.mul(h, h).unwrap();
            let g = tape.sum(g);
            let f = tape.scale(f, wa);
            let g = tape.scale(g, wb);
            let total = tape.add(f, g).unwrap();
            tape.backward(total).unwrap();
            tape.grad(vw).unwrap().to_vec()
        };
        let combined = grads(a, b);
        let (gf, gg) = (grads(1.0, 0.0), grads(0.0, 1.0));
        for i in 0..9 {
            let want = a * gf[i] + b * gg[i];
            prop_assert!((combined[i] - want).abs() <= 1e-10 * (1.0 + want.abs()));
        }
    }
}
