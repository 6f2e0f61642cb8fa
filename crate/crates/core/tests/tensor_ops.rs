use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use warpformer::tensor::{grad_check, GradCheckConfig};
use warpformer::{Error, ParamStore, Tape, Tensor, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2], &[3.0, 4.0]));
    let m = tape.mul(a, b).unwrap();
    assert_eq!(tape.value(m).data(), &[3.0, 8.0]);

    let q = tape.constant(t(&[2], &[0.25, 0.5]));
    let half = tape.constant(Tensor::scalar(0.5));
    let ge = tape.ge(q, half).unwrap();
    assert_eq!(tape.value(ge).data(), &[0.0, 1.0]);
    assert!(!tape.requires_grad(ge));
}

#[test]
fn broadcasting_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[3]));
    let b = tape.constant(Tensor::zeros(&[4]));
    assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
    let c = tape.constant(Tensor::zeros(&[2, 3]));
    let d = tape.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(tape.bmm(c, d), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn comparison_blocks_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("x", t(&[2], &[0.3, 0.7])).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let half = tape.constant(Tensor::scalar(0.5));
    let mask = tape.ge(x, half).unwrap();
    let y = tape.mul(mask, x).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss, &mut store).unwrap();
    // only the direct product path contributes
    assert_eq!(store.grad(id).data(), &[0.0, 1.0]);
}

#[test]
fn bmm_examples() {
    let mut tape = Tape::new();
    let eye = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let col = tape.constant(t(&[1, 2, 1], &[1.0, 2.0]));
    let out = tape.bmm(eye, col).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 2, 1]);
    assert_eq!(tape.value(out).data(), &[1.0, 2.0]);

    let a = tape.constant(t(&[1, 1, 2], &[1.0, 1.0]));
    let b = tape.constant(t(&[1, 2, 1], &[2.0, 3.0]));
    let out = tape.bmm(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[5.0]);

    // batched matrix-vector form
    let v = tape.constant(t(&[1, 2], &[2.0, 3.0]));
    let out = tape.bmm(a, v).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 1]);
    assert_eq!(tape.value(out).data(), &[5.0]);
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, p, q) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let r = b.shape()[2];
    let mut out = vec![0.0; k * p * r];
    for bi in 0..k {
        for i in 0..p {
            for j in 0..r {
                let mut s = 0.0;
                for l in 0..q {
                    s += a.at(&[bi, i, l]) * b.at(&[bi, l, j]);
                }
                out[(bi * p + i) * r + j] = s;
            }
        }
    }
    out
}

#[test]
fn bmm_matches_loop_oracle_3x4x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 4, 5]);
    let b = random(&mut rng, &[3, 5, 2]);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.bmm(va, vb).unwrap();
    assert_eq!(tape.value(c).shape(), &[3, 4, 2]);
    assert!(close(tape.value(c).data(), &triple_loop(&a, &b), 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bmm_agrees_with_triple_loop(k in 1usize..=6, p in 1usize..=6, q in 1usize..=6, r in 1usize..=6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[k, p, q]);
        let b = random(&mut rng, &[k, q, r]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.bmm(va, vb).unwrap();
        prop_assert!(close(tape.value(c).data(), &triple_loop(&a, &b), 1e-10));
    }

    #[test]
    fn masked_softmax_is_a_distribution(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[rows, cols]).data().iter().map(|v| v * 10.0).collect();
        let mask: Vec<f64> = (0..rows * cols).map(|_| if rng.random_bool(0.6) { 1.0 } else { 0.0 }).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(&[rows, cols], x).unwrap());
        let m = Tensor::new(&[rows, cols], mask.clone()).unwrap();
        let y = tape.masked_softmax(xv, Some(&m), 1).unwrap();
        let yd = tape.value(y).data();
        for r in 0..rows {
            let live = (0..cols).filter(|&c| mask[r * cols + c] != 0.0).count();
            let sum: f64 = yd[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!(yd[r * cols..(r + 1) * cols].iter().all(|&v| v >= 0.0));
            if live > 0 {
                prop_assert!((sum - 1.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(sum, 0.0);
            }
            for c in 0..cols {
                if mask[r * cols + c] == 0.0 {
                    prop_assert_eq!(yd[r * cols + c], 0.0);
                }
            }
        }
    }

    #[test]
    fn cumsum_of_nonnegative_is_nondecreasing(values in proptest::collection::vec(0.0f64..5.0, 1..20)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(values));
        let c = tape.cumsum(x, 0).unwrap();
        let cd = tape.value(c).data();
        prop_assert!(cd.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn masked_softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.masked_softmax(x, Some(&t(&[2], &[1.0, 1.0])), 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[2], &[10.0, 0.0]));
    let y = tape.masked_softmax(x, Some(&t(&[2], &[1.0, 0.0])), 0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

    let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.masked_softmax(x, Some(&t(&[3], &[1.0, 1.0, 1.0])), 0).unwrap();
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    let want = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
    assert!(close(tape.value(y).data(), &want, 1e-15));

    // all-masked row degenerates to zeros
    let y = tape.masked_softmax(x, Some(&t(&[3], &[0.0, 0.0, 0.0])), 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn masked_softmax_over_leading_axis() {
    let mut tape = Tape::new();
    // softmax down columns of a 2x2
    let x = tape.constant(t(&[2, 2], &[0.0, 5.0, 0.0, 1.0]));
    let y = tape.masked_softmax(x, None, 0).unwrap();
    let yd = tape.value(y).data();
    assert_eq!(yd[0], 0.5);
    assert_eq!(yd[2], 0.5);
    assert!((yd[1] + yd[3] - 1.0).abs() < 1e-15 && yd[1] > yd[3]);
}

#[test]
fn layer_norm_examples() {
    let mut store = ParamStore::new();
    let g = store.add("g", Tensor::full(&[2], 1.0)).unwrap();
    let b = store.add("b", Tensor::zeros(&[2])).unwrap();
    let mut tape = Tape::new();
    let (gv, bv) = (tape.param(&store, g), tape.param(&store, b));

    let x = tape.constant(t(&[2], &[4.0, 4.0]));
    let y = tape.layer_norm(x, gv, bv).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

    let x = tape.constant(t(&[2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, gv, bv).unwrap();
    // mean 2, population variance 1
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!(close(tape.value(y).data(), &[-s, s], 1e-15));
    assert!(close(tape.value(y).data(), &[-1.0, 1.0], 1e-4));

    let gain = tape.constant(t(&[2], &[2.0, 3.0]));
    let bias = tape.constant(t(&[2], &[0.5, -1.0]));
    let y2 = tape.layer_norm(x, gain, bias).unwrap();
    assert!(close(tape.value(y2).data(), &[-2.0 * s + 0.5, 3.0 * s - 1.0], 1e-15));
}

#[test]
fn cumsum_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
    let c = tape.cumsum(x, 0).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
    let z = tape.constant(Tensor::zeros(&[3]));
    let c = tape.cumsum(z, 0).unwrap();
    assert_eq!(tape.value(c).data(), &[0.0, 0.0, 0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = random(&mut rng, &[7]);
    let x = tape.constant(v.clone());
    let c = tape.cumsum(x, 0).unwrap();
    let mut acc = 0.0;
    let oracle: Vec<f64> = v
        .data()
        .iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect();
    assert!(close(tape.value(c).data(), &oracle, 1e-15));
}

#[test]
fn invalid_axis_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.cumsum(x, 2), Err(Error::InvalidAxis { .. })));
}

fn check(store: &mut ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> warpformer::Result<Var>) -> f64 {
    grad_check(store, None, &GradCheckConfig::default(), f)
        .unwrap()
        .max_rel_error
}

#[test]
fn grad_check_square() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![3.0])).unwrap();
    let err = check(&mut store, |tape, s| {
        let v = tape.param(s, w);
        let sq = tape.mul(v, v)?;
        Ok(tape.sum(sq))
    });
    assert_eq!(store.grad(w).data(), &[6.0]);
    assert!(err < 1e-8);
}

/// Every differentiable op on random shapes with extents <= 5.
#[test]
fn grad_check_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..5 {
        let d0 = rng.random_range(1..=5);
        let d1 = rng.random_range(1..=5);
        let d2 = rng.random_range(1..=5);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, &[d0, d1, d2])).unwrap();
        let b = store.add("b", random(&mut rng, &[d1, d2])).unwrap();
        let c = store.add("c", random(&mut rng, &[d0, d2, d1])).unwrap();
        let w = store.add("w", random(&mut rng, &[d2, d1])).unwrap();
        let g = store.add("g", random(&mut rng, &[d2])).unwrap();
        let bias = store.add("bias", random(&mut rng, &[d2])).unwrap();
        let table = store.add("table", random(&mut rng, &[4, d2])).unwrap();
        let pos = store
            .add(
                "pos",
                Tensor::new(&[d1, 1], (0..d1).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap(),
            )
            .unwrap();
        let mask = Tensor::new(
            &[d0, d1, d2],
            (0..d0 * d1 * d2).map(|i| if i % 3 == 1 { 0.0 } else { 1.0 }).collect(),
        )
        .unwrap();
        let idx: Vec<usize> = (0..d0 * d1).map(|i| (i * 7 + trial) % 4).collect();

        let err = check(&mut store, |tape, s| {
            let a = tape.param(s, a);
            let b = tape.param(s, b);
            let c = tape.param(s, c);
            let w = tape.param(s, w);
            let g = tape.param(s, g);
            let bias = tape.param(s, bias);
            let table = tape.param(s, table);
            let pos = tape.param(s, pos);

            let x = tape.add(a, b)?;
            let x = tape.sub(x, b)?;
            let x = tape.mul(x, b)?;
            let x = tape.div(x, pos)?;
            let x1 = tape.tanh(x);
            let x2 = tape.sigmoid(x);
            let x3 = tape.sin(x);
            let x4 = tape.relu(x);
            let x5 = tape.clamp_min(x, -0.1);
            let x6 = tape.exp(x);
            let sq = tape.mul(x, x)?;
            let sq = tape.add_scalar(sq, 1.0);
            let x7 = tape.ln(sq);
            let mut acc = x1;
            for y in [x2, x3, x4, x5, x6, x7] {
                acc = tape.add(acc, y)?;
            }
            let acc = tape.scale(acc, 0.5);
            let sm = tape.masked_softmax(acc, Some(&mask), 1)?;
            let ln = tape.layer_norm(sm, g, bias)?;
            let cs = tape.cumsum(ln, 1)?;
            let mm = tape.matmul(cs, w)?; // [d0, d1, d1]
            let bm = tape.bmm(mm, a)?; // [d0, d1, d2]
            let perm = tape.permute(bm, &[0, 2, 1])?; // [d0, d2, d1]
            let prod = tape.mul(perm, c)?;
            let rs = tape.reshape(prod, &[d0 * d2 * d1])?;
            let sa = tape.sum_axis(a, 1)?;
            let emb = tape.gather(table, &idx, &[d0, d1])?;
            let emb = tape.mul(emb, a)?;
            let t1 = tape.sum(rs);
            let t2 = tape.sum(sa);
            let t3 = tape.mean(emb);
            let t = tape.add(t1, t2)?;
            tape.add(t, t3)
        });
        assert!(err < 1e-4, "trial {trial}: {err}");
    }
}

#[test]
fn grad_check_masked_softmax_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&mut rng, &[3, 4])).unwrap();
    let weights = random(&mut rng, &[3, 4]);
    let mask = t(&[3, 4], &[1., 1., 0., 1., 0., 0., 0., 0., 1., 1., 1., 1.]);
    let err = check(&mut store, |tape, s| {
        let x = tape.param(s, w);
        let y = tape.masked_softmax(x, Some(&mask), 1)?;
        let c = tape.constant(weights.clone());
        let y = tape.mul(y, c)?;
        Ok(tape.sum(y))
    });
    assert!(err < 1e-4);
}

#[test]
fn grad_check_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let l = store.add("logits", random(&mut rng, &[4, 3])).unwrap();
    let targets = [Some(0), None, Some(2), Some(1)];
    let err = check(&mut store, |tape, s| {
        let x = tape.param(s, l);
        tape.cross_entropy(x, &targets)
    });
    assert!(err < 1e-4);
    let bt = [Some(1.0), Some(0.0), None, Some(1.0), Some(0.0), Some(0.0), None, None, Some(1.0), Some(1.0), Some(0.0), Some(1.0)];
    let err = check(&mut store, |tape, s| {
        let x = tape.param(s, l);
        tape.bce_with_logits(x, &bt)
    });
    assert!(err < 1e-4);
}

#[test]
fn cross_entropy_reference_values() {
    let mut tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros(&[1, 4]));
    let ce = tape.cross_entropy(uniform, &[Some(2)]).unwrap();
    assert!((tape.value(ce).data()[0] - 4f64.ln()).abs() < 1e-15);

    let sharp = tape.constant(t(&[1, 3], &[60.0, 0.0, 0.0]));
    let ce = tape.cross_entropy(sharp, &[Some(0)]).unwrap();
    assert!(tape.value(ce).data()[0] < 1e-20);

    let logits = [0.3, -1.2, 2.0];
    let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
    let oracle = -(logits[1].exp() / z).ln();
    let x = tape.constant(t(&[1, 3], &logits));
    let ce = tape.cross_entropy(x, &[Some(1)]).unwrap();
    assert!((tape.value(ce).data()[0] - oracle).abs() < 1e-14);
}
