use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sonotag_tensor::gradcheck::{primitive_suite, weighted_sum};
use sonotag_tensor::{gradcheck, GradCheckOptions, Padding, Tape, Tensor, TensorError};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn every_primitive_matches_finite_differences() {
    let rows = primitive_suite(GradCheckOptions::default()).unwrap();
    assert!(rows.len() >= 30);
    for (name, report) in rows {
        assert!(
            report.passes(1e-4),
            "{name}: rel err {:.3e} (analytic {}, numeric {})",
            report.max_rel_error,
            report.analytic,
            report.numeric
        );
    }
}

#[test]
fn matmul_by_identity_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tape = Tape::new();
    let x = random(&[4, 3], &mut rng);
    let i = tape.constant(Tensor::eye(4));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i, xv).unwrap();
    assert_eq!(*tape.value(y), x);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tape = Tape::<f32>::new();
    let x = tape.constant(random(&[3, 7], &mut rng).cast::<f32>().map(|v| v * 20.0));
    let s = tape.softmax(x, 1).unwrap();
    for row in tape.value(s).data().chunks(7) {
        let total: f32 = row.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}

#[test]
fn softmax_over_empty_axis_is_an_error() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([2, 0]));
    assert_eq!(tape.softmax(x, 1), Err(TensorError::EmptyAxis { op: "softmax" }));
}

#[test]
fn shape_mismatch_is_reported() {
    let tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    let c = tape.constant(Tensor::zeros([2]));
    assert!(matches!(tape.add(a, c), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn grad_of_sum_is_ones_and_of_square_is_twice_x() {
    let tape = Tape::<f64>::new();
    let data = [0.5, -1.5, 2.0, 3.25, -0.125];
    let x = tape.leaf(Tensor::from_f64([5], &data).unwrap());
    let s = tape.sum_all(x);
    assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[1.0; 5]);

    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum_all(sq);
    let g = tape.backward(l).unwrap().wrt(x);
    for (gi, xi) in g.data().iter().zip(data) {
        assert_eq!(*gi, 2.0 * xi);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros([3]));
    assert_eq!(tape.backward(x).err(), Some(TensorError::NonScalarLoss(vec![3])));
}

#[test]
fn non_participating_leaves_get_zero_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones([3]));
    let unused = tape.leaf(Tensor::ones([2, 2]));
    let l = tape.sum_all(x);
    let g = tape.backward(l).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.wrt(unused), Tensor::zeros([2, 2]));
}

#[test]
fn composite_mlp_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        random(&[4, 6], &mut rng),
        random(&[6, 8], &mut rng),
        random(&[8], &mut rng),
        random(&[8, 3], &mut rng),
    ];
    let report = gradcheck(
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add(h, v[2])?;
            let h = t.tanh(h);
            let o = t.matmul(h, v[3])?;
            let p = t.softmax(o, 1)?;
            let l = t.ln(p);
            weighted_sum(t, l, 9)
        },
        &inputs,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn injected_sign_error_is_caught() {
    let report = gradcheck(
        |t, v| {
            let y = t.custom_unary(
                v[0],
                |x| x.map(|p| p * p),
                Box::new(|x, _, g| {
                    let mut out = g.clone();
                    for (o, &xi) in out.data_mut().iter_mut().zip(x.data()) {
                        *o *= -2.0 * xi; // wrong sign on purpose
                    }
                    out
                }),
            );
            Ok(t.sum_all(y))
        },
        &[Tensor::from_f64([3], &[0.5, 1.0, -2.0]).unwrap()],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(!report.passes(1e-4));
}

#[test]
fn conv2d_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (c, h, w, o) = (2, 5, 6, 3);
    let x = random(&[c, h, w], &mut rng);
    let k = random(&[o, c, 3, 3], &mut rng);
    let tape = Tape::new();
    let y = tape
        .conv2d(tape.constant(x.clone()), tape.constant(k.clone()), Padding::Same)
        .unwrap();
    let y = tape.value(y);
    assert_eq!(y.shape(), &[o, h, w]);
    for oc in 0..o {
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = 0.0;
                for ci in 0..c {
                    for di in -1..=1isize {
                        for dj in -1..=1isize {
                            let (ii, jj) = (i + di, j + dj);
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            let xv = x.data()[(ci * h + ii as usize) * w + jj as usize];
                            let kv = k.data()[((oc * c + ci) * 3 + (di + 1) as usize) * 3 + (dj + 1) as usize];
                            acc += xv * kv;
                        }
                    }
                }
                let got = y.data()[(oc * h + i as usize) * w + j as usize];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn primitives_do_not_mutate_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::<f64>::new();
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[4], &mut rng);
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let outs = [
        tape.add(va, vb).unwrap(),
        tape.mul(va, vb).unwrap(),
        tape.softmax(va, 1).unwrap(),
        tape.layer_norm(va, 1e-5).unwrap(),
        tape.transpose(va, &[1, 0, 2]).unwrap(),
        tape.max_pool2d(va, (1, 2)).unwrap(),
        tape.exp(va),
    ];
    let mut total = tape.sum_all(outs[0]);
    for o in &outs[1..] {
        let s = tape.sum_all(*o);
        total = tape.add(total, s).unwrap();
    }
    tape.backward(total).unwrap();
    assert_eq!(*tape.value(va), a);
    assert_eq!(*tape.value(vb), b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradients_are_additive_over_losses(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[4, 2], &mut rng);
        let loss1 = |t: &Tape<f64>, xv, wv| {
            let h = t.matmul(xv, wv).unwrap();
            t.sum_all(t.sigmoid(h))
        };
        let loss2 = |t: &Tape<f64>, xv| {
            let sq = t.mul(xv, xv).unwrap();
            t.mean_all(sq)
        };

        let t = Tape::new();
        let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
        let l1 = loss1(&t, xv, wv);
        let l2 = loss2(&t, xv);
        let both = t.add(l1, l2).unwrap();
        let g = t.backward(both).unwrap().wrt(xv);

        let t1 = Tape::new();
        let (xv1, wv1) = (t1.leaf(x.clone()), t1.leaf(w.clone()));
        let l1 = loss1(&t1, xv1, wv1);
        let g1 = t1.backward(l1).unwrap().wrt(xv1);
        let t2 = Tape::new();
        let xv2 = t2.leaf(x);
        let l2 = loss2(&t2, xv2);
        let g2 = t2.backward(l2).unwrap().wrt(xv2);

        for ((a, b), c) in g.data().iter().zip(g1.data()).zip(g2.data()) {
            prop_assert!((a - (b + c)).abs() < 1e-6);
        }
    }

    #[test]
    fn transpose_round_trips(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3, 4], &mut rng);
        let t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.transpose(v, &[2, 0, 1]).unwrap();
        let z = t.transpose(y, &[1, 2, 0]).unwrap();
        prop_assert_eq!(&*t.value(z), &x);
    }
}
