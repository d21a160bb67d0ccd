use super::check::gradient_check;
use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type T2 = Tensor2<f64>;

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> T2 {
    T2::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Contracts a non-scalar output with fixed weights so every entry matters.
fn contract(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead_beef);
    let w = tape.constant(uniform(r, c, &mut rng, 0.5, 1.5));
    tape.mul(out, w)
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let m = T2::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
    let i = tape.constant(T2::identity(2));
    let mv = tape.constant(m.clone());
    let out = tape.matmul(i, mv).unwrap();
    assert_eq!(tape.value(out), &m);

    let a = tape.constant(T2::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = tape.constant(T2::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0, 7.0]);

    let bad = tape.matmul(b, b).unwrap_err();
    assert!(matches!(bad, Error::Shape { left: (2, 1), right: (2, 1), .. }));
}

#[test]
fn matmul_gradient_matches_finite_differences_tightly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = uniform(3, 4, &mut rng, -1.0, 1.0);
    let b = uniform(4, 2, &mut rng, -1.0, 1.0);
    let chk = gradient_check(|t, v| t.matmul(v[0], v[1]), &[a, b], 1e-5).unwrap();
    assert!(chk.max_rel_error < 1e-6, "{chk:?}");
}

#[test]
fn gelu_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(T2::from_rows(&[vec![0.0, 2.0, -10.0]]).unwrap());
    let y = tape.gelu(x);
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 1.954_50).abs() < 5e-6);
    assert!(v[2].abs() < 1e-8);
}

#[test]
fn sigmoid_values_and_slope() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(T2::from_rows(&[vec![0.0, -500.0]]).unwrap());
    let y = tape.sigmoid(x);
    let v = tape.value(y).data().to_vec();
    assert_eq!(v[0], 0.5);
    assert!(v[1] > 0.0 && v[1].is_finite());
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data()[0], 0.25);
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(T2::scalar(0.0));
    let sp = tape.softplus(x);
    assert!((tape.value(sp).item() - 0.693_147).abs() < 1e-6);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(T2::scalar(3.0));
    let sq = tape.square(x);
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(T2::from_rows(&[vec![0.3, 1.7, 42.0]]).unwrap());
    let l = tape.log(x).unwrap();
    let e = tape.exp(l);
    for (a, b) in tape.value(e).data().iter().zip(tape.value(x).data()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn log_rejects_non_positive_with_index() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(T2::from_rows(&[vec![1.0, 2.0], vec![0.0, 3.0]]).unwrap());
    match tape.log(x) {
        Err(Error::Domain { row, col, .. }) => assert_eq!((row, col), (1, 0)),
        other => panic!("expected domain error, got {other:?}"),
    }
}

#[test]
fn logsumexp_rows_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(T2::from_rows(&[vec![0.0, 0.0], vec![1000.0, 1000.0]]).unwrap());
    let y = tape.logsumexp_rows(x);
    let v = tape.value(y).data().to_vec();
    assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((v[1] - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);

    // Backward of a single row is that row's softmax.
    let mut tape = Tape::<f64>::new();
    let row = vec![0.3, -1.2, 2.0, 0.0];
    let x = tape.leaf(T2::from_rows(&[row.clone()]).unwrap());
    let y = tape.logsumexp_rows(x);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    for (gi, ri) in g.get(x).unwrap().data().iter().zip(&row) {
        assert!((gi - ri.exp() / z).abs() < 1e-14);
    }
}

#[test]
fn stop_gradient_examples() {
    let mut tape = Tape::<f64>::new();
    let xv = T2::from_rows(&[vec![0.5, -1.5, 2.0]]).unwrap();
    let x = tape.leaf(xv.clone());
    let sg = tape.stop_gradient(x);
    assert_eq!(tape.value(sg), &xv);
    let sg2 = tape.stop_gradient(sg);
    assert_eq!(tape.value(sg2), &xv);
    let prod = tape.mul(sg2, x).unwrap();
    let s = tape.sum(prod);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &xv);
}

#[test]
fn second_backward_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(T2::scalar(1.0));
    let y = tape.square(x);
    tape.backward(y).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
}

#[test]
fn backward_visits_each_live_node_once() {
    // Diamond graph: x feeds two branches that are recombined.
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(T2::from_rows(&[vec![0.1, 0.2]]).unwrap());
    let c = tape.constant(T2::from_rows(&[vec![1.0, 1.0]]).unwrap());
    let a = tape.exp(x);
    let b = tape.square(x);
    let s = tape.add(a, b).unwrap();
    let u = tape.mul(s, c).unwrap();
    let l = tape.sum(u);
    let g = tape.backward(l).unwrap();
    // Live nodes: x, a, b, s, u, l.
    assert_eq!(g.visited(), 6);
    assert!(g.get(c).is_none());
}

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Every differentiable kernel with its input count and input domain.
fn op_table() -> Vec<(&'static str, usize, OpFn, (f64, f64))> {
    vec![
        ("matmul_bt", 2, |t, v| t.matmul_bt(v[0], v[1]), (-1.0, 1.0)),
        ("add", 2, |t, v| t.add(v[0], v[1]), (-1.0, 1.0)),
        ("sub", 2, |t, v| t.sub(v[0], v[1]), (-1.0, 1.0)),
        ("mul", 2, |t, v| t.mul(v[0], v[1]), (-1.0, 1.0)),
        ("div", 2, |t, v| {
            let d = t.add_scalar(v[1], 2.0);
            t.div(v[0], d)
        }, (-1.0, 1.0)),
        ("scale", 1, |t, v| Ok(t.scale(v[0], -1.7)), (-1.0, 1.0)),
        ("exp", 1, |t, v| Ok(t.exp(v[0])), (-1.0, 1.0)),
        ("log", 1, |t, v| {
            let s = t.add_scalar(v[0], 1.5);
            t.log(s)
        }, (-1.0, 1.0)),
        ("softplus", 1, |t, v| Ok(t.softplus(v[0])), (-1.0, 1.0)),
        ("square", 1, |t, v| Ok(t.square(v[0])), (-1.0, 1.0)),
        ("sqrt", 1, |t, v| {
            let s = t.add_scalar(v[0], 1.5);
            Ok(t.sqrt(s))
        }, (-1.0, 1.0)),
        ("sigmoid", 1, |t, v| Ok(t.sigmoid(v[0])), (-1.0, 1.0)),
        ("log_sigmoid", 1, |t, v| Ok(t.log_sigmoid(v[0])), (-1.0, 1.0)),
        ("gelu", 1, |t, v| Ok(t.gelu(v[0])), (-1.0, 1.0)),
        ("mean", 1, |t, v| {
            let s = t.square(v[0]);
            Ok(t.mean(s))
        }, (-1.0, 1.0)),
        ("sum_rows", 1, |t, v| Ok(t.sum_rows(v[0])), (-1.0, 1.0)),
        ("logsumexp_rows", 1, |t, v| Ok(t.logsumexp_rows(v[0])), (-1.0, 1.0)),
        ("cumsum_cols", 1, |t, v| Ok(t.cumsum_cols(v[0])), (-1.0, 1.0)),
        ("repeat_rows", 1, |t, v| Ok(t.repeat_rows(v[0], 3)), (-1.0, 1.0)),
        ("reshape", 1, |t, v| t.reshape(v[0], 4, 3), (-1.0, 1.0)),
        ("concat_cols", 2, |t, v| t.concat_cols(&[v[0], v[1]]), (-1.0, 1.0)),
    ]
}

#[test]
fn every_op_matches_finite_differences_over_100_seeds() {
    for (name, arity, f, (lo, hi)) in op_table() {
        let mut worst = 0.0_f64;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<T2> = (0..arity).map(|_| uniform(3, 4, &mut rng, lo, hi)).collect();
            let chk = gradient_check(
                |t, v| {
                    let out = f(t, v)?;
                    contract(t, out, seed)
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            worst = worst.max(chk.max_rel_error);
        }
        assert!(worst < 1e-4, "{name}: worst relative error {worst:e}");
    }
}

#[test]
fn broadcast_ops_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(3, 4, &mut rng, -1.0, 1.0);
        let r = uniform(1, 4, &mut rng, -1.0, 1.0);
        let c = uniform(3, 1, &mut rng, -1.0, 1.0);
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>)> = vec![
            ("add_rowvec", Box::new(|t, v| t.broadcast_add_rowvec(v[0], v[1]))),
            ("mul_rowvec", Box::new(|t, v| t.broadcast_mul_rowvec(v[0], v[1]))),
            ("add_colvec", Box::new(|t, v| t.broadcast_add_colvec(v[0], v[2]))),
            ("mul_colvec", Box::new(|t, v| t.broadcast_mul_colvec(v[0], v[2]))),
        ];
        for (name, f) in cases {
            let chk = gradient_check(
                |t, v| {
                    let o = f(t, v)?;
                    contract(t, o, seed)
                },
                &[x.clone(), r.clone(), c.clone()],
                1e-5,
            )
            .unwrap();
            assert!(chk.max_rel_error < 1e-4, "{name}: {chk:?}");
        }
    }
}

fn random_lower(p: usize, rng: &mut ChaCha8Rng) -> T2 {
    T2::from_fn(p, p, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => rng.random_range(-0.5..0.5),
        std::cmp::Ordering::Equal => rng.random_range(0.6..1.4),
        std::cmp::Ordering::Less => 0.0,
    })
}

#[test]
fn mvn_logpdf_matches_closed_form_and_finite_differences() {
    // Bivariate normal with rho = 0.5 against the explicit quadratic form.
    let rho: f64 = 0.5;
    let chol = T2::from_rows(&[vec![1.0, 0.0], vec![rho, (1.0 - rho * rho).sqrt()]]).unwrap();
    let z = T2::from_rows(&[vec![0.7, -1.1], vec![0.0, 0.0]]).unwrap();
    let mut tape = Tape::<f64>::new();
    let zv = tape.constant(z.clone());
    let lv = tape.constant(chol);
    let out = tape.mvn_logpdf_chol(zv, lv).unwrap();
    for i in 0..2 {
        let (a, b) = (z[(i, 0)], z[(i, 1)]);
        let det = 1.0 - rho * rho;
        let q = (a * a - 2.0 * rho * a * b + b * b) / det;
        let expect = -q / 2.0 - (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln();
        assert!((tape.value(out)[(i, 0)] - expect).abs() < 1e-12);
    }

    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = uniform(4, 3, &mut rng, -1.0, 1.0);
        let l = random_lower(3, &mut rng);
        let chk = gradient_check(
            |t, v| {
                let o = t.mvn_logpdf_chol(v[0], v[1])?;
                contract(t, o, seed)
            },
            &[z, l],
            1e-5,
        )
        .unwrap();
        assert!(chk.max_rel_error < 1e-6, "{chk:?}");
    }
}

#[test]
fn gaussian_kl_closed_form_and_gradients() {
    let mut tape = Tape::<f64>::new();
    let mu = tape.constant(T2::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
    let ls = tape.constant(T2::zeros(2, 1));
    let l = tape.constant(T2::identity(1));
    let kl = tape.gaussian_kl(mu, ls, l).unwrap();
    assert_eq!(tape.value(kl)[(0, 0)], 0.0);
    assert!((tape.value(kl)[(1, 0)] - 0.5).abs() < 1e-15);

    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = uniform(4, 3, &mut rng, -1.0, 1.0);
        let ls = uniform(4, 3, &mut rng, -1.0, 1.0);
        let l = random_lower(3, &mut rng);
        let chk = gradient_check(
            |t, v| {
                let o = t.gaussian_kl(v[0], v[1], v[2])?;
                contract(t, o, seed)
            },
            &[mu, ls, l],
            1e-5,
        )
        .unwrap();
        assert!(chk.max_rel_error < 1e-6, "{chk:?}");
    }
}

fn toy_targets(rng: &mut ChaCha8Rng, rows: usize, categories: &[usize], repeat: usize) -> OrdinalTargets {
    let m = categories.len();
    let codes = (0..rows * m)
        .map(|idx| {
            if rng.random_bool(0.1) {
                MISSING_CODE
            } else {
                rng.random_range(0..categories[idx % m]) as i16
            }
        })
        .collect();
    OrdinalTargets {
        codes,
        n_rows: rows,
        categories: categories.to_vec(),
        repeat,
    }
}

fn decreasing_thresholds(rng: &mut ChaCha8Rng, m: usize, k: usize) -> T2 {
    let mut t = T2::zeros(m, k);
    for j in 0..m {
        let mut a = rng.random_range(0.5..1.5);
        for c in 0..k {
            t[(j, c)] = a;
            a -= rng.random_range(0.2..1.0);
        }
    }
    t
}

#[test]
fn ordinal_loglik_matches_direct_probabilities_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let categories = [3, 2, 4];
    let targets = Rc::new(toy_targets(&mut rng, 2, &categories, 2));
    let eta = uniform(4, 3, &mut rng, -1.0, 1.0);
    let th = decreasing_thresholds(&mut rng, 3, 3);

    let mut tape = Tape::<f64>::new();
    let e = tape.constant(eta.clone());
    let t = tape.constant(th.clone());
    let out = tape.ordinal_loglik(e, t, targets.clone()).unwrap();
    for r in 0..4 {
        let mut expect = 0.0;
        for j in 0..3 {
            let code = targets.code(r, j);
            if code < 0 {
                continue;
            }
            let c = categories[j];
            let boundary = |k: usize| -> f64 {
                if k == 0 {
                    1.0
                } else if k == c {
                    0.0
                } else {
                    1.0 / (1.0 + (-(eta[(r, j)] + th[(j, k - 1)])).exp())
                }
            };
            let k = code as usize;
            expect += (boundary(k) - boundary(k + 1)).ln();
        }
        assert!((tape.value(out)[(r, 0)] - expect).abs() < 1e-12, "row {r}");
    }

    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let targets = Rc::new(toy_targets(&mut rng, 3, &categories, 2));
        let eta = uniform(6, 3, &mut rng, -1.0, 1.0);
        let th = decreasing_thresholds(&mut rng, 3, 3);
        let chk = gradient_check(
            |t, v| {
                let o = t.ordinal_loglik(v[0], v[1], targets.clone())?;
                contract(t, o, seed)
            },
            &[eta, th],
            1e-5,
        )
        .unwrap();
        assert!(chk.max_rel_error < 1e-6, "{chk:?}");
    }
}

#[test]
fn seeded_backward_accumulates_from_several_nodes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(T2::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let a = tape.scale(x, 2.0);
    let b = tape.square(x);
    let g = tape
        .backward_seeded(vec![
            (a, T2::from_rows(&[vec![1.0, 1.0]]).unwrap()),
            (b, T2::from_rows(&[vec![0.5, 0.5]]).unwrap()),
        ])
        .unwrap();
    // 2 + 0.5 * 2x
    assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn logsumexp_bounded_by_max(row in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let n = row.len();
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(T2::new(1, n, row.clone()).unwrap());
            let y = tape.logsumexp_rows(x);
            let v = tape.value(y).item();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= m - 1e-12);
            prop_assert!(v <= m + (n as f64).ln() + 1e-12);
        }
    }
}
