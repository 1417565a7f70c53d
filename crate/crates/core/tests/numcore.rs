use cslm_core::numcore::Rng;
use cslm_core::numcore::*;
use proptest::prelude::*;

type M = Matrix<f64>;

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> M {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
}

/// Central-difference gradient of a scalar function of `x`.
fn fd(x: &M, f: impl Fn(&M) -> f64) -> M {
    let h = 1e-5;
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        g.as_mut_slice()[i] = (up - down) / (2.0 * h);
    }
    g
}

fn assert_close(a: &M, b: &M, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        // the floor keeps tiny entries from amplifying finite-difference rounding
        let denom = x.abs().max(y.abs()).max(1e-3);
        assert!((x - y).abs() / denom < tol, "{x} vs {y}");
    }
}

/// Weighted sum `<w, y>` turns any matrix-valued op into a scalar loss.
fn dot(w: &M, y: &M) -> f64 {
    w.as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| a * b)
        .sum()
}

#[test]
fn matmul_backward_matches_finite_differences() {
    let mut rng = Rng::new(3);
    let a = random_matrix(4, 3, &mut rng);
    let b = random_matrix(3, 5, &mut rng);
    let w = random_matrix(4, 5, &mut rng);
    let (da, db) = matmul_backward(&a, &b, &w).unwrap();
    assert_close(&da, &fd(&a, |a| dot(&w, &matmul(a, &b).unwrap())), 1e-6);
    assert_close(&db, &fd(&b, |b| dot(&w, &matmul(&a, b).unwrap())), 1e-6);
}

#[test]
fn activation_backwards_match_finite_differences() {
    let mut rng = Rng::new(4);
    let x = random_matrix(3, 4, &mut rng).map(|v| 3.0 * v);
    let w = random_matrix(3, 4, &mut rng);
    let ds = sigmoid_backward(&sigmoid(&x), &w).unwrap();
    assert_close(&ds, &fd(&x, |x| dot(&w, &sigmoid(x))), 1e-6);
    let dt = tanh_backward(&tanh(&x), &w).unwrap();
    assert_close(&dt, &fd(&x, |x| dot(&w, &tanh(x))), 1e-6);
}

#[test]
fn softmax_cross_entropy_gradient_matches_finite_differences() {
    let mut rng = Rng::new(5);
    let logits = random_matrix(6, 7, &mut rng).map(|v| 4.0 * v);
    let targets = [0, 6, 3, 3, 1, 2];
    let ce = softmax_cross_entropy(&logits, &targets).unwrap();
    let numeric = fd(&logits, |l| {
        softmax_cross_entropy(l, &targets).unwrap().loss
    });
    assert_close(&ce.dlogits, &numeric, 1e-6);
    // the summed form agrees with the mean
    assert!((ce.total_nll / 6.0 - ce.loss).abs() < 1e-12);
    let total = cross_entropy_total(&logits, &targets).unwrap();
    assert!((total - ce.total_nll).abs() < 1e-12);
}

#[test]
fn embedding_backward_equals_one_hot_product() {
    let mut rng = Rng::new(6);
    let table = random_matrix(5, 3, &mut rng);
    let ids = [4, 0, 4, 2];
    let d_out = random_matrix(4, 3, &mut rng);
    let mut d_table = Matrix::zeros(5, 3);
    embedding_backward(&mut d_table, &ids, &d_out).unwrap();
    // lookup is onehot(ids) * table, so the gradient is onehot^T * d_out
    let onehot = Matrix::from_fn(4, 5, |r, c| if ids[r] == c { 1.0 } else { 0.0 });
    let oracle = matmul_t(&onehot, Transpose::Yes, &d_out, Transpose::No).unwrap();
    assert_close(&d_table, &oracle, 1e-12);
    let looked = embedding_lookup(&table, &ids).unwrap();
    assert_close(&looked, &matmul(&onehot, &table).unwrap(), 1e-12);
}

#[test]
fn mse_gradients_match_finite_differences() {
    let mut rng = Rng::new(7);
    let a = random_matrix(3, 4, &mut rng);
    let b = random_matrix(3, 4, &mut rng);
    let (_, da, db) = mse(&a, &b).unwrap();
    assert_close(&da, &fd(&a, |a| mse(a, &b).unwrap().0), 1e-6);
    assert_close(&db, &fd(&b, |b| mse(&a, b).unwrap().0), 1e-6);
}

#[test]
fn mse_examples() {
    let a = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
    let b = Matrix::from_vec(1, 2, vec![1.0, 4.0]).unwrap();
    let (v, da, _) = mse(&a, &b).unwrap();
    assert_eq!(v, 2.0);
    assert_eq!(da.as_slice(), &[0.0, -2.0]);
    let bad = Matrix::<f64>::zeros(2, 1);
    assert!(mse(&a, &bad).is_err());
}

#[test]
fn dropout_monte_carlo() {
    let p = 0.3;
    let n = 1_000_000;
    let x = Matrix::<f64>::filled(1000, 1000, 1.0);
    let (y, mask) = dropout(&x, p, Mode::Train, &mut Rng::new(11)).unwrap();
    let zeros = y.as_slice().iter().filter(|&&v| v == 0.0).count();
    let frac = zeros as f64 / n as f64;
    // binomial standard deviation is about 4.6e-4
    assert!((frac - p).abs() < 3e-3, "dropped fraction {frac}");
    let mean = y.sum() / n as f64;
    assert!((mean - 1.0).abs() < 5e-3, "mean {mean}");
    let survivors: Vec<f64> = y.as_slice().iter().copied().filter(|&v| v != 0.0).collect();
    assert!(survivors.iter().all(|&v| (v - 1.0 / 0.7).abs() < 1e-12));
    // backward uses the same mask
    let back = mask.backward(&x).unwrap();
    assert_eq!(back.as_slice(), y.as_slice());
}

#[test]
fn dropout_eval_and_zero_are_identity() {
    let mut rng = Rng::new(1);
    let x = random_matrix(3, 3, &mut rng);
    let (y, m) = dropout(&x, 0.5, Mode::Eval, &mut rng).unwrap();
    assert_eq!(y, x);
    assert!(m.is_identity());
    let (y, _) = dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
    assert_eq!(y, x);
    assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
    assert!(dropout(&x, -0.1, Mode::Train, &mut rng).is_err());
}

#[test]
fn sigmoid_saturates_without_overflow_in_f32() {
    let x = Matrix::<f32>::from_vec(1, 4, vec![40.0, -40.0, 100.0, -100.0]).unwrap();
    let y = sigmoid(&x);
    assert!(y.is_finite());
    assert_eq!(y.as_slice()[0], 1.0);
    assert!(y.as_slice()[1] >= 0.0 && y.as_slice()[1] < 1e-17);
    assert_eq!(y.as_slice()[2], 1.0);
}

#[test]
fn clip_examples() {
    let mut p = Matrix::<f64>::zeros(1, 1);
    let g = Matrix::from_vec(1, 1, vec![10.0]).unwrap();
    let stats = clip_and_step(&mut [&mut p], &[&g], 1.0, 0.25).unwrap();
    assert!((stats.clip_scale - 0.025).abs() < 1e-15);
    assert!((p.as_slice()[0] + 0.25).abs() < 1e-15);

    let mut w = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
    let g = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
    let stats = clip_and_step(&mut [&mut w], &[&g], 2.0, 0.25 * 100.0).unwrap();
    assert_eq!(stats.clip_scale, 1.0);
    assert_eq!(w.as_slice()[0], 0.0);

    let nan = Matrix::from_vec(1, 1, vec![f64::NAN]).unwrap();
    assert!(clip_and_step(&mut [&mut w], &[&nan], 1.0, 1.0).is_err());
    assert!(clip_and_step(&mut [&mut w], &[&g], 0.0, 1.0).is_err());
}

fn naive_product(a: &M, b: &M) -> M {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
    })
}

fn matrix_strategy(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = M> {
    prop::collection::vec(-range..range, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn shaped(max: usize) -> impl Strategy<Value = (usize, usize, usize)> {
    (1..max, 1..max, 1..max)
}

proptest! {
    #[test]
    fn gemm_matches_triple_loop(
        (a, b) in shaped(7).prop_flat_map(|(m, k, n)| (matrix_strategy(m, k, 2.0), matrix_strategy(k, n, 2.0)))
    ) {
        let fast = matmul(&a, &b).unwrap();
        assert_close(&fast, &naive_product(&a, &b), 1e-10);
        // transposed views give the same product
        let at = a.transpose();
        let bt = b.transpose();
        let via_t = matmul_t(&at, Transpose::Yes, &bt, Transpose::Yes).unwrap();
        assert_close(&via_t, &fast, 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one_in_f32(
        v in prop::collection::vec(-80.0f32..80.0, 1..64),
        rows in 1usize..4,
    ) {
        let cols = v.len();
        let data: Vec<f32> = (0..rows).flat_map(|_| v.iter().copied()).collect();
        let logits = Matrix::from_vec(rows, cols, data).unwrap();
        let s = softmax_rows(&logits);
        prop_assert!(s.is_finite());
        for r in 0..rows {
            let sum: f32 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-5, "row sum {}", sum);
            prop_assert!(s.row(r).iter().all(|&p| p >= 0.0));
        }
        let targets = vec![cols - 1; rows];
        let ce = softmax_cross_entropy(&logits, &targets).unwrap();
        prop_assert!(ce.loss.is_finite() && ce.loss >= 0.0);
        prop_assert!(ce.dlogits.is_finite());
    }

    #[test]
    fn mse_is_symmetric_and_zero_only_on_equality(
        (a, b) in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| (matrix_strategy(r, c, 3.0), matrix_strategy(r, c, 3.0)))
    ) {
        let (ab, da, db) = mse(&a, &b).unwrap();
        let (ba, _, _) = mse(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
        for (x, y) in da.as_slice().iter().zip(db.as_slice()) {
            prop_assert_eq!(*x, -*y);
        }
        prop_assert_eq!(mse(&a, &a).unwrap().0, 0.0);
        if a != b {
            prop_assert!(ab > 0.0);
        }
    }

    #[test]
    fn clipped_step_never_exceeds_clip_norm(
        g in prop::collection::vec(-50.0f64..50.0, 1..20),
        clip in 0.01f64..5.0,
        lr in 0.01f64..3.0,
    ) {
        let n = g.len();
        let grad = Matrix::from_vec(1, n, g).unwrap();
        let mut p = Matrix::zeros(1, n);
        let stats = clip_and_step(&mut [&mut p], &[&grad], lr, clip).unwrap();
        let moved = p.sum_sq_f64().sqrt() / lr;
        prop_assert!(moved <= clip * (1.0 + 1e-12) || stats.clip_scale == 1.0);
        prop_assert!(moved <= stats.grad_norm * (1.0 + 1e-12));
        prop_assert!((stats.grad_norm - grad.sum_sq_f64().sqrt()).abs() < 1e-9);
    }
}

#[test]
fn compensated_sum_tracks_exact_total() {
    let mut naive = 0.0f64;
    let mut comp = CompensatedSum::default();
    for _ in 0..1_000_000 {
        naive += 0.1;
        comp.add(0.1);
    }
    let exact = 100_000.0;
    assert!((comp.value() - exact).abs() <= f64::EPSILON * exact);
    assert!((naive - exact).abs() > 100.0 * f64::EPSILON * exact);
    // cancellation that defeats plain Kahan summation
    let mut c = CompensatedSum::default();
    for x in [1.0, 1e100, 1.0, -1e100] {
        c.add(x);
    }
    assert_eq!(c.value(), 2.0);
}
