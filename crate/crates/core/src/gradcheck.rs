//! Central finite-difference checks of every backward pass, in f64.

use crate::corpus::{build_vocab, Batch, Language};
use crate::error::Result;
use crate::model::{
    forward, init_params, loss_and_grads, HiddenState, LstmLmParams, ModelDims, PARAM_NAMES,
};
use crate::numcore::{
    clip_and_step, dropout, embedding_backward, embedding_lookup, matmul, matmul_backward, mse,
    sigmoid, sigmoid_backward, softmax_cross_entropy, tanh, tanh_backward, Matrix, Mode, Rng,
};
use crate::training::{joint_loss, mse_regularizer, RowAlignment, RowPartition};

pub const TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
const FLOOR: f64 = 1e-6;

/// Deliberate defects for negative-control runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Scales the matmul input gradient by 1.01.
    CorruptMatmulBackward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{:<width$}  max_rel_err={:.3e}  {}\n",
                c.name,
                c.max_rel_error,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "{} (tolerance {:e})\n",
            if self.passed() { "ALL PASS" } else { "FAILED" },
            self.tolerance
        ));
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn max_relative_error(analytic: &Matrix<f64>, numeric: &Matrix<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of scalar `f` with respect to every element of `x`.
pub fn numeric_gradient(x: &Matrix<f64>, mut f: impl FnMut(&Matrix<f64>) -> f64) -> Matrix<f64> {
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + STEP;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - STEP;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        grad.as_mut_slice()[i] = (up - down) / (2.0 * STEP);
    }
    grad
}

fn random(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-scale, scale))
}

fn weighted_sum(w: &Matrix<f64>, y: &Matrix<f64>) -> f64 {
    w.as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| a * b)
        .sum()
}

fn record(checks: &mut Vec<CheckResult>, name: &str, err: f64) {
    checks.push(CheckResult {
        name: name.to_owned(),
        max_rel_error: err,
        passed: err < TOLERANCE,
    });
}

/// Tiny model and batch used for the whole-network checks.
pub fn tiny_model(seed: u64) -> (LstmLmParams<f64>, Batch, HiddenState<f64>) {
    let dims = ModelDims::new(5, 3, 4).expect("valid dims");
    let mut params: LstmLmParams<f64> = init_params(dims, seed);
    let mut rng = Rng::new(seed).split(99);
    // larger than the default init so the check exercises non-linear regimes
    for m in params.arrays_mut() {
        for x in m.as_mut_slice() {
            *x = rng.uniform(-0.8, 0.8);
        }
    }
    let batch = Batch {
        steps: 2,
        batch_size: 2,
        inputs: vec![1, 3, 4, 1],
        targets: vec![4, 1, 2, 0],
        language: Language::L1,
    };
    let state = HiddenState {
        h: random(&mut rng, 2, 4, 0.5),
        c: random(&mut rng, 2, 4, 0.5),
    };
    (params, batch, state)
}

fn model_loss(params: &LstmLmParams<f64>, batch: &Batch, state: &HiddenState<f64>) -> f64 {
    let out = forward(params, batch, state, Mode::Train, 0.3, &mut Rng::new(5)).expect("forward");
    softmax_cross_entropy(&out.logits, &batch.targets)
        .expect("ce")
        .loss
}

fn check_params(
    checks: &mut Vec<CheckResult>,
    prefix: &str,
    params: &LstmLmParams<f64>,
    analytic: &LstmLmParams<f64>,
    loss: impl Fn(&LstmLmParams<f64>) -> f64,
) {
    for (k, name) in PARAM_NAMES.iter().enumerate() {
        let numeric = numeric_gradient(params.arrays()[k], |m| {
            let mut p = params.clone();
            *p.arrays_mut()[k] = m.clone();
            loss(&p)
        });
        record(
            checks,
            &format!("{prefix}/{name}"),
            max_relative_error(analytic.arrays()[k], &numeric),
        );
    }
}

pub fn run_gradcheck(fault: Fault) -> Result<GradCheckReport> {
    let mut rng = Rng::new(2024);
    let mut checks = Vec::new();

    // matmul
    let a = random(&mut rng, 4, 5, 1.0);
    let b = random(&mut rng, 5, 3, 1.0);
    let w = random(&mut rng, 4, 3, 1.0);
    let (mut da, db) = matmul_backward(&a, &b, &w)?;
    if fault == Fault::CorruptMatmulBackward {
        da.scale(1.01);
    }
    let na = numeric_gradient(&a, |x| weighted_sum(&w, &matmul(x, &b).unwrap()));
    let nb = numeric_gradient(&b, |x| weighted_sum(&w, &matmul(&a, x).unwrap()));
    record(&mut checks, "matmul/dA", max_relative_error(&da, &na));
    record(&mut checks, "matmul/dB", max_relative_error(&db, &nb));

    // activations
    let x = random(&mut rng, 5, 4, 3.0);
    let w = random(&mut rng, 5, 4, 1.0);
    let ds = sigmoid_backward(&sigmoid(&x), &w)?;
    let ns = numeric_gradient(&x, |x| weighted_sum(&w, &sigmoid(x)));
    record(&mut checks, "sigmoid", max_relative_error(&ds, &ns));
    let dt = tanh_backward(&tanh(&x), &w)?;
    let nt = numeric_gradient(&x, |x| weighted_sum(&w, &tanh(x)));
    record(&mut checks, "tanh", max_relative_error(&dt, &nt));

    // fused softmax cross-entropy
    let logits = random(&mut rng, 6, 5, 2.0);
    let targets = [0, 4, 2, 2, 1, 3];
    let ce = softmax_cross_entropy(&logits, &targets)?;
    let nl = numeric_gradient(&logits, |l| {
        softmax_cross_entropy(l, &targets).unwrap().loss
    });
    record(
        &mut checks,
        "softmax_cross_entropy",
        max_relative_error(&ce.dlogits, &nl),
    );

    // embedding lookup / scatter-add
    let table = random(&mut rng, 6, 4, 1.0);
    let ids = [1, 3, 1, 5, 0];
    let w = random(&mut rng, ids.len(), 4, 1.0);
    let mut de = Matrix::zeros(6, 4);
    embedding_backward(&mut de, &ids, &w)?;
    let ne = numeric_gradient(&table, |t| {
        weighted_sum(&w, &embedding_lookup(t, &ids).unwrap())
    });
    record(&mut checks, "embedding", max_relative_error(&de, &ne));

    // dropout with a fixed mask
    let x = random(&mut rng, 6, 5, 1.0);
    let w = random(&mut rng, 6, 5, 1.0);
    let (_, mask) = dropout(&x, 0.3, Mode::Train, &mut Rng::new(11))?;
    let dd = mask.backward(&w)?;
    let nd = numeric_gradient(&x, |x| {
        weighted_sum(
            &w,
            &dropout(x, 0.3, Mode::Train, &mut Rng::new(11)).unwrap().0,
        )
    });
    record(&mut checks, "dropout", max_relative_error(&dd, &nd));

    // mse
    let a = random(&mut rng, 3, 4, 1.0);
    let b = random(&mut rng, 3, 4, 1.0);
    let (_, dma, dmb) = mse(&a, &b)?;
    let nma = numeric_gradient(&a, |x| mse(x, &b).unwrap().0);
    let nmb = numeric_gradient(&b, |x| mse(&a, x).unwrap().0);
    record(&mut checks, "mse/dA", max_relative_error(&dma, &nma));
    record(&mut checks, "mse/dB", max_relative_error(&dmb, &nmb));

    // clip_and_step against the closed-form update
    let mut p1 = random(&mut rng, 3, 3, 1.0);
    let mut p2 = random(&mut rng, 2, 4, 1.0);
    let g1 = random(&mut rng, 3, 3, 5.0);
    let g2 = random(&mut rng, 2, 4, 5.0);
    let (o1, o2) = (p1.clone(), p2.clone());
    let norm = (g1.sum_sq_f64() + g2.sum_sq_f64()).sqrt();
    let (lr, clip) = (0.7, 0.25);
    clip_and_step(&mut [&mut p1, &mut p2], &[&g1, &g2], lr, clip)?;
    let scale = if norm > clip { clip / norm } else { 1.0 };
    let mut err: f64 = 0.0;
    for ((p, o), g) in [(&p1, &o1, &g1), (&p2, &o2, &g2)].map(|(p, o, g)| ((p, o), g)) {
        for ((&pv, &ov), &gv) in p.as_slice().iter().zip(o.as_slice()).zip(g.as_slice()) {
            err = err.max(relative_error(pv, ov - lr * scale * gv));
        }
    }
    record(&mut checks, "clip_and_step", err);

    // whole unrolled model
    let (params, batch, state) = tiny_model(3);
    let grads = loss_and_grads(&params, &batch, &state, Mode::Train, 0.3, &mut Rng::new(5))?.grads;
    check_params(&mut checks, "lstm_lm", &params, &grads, |p| {
        model_loss(p, &batch, &state)
    });

    // output-embedding regularizer and joint loss
    let toks = |s: &str| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
    let vocab = build_vocab(&toks("a a a b b"), &toks("c c d e"))?;
    let part = RowPartition::new(&vocab, RowAlignment::FrequencyRank)?;
    let w_out = random(&mut rng, vocab.len(), 4, 1.0);
    let (_, dreg) = mse_regularizer(&w_out, &part)?;
    let nreg = numeric_gradient(&w_out, |w| mse_regularizer(w, &part).unwrap().0);
    record(
        &mut checks,
        "mse_regularizer",
        max_relative_error(&dreg, &nreg),
    );

    let (mut params, batch, state) = tiny_model(4);
    params.w_out = random(&mut rng, 5, 4, 0.8);
    let toks5 = build_vocab(&toks("a b"), &toks("c"))?;
    let part5 = RowPartition::new(&toks5, RowAlignment::FrequencyRank)?;
    let lambda = 0.7;
    let mut joint =
        loss_and_grads(&params, &batch, &state, Mode::Train, 0.3, &mut Rng::new(5))?.grads;
    let (_, dm) = mse_regularizer(&params.w_out, &part5)?;
    joint.w_out.axpy(lambda, &dm)?;
    check_params(&mut checks, "joint_loss", &params, &joint, |p| {
        let ce = model_loss(p, &batch, &state);
        joint_loss(ce, mse_regularizer(&p.w_out, &part5).unwrap().0, lambda)
    });

    Ok(GradCheckReport {
        checks,
        tolerance: TOLERANCE,
    })
}
