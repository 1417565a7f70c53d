//! Word-level LSTM language model: embedding -> dropout -> one LSTM layer ->
//! dropout -> projection to vocabulary logits.
//!
//! Gate blocks are laid out in the order input, forget, cell, output.

use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::numcore::{
    clip_and_step, dropout_mask, embedding_backward, embedding_lookup, gemm, sigmoid_scalar,
    softmax_cross_entropy, DropoutMask, Matrix, Mode, Rng, StepStats, Transpose,
};
use crate::scalar::Scalar;

pub const GATE_ORDER: &str = "ifgo";
pub const PARAM_NAMES: [&str; 7] = ["E", "W_ih", "W_hh", "b_ih", "b_hh", "W_out", "b_out"];
pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub emb: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub const DEFAULT_EMB: usize = 300;
    pub const DEFAULT_HIDDEN: usize = 650;

    pub fn new(vocab: usize, emb: usize, hidden: usize) -> Result<Self> {
        if vocab == 0 || emb == 0 || hidden == 0 {
            return Err(Error::invalid(format!(
                "model dimensions must be positive (V={vocab}, emb={emb}, hidden={hidden})"
            )));
        }
        Ok(Self { vocab, emb, hidden })
    }

    pub fn with_vocab(vocab: usize) -> Result<Self> {
        Self::new(vocab, Self::DEFAULT_EMB, Self::DEFAULT_HIDDEN)
    }

    /// Expected `(rows, cols)` of every parameter array, in checkpoint order.
    pub fn shapes(&self) -> [(usize, usize); 7] {
        let (v, e, h) = (self.vocab, self.emb, self.hidden);
        [
            (v, e),
            (4 * h, e),
            (4 * h, h),
            (4 * h, 1),
            (4 * h, 1),
            (v, h),
            (v, 1),
        ]
    }
}

/// All trainable arrays. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLmParams<T> {
    pub embedding: Matrix<T>,
    pub w_ih: Matrix<T>,
    pub w_hh: Matrix<T>,
    pub b_ih: Matrix<T>,
    pub b_hh: Matrix<T>,
    pub w_out: Matrix<T>,
    pub b_out: Matrix<T>,
}

pub type Gradients<T> = LstmLmParams<T>;

impl<T: Scalar> LstmLmParams<T> {
    pub fn zeros(dims: ModelDims) -> Self {
        let s = dims.shapes();
        let z = |i: usize| Matrix::zeros(s[i].0, s[i].1);
        Self {
            embedding: z(0),
            w_ih: z(1),
            w_hh: z(2),
            b_ih: z(3),
            b_hh: z(4),
            w_out: z(5),
            b_out: z(6),
        }
    }

    /// Builds from arrays in checkpoint order, validating shapes.
    pub fn from_arrays(arrays: Vec<Matrix<T>>) -> Result<Self> {
        let Ok([embedding, w_ih, w_hh, b_ih, b_hh, w_out, b_out]) =
            <[Matrix<T>; 7]>::try_from(arrays)
        else {
            return Err(Error::invalid("expected exactly 7 parameter arrays"));
        };
        let p = Self {
            embedding,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            w_out,
            b_out,
        };
        p.check()?;
        Ok(p)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.embedding.rows(),
            emb: self.embedding.cols(),
            hidden: self.w_hh.cols(),
        }
    }

    pub fn check(&self) -> Result<()> {
        let dims = self.dims();
        ModelDims::new(dims.vocab, dims.emb, dims.hidden)?;
        for ((name, m), want) in PARAM_NAMES.iter().zip(self.arrays()).zip(dims.shapes()) {
            if m.shape() != want {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, expected {want:?}",
                    m.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn arrays(&self) -> [&Matrix<T>; 7] {
        [
            &self.embedding,
            &self.w_ih,
            &self.w_hh,
            &self.b_ih,
            &self.b_hh,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut Matrix<T>; 7] {
        [
            &mut self.embedding,
            &mut self.w_ih,
            &mut self.w_hh,
            &mut self.b_ih,
            &mut self.b_hh,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|m| m.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> LstmLmParams<U> {
        LstmLmParams {
            embedding: self.embedding.cast(),
            w_ih: self.w_ih.cast(),
            w_hh: self.w_hh.cast(),
            b_ih: self.b_ih.cast(),
            b_hh: self.b_hh.cast(),
            w_out: self.w_out.cast(),
            b_out: self.b_out.cast(),
        }
    }

    /// Clipped SGD step using these gradients.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, lr: f64, clip_norm: f64) -> Result<StepStats> {
        let g = grads.arrays();
        let mut p = self.arrays_mut();
        clip_and_step(&mut p, &g, lr, clip_norm).map_err(|e| match e {
            Error::NonFinite(msg) => {
                let idx = msg
                    .rsplit(' ')
                    .next()
                    .and_then(|s| s.parse::<usize>().ok())
                    .unwrap_or(0);
                Error::NonFinite(format!("gradient of {}", PARAM_NAMES[idx]))
            }
            other => other,
        })
    }
}

/// Uniform initialisation in [-0.1, 0.1] for weights, zeros for biases.
pub fn init_params<T: Scalar>(dims: ModelDims, seed: u64) -> LstmLmParams<T> {
    let mut rng = Rng::new(seed).split(0x1_417);
    let mut p = LstmLmParams::zeros(dims);
    for m in [&mut p.embedding, &mut p.w_ih, &mut p.w_hh, &mut p.w_out] {
        for x in m.as_mut_slice() {
            *x = T::from_f64_lossy(rng.uniform(-INIT_RANGE, INIT_RANGE));
        }
    }
    p
}

/// Recurrent state carried between batches.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState<T> {
    pub h: Matrix<T>,
    pub c: Matrix<T>,
}

pub fn zero_state<T: Scalar>(batch_size: usize, dims: ModelDims) -> HiddenState<T> {
    HiddenState {
        h: Matrix::zeros(batch_size, dims.hidden),
        c: Matrix::zeros(batch_size, dims.hidden),
    }
}

impl<T: Scalar> HiddenState<T> {
    /// Same values, cut from the graph: the next batch's backward pass treats
    /// them as constants. Our backward never propagates past the incoming
    /// state, so this is a plain copy.
    pub fn detach(&self) -> Self {
        self.clone()
    }

    pub fn batch_size(&self) -> usize {
        self.h.rows()
    }
}

pub fn detach<T: Scalar>(state: &HiddenState<T>) -> HiddenState<T> {
    state.detach()
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `(steps * batch) x V`, row `t * batch + b`.
    pub logits: Matrix<T>,
    pub state: HiddenState<T>,
}

struct Cache<T> {
    x: Matrix<T>,
    mask_in: DropoutMask<T>,
    /// activated gates, `(steps*batch) x 4h`
    gates: Matrix<T>,
    c_prev: Matrix<T>,
    h_prev: Matrix<T>,
    tanh_c: Matrix<T>,
    h_drop: Matrix<T>,
    mask_out: DropoutMask<T>,
}

fn check_inputs<T: Scalar>(
    params: &LstmLmParams<T>,
    batch: &Batch,
    state: &HiddenState<T>,
) -> Result<()> {
    let dims = params.dims();
    let want = (batch.batch_size, dims.hidden);
    if state.h.shape() != want || state.c.shape() != want {
        return Err(Error::Shape {
            op: "lstm state",
            left: want,
            right: state.h.shape(),
        });
    }
    if batch.inputs.len() != batch.positions() || batch.targets.len() != batch.positions() {
        return Err(Error::invalid(
            "batch id arrays do not match steps x batch_size",
        ));
    }
    if batch.steps == 0 {
        return Err(Error::invalid("batch has zero steps"));
    }
    Ok(())
}

fn run<T: Scalar>(
    params: &LstmLmParams<T>,
    batch: &Batch,
    state: &HiddenState<T>,
    mode: Mode,
    dropout: f64,
    rng: &mut Rng,
) -> Result<(ForwardOutput<T>, Cache<T>)> {
    check_inputs(params, batch, state)?;
    let ModelDims {
        vocab,
        emb,
        hidden: h,
    } = params.dims();
    let (steps, bsz) = (batch.steps, batch.batch_size);
    let n = steps * bsz;
    let h4 = 4 * h;

    let mut x = embedding_lookup(&params.embedding, &batch.inputs)?;
    let mask_in = dropout_mask(n, emb, dropout, mode, rng)?;
    mask_in.apply_in_place(&mut x)?;

    // input projection for all steps at once, biases folded in
    let mut gates = Matrix::zeros(n, h4);
    for r in 0..n {
        let row = gates.row_mut(r);
        for (j, v) in row.iter_mut().enumerate() {
            *v = params.b_ih.as_slice()[j] + params.b_hh.as_slice()[j];
        }
    }
    gemm(
        T::one(),
        &x,
        Transpose::No,
        &params.w_ih,
        Transpose::Yes,
        T::one(),
        &mut gates,
    )?;

    let mut h_prev = Matrix::zeros(n, h);
    let mut c_prev = Matrix::zeros(n, h);
    let mut tanh_c = Matrix::zeros(n, h);
    let mut hs = Matrix::zeros(n, h);
    let mut h_cur = state.h.clone();
    let mut c_cur = state.c.clone();
    let whh = params.w_hh.as_slice();

    for t in 0..steps {
        let rows = t * bsz..(t + 1) * bsz;
        h_prev.as_mut_slice()[rows.start * h..rows.end * h].copy_from_slice(h_cur.as_slice());
        c_prev.as_mut_slice()[rows.start * h..rows.end * h].copy_from_slice(c_cur.as_slice());
        {
            let g = &mut gates.as_mut_slice()[rows.start * h4..rows.end * h4];
            // g += h_cur * W_hh^T
            T::gemm(
                bsz,
                h,
                h4,
                T::one(),
                (h_cur.as_slice(), h as isize, 1),
                (whh, 1, h as isize),
                T::one(),
                (g, h4 as isize, 1),
            );
        }
        for b in 0..bsz {
            let r = rows.start + b;
            let g = gates.row_mut(r);
            for j in 0..h {
                g[j] = sigmoid_scalar(g[j]);
                g[h + j] = sigmoid_scalar(g[h + j]);
                g[2 * h + j] = g[2 * h + j].tanh();
                g[3 * h + j] = sigmoid_scalar(g[3 * h + j]);
            }
            let g = gates.row(r);
            let c_row = c_cur.row_mut(b);
            let tc_row = tanh_c.row_mut(r);
            for j in 0..h {
                let c = g[h + j] * c_row[j] + g[j] * g[2 * h + j];
                c_row[j] = c;
                tc_row[j] = c.tanh();
            }
            let tc_row = tanh_c.row(r);
            let h_row = h_cur.row_mut(b);
            for j in 0..h {
                h_row[j] = g[3 * h + j] * tc_row[j];
            }
            hs.row_mut(r).copy_from_slice(h_row);
        }
    }

    let mask_out = dropout_mask(n, h, dropout, mode, rng)?;
    let mut h_drop = hs;
    mask_out.apply_in_place(&mut h_drop)?;

    let mut logits = Matrix::zeros(n, vocab);
    for r in 0..n {
        logits.row_mut(r).copy_from_slice(params.b_out.as_slice());
    }
    gemm(
        T::one(),
        &h_drop,
        Transpose::No,
        &params.w_out,
        Transpose::Yes,
        T::one(),
        &mut logits,
    )?;

    Ok((
        ForwardOutput {
            logits,
            state: HiddenState { h: h_cur, c: c_cur },
        },
        Cache {
            x,
            mask_in,
            gates,
            c_prev,
            h_prev,
            tanh_c,
            h_drop,
            mask_out,
        },
    ))
}

/// Logits for every position of `batch` and the final state.
pub fn forward<T: Scalar>(
    params: &LstmLmParams<T>,
    batch: &Batch,
    state: &HiddenState<T>,
    mode: Mode,
    dropout: f64,
    rng: &mut Rng,
) -> Result<ForwardOutput<T>> {
    run(params, batch, state, mode, dropout, rng).map(|(out, _)| out)
}

#[derive(Debug, Clone)]
pub struct LossAndGrads<T> {
    /// Mean cross-entropy (nats) over all `steps * batch` positions.
    pub loss: T,
    pub total_nll: f64,
    pub count: usize,
    pub grads: Gradients<T>,
    pub state: HiddenState<T>,
}

/// Mean cross-entropy and its gradient, backpropagated through this batch's
/// unrolled steps only. No gradient flows into the incoming `state`.
pub fn loss_and_grads<T: Scalar>(
    params: &LstmLmParams<T>,
    batch: &Batch,
    state: &HiddenState<T>,
    mode: Mode,
    dropout: f64,
    rng: &mut Rng,
) -> Result<LossAndGrads<T>> {
    let (out, cache) = run(params, batch, state, mode, dropout, rng)?;
    let ce = softmax_cross_entropy(&out.logits, &batch.targets)?;
    let grads = backward(params, batch, &cache, &ce.dlogits)?;
    Ok(LossAndGrads {
        loss: ce.loss,
        total_nll: ce.total_nll,
        count: ce.count,
        grads,
        state: out.state,
    })
}

fn column_sums<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(m.cols(), 1);
    let acc = out.as_mut_slice();
    for r in 0..m.rows() {
        for (a, &v) in acc.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
    out
}

fn backward<T: Scalar>(
    params: &LstmLmParams<T>,
    batch: &Batch,
    cache: &Cache<T>,
    dlogits: &Matrix<T>,
) -> Result<Gradients<T>> {
    let dims = params.dims();
    let h = dims.hidden;
    let h4 = 4 * h;
    let (steps, bsz) = (batch.steps, batch.batch_size);
    let n = steps * bsz;
    let mut grads = Gradients::zeros(dims);

    gemm(
        T::one(),
        dlogits,
        Transpose::Yes,
        &cache.h_drop,
        Transpose::No,
        T::zero(),
        &mut grads.w_out,
    )?;
    grads.b_out = column_sums(dlogits);

    let mut dhs = Matrix::zeros(n, h);
    gemm(
        T::one(),
        dlogits,
        Transpose::No,
        &params.w_out,
        Transpose::No,
        T::zero(),
        &mut dhs,
    )?;
    cache.mask_out.apply_in_place(&mut dhs)?;

    let mut dgates = Matrix::zeros(n, h4);
    let mut dh_next = Matrix::<T>::zeros(bsz, h);
    let mut dc_next = Matrix::<T>::zeros(bsz, h);
    let one = T::one();
    for t in (0..steps).rev() {
        for b in 0..bsz {
            let r = t * bsz + b;
            let g = cache.gates.row(r);
            let tc = cache.tanh_c.row(r);
            let cp = cache.c_prev.row(r);
            let dh_out = dhs.row(r);
            let dhn = dh_next.row(b);
            let dcn = dc_next.row_mut(b);
            let dg = dgates.row_mut(r);
            for j in 0..h {
                let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let dh = dh_out[j] + dhn[j];
                let d_o = dh * tc[j];
                let dc = dh * o * (one - tc[j] * tc[j]) + dcn[j];
                dcn[j] = dc * f;
                dg[j] = dc * gg * i * (one - i);
                dg[h + j] = dc * cp[j] * f * (one - f);
                dg[2 * h + j] = dc * i * (one - gg * gg);
                dg[3 * h + j] = d_o * o * (one - o);
            }
        }
        // dh_next = dgates_t * W_hh
        let dg_t = &dgates.as_slice()[t * bsz * h4..(t + 1) * bsz * h4];
        T::gemm(
            bsz,
            h4,
            h,
            T::one(),
            (dg_t, h4 as isize, 1),
            (params.w_hh.as_slice(), h as isize, 1),
            T::zero(),
            (dh_next.as_mut_slice(), h as isize, 1),
        );
    }

    gemm(
        T::one(),
        &dgates,
        Transpose::Yes,
        &cache.h_prev,
        Transpose::No,
        T::zero(),
        &mut grads.w_hh,
    )?;
    gemm(
        T::one(),
        &dgates,
        Transpose::Yes,
        &cache.x,
        Transpose::No,
        T::zero(),
        &mut grads.w_ih,
    )?;
    grads.b_ih = column_sums(&dgates);
    grads.b_hh = grads.b_ih.clone();

    let mut dx = Matrix::zeros(n, dims.emb);
    gemm(
        T::one(),
        &dgates,
        Transpose::No,
        &params.w_ih,
        Transpose::No,
        T::zero(),
        &mut dx,
    )?;
    cache.mask_in.apply_in_place(&mut dx)?;
    embedding_backward(&mut grads.embedding, &batch.inputs, &dx)?;
    Ok(grads)
}
