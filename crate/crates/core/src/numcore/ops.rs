//! Forward and backward passes for every primitive the language model uses.

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Rng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// Train-time vs evaluation-time behaviour for stochastic layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn view<T: Scalar>(m: &Matrix<T>, t: Transpose) -> (usize, usize, isize, isize) {
    let cols = m.cols() as isize;
    match t {
        Transpose::No => (m.rows(), m.cols(), cols, 1),
        Transpose::Yes => (m.cols(), m.rows(), 1, cols),
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`.
pub fn gemm<T: Scalar>(
    alpha: T,
    a: &Matrix<T>,
    ta: Transpose,
    b: &Matrix<T>,
    tb: Transpose,
    beta: T,
    c: &mut Matrix<T>,
) -> Result<()> {
    let (m, k, ars, acs) = view(a, ta);
    let (k2, n, brs, bcs) = view(b, tb);
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: (m, k),
            right: (k2, n),
        });
    }
    if c.shape() != (m, n) {
        return Err(Error::Shape {
            op: "matmul output",
            left: (m, n),
            right: c.shape(),
        });
    }
    let cs = n as isize;
    T::gemm(
        m,
        k,
        n,
        alpha,
        (a.as_slice(), ars, acs),
        (b.as_slice(), brs, bcs),
        beta,
        (c.as_mut_slice(), cs, 1),
    );
    Ok(())
}

/// `op(a) * op(b)` into a fresh matrix.
pub fn matmul_t<T: Scalar>(
    a: &Matrix<T>,
    ta: Transpose,
    b: &Matrix<T>,
    tb: Transpose,
) -> Result<Matrix<T>> {
    let (m, _, _, _) = view(a, ta);
    let (_, n, _, _) = view(b, tb);
    let mut c = Matrix::zeros(m, n);
    gemm(T::one(), a, ta, b, tb, T::zero(), &mut c)?;
    Ok(c)
}

pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    matmul_t(a, Transpose::No, b, Transpose::No)
}

/// Gradients of `C = A B`: `(dC Bᵀ, Aᵀ dC)`.
pub fn matmul_backward<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    dc: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if dc.shape() != (a.rows(), b.cols()) {
        return Err(Error::Shape {
            op: "matmul_backward",
            left: (a.rows(), b.cols()),
            right: dc.shape(),
        });
    }
    let da = matmul_t(dc, Transpose::No, b, Transpose::Yes)?;
    let db = matmul_t(a, Transpose::Yes, dc, Transpose::No)?;
    Ok((da, db))
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(sigmoid_scalar)
}

/// Backward from the forward output `y = σ(x)`.
pub fn sigmoid_backward<T: Scalar>(y: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
    y.same_shape(dy, "sigmoid_backward")?;
    let data = y
        .as_slice()
        .iter()
        .zip(dy.as_slice())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Matrix::from_vec(y.rows(), y.cols(), data)
}

pub fn tanh<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(T::tanh)
}

/// Backward from the forward output `y = tanh(x)`.
pub fn tanh_backward<T: Scalar>(y: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
    y.same_shape(dy, "tanh_backward")?;
    let data = y
        .as_slice()
        .iter()
        .zip(dy.as_slice())
        .map(|(&t, &g)| g * (T::one() - t * t))
        .collect();
    Matrix::from_vec(y.rows(), y.cols(), data)
}

#[inline]
fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

fn check_targets(targets: &[usize], n: usize, v: usize) -> Result<()> {
    if targets.len() != n {
        return Err(Error::invalid(format!(
            "{} targets for {n} logit rows",
            targets.len()
        )));
    }
    if n == 0 {
        return Err(Error::invalid("cross-entropy over zero rows"));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::OutOfRange {
            what: "target",
            index: bad,
            bound: v,
        });
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|x| *x = (*x - lse).exp());
    }
    out
}

/// Result of the fused softmax + negative log-likelihood.
#[derive(Debug, Clone)]
pub struct CrossEntropy<T> {
    /// Mean loss over rows.
    pub loss: T,
    /// Sum of per-row negative log-likelihoods (nats), accumulated in f64.
    pub total_nll: f64,
    pub count: usize,
    /// `(softmax - onehot) / n`.
    pub dlogits: Matrix<T>,
}

pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[usize],
) -> Result<CrossEntropy<T>> {
    let (n, v) = logits.shape();
    check_targets(targets, n, v)?;
    let inv_n = T::one() / T::from_usize(n).expect("row count fits");
    let mut dlogits = logits.clone();
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        let row = dlogits.row_mut(r);
        let lse = log_sum_exp(row);
        total += (lse - row[t]).as_f64();
        for x in row.iter_mut() {
            *x = (*x - lse).exp() * inv_n;
        }
        row[t] -= inv_n;
    }
    Ok(CrossEntropy {
        loss: T::from_f64_lossy(total / n as f64),
        total_nll: total,
        count: n,
        dlogits,
    })
}

/// Neumaier-compensated running sum. Long evaluation streams add many
/// similar terms, where plain accumulation drifts by tens of ulps.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Summed negative log-likelihood without a gradient (evaluation path).
pub fn cross_entropy_total<T: Scalar>(logits: &Matrix<T>, targets: &[usize]) -> Result<f64> {
    let (n, v) = logits.shape();
    check_targets(targets, n, v)?;
    let mut total = CompensatedSum::default();
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        total.add((log_sum_exp(row) - row[t]).as_f64());
    }
    Ok(total.value())
}

pub fn embedding_lookup<T: Scalar>(table: &Matrix<T>, ids: &[usize]) -> Result<Matrix<T>> {
    let d = table.cols();
    let mut out = Matrix::zeros(ids.len(), d);
    for (i, &id) in ids.iter().enumerate() {
        if id >= table.rows() {
            return Err(Error::OutOfRange {
                what: "embedding id",
                index: id,
                bound: table.rows(),
            });
        }
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Scatter-adds `d_out` rows into `d_table`; duplicate ids accumulate.
pub fn embedding_backward<T: Scalar>(
    d_table: &mut Matrix<T>,
    ids: &[usize],
    d_out: &Matrix<T>,
) -> Result<()> {
    if d_out.rows() != ids.len() || d_out.cols() != d_table.cols() {
        return Err(Error::Shape {
            op: "embedding_backward",
            left: (ids.len(), d_table.cols()),
            right: d_out.shape(),
        });
    }
    for (i, &id) in ids.iter().enumerate() {
        if id >= d_table.rows() {
            return Err(Error::OutOfRange {
                what: "embedding id",
                index: id,
                bound: d_table.rows(),
            });
        }
        let src = d_out.row(i);
        for (d, &g) in d_table.row_mut(id).iter_mut().zip(src) {
            *d += g;
        }
    }
    Ok(())
}

/// Per-element multipliers recorded by a dropout forward pass.
#[derive(Debug, Clone)]
pub struct DropoutMask<T> {
    shape: (usize, usize),
    // None means identity (eval mode or p = 0)
    scale: Option<Vec<T>>,
}

impl<T: Scalar> DropoutMask<T> {
    pub fn identity(rows: usize, cols: usize) -> Self {
        Self {
            shape: (rows, cols),
            scale: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scale.is_none()
    }

    pub fn apply_in_place(&self, x: &mut Matrix<T>) -> Result<()> {
        if x.shape() != self.shape {
            return Err(Error::Shape {
                op: "dropout",
                left: self.shape,
                right: x.shape(),
            });
        }
        if let Some(scale) = &self.scale {
            for (v, &s) in x.as_mut_slice().iter_mut().zip(scale) {
                *v *= s;
            }
        }
        Ok(())
    }

    pub fn backward(&self, dy: &Matrix<T>) -> Result<Matrix<T>> {
        let mut dx = dy.clone();
        self.apply_in_place(&mut dx)?;
        Ok(dx)
    }
}

/// Draws an inverted-dropout mask: each element is zeroed with probability `p`,
/// survivors are scaled by `1 / (1 - p)`.
pub fn dropout_mask<T: Scalar>(
    rows: usize,
    cols: usize,
    p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<DropoutMask<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "dropout probability {p} not in [0, 1)"
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(DropoutMask::identity(rows, cols));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let scale = (0..rows * cols)
        .map(|_| if rng.next_f64() < p { T::zero() } else { keep })
        .collect();
    Ok(DropoutMask {
        shape: (rows, cols),
        scale: Some(scale),
    })
}

pub fn dropout<T: Scalar>(
    x: &Matrix<T>,
    p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Matrix<T>, DropoutMask<T>)> {
    let mask = dropout_mask(x.rows(), x.cols(), p, mode, rng)?;
    let mut y = x.clone();
    mask.apply_in_place(&mut y)?;
    Ok((y, mask))
}

/// Element-mean squared error and its gradients with respect to both operands.
pub fn mse<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<(T, Matrix<T>, Matrix<T>)> {
    a.same_shape(b, "mse")?;
    if a.is_empty() {
        return Err(Error::invalid("mse over empty matrices"));
    }
    let n = a.len();
    let two_over_n = T::from_f64_lossy(2.0 / n as f64);
    let mut sum = 0.0f64;
    let mut da = Matrix::zeros(a.rows(), a.cols());
    for ((d, &x), &y) in da
        .as_mut_slice()
        .iter_mut()
        .zip(a.as_slice())
        .zip(b.as_slice())
    {
        let diff = x - y;
        sum += (diff * diff).as_f64();
        *d = two_over_n * diff;
    }
    let db = da.map(|x| -x);
    Ok((T::from_f64_lossy(sum / n as f64), da, db))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global L2 norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to every gradient (1 when no clipping happened).
    pub clip_scale: f64,
}

/// Global-norm gradient clipping followed by a plain SGD update.
pub fn clip_and_step<T: Scalar>(
    params: &mut [&mut Matrix<T>],
    grads: &[&Matrix<T>],
    lr: f64,
    clip_norm: f64,
) -> Result<StepStats> {
    if params.len() != grads.len() {
        return Err(Error::invalid(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if lr.is_nan() || lr <= 0.0 || clip_norm.is_nan() || clip_norm <= 0.0 {
        return Err(Error::invalid(format!(
            "lr ({lr}) and clip_norm ({clip_norm}) must be positive"
        )));
    }
    let mut sq = 0.0f64;
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.same_shape(g, "clip_and_step")?;
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
        sq += g.sum_sq_f64();
    }
    let norm = sq.sqrt();
    let clip_scale = if norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    };
    let step = T::from_f64_lossy(lr * clip_scale);
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *w -= step * d;
        }
    }
    Ok(StepStats {
        grad_norm: norm,
        clip_scale,
    })
}
