//! The four training regimes: single-language baselines, alternate-batch
//! bilingual training with hidden-state carryover, and alternate-batch
//! training with an MSE pull between the L1 and L2 blocks of the output
//! projection.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::corpus::{
    batchify, chunk_bptt, equalize, interleave_schedule, Batch, Language, Tag, TokenStream,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::model::{init_params, loss_and_grads, zero_state, HiddenState, LstmLmParams, ModelDims};
use crate::numcore::{mse, Matrix, Mode, Rng};
use crate::scalar::Scalar;

const DROPOUT_STREAM: u64 = 0xD0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegimeKind {
    L1Only,
    L2Only,
    Alternate,
    AlternateMse,
}

impl RegimeKind {
    /// Report order: L2 baseline, L1 baseline, alternate, alternate + MSE.
    pub const TABLE_ORDER: [RegimeKind; 4] = [
        RegimeKind::L2Only,
        RegimeKind::L1Only,
        RegimeKind::Alternate,
        RegimeKind::AlternateMse,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            RegimeKind::L1Only => "l1-only",
            RegimeKind::L2Only => "l2-only",
            RegimeKind::Alternate => "alternate",
            RegimeKind::AlternateMse => "alternate-mse",
        }
    }

    /// Row label in benchmark reports (L1 plays English, L2 Spanish).
    pub fn table_label(self) -> &'static str {
        match self {
            RegimeKind::L2Only => "Spanish data only",
            RegimeKind::L1Only => "English data only",
            RegimeKind::Alternate => "Spanish + English data (*)",
            RegimeKind::AlternateMse => "MSE (+)",
        }
    }

    pub fn is_alternating(self) -> bool {
        matches!(self, RegimeKind::Alternate | RegimeKind::AlternateMse)
    }
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for RegimeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1-only" => Ok(RegimeKind::L1Only),
            "l2-only" => Ok(RegimeKind::L2Only),
            "alternate" => Ok(RegimeKind::Alternate),
            "alternate-mse" => Ok(RegimeKind::AlternateMse),
            other => Err(Error::invalid(format!(
                "unknown regime {other:?} (expected l1-only, l2-only, alternate, alternate-mse)"
            ))),
        }
    }
}

/// How L1 rows of the output projection are paired with L2 rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowAlignment {
    /// k-th most frequent L1 word with k-th most frequent L2 word.
    FrequencyRank,
    /// Pools kept in id order.
    None,
}

impl fmt::Display for RowAlignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RowAlignment::FrequencyRank => "frequency-rank",
            RowAlignment::None => "none",
        })
    }
}

impl FromStr for RowAlignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frequency-rank" => Ok(RowAlignment::FrequencyRank),
            "none" => Ok(RowAlignment::None),
            other => Err(Error::invalid(format!(
                "unknown row alignment {other:?} (expected frequency-rank or none)"
            ))),
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: RegimeKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub bptt_steps: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub initial_lr: f64,
    pub lr_halving: bool,
    pub clip_norm: f64,
    pub lambda_mse: f64,
    pub mse_row_alignment: RowAlignment,
    pub seed: u64,
    /// Batch size used for validation/test perplexity.
    pub eval_batch_size: usize,
    /// Trailing share of each training corpus held out for per-epoch validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: RegimeKind::Alternate,
            epochs: 20,
            batch_size: 40,
            bptt_steps: 35,
            emb_dim: ModelDims::DEFAULT_EMB,
            hidden_dim: ModelDims::DEFAULT_HIDDEN,
            dropout: 0.3,
            initial_lr: 20.0,
            lr_halving: true,
            clip_norm: 0.25,
            lambda_mse: 1.0,
            mse_row_alignment: RowAlignment::FrequencyRank,
            seed: 1,
            eval_batch_size: 10,
            validation_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("bptt_steps", self.bptt_steps),
            ("emb_dim", self.emb_dim),
            ("hidden_dim", self.hidden_dim),
            ("eval_batch_size", self.eval_batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::invalid("initial_lr must be positive"));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if !(self.lambda_mse >= 0.0 && self.lambda_mse.is_finite()) {
            return Err(Error::invalid("lambda_mse must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn with_regime(&self, regime: RegimeKind) -> Self {
        Self {
            regime,
            ..self.clone()
        }
    }

    pub fn dims(&self, vocab: usize) -> Result<ModelDims> {
        ModelDims::new(vocab, self.emb_dim, self.hidden_dim)
    }
}

/// Learning rate for epoch `epoch` (0-based): halved after every epoch when enabled.
pub fn lr_schedule(initial_lr: f64, epoch: usize, halving: bool) -> f64 {
    if halving {
        initial_lr / 2f64.powi(epoch as i32)
    } else {
        initial_lr
    }
}

/// Row indices of the output projection paired for the MSE term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowPartition {
    pub l1_rows: Vec<usize>,
    pub l2_rows: Vec<usize>,
}

impl RowPartition {
    /// L1-tagged rows form pool 1 and L2-tagged rows pool 2; SHARED and
    /// SPECIAL rows are excluded. Both pools are truncated to the smaller size.
    pub fn new(vocab: &Vocabulary, alignment: RowAlignment) -> Result<Self> {
        let pool = |tag: Tag| {
            let mut ids: Vec<usize> = vocab.ids_with_tag(tag).collect();
            if alignment == RowAlignment::FrequencyRank {
                ids.sort_by(|&a, &b| vocab.count(b).cmp(&vocab.count(a)).then(a.cmp(&b)));
            }
            ids
        };
        let (mut l1_rows, mut l2_rows) = (pool(Tag::L1), pool(Tag::L2));
        if l1_rows.is_empty() || l2_rows.is_empty() {
            return Err(Error::invalid(format!(
                "output-embedding MSE needs words tagged L1 and L2 (found {} and {})",
                l1_rows.len(),
                l2_rows.len()
            )));
        }
        let k = l1_rows.len().min(l2_rows.len());
        l1_rows.truncate(k);
        l2_rows.truncate(k);
        Ok(Self { l1_rows, l2_rows })
    }

    pub fn len(&self) -> usize {
        self.l1_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l1_rows.is_empty()
    }

    fn gather<T: Scalar>(w_out: &Matrix<T>, rows: &[usize]) -> Matrix<T> {
        let mut m = Matrix::zeros(rows.len(), w_out.cols());
        for (k, &r) in rows.iter().enumerate() {
            m.row_mut(k).copy_from_slice(w_out.row(r));
        }
        m
    }

    pub fn split<T: Scalar>(&self, w_out: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        (
            Self::gather(w_out, &self.l1_rows),
            Self::gather(w_out, &self.l2_rows),
        )
    }
}

/// `(W1, W2)`: aligned L1 and L2 row blocks of `w_out`.
pub fn partition_output_rows<T: Scalar>(
    w_out: &Matrix<T>,
    vocab: &Vocabulary,
    alignment: RowAlignment,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if w_out.rows() != vocab.len() {
        return Err(Error::invalid(format!(
            "output projection has {} rows for a vocabulary of {}",
            w_out.rows(),
            vocab.len()
        )));
    }
    Ok(RowPartition::new(vocab, alignment)?.split(w_out))
}

/// Element-mean squared distance between the aligned row blocks, with its
/// gradient scattered back onto a full-size `W_out` gradient (zero elsewhere).
pub fn mse_regularizer<T: Scalar>(
    w_out: &Matrix<T>,
    partition: &RowPartition,
) -> Result<(T, Matrix<T>)> {
    let (w1, w2) = partition.split(w_out);
    let (loss, d1, d2) = mse(&w1, &w2)?;
    let mut grad = Matrix::zeros(w_out.rows(), w_out.cols());
    for (k, (&r1, &r2)) in partition.l1_rows.iter().zip(&partition.l2_rows).enumerate() {
        grad.row_mut(r1).copy_from_slice(d1.row(k));
        grad.row_mut(r2).copy_from_slice(d2.row(k));
    }
    Ok((loss, grad))
}

/// Mean squared distance only (no gradient).
pub fn output_embedding_mse<T: Scalar>(w_out: &Matrix<T>, partition: &RowPartition) -> Result<f64> {
    let (w1, w2) = partition.split(w_out);
    Ok(mse(&w1, &w2)?.0.as_f64())
}

pub fn joint_loss<T: Scalar>(ce: T, mse: T, lambda_mse: T) -> T {
    ce + lambda_mse * mse
}

/// Batch order for one epoch of `regime`.
///
/// Alternating regimes equalise the two streams first so that both produce
/// the same number of batches.
pub fn build_schedule(
    regime: RegimeKind,
    l1: &TokenStream,
    l2: &TokenStream,
    batch_size: usize,
    bptt_steps: usize,
) -> Result<Vec<Batch>> {
    let chunks = |s: &TokenStream| chunk_bptt(&batchify(s, batch_size)?, bptt_steps);
    match regime {
        RegimeKind::L1Only => chunks(l1),
        RegimeKind::L2Only => chunks(l2),
        RegimeKind::Alternate | RegimeKind::AlternateMse => {
            let (a, b) = equalize(l1, l2)?;
            interleave_schedule(&chunks(&a)?, &chunks(&b)?)
        }
    }
}

/// Training streams and validation stream for one regime, after holding out
/// the tail of each training corpus the regime uses.
#[derive(Debug, Clone)]
pub struct RegimeData {
    pub l1: TokenStream,
    pub l2: TokenStream,
    pub validation: Option<TokenStream>,
}

pub fn prepare_regime_data(
    config: &TrainConfig,
    l1: &TokenStream,
    l2: &TokenStream,
    eos: usize,
) -> RegimeData {
    let (l1_train, l1_held) = l1.split_holdout(config.validation_fraction, eos);
    let (l2_train, l2_held) = l2.split_holdout(config.validation_fraction, eos);
    let held = match config.regime {
        RegimeKind::L1Only => l1_held,
        RegimeKind::L2Only => l2_held,
        _ => l1_held.concat(&l2_held, Language::CodeSwitched),
    };
    let validation = (held.len() >= 2 * config.eval_batch_size).then_some(held);
    RegimeData {
        l1: l1_train,
        l2: l2_train,
        validation,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training cross-entropy (nats/token).
    pub train_ce: f64,
    /// Mean MSE between aligned output rows over the epoch's batches
    /// (reported for every regime, only optimised under alternate-mse).
    pub train_mse: Option<f64>,
    pub val_ce: Option<f64>,
    pub val_ppl: Option<f64>,
    pub seconds: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,lr,train_ce,train_mse,val_ce,val_ppl";

impl EpochReport {
    /// One CSV row; wall-clock time is left out so reruns are byte-identical.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_ce,
            opt(self.train_mse),
            opt(self.val_ce),
            opt(self.val_ppl)
        )
    }
}

pub fn epochs_csv(reports: &[EpochReport]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub train_ce: f64,
    pub train_mse: Option<f64>,
    pub batches: usize,
}

/// One pass over `schedule`: forward/backward per batch, optional MSE term,
/// clipped SGD step, hidden state detached and carried into the next batch
/// whatever its language.
#[allow(clippy::too_many_arguments)]
pub fn run_epoch<T: Scalar>(
    params: &mut LstmLmParams<T>,
    schedule: &[Batch],
    config: &TrainConfig,
    epoch: usize,
    lr: f64,
    partition: Option<&RowPartition>,
    state: HiddenState<T>,
    rng: &mut Rng,
) -> Result<(EpochStats, HiddenState<T>)> {
    if schedule.is_empty() {
        return Err(Error::invalid("empty batch schedule"));
    }
    let use_mse = config.regime == RegimeKind::AlternateMse;
    if use_mse && partition.is_none() {
        return Err(Error::invalid(
            "alternate-mse needs an output row partition",
        ));
    }
    let lambda = T::from_f64_lossy(config.lambda_mse);
    let mut state = state;
    let mut nll = 0.0;
    let mut count = 0usize;
    let mut mse_sum = 0.0;
    for (i, batch) in schedule.iter().enumerate() {
        let diverged = |reason: String| Error::TrainingDiverged {
            epoch,
            batch: i,
            lr,
            reason,
        };
        let mut out = loss_and_grads(params, batch, &state, Mode::Train, config.dropout, rng)?;
        let mut total = out.loss;
        if let Some(part) = partition {
            if use_mse {
                let (m, grad) = mse_regularizer(&params.w_out, part)?;
                if config.lambda_mse > 0.0 {
                    out.grads.w_out.axpy(lambda, &grad)?;
                }
                total = joint_loss(out.loss, m, lambda);
                mse_sum += m.as_f64();
            } else {
                mse_sum += output_embedding_mse(&params.w_out, part)?;
            }
        }
        if !total.is_finite() {
            return Err(diverged(format!("non-finite loss {total}")));
        }
        params
            .sgd_step(&out.grads, lr, config.clip_norm)
            .map_err(|e| diverged(e.to_string()))?;
        nll += out.total_nll;
        count += out.count;
        state = out.state.detach();
    }
    Ok((
        EpochStats {
            train_ce: nll / count as f64,
            train_mse: partition.map(|_| mse_sum / schedule.len() as f64),
            batches: schedule.len(),
        },
        state,
    ))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: LstmLmParams<T>,
    pub reports: Vec<EpochReport>,
    pub partition: Option<RowPartition>,
}

pub fn train<T: Scalar>(
    config: &TrainConfig,
    l1: &TokenStream,
    l2: &TokenStream,
    validation: Option<&TokenStream>,
    vocab: &Vocabulary,
) -> Result<TrainOutcome<T>> {
    train_with(config, l1, l2, validation, vocab, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with<T: Scalar>(
    config: &TrainConfig,
    l1: &TokenStream,
    l2: &TokenStream,
    validation: Option<&TokenStream>,
    vocab: &Vocabulary,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let dims = config.dims(vocab.len())?;
    let mut params: LstmLmParams<T> = init_params(dims, config.seed);
    // the partition is tracked for every regime so reports can compare blocks
    let partition = RowPartition::new(vocab, config.mse_row_alignment).ok();
    if config.regime == RegimeKind::AlternateMse && partition.is_none() {
        RowPartition::new(vocab, config.mse_row_alignment)?;
    }
    let mut reports = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            reports,
            partition,
        });
    }
    let schedule = build_schedule(config.regime, l1, l2, config.batch_size, config.bptt_steps)?;
    let mut rng = Rng::new(config.seed).split(DROPOUT_STREAM);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = lr_schedule(config.initial_lr, epoch, config.lr_halving);
        let (stats, _) = run_epoch(
            &mut params,
            &schedule,
            config,
            epoch,
            lr,
            partition.as_ref(),
            zero_state(config.batch_size, dims),
            &mut rng,
        )?;
        let val = validation
            .map(|v| perplexity(&params, v, config.eval_batch_size, config.bptt_steps))
            .transpose()?;
        let report = EpochReport {
            epoch,
            lr,
            train_ce: stats.train_ce,
            train_mse: stats.train_mse,
            val_ce: val.as_ref().map(|v| v.mean_ce),
            val_ppl: val.as_ref().map(|v| v.perplexity),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&report);
        reports.push(report);
    }
    Ok(TrainOutcome {
        params,
        reports,
        partition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(20.0, 0, true), 20.0);
        assert_eq!(lr_schedule(20.0, 1, true), 10.0);
        assert!((lr_schedule(20.0, 19, true) - 3.814_697_265_625e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(20.0, 7, false), 20.0);
    }

    #[test]
    fn regime_names_round_trip() {
        for r in RegimeKind::TABLE_ORDER {
            assert_eq!(r.cli_name().parse::<RegimeKind>().unwrap(), r);
        }
        assert!("both".parse::<RegimeKind>().is_err());
    }

    #[test]
    fn partition_two_by_two() {
        let v = build_vocab(&toks("a a b"), &toks("c d d d")).unwrap();
        let p = RowPartition::new(&v, RowAlignment::FrequencyRank).unwrap();
        let id = |w| v.id(w).unwrap();
        assert_eq!(p.l1_rows, vec![id("a"), id("b")]);
        assert_eq!(p.l2_rows, vec![id("d"), id("c")]);
    }

    #[test]
    fn partition_drops_least_frequent_of_larger_pool() {
        let v = build_vocab(&toks("a a a b b c"), &toks("x y")).unwrap();
        let p = RowPartition::new(&v, RowAlignment::FrequencyRank).unwrap();
        assert_eq!(p.len(), 2);
        assert!(!p.l1_rows.contains(&v.id("c").unwrap()));
    }

    #[test]
    fn partition_ties_break_by_id_and_skip_shared() {
        let v = build_vocab(&toks("s b a"), &toks("s y x")).unwrap();
        let p = RowPartition::new(&v, RowAlignment::FrequencyRank).unwrap();
        assert_eq!(p.l1_rows, vec![v.id("b").unwrap(), v.id("a").unwrap()]);
        assert!(!p.l1_rows.contains(&v.id("s").unwrap()));
        assert!(!p.l2_rows.contains(&v.id("s").unwrap()));
    }

    #[test]
    fn partition_needs_both_pools() {
        let v = build_vocab(&toks("a b"), &toks("a b")).unwrap();
        assert!(RowPartition::new(&v, RowAlignment::FrequencyRank).is_err());
    }

    #[test]
    fn regularizer_zero_when_rows_match() {
        let v = build_vocab(&toks("a"), &toks("b")).unwrap();
        let p = RowPartition::new(&v, RowAlignment::FrequencyRank).unwrap();
        let w = Matrix::<f64>::from_rows(&[
            vec![9.0, 9.0],
            vec![0.0, 1.0],
            vec![0.5, 2.0],
            vec![0.5, 2.0],
        ])
        .unwrap();
        let (loss, grad) = mse_regularizer(&w, &p).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn regularizer_one_dim_pair() {
        let v = build_vocab(&toks("a"), &toks("b")).unwrap();
        let p = RowPartition::new(&v, RowAlignment::FrequencyRank).unwrap();
        let w = Matrix::<f64>::from_rows(&[vec![0.0], vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        let (loss, grad) = mse_regularizer(&w, &p).unwrap();
        assert_eq!(loss, 4.0);
        assert_eq!(grad.as_slice(), &[0.0, 0.0, -4.0, 4.0]);
    }

    #[test]
    fn joint_loss_values() {
        assert_eq!(joint_loss(1.5f64, 0.5, 0.0), 1.5);
        assert_eq!(joint_loss(1.5f64, 0.5, 1.0), 2.0);
    }

    #[test]
    fn alternate_schedule_interleaves() {
        let l1 = TokenStream::new((0..40).collect(), Language::L1);
        let l2 = TokenStream::new((100..130).collect(), Language::L2);
        let s = build_schedule(RegimeKind::Alternate, &l1, &l2, 2, 5).unwrap();
        assert_eq!(s.len(), 8);
        for (i, b) in s.iter().enumerate() {
            let want = if i % 2 == 0 {
                Language::L1
            } else {
                Language::L2
            };
            assert_eq!(b.language, want);
        }
        let mono = build_schedule(RegimeKind::L1Only, &l1, &l2, 2, 5).unwrap();
        assert!(mono.iter().all(|b| b.language == Language::L1));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            dropout: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lambda_mse: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_row_omits_wall_clock() {
        let r = EpochReport {
            epoch: 2,
            lr: 5.0,
            train_ce: 1.25,
            train_mse: None,
            val_ce: Some(2.0),
            val_ppl: Some(2f64.exp()),
            seconds: 3.5,
        };
        assert_eq!(r.csv_row(), format!("2,5,1.25,,2,{}", 2f64.exp()));
    }
}
