//! Perplexity and the four-regime benchmark.

use crate::corpus::{batchify, chunk_bptt, Tag, TokenStream, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{forward, zero_state, LstmLmParams};
use crate::numcore::{cross_entropy_total, softmax_rows, CompensatedSum, Mode, Rng};
use crate::scalar::Scalar;
use crate::training::{
    output_embedding_mse, prepare_regime_data, train_with, EpochReport, RegimeKind, RowPartition,
    TrainConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityResult {
    pub tokens_scored: usize,
    /// Stream tokens that were never a prediction target (batch remainder and
    /// the first column of every batch row).
    pub tokens_excluded: usize,
    /// Mean cross-entropy in nats per scored token.
    pub mean_ce: f64,
    pub perplexity: f64,
    pub oov_fraction: f64,
}

/// Perplexity of `stream` under `params`: eval mode, zero initial state,
/// state carried across chunks, `<eos>` targets included.
pub fn perplexity<T: Scalar>(
    params: &LstmLmParams<T>,
    stream: &TokenStream,
    eval_batch_size: usize,
    bptt_steps: usize,
) -> Result<PerplexityResult> {
    if stream.is_empty() {
        return Err(Error::invalid("cannot score an empty stream"));
    }
    let matrix = batchify(stream, eval_batch_size)?;
    let dims = params.dims();
    let mut state = zero_state(eval_batch_size, dims);
    // eval mode never draws from the generator
    let mut rng = Rng::new(0);
    let mut total = CompensatedSum::default();
    let mut scored = 0;
    for batch in chunk_bptt(&matrix, bptt_steps)? {
        let out = forward(params, &batch, &state, Mode::Eval, 0.0, &mut rng)?;
        total.add(cross_entropy_total(&out.logits, &batch.targets)?);
        scored += batch.positions();
        state = out.state;
    }
    let mean_ce = total.value() / scored as f64;
    Ok(PerplexityResult {
        tokens_scored: scored,
        tokens_excluded: stream.len() - scored,
        mean_ce,
        perplexity: mean_ce.exp(),
        oov_fraction: stream.oov_count as f64 / stream.len() as f64,
    })
}

/// Mean predicted probability mass on words with `tag`, over every position of `stream`.
pub fn tag_probability_mass<T: Scalar>(
    params: &LstmLmParams<T>,
    stream: &TokenStream,
    vocab: &Vocabulary,
    tag: Tag,
    eval_batch_size: usize,
    bptt_steps: usize,
) -> Result<f64> {
    let ids: Vec<usize> = vocab.ids_with_tag(tag).collect();
    let matrix = batchify(stream, eval_batch_size)?;
    let mut state = zero_state(eval_batch_size, params.dims());
    let mut rng = Rng::new(0);
    let mut mass = 0.0;
    let mut positions = 0;
    for batch in chunk_bptt(&matrix, bptt_steps)? {
        let out = forward(params, &batch, &state, Mode::Eval, 0.0, &mut rng)?;
        let probs = softmax_rows(&out.logits);
        for r in 0..probs.rows() {
            let row = probs.row(r);
            mass += ids.iter().map(|&i| row[i].as_f64()).sum::<f64>();
        }
        positions += probs.rows();
        state = out.state;
    }
    Ok(mass / positions as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub regime: RegimeKind,
    pub perplexity: f64,
    pub mean_ce: f64,
    /// Final MSE between aligned L1/L2 output rows, when the vocabulary has both pools.
    pub final_mse: Option<f64>,
    pub config_fingerprint: String,
    pub seed: u64,
    pub epochs: Vec<EpochReport>,
}

impl BenchRow {
    pub fn label(&self) -> &'static str {
        self.regime.table_label()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// Rows in table order; a failed regime is absent and listed in `failures`.
    pub rows: Vec<BenchRow>,
    pub failures: Vec<(RegimeKind, String)>,
}

impl BenchReport {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty() && self.rows.len() == RegimeKind::TABLE_ORDER.len()
    }

    pub fn row(&self, regime: RegimeKind) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.regime == regime)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("regime,label,perplexity,mean_ce,final_mse,seed,config\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.regime,
                r.label(),
                r.perplexity,
                r.mean_ce,
                r.final_mse.map(|m| m.to_string()).unwrap_or_default(),
                r.seed,
                r.config_fingerprint
            ));
        }
        for (regime, err) in &self.failures {
            out.push_str(&format!(
                "{regime},{},FAILED,,,,{}\n",
                regime.table_label(),
                err.replace(',', ";")
            ));
        }
        out
    }

    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let width = RegimeKind::TABLE_ORDER
            .iter()
            .map(|r| r.table_label().len())
            .max()
            .unwrap_or(0);
        let mut out = format!("{:<width$}  {:>10}\n", "Training data", "Perplexity");
        for regime in RegimeKind::TABLE_ORDER {
            let value = match self.row(regime) {
                Some(r) => format!("{:.2}", r.perplexity),
                None if self.failures.iter().any(|(f, _)| *f == regime) => "FAILED".into(),
                None => "-".into(),
            };
            out.push_str(&format!(
                "{:<width$}  {:>10}\n",
                regime.table_label(),
                value
            ));
        }
        out.push_str(
            "\n(*) alternating L1/L2 batches\n(+) alternating batches plus output-embedding MSE\n",
        );
        if !self.is_complete() {
            out.push_str("INCOMPLETE: not every regime finished\n");
        }
        out
    }
}

pub fn config_fingerprint(config: &TrainConfig) -> String {
    crate::corpus::hash_hex(crate::config::to_config_text(config).as_bytes())[..16].to_owned()
}

/// Trains every regime with the same seed and geometry and scores each on `cs_test`.
pub fn run_bench<T: Scalar>(
    base_config: &TrainConfig,
    l1: &TokenStream,
    l2: &TokenStream,
    cs_test: &TokenStream,
    vocab: &Vocabulary,
) -> BenchReport {
    run_bench_with::<T>(base_config, l1, l2, cs_test, vocab, |_, _| {})
}

pub fn run_bench_with<T: Scalar>(
    base_config: &TrainConfig,
    l1: &TokenStream,
    l2: &TokenStream,
    cs_test: &TokenStream,
    vocab: &Vocabulary,
    mut on_epoch: impl FnMut(RegimeKind, &EpochReport),
) -> BenchReport {
    let mut report = BenchReport {
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for regime in RegimeKind::TABLE_ORDER {
        let config = base_config.with_regime(regime);
        match bench_one::<T>(&config, l1, l2, cs_test, vocab, |e| on_epoch(regime, e)) {
            Ok(row) => report.rows.push(row),
            Err(e) => report.failures.push((regime, e.to_string())),
        }
    }
    report
}

fn bench_one<T: Scalar>(
    config: &TrainConfig,
    l1: &TokenStream,
    l2: &TokenStream,
    cs_test: &TokenStream,
    vocab: &Vocabulary,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<BenchRow> {
    let data = prepare_regime_data(config, l1, l2, vocab.eos_id());
    let outcome = train_with::<T>(
        config,
        &data.l1,
        &data.l2,
        data.validation.as_ref(),
        vocab,
        on_epoch,
    )?;
    let ppl = perplexity(
        &outcome.params,
        cs_test,
        config.eval_batch_size,
        config.bptt_steps,
    )?;
    let final_mse = RowPartition::new(vocab, config.mse_row_alignment)
        .ok()
        .map(|p| output_embedding_mse(&outcome.params.w_out, &p))
        .transpose()?;
    Ok(BenchRow {
        regime: config.regime,
        perplexity: ppl.perplexity,
        mean_ce: ppl.mean_ce,
        final_mse,
        config_fingerprint: config_fingerprint(config),
        seed: config.seed,
        epochs: outcome.reports,
    })
}

pub const CHART_HEADER: &str = "regime,perplexity";

/// Bar-chart data: one `label,perplexity` row per regime in table order.
pub fn emit_chart_data(report: &BenchReport) -> Result<String> {
    if !report.is_complete() {
        return Err(Error::invalid("benchmark report is incomplete"));
    }
    let mut out = String::from(CHART_HEADER);
    out.push('\n');
    for regime in RegimeKind::TABLE_ORDER {
        let row = report
            .row(regime)
            .expect("complete report has every regime");
        out.push_str(&format!("{},{}\n", row.label(), row.perplexity));
    }
    Ok(out)
}

/// Parses chart CSV back into `(label, perplexity)` pairs.
pub fn parse_chart_data(text: &str) -> Result<Vec<(String, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(CHART_HEADER) {
        return Err(Error::invalid("chart data missing header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (label, value) = l
                .rsplit_once(',')
                .ok_or_else(|| Error::invalid(format!("bad chart row {l:?}")))?;
            let v = value
                .parse()
                .map_err(|_| Error::invalid(format!("bad perplexity {value:?}")))?;
            Ok((label.to_owned(), v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Language;
    use crate::model::ModelDims;

    fn fake_report() -> BenchReport {
        let rows = RegimeKind::TABLE_ORDER
            .iter()
            .enumerate()
            .map(|(i, &regime)| BenchRow {
                regime,
                perplexity: 100.0 / (i as f64 + 1.0) + 0.123456789,
                mean_ce: 1.0,
                final_mse: None,
                config_fingerprint: "x".into(),
                seed: 1,
                epochs: vec![],
            })
            .collect();
        BenchReport {
            rows,
            failures: vec![],
        }
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let dims = ModelDims::new(4, 3, 5).unwrap();
        let p = LstmLmParams::<f32>::zeros(dims);
        let s = TokenStream::new((0..200).map(|i| i % 4).collect(), Language::L1);
        let r = perplexity(&p, &s, 10, 7).unwrap();
        assert!((r.perplexity - 4.0).abs() < 4.0 * 1e-6, "{}", r.perplexity);
        assert_eq!(r.tokens_scored, 10 * 19);
        assert_eq!(r.tokens_excluded, 10);
    }

    #[test]
    fn empty_stream_rejected() {
        let dims = ModelDims::new(4, 3, 5).unwrap();
        let p = LstmLmParams::<f32>::zeros(dims);
        assert!(perplexity(&p, &TokenStream::new(vec![], Language::L1), 10, 5).is_err());
    }

    #[test]
    fn chart_rows_in_table_order_and_round_trip() {
        let report = fake_report();
        let csv = emit_chart_data(&report).unwrap();
        assert!(csv.starts_with("regime,perplexity\n"));
        let parsed = parse_chart_data(&csv).unwrap();
        let labels: Vec<_> = parsed.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(
            labels,
            [
                "Spanish data only",
                "English data only",
                "Spanish + English data (*)",
                "MSE (+)"
            ]
        );
        for ((_, v), row) in parsed.iter().zip(&report.rows) {
            assert_eq!(*v, row.perplexity);
        }
    }

    #[test]
    fn incomplete_report_has_no_chart() {
        let mut report = fake_report();
        report.rows.pop();
        report
            .failures
            .push((RegimeKind::AlternateMse, "boom".into()));
        assert!(emit_chart_data(&report).is_err());
        assert!(report.to_table().contains("INCOMPLETE"));
        assert!(report.to_csv().contains("FAILED"));
    }

    #[test]
    fn table_has_all_labels() {
        let t = fake_report().to_table();
        for r in RegimeKind::TABLE_ORDER {
            assert!(t.contains(r.table_label()));
        }
    }
}
