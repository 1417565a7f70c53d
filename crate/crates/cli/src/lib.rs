//! Command implementations behind the `cslm` binary.
//!
//! Each `cmd_*` function takes parsed arguments, does its work, and writes
//! its artifacts atomically. The binary is a thin clap wrapper around them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cslm_core::checkpoint::Checkpoint;
use cslm_core::config::{load_config_file, resolve, to_config_text};
use cslm_core::corpus::{build_vocab, read_tokens, Language, TokenStream, Vocabulary};
use cslm_core::eval::{emit_chart_data, perplexity, run_bench_with, PerplexityResult};
use cslm_core::gradcheck::{run_gradcheck, Fault, GradCheckReport};
use cslm_core::synth::{generate_bundle, SyntheticSpec};
use cslm_core::training::{
    epochs_csv, prepare_regime_data, train_with, EpochReport, RegimeKind, TrainConfig,
};
use cslm_core::write_atomic;

#[derive(Debug, Parser)]
#[command(name = "cslm", version, about = "Bilingual LSTM language-model lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic L1/L2 corpora, a code-switched test set and a manifest.
    Synth(SynthArgs),
    /// Train one regime and save a checkpoint.
    Train(TrainArgs),
    /// Score a test corpus with a saved checkpoint.
    Eval(EvalArgs),
    /// Train all four regimes and write the comparison table.
    Bench(BenchArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Latent grammar states.
    #[arg(long, default_value_t = 8)]
    pub states: usize,
    /// Words per language.
    #[arg(long, default_value_t = 100)]
    pub vocab_size: usize,
    /// Tokens per monolingual corpus.
    #[arg(long, default_value_t = 50_000)]
    pub tokens: usize,
    /// Tokens in the code-switched test set.
    #[arg(long, default_value_t = 10_000)]
    pub test_tokens: usize,
    /// Per-word language flip probability in the test set.
    #[arg(long, default_value_t = 0.3)]
    pub switch_prob: f64,
    /// Mean sentence length in words.
    #[arg(long, default_value_t = 10.0)]
    pub mean_len: f64,
}

impl SynthArgs {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            states: self.states,
            vocab_per_language: self.vocab_size,
            tokens_per_language: self.tokens,
            cs_test_tokens: self.test_tokens,
            switch_prob: self.switch_prob,
            mean_sentence_len: self.mean_len,
        }
    }
}

/// Hyperparameter flags shared by `train` and `bench`. Unset flags fall back
/// to the config file, then to built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct HyperFlags {
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub bptt: Option<usize>,
    #[arg(long)]
    pub emb_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Keep the learning rate fixed instead of halving it each epoch.
    #[arg(long)]
    pub no_lr_halving: bool,
    /// Global gradient-norm clip.
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub lambda_mse: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl HyperFlags {
    /// Flags as `(config key, value)` overrides.
    pub fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_owned(), v));
            }
        };
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("bptt_steps", self.bptt.map(|v| v.to_string()));
        put("emb_dim", self.emb_dim.map(|v| v.to_string()));
        put("hidden_dim", self.hidden_dim.map(|v| v.to_string()));
        put("dropout", self.dropout.map(|v| v.to_string()));
        put("initial_lr", self.lr.map(|v| v.to_string()));
        put("lr_halving", self.no_lr_halving.then(|| "false".to_owned()));
        put("clip_norm", self.clip.map(|v| v.to_string()));
        put("lambda_mse", self.lambda_mse.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        out
    }

    pub fn resolve(&self, regime: Option<RegimeKind>) -> Result<TrainConfig> {
        let file = match &self.config {
            Some(p) => load_config_file(p)?,
            None => Vec::new(),
        };
        let mut overrides = self.overrides();
        if let Some(r) = regime {
            overrides.push(("regime".to_owned(), r.cli_name().to_owned()));
        }
        Ok(resolve(&file, &overrides)?)
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub l1: PathBuf,
    #[arg(long)]
    pub l2: PathBuf,
    /// Output directory for model.ckpt, vocab.tsv, epochs.csv and config.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// l1-only, l2-only, alternate or alternate-mse.
    #[arg(long)]
    pub regime: Option<RegimeKind>,
    #[command(flatten)]
    pub hyper: HyperFlags,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Parallel evaluation streams.
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 35)]
    pub bptt: usize,
    /// Also write the result as CSV to this path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub l1: PathBuf,
    #[arg(long)]
    pub l2: PathBuf,
    /// Code-switched test corpus.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: HyperFlags,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GradcheckArgs {
    /// Corrupt one backward pass to confirm the checker catches it.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|_| true),
        Command::Train(a) => cmd_train(&a).map(|_| true),
        Command::Eval(a) => {
            let r = cmd_eval(&a)?;
            print!("{}", eval_summary(&r));
            Ok(true)
        }
        Command::Bench(a) => cmd_bench(&a).map(|_| true),
        Command::Gradcheck(a) => {
            let report = cmd_gradcheck(&a)?;
            print!("{}", report.to_text());
            Ok(report.passed())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let bundle = generate_bundle(&args.spec())?;
    create_dir(&args.out)?;
    write_atomic(&args.out.join("l1.txt"), bundle.l1.to_text().as_bytes())?;
    write_atomic(&args.out.join("l2.txt"), bundle.l2.to_text().as_bytes())?;
    write_atomic(
        &args.out.join("cs_test.txt"),
        bundle.cs_test.to_text().as_bytes(),
    )?;
    write_atomic(&args.out.join("manifest.txt"), bundle.manifest().as_bytes())?;
    eprintln!(
        "wrote {} ({} + {} training tokens, {} test tokens, oracle {:.4} bits/token on the test set)",
        args.out.display(),
        bundle.l1.token_count(),
        bundle.l2.token_count(),
        bundle.cs_test.token_count(),
        bundle.oracle_bits_cs
    );
    Ok(())
}

/// Both corpora, encoded against a vocabulary built from both.
pub struct Corpora {
    pub vocab: Vocabulary,
    pub l1: TokenStream,
    pub l2: TokenStream,
}

pub fn load_corpora(l1: &Path, l2: &Path) -> Result<Corpora> {
    let t1 = read_tokens(l1)?;
    let t2 = read_tokens(l2)?;
    let vocab = build_vocab(&t1, &t2)
        .context("the vocabulary is built from both corpora, so both must be non-empty")?;
    Ok(Corpora {
        l1: vocab.encode(&t1, Language::L1),
        l2: vocab.encode(&t2, Language::L2),
        vocab,
    })
}

fn log_epoch(prefix: &str, r: &EpochReport) {
    let mut line = format!(
        "{prefix}epoch {:>3}  lr {:<9} train ce {:.4}",
        r.epoch, r.lr, r.train_ce
    );
    if let Some(m) = r.train_mse {
        let _ = write!(line, "  mse {m:.5}");
    }
    if let Some(p) = r.val_ppl {
        let _ = write!(line, "  val ppl {p:.2}");
    }
    let _ = write!(line, "  ({:.1}s)", r.seconds);
    eprintln!("{line}");
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainConfig> {
    let config = args.hyper.resolve(args.regime)?;
    let corpora = load_corpora(&args.l1, &args.l2)?;
    let data = prepare_regime_data(&config, &corpora.l1, &corpora.l2, corpora.vocab.eos_id());
    let outcome = train_with::<f32>(
        &config,
        &data.l1,
        &data.l2,
        data.validation.as_ref(),
        &corpora.vocab,
        |r| log_epoch("", r),
    )?;
    create_dir(&args.out)?;
    let ckpt = Checkpoint::new(
        &outcome.params,
        &corpora.vocab,
        config.seed,
        config.regime.cli_name(),
        outcome.reports.len(),
    );
    ckpt.save(&args.out.join("model.ckpt"))?;
    corpora.vocab.save(&args.out.join("vocab.tsv"))?;
    write_atomic(
        &args.out.join("epochs.csv"),
        epochs_csv(&outcome.reports).as_bytes(),
    )?;
    write_atomic(
        &args.out.join("config.txt"),
        to_config_text(&config).as_bytes(),
    )?;
    eprintln!("wrote {}", args.out.display());
    Ok(config)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<PerplexityResult> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    ckpt.verify_vocab(&vocab).with_context(|| {
        format!(
            "{} was not trained with {}",
            args.checkpoint.display(),
            args.vocab.display()
        )
    })?;
    let tokens = read_tokens(&args.test)?;
    let stream = vocab.encode(&tokens, Language::CodeSwitched);
    let result = perplexity(&ckpt.params, &stream, args.batch_size, args.bptt)?;
    if let Some(path) = &args.out {
        write_atomic(path, eval_csv(&result).as_bytes())?;
    }
    Ok(result)
}

pub const EVAL_CSV_HEADER: &str =
    "tokens_scored,tokens_excluded,oov_fraction,cross_entropy,perplexity";

pub fn eval_csv(r: &PerplexityResult) -> String {
    format!(
        "{EVAL_CSV_HEADER}\n{},{},{},{},{}\n",
        r.tokens_scored, r.tokens_excluded, r.oov_fraction, r.mean_ce, r.perplexity
    )
}

pub fn eval_summary(r: &PerplexityResult) -> String {
    format!(
        "tokens scored   {}\ntokens excluded {}\noov fraction    {:.6}\ncross-entropy   {:.6} nats/token\nperplexity      {:.4}\n",
        r.tokens_scored, r.tokens_excluded, r.oov_fraction, r.mean_ce, r.perplexity
    )
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let config = args.hyper.resolve(None)?;
    let corpora = load_corpora(&args.l1, &args.l2)?;
    let test = corpora
        .vocab
        .encode(&read_tokens(&args.test)?, Language::CodeSwitched);
    let report = run_bench_with::<f32>(
        &config,
        &corpora.l1,
        &corpora.l2,
        &test,
        &corpora.vocab,
        |regime, r| log_epoch(&format!("[{}] ", regime.cli_name()), r),
    );
    create_dir(&args.out)?;
    for row in &report.rows {
        let name = format!("epochs_{}.csv", row.regime.cli_name());
        write_atomic(&args.out.join(name), epochs_csv(&row.epochs).as_bytes())?;
    }
    write_atomic(&args.out.join("bench.csv"), report.to_csv().as_bytes())?;
    let table = report.to_table();
    write_atomic(&args.out.join("bench.txt"), table.as_bytes())?;
    print!("{table}");
    if !report.is_complete() {
        let failed: Vec<String> = report
            .failures
            .iter()
            .map(|(r, e)| format!("{}: {e}", r.cli_name()))
            .collect();
        bail!(
            "bench incomplete, partial results written to {}\n{}",
            args.out.display(),
            failed.join("\n")
        );
    }
    write_atomic(
        &args.out.join("chart.csv"),
        emit_chart_data(&report)?.as_bytes(),
    )?;
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradCheckReport> {
    let fault = if args.inject_fault {
        Fault::CorruptMatmulBackward
    } else {
        Fault::None
    };
    Ok(run_gradcheck(fault)?)
}
