//! Synthetic bilingual corpora drawn from one latent bigram chain with
//! language-specific word emissions, plus the exact entropy rate of the
//! generating process.
//!
//! Process: a latent state chain `s -> s'` runs continuously over words
//! (including across sentence ends). Every state owns a disjoint block of
//! words in each language; the within-block emission distribution is shared
//! by both languages, only the word identities differ. After each word the
//! sentence ends with probability `1 / mean_sentence_len`. In code-switched
//! text each sentence starts in L1 and the language flips between
//! consecutive words with probability `p`.

use std::collections::HashMap;

use crate::corpus::{Language, EOS};
use crate::error::{Error, Result};
use crate::numcore::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub states: usize,
    pub vocab_per_language: usize,
    pub tokens_per_language: usize,
    pub cs_test_tokens: usize,
    pub switch_prob: f64,
    pub mean_sentence_len: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            states: 8,
            vocab_per_language: 100,
            tokens_per_language: 50_000,
            cs_test_tokens: 10_000,
            switch_prob: 0.3,
            mean_sentence_len: 10.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.states == 0 {
            return Err(Error::invalid("states must be positive"));
        }
        if self.vocab_per_language < self.states {
            return Err(Error::invalid(format!(
                "vocab_per_language ({}) must be >= states ({})",
                self.vocab_per_language, self.states
            )));
        }
        if !(0.0..=1.0).contains(&self.switch_prob) {
            return Err(Error::invalid(format!(
                "switch probability {} not in [0, 1]",
                self.switch_prob
            )));
        }
        if self.tokens_per_language == 0 || self.cs_test_tokens == 0 {
            return Err(Error::invalid("token targets must be positive"));
        }
        if self.mean_sentence_len.is_nan() || self.mean_sentence_len < 1.0 {
            return Err(Error::invalid("mean sentence length must be >= 1"));
        }
        Ok(())
    }
}

/// How languages are chosen while sampling or scoring a stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceMode {
    Monolingual(Language),
    /// Sentences start in L1; language flips between words with this probability.
    CodeSwitched(f64),
}

impl SourceMode {
    fn start(self) -> usize {
        match self {
            SourceMode::Monolingual(Language::L2) => 1,
            _ => 0,
        }
    }

    fn flip_prob(self) -> f64 {
        match self {
            SourceMode::Monolingual(_) => 0.0,
            SourceMode::CodeSwitched(p) => p,
        }
    }

    fn check(self) -> Result<()> {
        match self {
            SourceMode::Monolingual(Language::CodeSwitched) => {
                Err(Error::invalid("monolingual mode needs L1 or L2"))
            }
            SourceMode::CodeSwitched(p) if !(0.0..=1.0).contains(&p) => Err(Error::invalid(
                format!("switch probability {p} not in [0, 1]"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct WordSlot {
    lang: usize,
    state: usize,
    slot: usize,
}

#[derive(Debug, Clone)]
pub struct LatentGrammar {
    /// Row-stochastic `S x S` state transition matrix.
    pub transitions: Vec<Vec<f64>>,
    /// Per state, the emission distribution over that state's word block.
    pub slot_probs: Vec<Vec<f64>>,
    /// Probability that a sentence ends after any word.
    pub end_prob: f64,
    /// `words[lang][state][slot]`, lang 0 = L1, 1 = L2.
    words: [Vec<Vec<String>>; 2],
    index: HashMap<String, WordSlot>,
}

fn word_name(lang: usize, n: usize) -> String {
    format!("l{}w{:03}", lang + 1, n)
}

fn random_simplex(rng: &mut Rng, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| rng.exp1()).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

fn block_sizes(vocab: usize, states: usize) -> Vec<usize> {
    (0..states)
        .map(|s| vocab / states + usize::from(s < vocab % states))
        .collect()
}

pub fn generate_grammar(spec: &SyntheticSpec) -> Result<LatentGrammar> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed).split(0);
    let s = spec.states;
    let transitions = (0..s).map(|_| random_simplex(&mut rng, s)).collect();
    let sizes = block_sizes(spec.vocab_per_language, s);
    let slot_probs = sizes.iter().map(|&k| random_simplex(&mut rng, k)).collect();
    let mut orders = [Vec::new(), Vec::new()];
    for order in orders.iter_mut() {
        let mut ids: Vec<usize> = (0..spec.vocab_per_language).collect();
        rng.shuffle(&mut ids);
        *order = ids;
    }
    LatentGrammar::assemble(
        transitions,
        slot_probs,
        1.0 / spec.mean_sentence_len,
        &orders,
    )
}

impl LatentGrammar {
    /// Builds a grammar from explicit parameters; word `k` of each language is
    /// assigned to blocks in state order.
    pub fn from_parts(
        transitions: Vec<Vec<f64>>,
        slot_probs: Vec<Vec<f64>>,
        end_prob: f64,
    ) -> Result<Self> {
        let total: usize = slot_probs.iter().map(Vec::len).sum();
        let identity: Vec<usize> = (0..total).collect();
        Self::assemble(
            transitions,
            slot_probs,
            end_prob,
            &[identity.clone(), identity],
        )
    }

    fn assemble(
        transitions: Vec<Vec<f64>>,
        slot_probs: Vec<Vec<f64>>,
        end_prob: f64,
        orders: &[Vec<usize>; 2],
    ) -> Result<Self> {
        let s = transitions.len();
        if s == 0 || slot_probs.len() != s {
            return Err(Error::invalid(
                "grammar needs matching, non-empty state tables",
            ));
        }
        for (i, row) in transitions.iter().chain(&slot_probs).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.is_empty() || (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::invalid(format!(
                    "row {i} is not a probability distribution (sum {sum})"
                )));
            }
        }
        if transitions.iter().any(|r| r.len() != s) {
            return Err(Error::invalid("transition matrix must be square"));
        }
        if !(end_prob > 0.0 && end_prob <= 1.0) {
            return Err(Error::invalid(format!(
                "end probability {end_prob} not in (0, 1]"
            )));
        }
        let mut words: [Vec<Vec<String>>; 2] = [Vec::new(), Vec::new()];
        let mut index = HashMap::new();
        for (lang, order) in orders.iter().enumerate() {
            let mut next = order.iter();
            for (state, probs) in slot_probs.iter().enumerate() {
                let block: Vec<String> = (0..probs.len())
                    .map(|slot| {
                        let name = word_name(lang, *next.next().expect("order covers vocabulary"));
                        index.insert(name.clone(), WordSlot { lang, state, slot });
                        name
                    })
                    .collect();
                words[lang].push(block);
            }
        }
        Ok(Self {
            transitions,
            slot_probs,
            end_prob,
            words,
            index,
        })
    }

    pub fn states(&self) -> usize {
        self.transitions.len()
    }

    /// All words a language can emit.
    pub fn vocabulary(&self, language: Language) -> Vec<&str> {
        let lang = match language {
            Language::L2 => 1,
            _ => 0,
        };
        self.words[lang]
            .iter()
            .flatten()
            .map(String::as_str)
            .collect()
    }

    /// Language of a generated word, if it belongs to this grammar.
    pub fn language_of(&self, word: &str) -> Option<Language> {
        self.index.get(word).map(|w| {
            if w.lang == 0 {
                Language::L1
            } else {
                Language::L2
            }
        })
    }

    /// Latent state that emits `word`.
    pub fn state_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).map(|w| w.state)
    }

    fn sample(&self, mode: SourceMode, token_target: usize, seed: u64) -> Result<Vec<Vec<String>>> {
        mode.check()?;
        if token_target < 100 {
            return Err(Error::invalid(format!(
                "token target {token_target} below minimum of 100"
            )));
        }
        let mut rng = Rng::new(seed);
        let flip = mode.flip_prob();
        let mut state = rng.below(self.states());
        let mut total = 0;
        let mut sentences = Vec::new();
        while total < token_target {
            let mut lang = mode.start();
            let mut sentence = Vec::new();
            loop {
                state = rng.categorical(&self.transitions[state]);
                if !sentence.is_empty() && rng.next_f64() < flip {
                    lang = 1 - lang;
                }
                let slot = rng.categorical(&self.slot_probs[state]);
                sentence.push(self.words[lang][state][slot].clone());
                if rng.next_f64() < self.end_prob {
                    break;
                }
            }
            total += sentence.len() + 1;
            sentences.push(sentence);
        }
        Ok(sentences)
    }

    /// Negative log-likelihood (nats) of every token after the first under the
    /// true generating process. Returns `(total_nats, tokens_scored)`.
    pub fn score_tokens(&self, tokens: &[String], mode: SourceMode) -> Result<(f64, usize)> {
        mode.check()?;
        let flip = mode.flip_prob();
        let start = mode.start();
        let mut total = 0.0;
        let mut scored = 0;
        // (last word, whether an <eos> followed it)
        let mut prev: Option<(WordSlot, bool)> = None;
        for tok in tokens {
            let cur = if tok == EOS {
                None
            } else {
                Some(*self.index.get(tok.as_str()).ok_or_else(|| {
                    Error::invalid(format!("token {tok:?} is not generated by this grammar"))
                })?)
            };
            if let Some((last, after_eos)) = prev {
                let p = match (cur, after_eos) {
                    (None, false) => self.end_prob,
                    (None, true) => 0.0,
                    (Some(w), true) => {
                        let lang_p = if w.lang == start { 1.0 } else { 0.0 };
                        self.transitions[last.state][w.state]
                            * lang_p
                            * self.slot_probs[w.state][w.slot]
                    }
                    (Some(w), false) => {
                        let lang_p = if w.lang == last.lang {
                            1.0 - flip
                        } else {
                            flip
                        };
                        (1.0 - self.end_prob)
                            * self.transitions[last.state][w.state]
                            * lang_p
                            * self.slot_probs[w.state][w.slot]
                    }
                };
                total -= p.ln();
                scored += 1;
            }
            prev = match (cur, prev) {
                (Some(w), _) => Some((w, false)),
                (None, Some((last, _))) => Some((last, true)),
                (None, None) => None,
            };
        }
        Ok((total, scored))
    }
}

/// Sentences of a generated corpus (without `<eos>` markers).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedText {
    pub language: Language,
    pub sentences: Vec<Vec<String>>,
}

impl GeneratedText {
    /// Flattened tokens with `<eos>` after every sentence.
    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.sentences {
            out.extend(s.iter().cloned());
            out.push(EOS.to_owned());
        }
        out
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.len() + 1).sum()
    }

    /// One whitespace-joined sentence per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&s.join(" "));
            out.push('\n');
        }
        out
    }
}

pub fn generate_monolingual(
    grammar: &LatentGrammar,
    language: Language,
    token_target: usize,
    seed: u64,
) -> Result<GeneratedText> {
    if language == Language::CodeSwitched {
        return Err(Error::invalid("monolingual corpus needs L1 or L2"));
    }
    Ok(GeneratedText {
        language,
        sentences: grammar.sample(SourceMode::Monolingual(language), token_target, seed)?,
    })
}

pub fn generate_cs_test(
    grammar: &LatentGrammar,
    token_target: usize,
    switch_prob: f64,
    seed: u64,
) -> Result<GeneratedText> {
    Ok(GeneratedText {
        language: Language::CodeSwitched,
        sentences: grammar.sample(SourceMode::CodeSwitched(switch_prob), token_target, seed)?,
    })
}

fn is_irreducible(transitions: &[Vec<f64>]) -> bool {
    let n = transitions.len();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let p = if forward {
                    transitions[i][j]
                } else {
                    transitions[j][i]
                };
                if p > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|x| x)
    };
    reach(true) && reach(false)
}

/// Stationary distribution of an irreducible row-stochastic matrix by Gaussian
/// elimination on `pi (P - I) = 0, sum(pi) = 1`.
pub fn stationary_distribution(p: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = p.len();
    if !is_irreducible(p) {
        return Err(Error::NotErgodic(
            "state graph is not strongly connected".into(),
        ));
    }
    // a x = b with a = (P - I)^T, last equation replaced by normalisation
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| p[j][i] - if i == j { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut b = vec![0.0; n];
    a[n - 1] = vec![1.0; n];
    b[n - 1] = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-14 {
            return Err(Error::NotErgodic("singular stationary system".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let pivot_row = a[col].clone();
        for row in 0..n {
            if row != col {
                let f = a[row][col] / pivot_row[col];
                if f != 0.0 {
                    for (x, p) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                        *x -= f * p;
                    }
                    b[row] -= f * b[col];
                }
            }
        }
    }
    Ok((0..n).map(|i| b[i] / a[i][i]).collect())
}

fn entropy_nats(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Exact entropy rate (bits per token, `<eos>` included) of the generating
/// process, by enumerating the chain over (state, language, last-token-kind)
/// and weighting per-state next-token entropies by its stationary distribution.
pub fn oracle_cross_entropy(grammar: &LatentGrammar, mode: SourceMode) -> Result<f64> {
    mode.check()?;
    let s = grammar.states();
    if !is_irreducible(&grammar.transitions) {
        return Err(Error::NotErgodic(
            "latent transition matrix is reducible".into(),
        ));
    }
    let flip = mode.flip_prob();
    let start = mode.start();
    let q = grammar.end_prob;
    // extended state id: ((state * 2 + lang) * 2 + after_eos)
    let ext = |state: usize, lang: usize, eos: usize| (state * 2 + lang) * 2 + eos;
    let n = s * 4;
    let mut p = vec![vec![0.0; n]; n];
    let mut emit_entropy = vec![0.0; n];
    let slot_h: Vec<f64> = grammar.slot_probs.iter().map(|r| entropy_nats(r)).collect();
    for state in 0..s {
        for lang in 0..2 {
            let from_word = ext(state, lang, 0);
            p[from_word][ext(state, lang, 1)] += q;
            for next in 0..s {
                let t = grammar.transitions[state][next];
                for (next_lang, lp) in [(lang, 1.0 - flip), (1 - lang, flip)] {
                    p[from_word][ext(next, next_lang, 0)] += (1.0 - q) * t * lp;
                    emit_entropy[from_word] += (1.0 - q) * t * lp * slot_h[next];
                }
                let from_eos = ext(state, lang, 1);
                p[from_eos][ext(next, start, 0)] += t;
                emit_entropy[from_eos] += t * slot_h[next];
            }
        }
    }
    // restrict to states reachable from a word in the start language
    let mut reachable = vec![false; n];
    let mut stack = vec![ext(0, start, 0)];
    reachable[stack[0]] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if p[i][j] > 0.0 && !reachable[j] {
                reachable[j] = true;
                stack.push(j);
            }
        }
    }
    let keep: Vec<usize> = (0..n).filter(|&i| reachable[i]).collect();
    let sub: Vec<Vec<f64>> = keep
        .iter()
        .map(|&i| keep.iter().map(|&j| p[i][j]).collect())
        .collect();
    let pi = stationary_distribution(&sub)?;
    let nats: f64 = keep
        .iter()
        .zip(&pi)
        .map(|(&i, &w)| w * (entropy_nats(&p[i]) + emit_entropy[i]))
        .sum();
    Ok(nats / std::f64::consts::LN_2)
}

/// Everything `synth` writes: grammar, three corpora and their oracle entropies.
#[derive(Debug, Clone)]
pub struct SyntheticBundle {
    pub spec: SyntheticSpec,
    pub grammar: LatentGrammar,
    pub l1: GeneratedText,
    pub l2: GeneratedText,
    pub cs_test: GeneratedText,
    pub oracle_bits_l1: f64,
    pub oracle_bits_l2: f64,
    pub oracle_bits_cs: f64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn generate_bundle(spec: &SyntheticSpec) -> Result<SyntheticBundle> {
    let grammar = generate_grammar(spec)?;
    let l1 = generate_monolingual(
        &grammar,
        Language::L1,
        spec.tokens_per_language,
        splitmix64(spec.seed ^ 1),
    )?;
    let l2 = generate_monolingual(
        &grammar,
        Language::L2,
        spec.tokens_per_language,
        splitmix64(spec.seed ^ 2),
    )?;
    let cs_test = generate_cs_test(
        &grammar,
        spec.cs_test_tokens,
        spec.switch_prob,
        splitmix64(spec.seed ^ 3),
    )?;
    Ok(SyntheticBundle {
        oracle_bits_l1: oracle_cross_entropy(&grammar, SourceMode::Monolingual(Language::L1))?,
        oracle_bits_l2: oracle_cross_entropy(&grammar, SourceMode::Monolingual(Language::L2))?,
        oracle_bits_cs: oracle_cross_entropy(&grammar, SourceMode::CodeSwitched(spec.switch_prob))?,
        spec: spec.clone(),
        grammar,
        l1,
        l2,
        cs_test,
    })
}

impl SyntheticBundle {
    /// Sidecar manifest in `key=value` lines.
    pub fn manifest(&self) -> String {
        let s = &self.spec;
        let nats = |bits: f64| bits * std::f64::consts::LN_2;
        format!(
            "seed={}\nstates={}\nvocab_per_language={}\ntokens_per_language={}\ncs_test_tokens={}\n\
             switch_prob={}\nmean_sentence_len={}\nl1_tokens={}\nl2_tokens={}\ncs_test_tokens_written={}\n\
             oracle_bits_l1={}\noracle_bits_l2={}\noracle_bits_cs={}\noracle_nats_cs={}\n",
            s.seed,
            s.states,
            s.vocab_per_language,
            s.tokens_per_language,
            s.cs_test_tokens,
            s.switch_prob,
            s.mean_sentence_len,
            self.l1.token_count(),
            self.l2.token_count(),
            self.cs_test.token_count(),
            self.oracle_bits_l1,
            self.oracle_bits_l2,
            self.oracle_bits_cs,
            nats(self.oracle_bits_cs),
        )
    }
}
