//! Tokenisation, the shared bilingual vocabulary, corpus equalisation and
//! truncated-BPTT batch streams.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const VOCAB_HEADER: &str = "#cslm-vocab v1";

/// Source language of a stream or batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Language {
    L1,
    L2,
    CodeSwitched,
}

/// Which corpus (or corpora) a vocabulary entry was seen in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    L1,
    L2,
    Shared,
    Special,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::L1 => "L1",
            Tag::L2 => "L2",
            Tag::Shared => "SHARED",
            Tag::Special => "SPECIAL",
        })
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L1" => Ok(Tag::L1),
            "L2" => Ok(Tag::L2),
            "SHARED" => Ok(Tag::Shared),
            "SPECIAL" => Ok(Tag::Special),
            other => Err(Error::invalid(format!("unknown vocabulary tag {other:?}"))),
        }
    }
}

/// Splits UTF-8 text into whitespace tokens, appending `<eos>` after every line.
pub fn tokenize_lines(bytes: &[u8]) -> Result<Vec<String>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Utf8 {
        offset: e.valid_up_to(),
    })?;
    let mut tokens = Vec::new();
    for line in text.lines() {
        tokens.extend(line.split_whitespace().map(str::to_owned));
        tokens.push(EOS.to_owned());
    }
    Ok(tokens)
}

pub fn read_tokens(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    tokenize_lines(&bytes).map_err(|e| match e {
        Error::Utf8 { offset } => Error::Corpus(format!(
            "{}: invalid UTF-8 at byte offset {offset}",
            path.display()
        )),
        other => other,
    })
}

/// Shared word <-> id map with per-word language tags and corpus counts.
///
/// `<unk>` is always id 0 and `<eos>` id 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    index: HashMap<String, TokenId>,
    words: Vec<String>,
    tags: Vec<Tag>,
    counts: Vec<u64>,
}

pub fn build_vocab(l1_tokens: &[String], l2_tokens: &[String]) -> Result<Vocabulary> {
    if l1_tokens.is_empty() || l2_tokens.is_empty() {
        return Err(Error::Corpus(
            "both language corpora must be non-empty to build a vocabulary".into(),
        ));
    }
    let mut vocab = Vocabulary::with_specials();
    for (tokens, tag) in [(l1_tokens, Tag::L1), (l2_tokens, Tag::L2)] {
        for tok in tokens {
            vocab.observe(tok, tag);
        }
    }
    Ok(vocab)
}

impl Vocabulary {
    fn with_specials() -> Self {
        let mut v = Self {
            index: HashMap::new(),
            words: Vec::new(),
            tags: Vec::new(),
            counts: Vec::new(),
        };
        for w in [UNK, EOS] {
            v.push(w.to_owned(), Tag::Special, 0);
        }
        v
    }

    fn push(&mut self, word: String, tag: Tag, count: u64) -> TokenId {
        let id = self.words.len();
        self.index.insert(word.clone(), id);
        self.words.push(word);
        self.tags.push(tag);
        self.counts.push(count);
        id
    }

    fn observe(&mut self, word: &str, tag: Tag) {
        match self.index.get(word) {
            Some(&id) => {
                self.counts[id] += 1;
                let current = self.tags[id];
                if current != Tag::Special && current != tag {
                    self.tags[id] = Tag::Shared;
                }
            }
            None => {
                self.push(word.to_owned(), tag, 1);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk_id(&self) -> TokenId {
        0
    }

    pub fn eos_id(&self) -> TokenId {
        1
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn lookup_or_unk(&self, word: &str) -> TokenId {
        self.id(word).unwrap_or(self.unk_id())
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id]
    }

    pub fn tag(&self, id: TokenId) -> Tag {
        self.tags[id]
    }

    pub fn count(&self, id: TokenId) -> u64 {
        self.counts[id]
    }

    pub fn ids_with_tag(&self, tag: Tag) -> impl Iterator<Item = TokenId> + '_ {
        self.tags
            .iter()
            .enumerate()
            .filter(move |(_, &t)| t == tag)
            .map(|(i, _)| i)
    }

    /// Maps tokens to ids; unknown words become `<unk>`.
    pub fn encode(&self, tokens: &[String], language: Language) -> TokenStream {
        let mut oov = 0;
        let ids = tokens
            .iter()
            .map(|t| {
                self.id(t).unwrap_or_else(|| {
                    oov += 1;
                    self.unk_id()
                })
            })
            .collect();
        TokenStream {
            ids,
            language,
            oov_count: oov,
        }
    }

    pub fn decode<'a>(&'a self, stream: &TokenStream) -> Vec<&'a str> {
        stream.ids.iter().map(|&id| self.word(id)).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(VOCAB_HEADER);
        out.push('\n');
        for id in 0..self.len() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                self.words[id], id, self.tags[id], self.counts[id]
            ));
        }
        out
    }

    pub fn from_tsv(text: &str, origin: &str) -> Result<Self> {
        let parse_err = |line: usize, reason: String| Error::Parse {
            path: origin.to_owned(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == VOCAB_HEADER => {}
            _ => {
                return Err(parse_err(
                    1,
                    format!("missing header line {VOCAB_HEADER:?}"),
                ))
            }
        }
        let mut v = Self {
            index: HashMap::new(),
            words: Vec::new(),
            tags: Vec::new(),
            counts: Vec::new(),
        };
        for (i, line) in lines {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [word, id, tag, count] = fields[..] else {
                return Err(parse_err(
                    lineno,
                    format!("expected 4 columns, got {}", fields.len()),
                ));
            };
            let id: usize = id
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad id {id:?}")))?;
            if id != v.len() {
                return Err(parse_err(
                    lineno,
                    format!("id {id} out of sequence (expected {})", v.len()),
                ));
            }
            if v.index.contains_key(word) {
                return Err(parse_err(lineno, format!("duplicate word {word:?}")));
            }
            let tag: Tag = tag
                .parse()
                .map_err(|e: Error| parse_err(lineno, e.to_string()))?;
            let count: u64 = count
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad count {count:?}")))?;
            if tag != Tag::Special && count == 0 {
                return Err(parse_err(lineno, format!("word {word:?} has zero count")));
            }
            v.push(word.to_owned(), tag, count);
        }
        if v.id(UNK) != Some(0) || v.id(EOS) != Some(1) {
            return Err(parse_err(1, "<unk> and <eos> must be ids 0 and 1".into()));
        }
        Ok(v)
    }

    /// SHA-256 of the canonical TSV serialisation, lowercase hex.
    pub fn content_hash(&self) -> String {
        hash_hex(self.to_tsv().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, &path.display().to_string())
    }
}

pub(crate) fn hash_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A sequence of token ids from one source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<TokenId>,
    pub language: Language,
    /// Tokens that were mapped to `<unk>` during encoding.
    pub oov_count: usize,
}

impl TokenStream {
    pub fn new(ids: Vec<TokenId>, language: Language) -> Self {
        Self {
            ids,
            language,
            oov_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Splits off roughly the trailing `fraction` of tokens as a held-out
    /// slice, cutting just after an `<eos>` so sentences stay whole.
    pub fn split_holdout(&self, fraction: f64, eos: TokenId) -> (TokenStream, TokenStream) {
        let n = self.ids.len();
        let target = ((n as f64) * (1.0 - fraction.clamp(0.0, 1.0))).ceil() as usize;
        let cut = if target >= n {
            n
        } else {
            (target.max(1)..=n)
                .find(|&p| self.ids[p - 1] == eos)
                .unwrap_or(n)
        };
        (
            TokenStream::new(self.ids[..cut].to_vec(), self.language),
            TokenStream::new(self.ids[cut..].to_vec(), self.language),
        )
    }

    pub fn concat(&self, other: &TokenStream, language: Language) -> TokenStream {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        TokenStream::new(ids, language)
    }
}

/// Extends the shorter stream by cyclic repetition of its own tokens until
/// both have the same length. Argument order is preserved in the result.
pub fn equalize(a: &TokenStream, b: &TokenStream) -> Result<(TokenStream, TokenStream)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Corpus("cannot equalize an empty stream".into()));
    }
    let target = a.len().max(b.len());
    let extend = |s: &TokenStream| TokenStream {
        ids: s.ids.iter().copied().cycle().take(target).collect(),
        language: s.language,
        oov_count: s.oov_count,
    };
    Ok((extend(a), extend(b)))
}

/// A stream laid out as `rows` parallel contiguous segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamMatrix {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<TokenId>,
    pub language: Language,
}

impl StreamMatrix {
    pub fn get(&self, row: usize, col: usize) -> TokenId {
        self.ids[row * self.cols + col]
    }
}

pub fn batchify(stream: &TokenStream, batch_size: usize) -> Result<StreamMatrix> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let min = 2 * batch_size;
    if stream.len() < min {
        return Err(Error::Corpus(format!(
            "stream of {} tokens too short for batch size {batch_size}: need at least {min}",
            stream.len()
        )));
    }
    let cols = stream.len() / batch_size;
    Ok(StreamMatrix {
        rows: batch_size,
        cols,
        ids: stream.ids[..cols * batch_size].to_vec(),
        language: stream.language,
    })
}

/// One truncated-BPTT chunk, stored time-major: element `t * batch_size + b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub steps: usize,
    pub batch_size: usize,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub language: Language,
}

impl Batch {
    pub fn input(&self, t: usize, b: usize) -> TokenId {
        self.inputs[t * self.batch_size + b]
    }

    pub fn target(&self, t: usize, b: usize) -> TokenId {
        self.targets[t * self.batch_size + b]
    }

    /// Input ids of time step `t`, one per batch row.
    pub fn step_inputs(&self, t: usize) -> &[TokenId] {
        &self.inputs[t * self.batch_size..(t + 1) * self.batch_size]
    }

    pub fn positions(&self) -> usize {
        self.steps * self.batch_size
    }
}

pub fn chunk_bptt(matrix: &StreamMatrix, bptt_steps: usize) -> Result<Vec<Batch>> {
    if bptt_steps == 0 {
        return Err(Error::invalid("bptt_steps must be positive"));
    }
    if matrix.cols < 2 {
        return Err(Error::Corpus(format!(
            "stream matrix has {} columns; need at least 2",
            matrix.cols
        )));
    }
    let usable = matrix.cols - 1;
    let mut out = Vec::with_capacity(usable.div_ceil(bptt_steps));
    let mut k = 0;
    while k < usable {
        let steps = bptt_steps.min(usable - k);
        let mut inputs = Vec::with_capacity(steps * matrix.rows);
        let mut targets = Vec::with_capacity(steps * matrix.rows);
        for t in 0..steps {
            for b in 0..matrix.rows {
                inputs.push(matrix.get(b, k + t));
                targets.push(matrix.get(b, k + t + 1));
            }
        }
        out.push(Batch {
            steps,
            batch_size: matrix.rows,
            inputs,
            targets,
            language: matrix.language,
        });
        k += steps;
    }
    Ok(out)
}

/// Strict alternation `l1[0], l2[0], l1[1], l2[1], ...`.
pub fn interleave_schedule(l1: &[Batch], l2: &[Batch]) -> Result<Vec<Batch>> {
    if l1.len() != l2.len() {
        return Err(Error::Corpus(format!(
            "cannot interleave {} L1 batches with {} L2 batches; equalize the corpora first",
            l1.len(),
            l2.len()
        )));
    }
    Ok(l1
        .iter()
        .zip(l2)
        .flat_map(|(a, b)| [a.clone(), b.clone()])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn stream(n: usize) -> TokenStream {
        TokenStream::new((0..n).collect(), Language::L1)
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize_lines(b"a b\nc").unwrap(),
            toks("a b <eos> c <eos>")
        );
        assert!(tokenize_lines(b"").unwrap().is_empty());
        assert_eq!(tokenize_lines(b"x x x").unwrap(), toks("x x x <eos>"));
        assert_eq!(
            tokenize_lines(b"a\n\nb\n").unwrap(),
            toks("a <eos> <eos> b <eos>")
        );
    }

    #[test]
    fn tokenize_rejects_bad_utf8_with_offset() {
        match tokenize_lines(b"ab \xff cd") {
            Err(Error::Utf8 { offset }) => assert_eq!(offset, 3),
            other => panic!("expected utf8 error, got {other:?}"),
        }
    }

    #[test]
    fn vocab_tags_and_size() {
        let v = build_vocab(&toks("a b"), &toks("c")).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.tag(v.id("a").unwrap()), Tag::L1);
        assert_eq!(v.tag(v.id("b").unwrap()), Tag::L1);
        assert_eq!(v.tag(v.id("c").unwrap()), Tag::L2);
        assert_eq!(v.tag(v.unk_id()), Tag::Special);
        assert_eq!(v.tag(v.eos_id()), Tag::Special);
    }

    #[test]
    fn vocab_shared_and_counts() {
        let v = build_vocab(&toks("a"), &toks("a")).unwrap();
        assert_eq!(v.tag(v.id("a").unwrap()), Tag::Shared);
        let v = build_vocab(&toks("a a b"), &toks("c")).unwrap();
        assert_eq!(v.count(v.id("a").unwrap()), 2);
    }

    #[test]
    fn vocab_rejects_empty_side() {
        assert!(build_vocab(&toks("a"), &[]).is_err());
        assert!(build_vocab(&[], &toks("a")).is_err());
    }

    #[test]
    fn special_tokens_in_text_stay_special() {
        let v = build_vocab(&toks("a <eos> <unk>"), &toks("b <eos>")).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.tag(v.eos_id()), Tag::Special);
        assert_eq!(v.count(v.eos_id()), 2);
    }

    #[test]
    fn lookup() {
        let v = build_vocab(&toks("a"), &toks("b")).unwrap();
        assert_eq!(v.lookup_or_unk("a"), v.id("a").unwrap());
        assert_eq!(v.lookup_or_unk("zzz"), v.unk_id());
        assert_eq!(v.lookup_or_unk(EOS), v.eos_id());
    }

    #[test]
    fn encode_counts_oov() {
        let v = build_vocab(&toks("a"), &toks("b")).unwrap();
        let s = v.encode(&toks("a q b r"), Language::CodeSwitched);
        assert_eq!(s.oov_count, 2);
        assert_eq!(s.ids[1], v.unk_id());
    }

    #[test]
    fn tsv_round_trip_and_hash() {
        let v = build_vocab(&toks("a b a <eos>"), &toks("c a <eos>")).unwrap();
        let text = v.to_tsv();
        assert!(text.starts_with("#cslm-vocab v1\n"));
        let back = Vocabulary::from_tsv(&text, "mem").unwrap();
        assert_eq!(back, v);
        assert_eq!(back.content_hash(), v.content_hash());
        assert_eq!(v.content_hash().len(), 64);
    }

    #[test]
    fn tsv_rejects_malformed() {
        assert!(Vocabulary::from_tsv("<unk>\t0\tSPECIAL\t0\n", "x").is_err());
        let bad = "#cslm-vocab v1\n<unk>\t0\tSPECIAL\t0\n<eos>\t1\tSPECIAL\t0\na\t3\tL1\t1\n";
        assert!(Vocabulary::from_tsv(bad, "x").is_err());
        let zero = "#cslm-vocab v1\n<unk>\t0\tSPECIAL\t0\n<eos>\t1\tSPECIAL\t0\na\t2\tL1\t0\n";
        assert!(Vocabulary::from_tsv(zero, "x").is_err());
    }

    #[test]
    fn equalize_cycles_shorter() {
        let a = stream(7);
        let b = TokenStream::new(vec![9; 10], Language::L2);
        let (a2, b2) = equalize(&a, &b).unwrap();
        assert_eq!(a2.ids, vec![0, 1, 2, 3, 4, 5, 6, 0, 1, 2]);
        assert_eq!(b2, b);
        let (x, y) = equalize(&b, &a).unwrap();
        assert_eq!(x, b);
        assert_eq!(y.len(), 10);
    }

    #[test]
    fn equalize_paper_corpus_sizes() {
        let en = TokenStream::new(vec![0; 4_502_624], Language::L1);
        let es = TokenStream::new(vec![1; 3_940_333], Language::L2);
        let (_, es2) = equalize(&en, &es).unwrap();
        assert_eq!(es2.len() - es.len(), 562_291);
    }

    #[test]
    fn equalize_equal_lengths_unchanged() {
        let a = stream(5);
        let b = TokenStream::new(vec![3; 5], Language::L2);
        let (a2, b2) = equalize(&a, &b).unwrap();
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn batchify_trims_remainder() {
        let m = batchify(&stream(13), 2).unwrap();
        assert_eq!((m.rows, m.cols), (2, 6));
        assert_eq!(&m.ids[..6], &[0, 1, 2, 3, 4, 5]);
        assert_eq!(&m.ids[6..], &[6, 7, 8, 9, 10, 11]);
    }

    #[test]
    fn batchify_too_short() {
        let err = batchify(&stream(6), 6).unwrap_err().to_string();
        assert!(err.contains("at least 12"), "{err}");
    }

    #[test]
    fn chunk_widths() {
        let m = batchify(&stream(16), 2).unwrap();
        assert_eq!(m.cols, 8);
        let chunks = chunk_bptt(&m, 3).unwrap();
        let widths: Vec<_> = chunks.iter().map(|c| c.steps).collect();
        assert_eq!(widths, vec![3, 3, 1]);
        let single = chunk_bptt(&m, 7).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].steps, 7);
        assert_eq!(chunk_bptt(&m, 50).unwrap()[0].steps, 7);
    }

    #[test]
    fn chunk_targets_are_shifted_inputs() {
        let m = batchify(&stream(16), 2).unwrap();
        for c in chunk_bptt(&m, 3).unwrap() {
            for t in 0..c.steps {
                for b in 0..2 {
                    assert_eq!(c.target(t, b), c.input(t, b) + 1);
                }
            }
        }
    }

    fn labelled(lang: Language, n: usize) -> Vec<Batch> {
        (0..n)
            .map(|i| Batch {
                steps: 1,
                batch_size: 1,
                inputs: vec![i],
                targets: vec![i],
                language: lang,
            })
            .collect()
    }

    #[test]
    fn interleave_alternates() {
        let s =
            interleave_schedule(&labelled(Language::L1, 2), &labelled(Language::L2, 2)).unwrap();
        let got: Vec<_> = s.iter().map(|b| (b.language, b.inputs[0])).collect();
        assert_eq!(
            got,
            vec![
                (Language::L1, 0),
                (Language::L2, 0),
                (Language::L1, 1),
                (Language::L2, 1)
            ]
        );
        assert_eq!(
            interleave_schedule(&labelled(Language::L1, 1), &labelled(Language::L2, 1))
                .unwrap()
                .len(),
            2
        );
        assert!(
            interleave_schedule(&labelled(Language::L1, 2), &labelled(Language::L2, 1)).is_err()
        );
    }

    #[test]
    fn holdout_cuts_at_sentence_boundary() {
        // sentences of length 3 ending in eos=1
        let ids: Vec<usize> = (0..30).map(|i| if i % 3 == 2 { 1 } else { 5 }).collect();
        let s = TokenStream::new(ids, Language::L1);
        let (train, held) = s.split_holdout(0.2, 1);
        assert_eq!(train.len() + held.len(), 30);
        assert_eq!(*train.ids.last().unwrap(), 1);
        assert!(held.len() >= 3 && held.len() <= 6);
        let (all, none) = s.split_holdout(0.0, 1);
        assert_eq!((all.len(), none.len()), (30, 0));
    }
}
