use cslm_core::corpus::*;
use proptest::prelude::*;

fn words(prefix: &'static str, max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec((0..max).prop_map(move |i| format!("{prefix}{i}")), 1..200)
}

fn stream(ids: Vec<usize>) -> TokenStream {
    TokenStream::new(ids, Language::L1)
}

proptest! {
    #[test]
    fn vocab_tsv_round_trips(l1 in words("a", 30), l2 in words("b", 30)) {
        let vocab = build_vocab(&l1, &l2).unwrap();
        let back = Vocabulary::from_tsv(&vocab.to_tsv(), "memory").unwrap();
        prop_assert_eq!(&back, &vocab);
        prop_assert_eq!(back.content_hash(), vocab.content_hash());
        prop_assert_eq!(vocab.word(vocab.unk_id()), UNK);
        prop_assert_eq!(vocab.word(vocab.eos_id()), EOS);
    }

    #[test]
    fn encode_decode_round_trips_in_vocabulary(l1 in words("a", 30), l2 in words("b", 30)) {
        let vocab = build_vocab(&l1, &l2).unwrap();
        let s = vocab.encode(&l1, Language::L1);
        prop_assert_eq!(s.oov_count, 0);
        prop_assert_eq!(vocab.decode(&s), l1.iter().map(String::as_str).collect::<Vec<_>>());
        for id in &s.ids {
            prop_assert_eq!(vocab.tag(*id), Tag::L1);
        }
    }

    #[test]
    fn shared_words_are_tagged_shared(shared in "[a-z]{1,6}", l1 in words("a", 10), l2 in words("b", 10)) {
        let mut l1 = l1;
        let mut l2 = l2;
        l1.push(shared.clone());
        l2.push(shared.clone());
        let vocab = build_vocab(&l1, &l2).unwrap();
        prop_assert_eq!(vocab.tag(vocab.id(&shared).unwrap()), Tag::Shared);
        prop_assert_eq!(vocab.count(vocab.id(&shared).unwrap()), 2);
    }

    #[test]
    fn equalize_extends_shorter_by_cycling(a in 1usize..60, b in 1usize..60) {
        let sa = stream((0..a).collect());
        let sb = stream((100..100 + b).collect());
        let (ea, eb) = equalize(&sa, &sb).unwrap();
        let n = a.max(b);
        prop_assert_eq!(ea.len(), n);
        prop_assert_eq!(eb.len(), n);
        for i in 0..n {
            prop_assert_eq!(ea.ids[i], i % a);
            prop_assert_eq!(eb.ids[i], 100 + i % b);
        }
    }

    #[test]
    fn chunks_cover_every_predictable_position(len in 2usize..400, batch in 1usize..8, bptt in 1usize..12) {
        prop_assume!(len >= 2 * batch);
        let ids: Vec<usize> = (0..len).collect();
        let m = batchify(&stream(ids), batch).unwrap();
        prop_assert_eq!(m.cols, len / batch);
        let chunks = chunk_bptt(&m, bptt).unwrap();
        // every row's inputs, concatenated over chunks, are its columns minus the last
        for b in 0..batch {
            let mut seen = Vec::new();
            for c in &chunks {
                prop_assert!(c.steps <= bptt);
                for t in 0..c.steps {
                    prop_assert_eq!(c.target(t, b), c.input(t, b) + 1);
                    seen.push(c.input(t, b));
                }
            }
            let expect: Vec<usize> = (0..m.cols - 1).map(|k| b * m.cols + k).collect();
            prop_assert_eq!(seen, expect);
        }
        let positions: usize = chunks.iter().map(Batch::positions).sum();
        prop_assert_eq!(positions, batch * (m.cols - 1));
    }

    #[test]
    fn interleave_alternates_strictly(len in 20usize..200, batch in 1usize..4, bptt in 1usize..6) {
        let a = chunk_bptt(&batchify(&TokenStream::new(vec![0; len], Language::L1), batch).unwrap(), bptt).unwrap();
        let b = chunk_bptt(&batchify(&TokenStream::new(vec![1; len], Language::L2), batch).unwrap(), bptt).unwrap();
        let s = interleave_schedule(&a, &b).unwrap();
        prop_assert_eq!(s.len(), 2 * a.len());
        for (i, batch) in s.iter().enumerate() {
            let want = if i % 2 == 0 { Language::L1 } else { Language::L2 };
            prop_assert_eq!(batch.language, want);
        }
    }

    #[test]
    fn holdout_cuts_after_eos(ids in prop::collection::vec(0usize..5, 1..200), fraction in 0.0f64..0.5) {
        let s = stream(ids.clone());
        let (train, held) = s.split_holdout(fraction, EOS_ID);
        prop_assert_eq!(train.len() + held.len(), ids.len());
        prop_assert_eq!(train.concat(&held, Language::L1).ids, ids);
        if !held.is_empty() {
            prop_assert_eq!(*train.ids.last().unwrap(), EOS_ID);
        }
    }
}

const EOS_ID: usize = 1;

#[test]
fn tokenizer_reads_files_and_rejects_bad_utf8() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.txt");
    std::fs::write(&good, "hola mundo\n  dos   espacios \n").unwrap();
    let toks = read_tokens(&good).unwrap();
    assert_eq!(toks, ["hola", "mundo", EOS, "dos", "espacios", EOS]);
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, b"ok \xff\xfe\n").unwrap();
    assert!(read_tokens(&bad).is_err());
    assert!(read_tokens(&dir.path().join("missing.txt")).is_err());
}

#[test]
fn unseen_words_map_to_unk_and_are_counted() {
    let l1: Vec<String> = ["the", "cat"].map(String::from).to_vec();
    let l2: Vec<String> = ["el", "gato"].map(String::from).to_vec();
    let vocab = build_vocab(&l1, &l2).unwrap();
    let test: Vec<String> = ["the", "perro", "gato", "dog"].map(String::from).to_vec();
    let s = vocab.encode(&test, Language::CodeSwitched);
    assert_eq!(s.oov_count, 2);
    assert_eq!(s.ids[1], vocab.unk_id());
    assert_eq!(s.ids[3], vocab.unk_id());
}

#[test]
fn vocab_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.tsv");
    let l1: Vec<String> = ["a", "b", "a"].map(String::from).to_vec();
    let l2: Vec<String> = ["c"].map(String::from).to_vec();
    let vocab = build_vocab(&l1, &l2).unwrap();
    vocab.save(&path).unwrap();
    assert_eq!(Vocabulary::load(&path).unwrap(), vocab);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace(VOCAB_HEADER, "#something else")).unwrap();
    assert!(Vocabulary::load(&path).is_err());
}

#[test]
fn short_streams_are_rejected_with_a_minimum() {
    let err = batchify(&stream(vec![0; 79]), 40).unwrap_err().to_string();
    assert!(err.contains("need at least 80"), "{err}");
}
