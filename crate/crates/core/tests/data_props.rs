use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssa_core::data::{
    batchify, detokenize, gen_niah, gen_synthetic_corpus, gen_synthetic_corpus_with, tokenize,
    windows, CorpusKind, CorpusOptions, MarkovChain, NeedleSpec, TokenStream, BOS, EOS, PAD,
    VOCAB_SIZE,
};

proptest! {
    #[test]
    fn tokenize_round_trips(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
        let s = tokenize(&bytes);
        prop_assert_eq!(s.tokens.first(), Some(&BOS));
        prop_assert_eq!(s.tokens.last(), Some(&EOS));
        prop_assert!(s.validate(VOCAB_SIZE).is_ok());
        prop_assert_eq!(detokenize(&s.tokens), bytes);
    }

    #[test]
    fn windows_shift_and_reconstruct(len in 2usize..300, t in 1usize..40) {
        let stream = TokenStream { tokens: (0..len as u32).map(|i| i % 256).collect(), boundaries: vec![0] };
        if len < t + 1 {
            prop_assert!(windows(&stream, t, false).is_err());
            return Ok(());
        }
        let rows = windows(&stream, t, false).unwrap();
        let mut rebuilt = Vec::new();
        for r in &rows {
            prop_assert_eq!(r.inputs.len(), t);
            for i in 0..t - 1 {
                if let (Some(next), Some(_)) = (r.targets[i], r.targets[i + 1]) {
                    prop_assert_eq!(next, r.inputs[i + 1]);
                }
            }
            rebuilt.extend(r.inputs.iter().zip(&r.targets).filter(|(_, y)| y.is_some()).map(|(x, _)| *x));
            prop_assert!(r.inputs.iter().zip(&r.targets).all(|(x, y)| y.is_some() || *x == PAD));
        }
        prop_assert_eq!(&rebuilt[..], &stream.tokens[..len - 1]);
    }

    #[test]
    fn niah_needle_once_at_depth(len in 12usize..200, depth in 0.0f64..=1.0, seed: u64, v in 0u8..26) {
        let spec = NeedleSpec { context_len: len, key: *b"cf", value: vec![b'A' + v], depth, filler_seed: seed };
        let s = gen_niah(&spec).unwrap();
        prop_assert_eq!(s.tokens.len(), len);
        let needle = spec.needle();
        let hits = s.tokens.windows(needle.len()).filter(|w| *w == &needle[..]).count();
        prop_assert_eq!(hits, 1);
        prop_assert_eq!(&s.tokens[s.needle_at..s.needle_at + needle.len()], &needle[..]);
        prop_assert_eq!(&s.tokens[s.answer.clone()], &[(b'A' + v) as u32][..]);
    }
}

#[test]
fn abc_framing_and_empty_input() {
    assert_eq!(tokenize(b"abc").tokens, vec![BOS, 97, 98, 99, EOS]);
    assert_eq!(tokenize(b"").tokens, vec![BOS, EOS]);
}

#[test]
fn single_window_and_batches() {
    let stream = TokenStream {
        tokens: (0..9).collect(),
        boundaries: vec![0],
    };
    let b = batchify(&stream, 8, 4).unwrap();
    assert_eq!(b.len(), 1);
    assert_eq!(b[0].len(), 1);
    assert!(batchify(&stream, 9, 1).is_err());
}

#[test]
fn boundary_mode_keeps_documents_apart() {
    let mut s = TokenStream::default();
    s.push_document(&[1, 2, 3, 4, 5]);
    s.push_document(&[6, 7, 8, 9, 10, 11, 12]);
    for r in windows(&s, 3, true).unwrap() {
        let ids: Vec<u32> = r.inputs.iter().copied().filter(|&x| x != PAD).collect();
        assert!(ids.iter().all(|&x| x <= 5) || ids.iter().all(|&x| x >= 6));
    }
}

#[test]
fn generators_are_deterministic() {
    for kind in [
        CorpusKind::MarkovText,
        CorpusKind::KeyValueRecall,
        CorpusKind::CopyTask,
    ] {
        let a = gen_synthetic_corpus(kind, 3000, 9).unwrap();
        assert_eq!(a, gen_synthetic_corpus(kind, 3000, 9).unwrap());
        assert_ne!(
            a.tokens,
            gen_synthetic_corpus(kind, 3000, 10).unwrap().tokens
        );
        assert_eq!(a.len(), 3000);
        assert!(a.validate(VOCAB_SIZE).is_ok());
    }
    assert!(CorpusKind::parse("wikitext").is_err());
}

#[test]
fn every_query_answer_appears_earlier() {
    let s = gen_synthetic_corpus_with(
        CorpusKind::KeyValueRecall,
        20_000,
        4,
        CorpusOptions {
            doc_len: 160,
            pairs_per_doc: 0,
        },
    )
    .unwrap();
    let mut queries = 0;
    for doc in s.documents() {
        let d = &s.tokens[doc];
        for i in 0..d.len().saturating_sub(4) {
            if d[i + 2] == b'?' as u32 && d[i + 4] == b';' as u32 {
                let def = [d[i], d[i + 1], b'=' as u32, d[i + 3], b';' as u32];
                assert!(
                    d[..i].windows(5).any(|w| w == def),
                    "query at {i} has no earlier definition"
                );
                queries += 1;
            }
        }
    }
    assert!(queries > 1000);
}

#[test]
fn markov_bigrams_within_three_sigma() {
    let chain = MarkovChain::random(11);
    let n = chain.symbols.len();
    let toks = chain.sample(1_000_000, &mut ChaCha8Rng::seed_from_u64(12));
    let mut counts = vec![vec![0u64; n]; n];
    for w in toks.windows(2) {
        let (a, b) = (
            chain.index_of(w[0] as u8).unwrap(),
            chain.index_of(w[1] as u8).unwrap(),
        );
        counts[a][b] += 1;
    }
    for (i, row) in counts.iter().enumerate() {
        let visits: u64 = row.iter().sum();
        for (j, &c) in row.iter().enumerate() {
            let p = chain.transitions[i][j];
            let mean = visits as f64 * p;
            let sigma = (visits as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sigma.max(1e-9),
                "transition {i}->{j}: {c} vs {mean:.1} ± {sigma:.1}"
            );
        }
    }
}
