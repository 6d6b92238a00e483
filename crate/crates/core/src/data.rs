//! Byte-level tokenization, windowing into training sequences, and the
//! synthetic corpora.
//!
//! Key-value-recall documents are built from records over disjoint byte
//! alphabets: definitions `kk=V;`, queries `kk?V;` (whose `V` must be
//! recalled from the matching definition), and filler text that never
//! contains `=` or `?`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

pub const KEY_ALPHABET: &[u8] = b"abcdefgh";
pub const VALUE_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";
pub const FILLER_ALPHABET: &[u8] = b"ijklmnopqrstuvwxyz ";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenStream {
    pub tokens: Vec<u32>,
    /// Start index of every document, strictly increasing.
    pub boundaries: Vec<usize>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if let Some(&id) = self.tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1])
            || self
                .boundaries
                .last()
                .is_some_and(|&b| b > self.tokens.len())
        {
            return Err(Error::InvalidInput(
                "document boundaries must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn push_document(&mut self, doc: &[u32]) {
        self.boundaries.push(self.tokens.len());
        self.tokens.extend_from_slice(doc);
    }

    /// Token ranges of each document.
    pub fn documents(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.boundaries.len());
        for (i, &b) in self.boundaries.iter().enumerate() {
            let end = self
                .boundaries
                .get(i + 1)
                .copied()
                .unwrap_or(self.tokens.len());
            out.push(b..end);
        }
        if out.is_empty() && !self.tokens.is_empty() {
            out.push(0..self.tokens.len());
        }
        out
    }

    pub fn truncate(&mut self, n: usize) {
        self.tokens.truncate(n);
        self.boundaries.retain(|&b| b < n);
    }
}

/// One document framed as `BOS bytes.. EOS`.
pub fn tokenize(text: &[u8]) -> TokenStream {
    let mut tokens = Vec::with_capacity(text.len() + 2);
    tokens.push(BOS);
    tokens.extend(text.iter().map(|&b| b as u32));
    tokens.push(EOS);
    TokenStream {
        tokens,
        boundaries: vec![0],
    }
}

/// Bytes of all non-special tokens.
pub fn detokenize(tokens: &[u32]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect()
}

pub fn bytes_to_ids(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// A training row: `targets[i]` is the token after `inputs[i]`, `None` where
/// the row was padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub inputs: Vec<u32>,
    pub targets: Vec<Option<u32>>,
}

impl Sequence {
    pub fn scored(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

fn windows_of(tokens: &[u32], t: usize, out: &mut Vec<Sequence>) {
    if tokens.len() < 2 {
        return;
    }
    let mut start = 0;
    while start + 1 < tokens.len() {
        let end = (start + t).min(tokens.len() - 1);
        let mut inputs = tokens[start..end].to_vec();
        let mut targets: Vec<Option<u32>> = tokens[start + 1..end + 1]
            .iter()
            .map(|&x| Some(x))
            .collect();
        inputs.resize(t, PAD);
        targets.resize(t, None);
        out.push(Sequence { inputs, targets });
        start += t;
    }
}

/// Non-overlapping length-`t` windows; the last one is padded. With
/// `respect_boundaries` no window spans two documents.
pub fn windows(stream: &TokenStream, t: usize, respect_boundaries: bool) -> Result<Vec<Sequence>> {
    if t == 0 {
        return Err(Error::InvalidInput("window length must be positive".into()));
    }
    if stream.len() < t + 1 {
        return Err(Error::InvalidInput(format!(
            "stream of {} tokens is shorter than one window of {} + 1",
            stream.len(),
            t
        )));
    }
    let mut out = Vec::new();
    if respect_boundaries {
        for doc in stream.documents() {
            windows_of(&stream.tokens[doc], t, &mut out);
        }
    } else {
        windows_of(&stream.tokens, t, &mut out);
    }
    Ok(out)
}

/// Windows grouped into batches of `batch_size` rows, in stream order.
pub fn batchify(stream: &TokenStream, t: usize, batch_size: usize) -> Result<Vec<Vec<Sequence>>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let rows = windows(stream, t, false)?;
    Ok(rows.chunks(batch_size).map(<[Sequence]>::to_vec).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusKind {
    MarkovText,
    KeyValueRecall,
    CopyTask,
}

impl CorpusKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "markov-text" => Ok(Self::MarkovText),
            "key-value-recall" | "kv-recall" => Ok(Self::KeyValueRecall),
            "copy-task" => Ok(Self::CopyTask),
            other => Err(Error::Config(format!(
                "unknown corpus kind `{other}` (expected markov-text, key-value-recall or copy-task)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MarkovText => "markov-text",
            Self::KeyValueRecall => "key-value-recall",
            Self::CopyTask => "copy-task",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusOptions {
    /// Tokens per generated document (key-value-recall, copy-task).
    pub doc_len: usize,
    /// Definitions per key-value document; 0 picks `doc_len / 16`.
    pub pairs_per_doc: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            doc_len: 128,
            pairs_per_doc: 0,
        }
    }
}

pub fn gen_synthetic_corpus(kind: CorpusKind, size: usize, seed: u64) -> Result<TokenStream> {
    gen_synthetic_corpus_with(kind, size, seed, CorpusOptions::default())
}

/// Exactly `size` tokens of the requested corpus, deterministic in `seed`.
pub fn gen_synthetic_corpus_with(
    kind: CorpusKind,
    size: usize,
    seed: u64,
    opts: CorpusOptions,
) -> Result<TokenStream> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = TokenStream::default();
    match kind {
        CorpusKind::MarkovText => {
            let chain = MarkovChain::random(seed);
            stream.push_document(&chain.sample(size, &mut rng));
        }
        CorpusKind::KeyValueRecall => {
            let n_pairs = if opts.pairs_per_doc == 0 {
                (opts.doc_len / 16).max(1)
            } else {
                opts.pairs_per_doc
            };
            if 10 * n_pairs + 2 > opts.doc_len {
                return Err(Error::Config(format!(
                    "{n_pairs} key-value pairs do not fit a {}-token document",
                    opts.doc_len
                )));
            }
            while stream.len() < size {
                stream.push_document(&kv_document(&mut rng, opts.doc_len, n_pairs));
            }
        }
        CorpusKind::CopyTask => {
            if opts.doc_len < 5 {
                return Err(Error::Config(
                    "copy-task documents need at least 5 tokens".into(),
                ));
            }
            while stream.len() < size {
                stream.push_document(&copy_document(&mut rng, opts.doc_len));
            }
        }
    }
    stream.truncate(size);
    Ok(stream)
}

fn filler(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n)
        .map(|_| FILLER_ALPHABET[rng.random_range(0..FILLER_ALPHABET.len())] as u32)
        .collect()
}

/// Splits `total` into `parts` random non-negative chunk lengths.
fn random_gaps(rng: &mut ChaCha8Rng, total: usize, parts: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..parts - 1)
        .map(|_| rng.random_range(0..=total))
        .collect();
    cuts.sort_unstable();
    let mut gaps = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        gaps.push(c - prev);
        prev = c;
    }
    gaps.push(total - prev);
    gaps
}

pub fn kv_record(key: [u8; 2], sep: u8, value: u8) -> [u32; 5] {
    [
        key[0] as u32,
        key[1] as u32,
        sep as u32,
        value as u32,
        b';' as u32,
    ]
}

fn kv_document(rng: &mut ChaCha8Rng, doc_len: usize, n_pairs: usize) -> Vec<u32> {
    let mut keys: Vec<[u8; 2]> = KEY_ALPHABET
        .iter()
        .flat_map(|&a| KEY_ALPHABET.iter().map(move |&b| [a, b]))
        .collect();
    keys.shuffle(rng);
    keys.truncate(n_pairs);
    let values: Vec<u8> = (0..n_pairs)
        .map(|_| VALUE_ALPHABET[rng.random_range(0..VALUE_ALPHABET.len())])
        .collect();
    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(rng);

    let mut records: Vec<[u32; 5]> = (0..n_pairs)
        .map(|i| kv_record(keys[i], b'=', values[i]))
        .collect();
    records.extend(order.iter().map(|&i| kv_record(keys[i], b'?', values[i])));
    let fill = doc_len - 2 - 5 * records.len();
    let gaps = random_gaps(rng, fill, records.len() + 1);

    let mut doc = Vec::with_capacity(doc_len);
    doc.push(BOS);
    for (rec, &gap) in records.iter().zip(&gaps) {
        doc.extend(filler(rng, gap));
        doc.extend_from_slice(rec);
    }
    doc.extend(filler(rng, gaps[records.len()]));
    doc.push(EOS);
    doc
}

fn copy_document(rng: &mut ChaCha8Rng, doc_len: usize) -> Vec<u32> {
    let n = (doc_len - 3) / 2;
    let payload: Vec<u32> = (0..n)
        .map(|_| rng.random_range(b'a'..=b'z') as u32)
        .collect();
    let mut doc = Vec::with_capacity(doc_len);
    doc.push(BOS);
    doc.extend_from_slice(&payload);
    doc.push(b'|' as u32);
    doc.extend_from_slice(&payload);
    doc.resize(doc_len - 1, b' ' as u32);
    doc.push(EOS);
    doc
}

/// First-order chain over a small byte alphabet; each row has a few
/// random successors.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    pub symbols: Vec<u8>,
    /// Row-stochastic `[n, n]` transition matrix.
    pub transitions: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_726b_6f76);
        let symbols: Vec<u8> = b"abcdefghijklmnopqrstuvwxyz .".to_vec();
        let n = symbols.len();
        let transitions = (0..n)
            .map(|_| {
                let mut row = vec![0.0; n];
                for _ in 0..5 {
                    row[rng.random_range(0..n)] += rng.random_range(0.1..1.0);
                }
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= s);
                row
            })
            .collect();
        Self {
            symbols,
            transitions,
        }
    }

    pub fn index_of(&self, byte: u8) -> Option<usize> {
        self.symbols.iter().position(|&s| s == byte)
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(n);
        let mut state = rng.random_range(0..self.symbols.len());
        for _ in 0..n {
            out.push(self.symbols[state] as u32);
            let u: f64 = rng.random();
            let row = &self.transitions[state];
            let mut acc = 0.0;
            let mut next = row.len() - 1;
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    next = j;
                    break;
                }
            }
            state = next;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleSpec {
    pub context_len: usize,
    pub key: [u8; 2],
    pub value: Vec<u8>,
    /// 0 puts the needle right after BOS, 1 right before the query.
    pub depth: f64,
    pub filler_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiahSample {
    /// BOS, filler with the needle, the query `kk?` and the answer.
    pub tokens: Vec<u32>,
    /// Positions of the answer inside `tokens`.
    pub answer: Range<usize>,
    /// Start of the needle record.
    pub needle_at: usize,
}

impl NeedleSpec {
    pub fn needle(&self) -> Vec<u32> {
        let mut n = bytes_to_ids(&self.key);
        n.push(b'=' as u32);
        n.extend(bytes_to_ids(&self.value));
        n.push(b';' as u32);
        n
    }
}

pub fn gen_niah(spec: &NeedleSpec) -> Result<NiahSample> {
    if !(0.0..=1.0).contains(&spec.depth) {
        return Err(Error::InvalidInput(format!(
            "needle depth {} outside [0, 1]",
            spec.depth
        )));
    }
    if spec.value.is_empty() {
        return Err(Error::InvalidInput("needle value is empty".into()));
    }
    let needle = spec.needle();
    let mut query = bytes_to_ids(&spec.key);
    query.push(b'?' as u32);
    let answer_len = spec.value.len();
    let fixed = 1 + needle.len() + query.len() + answer_len;
    if fixed > spec.context_len {
        return Err(Error::InvalidInput(format!(
            "needle and query need {fixed} tokens, context is {}",
            spec.context_len
        )));
    }
    let fill = spec.context_len - fixed;
    let before = round_half(spec.depth * fill as f64).min(fill);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.filler_seed);
    let mut tokens = Vec::with_capacity(spec.context_len);
    tokens.push(BOS);
    tokens.extend(filler(&mut rng, before));
    let needle_at = tokens.len();
    tokens.extend_from_slice(&needle);
    tokens.extend(filler(&mut rng, fill - before));
    tokens.extend_from_slice(&query);
    let start = tokens.len();
    tokens.extend(bytes_to_ids(&spec.value));
    Ok(NiahSample {
        answer: start..start + answer_len,
        tokens,
        needle_at,
    })
}

fn round_half(x: f64) -> usize {
    (x + 0.5) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing() {
        assert_eq!(tokenize(b"").tokens, vec![BOS, EOS]);
        assert_eq!(tokenize(b"abc").tokens, vec![BOS, 97, 98, 99, EOS]);
        assert_eq!(detokenize(&tokenize(b"\x00\xffhi").tokens), b"\x00\xffhi");
    }

    #[test]
    fn one_window_from_t_plus_one() {
        let s = TokenStream {
            tokens: (0..9).collect(),
            boundaries: vec![0],
        };
        let b = batchify(&s, 8, 4).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 1);
        assert_eq!(b[0][0].scored(), 8);
        assert!(batchify(&s, 9, 1).is_err());
    }

    #[test]
    fn last_window_is_padded() {
        let s = TokenStream {
            tokens: (0..12).collect(),
            boundaries: vec![0],
        };
        let w = windows(&s, 8, false).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].inputs[..3], [8, 9, 10]);
        assert_eq!(w[1].inputs[3], PAD);
        assert_eq!(w[1].targets[2], Some(11));
        assert_eq!(w[1].targets[3], None);
        assert_eq!(w[1].scored(), 3);
    }

    #[test]
    fn kv_queries_follow_definitions() {
        let s = gen_synthetic_corpus(CorpusKind::KeyValueRecall, 2000, 5).unwrap();
        assert_eq!(s.len(), 2000);
        s.validate(VOCAB_SIZE).unwrap();
        let mut queries = 0;
        for doc in s.documents() {
            let d = &s.tokens[doc];
            for i in 2..d.len().saturating_sub(1) {
                if d[i] == b'?' as u32 {
                    queries += 1;
                    let rec = [d[i - 2], d[i - 1], b'=' as u32, d[i + 1]];
                    assert!(
                        d[..i - 2].windows(4).any(|w| w == rec),
                        "query at {i} has no earlier answer"
                    );
                }
            }
        }
        assert!(queries > 50);
    }

    #[test]
    fn kv_documents_have_fixed_length() {
        let s = gen_synthetic_corpus(CorpusKind::KeyValueRecall, 1280, 1).unwrap();
        assert_eq!(s.boundaries, (0..10).map(|i| i * 128).collect::<Vec<_>>());
        assert!(s
            .documents()
            .iter()
            .all(|d| s.tokens[d.start] == BOS && s.tokens[d.end - 1] == EOS));
    }

    #[test]
    fn copy_task_repeats_payload() {
        let opts = CorpusOptions {
            doc_len: 32,
            ..CorpusOptions::default()
        };
        let s = gen_synthetic_corpus_with(CorpusKind::CopyTask, 64, 2, opts).unwrap();
        assert_eq!(s.boundaries, vec![0, 32]);
        let d = &s.tokens[..32];
        let bar = d.iter().position(|&t| t == b'|' as u32).unwrap();
        assert_eq!(d[1..bar], d[bar + 1..2 * bar]);
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(CorpusKind::parse("poetry").is_err());
        assert_eq!(
            CorpusKind::parse("copy-task").unwrap(),
            CorpusKind::CopyTask
        );
    }

    #[test]
    fn niah_depth_extremes() {
        let mut spec = NeedleSpec {
            context_len: 64,
            key: *b"ab",
            value: b"Q".to_vec(),
            depth: 0.0,
            filler_seed: 9,
        };
        let s = gen_niah(&spec).unwrap();
        assert_eq!(s.tokens.len(), 64);
        assert_eq!(s.needle_at, 1);
        assert_eq!(s.tokens[s.answer.clone()], [b'Q' as u32]);
        spec.depth = 1.0;
        let s = gen_niah(&spec).unwrap();
        assert_eq!(s.needle_at + 5, s.answer.start - 3);
        spec.context_len = 8;
        assert!(gen_niah(&spec).is_err());
    }
}
