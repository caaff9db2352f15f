//! Synthetic corpora: an order-2 Markov language plus a token-parity classification task.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hooks::StageKind;
use crate::model::{OutputView, TokenBatch};
use crate::rng::Rng;

pub const CLS_ID: usize = 0;
pub const MASK_ID: usize = 1;
/// Token ids 2 and 3 double as the two class labels.
pub const FIRST_CLASS_ID: usize = 2;
pub const CLASSES: usize = 2;
/// First id used for ordinary content.
pub const FIRST_CONTENT_ID: usize = 4;
pub const MASK_RATE: f64 = 0.15;
/// Fraction of the corpus held out.
pub const VALIDATION_FRACTION: f64 = 0.1;

const BRANCHING: [f64; 4] = [0.55, 0.25, 0.15, 0.05];
/// Minimum share of the majority parity in a labelled sequence.
const LABEL_MARGIN: f64 = 0.7;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corpus needs {what}, got {got}")]
    Shape { what: &'static str, got: usize },
    #[error("text corpus is empty after tokenization")]
    EmptyText,
}

/// How a corpus was produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    Markov { seed: u64, size: usize },
    Bytes { seed: u64, bytes: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub vocab: usize,
    pub seq: usize,
    pub generator: GeneratorSpec,
    pub train: Vec<Vec<usize>>,
    pub train_labels: Vec<usize>,
    pub validation: Vec<Vec<usize>>,
    pub validation_labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// Model input plus the rows the objective reads and their gold classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub view: OutputView,
    pub gold: Vec<usize>,
}

impl Batch {
    /// Split into `parts` equal row blocks, re-indexing the output view.
    pub fn split(&self, parts: usize) -> Vec<Batch> {
        let per = self.tokens.batch / parts;
        (0..parts)
            .map(|p| {
                let (r0, r1) = (p * per, (p + 1) * per);
                let tokens = self.tokens.rows(r0, r1);
                match &self.view {
                    OutputView::Rows(rows) => {
                        let s = self.tokens.seq;
                        let (lo, hi) = (r0 * s, r1 * s);
                        let (mut idx, mut gold) = (Vec::new(), Vec::new());
                        for (&r, &y) in rows.iter().zip(&self.gold) {
                            if (lo..hi).contains(&r) {
                                idx.push(r - lo);
                                gold.push(y);
                            }
                        }
                        Batch { tokens, view: OutputView::Rows(idx), gold }
                    }
                    OutputView::Classify { .. } => {
                        Batch { tokens, view: self.view.clone(), gold: self.gold[r0..r1].to_vec() }
                    }
                    OutputView::Full => {
                        let s = self.tokens.seq;
                        Batch { tokens, view: OutputView::Full, gold: self.gold[r0 * s..r1 * s].to_vec() }
                    }
                }
            })
            .collect()
    }
}

/// Output view of the classification task.
pub fn classify_view() -> OutputView {
    OutputView::Classify { position: 0, first_class: FIRST_CLASS_ID, classes: CLASSES }
}

fn mix(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Successor candidates of the context `(a, b)`.
fn successors(seed: u64, a: usize, b: usize, content: usize) -> [usize; 4] {
    let mut h = mix(seed ^ mix((a as u64) << 32 | b as u64));
    let mut out = [0; 4];
    for o in &mut out {
        h = mix(h.wrapping_add(0x9E37_79B9_7F4A_7C15));
        *o = FIRST_CONTENT_ID + (h % content as u64) as usize;
    }
    out
}

fn parity_label(seq: &[usize]) -> usize {
    let content = &seq[1..];
    let even = content.iter().filter(|&&t| t % 2 == 0).count();
    usize::from(2 * even >= content.len())
}

/// Deterministic corpus of `size` sequences of length `seq` over ids `< vocab`.
/// Every sequence starts with the classification token; its label is 1 when
/// at least half of its content ids are even.
pub fn generate_corpus(seed: u64, size: usize, vocab: usize, seq: usize) -> Result<SyntheticCorpus, DataError> {
    if size < 10 {
        return Err(DataError::Shape { what: "at least 10 sequences", got: size });
    }
    if vocab < FIRST_CONTENT_ID + 4 {
        return Err(DataError::Shape { what: "a vocabulary of at least 8 ids", got: vocab });
    }
    if seq < 4 {
        return Err(DataError::Shape { what: "sequences of at least 4 tokens", got: seq });
    }
    let content = vocab - FIRST_CONTENT_ID;
    let mut rng = Rng::new(seed);
    let chain_seed = rng.next_u64();
    let mut seqs = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    for _ in 0..size {
        let want = usize::from(rng.bernoulli(0.5));
        let mut s = vec![CLS_ID];
        let mut a = FIRST_CONTENT_ID + rng.below(content);
        let mut b = FIRST_CONTENT_ID + rng.below(content);
        s.push(a);
        s.push(b);
        while s.len() < seq {
            let u = rng.next_f64();
            let mut acc = 0.0;
            let cands = successors(chain_seed, a, b, content);
            let mut next = cands[3];
            for (c, p) in cands.iter().zip(BRANCHING) {
                acc += p;
                if u < acc {
                    next = *c;
                    break;
                }
            }
            s.push(next);
            a = b;
            b = next;
        }
        enforce_margin(&mut s, want, content, &mut rng);
        labels.push(parity_label(&s));
        seqs.push(s);
    }
    let n_val = ((size as f64 * VALIDATION_FRACTION).round() as usize).max(1);
    let n_train = size - n_val;
    let validation = seqs.split_off(n_train);
    let validation_labels = labels.split_off(n_train);
    Ok(SyntheticCorpus {
        vocab,
        seq,
        generator: GeneratorSpec::Markov { seed, size },
        train: seqs,
        train_labels: labels,
        validation,
        validation_labels,
    })
}

/// Flip the parity of random content tokens until the wanted parity holds a clear majority.
fn enforce_margin(s: &mut [usize], want: usize, content: usize, rng: &mut Rng) {
    let n = s.len() - 1;
    let need = (LABEL_MARGIN * n as f64).ceil() as usize;
    let majority = |t: usize| (t % 2 == 0) == (want == 1);
    loop {
        let have = s[1..].iter().filter(|&&t| majority(t)).count();
        if have >= need {
            return;
        }
        let i = 1 + rng.below(n);
        if !majority(s[i]) {
            let flipped = s[i] ^ 1;
            s[i] = if flipped >= FIRST_CONTENT_ID + content { s[i] - 1 } else { flipped };
        }
    }
}

/// Byte-level ingestion: each byte maps to a content id; the text is cut into
/// sequences that each start with the classification token.
pub fn corpus_from_text(text: &str, vocab: usize, seq: usize, seed: u64) -> Result<SyntheticCorpus, DataError> {
    if vocab < FIRST_CONTENT_ID + 4 || seq < 4 {
        return Err(DataError::Shape { what: "vocab ≥ 8 and seq ≥ 4", got: vocab.min(seq) });
    }
    let content = vocab - FIRST_CONTENT_ID;
    let ids: Vec<usize> = text.bytes().map(|b| FIRST_CONTENT_ID + b as usize % content).collect();
    let chunk = seq - 1;
    let seqs: Vec<Vec<usize>> = ids
        .chunks(chunk)
        .filter(|c| c.len() == chunk)
        .map(|c| std::iter::once(CLS_ID).chain(c.iter().copied()).collect())
        .collect();
    if seqs.len() < 2 {
        return Err(DataError::EmptyText);
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    let n_val = ((seqs.len() as f64 * VALIDATION_FRACTION).round() as usize).max(1);
    let mut all: Vec<Vec<usize>> = order.into_iter().map(|i| seqs[i].clone()).collect();
    let labels: Vec<usize> = all.iter().map(|s| parity_label(s)).collect();
    let validation = all.split_off(all.len() - n_val);
    let (train_labels, validation_labels) = labels.split_at(all.len());
    Ok(SyntheticCorpus {
        vocab,
        seq,
        generator: GeneratorSpec::Bytes { seed, bytes: text.len() },
        train: all,
        train_labels: train_labels.to_vec(),
        validation,
        validation_labels: validation_labels.to_vec(),
    })
}

impl SyntheticCorpus {
    fn split(&self, split: Split) -> (&[Vec<usize>], &[usize]) {
        match split {
            Split::Train => (&self.train, &self.train_labels),
            Split::Validation => (&self.validation, &self.validation_labels),
        }
    }

    /// Fixed-order batches of `batch_size` sequences (a trailing partial batch is dropped).
    /// Pretraining batches mask 15% of content positions with seeded choices.
    pub fn batches(&self, split: Split, stage: StageKind, batch_size: usize, mask_seed: u64) -> Vec<Batch> {
        let (seqs, labels) = self.split(split);
        let mut rng = Rng::new(mask_seed);
        seqs.chunks(batch_size)
            .zip(labels.chunks(batch_size))
            .filter(|(c, _)| c.len() == batch_size)
            .map(|(chunk, labs)| {
                let mut ids: Vec<usize> = chunk.iter().flatten().copied().collect();
                match stage {
                    StageKind::Task => Batch {
                        tokens: TokenBatch { ids, batch: batch_size, seq: self.seq },
                        view: classify_view(),
                        gold: labs.to_vec(),
                    },
                    StageKind::Pretraining => {
                        let (mut rows, mut gold) = (Vec::new(), Vec::new());
                        for r in 0..batch_size {
                            let start = rows.len();
                            for p in 1..self.seq {
                                if rng.bernoulli(MASK_RATE) {
                                    rows.push(r * self.seq + p);
                                }
                            }
                            if rows.len() == start {
                                rows.push(r * self.seq + 1 + rng.below(self.seq - 1));
                            }
                        }
                        for &i in &rows {
                            gold.push(ids[i]);
                            ids[i] = MASK_ID;
                        }
                        Batch { tokens: TokenBatch { ids, batch: batch_size, seq: self.seq }, view: OutputView::Rows(rows), gold }
                    }
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = generate_corpus(7, 100, 256, 16).unwrap();
        let b = generate_corpus(7, 100, 256, 16).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_corpus(8, 100, 256, 16).unwrap());
        assert_eq!((a.train.len(), a.validation.len()), (90, 10));
        for s in a.train.iter().chain(&a.validation) {
            assert_eq!(s.len(), 16);
            assert_eq!(s[0], CLS_ID);
            assert!(s[1..].iter().all(|&t| (FIRST_CONTENT_ID..256).contains(&t)));
        }
    }

    #[test]
    fn labels_follow_parity_rule_and_are_balanced() {
        let c = generate_corpus(3, 400, 256, 16).unwrap();
        for (s, &y) in c.train.iter().zip(&c.train_labels) {
            assert_eq!(parity_label(s), y);
        }
        let ones = c.train_labels.iter().sum::<usize>();
        assert!((120..240).contains(&ones), "{ones}");
    }

    #[test]
    fn masked_batches() {
        let c = generate_corpus(1, 100, 64, 12).unwrap();
        let bs = c.batches(Split::Train, StageKind::Pretraining, 8, 5);
        assert_eq!(bs.len(), 11);
        for b in &bs {
            let OutputView::Rows(rows) = &b.view else { panic!() };
            assert_eq!(rows.len(), b.gold.len());
            assert!(rows.iter().all(|&r| b.tokens.ids[r] == MASK_ID && r % 12 != 0));
        }
        assert_eq!(bs, c.batches(Split::Train, StageKind::Pretraining, 8, 5));
    }

    #[test]
    fn split_reindexes_rows() {
        let c = generate_corpus(1, 100, 64, 12).unwrap();
        let b = &c.batches(Split::Train, StageKind::Pretraining, 8, 5)[0];
        let parts = b.split(4);
        assert_eq!(parts.iter().map(|p| p.gold.len()).sum::<usize>(), b.gold.len());
        for p in &parts {
            let OutputView::Rows(rows) = &p.view else { panic!() };
            assert!(rows.iter().all(|&r| r < 2 * 12 && p.tokens.ids[r] == MASK_ID));
        }
    }

    #[test]
    fn text_mode() {
        let text = "the quick brown fox jumps over the lazy dog ".repeat(20);
        let c = corpus_from_text(&text, 256, 16, 1).unwrap();
        assert!(!c.train.is_empty() && !c.validation.is_empty());
        assert!(c.train.iter().flatten().all(|&t| t < 256));
    }
}
