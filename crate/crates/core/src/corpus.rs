//! Synthetic translation corpora and padded batching.
//!
//! The reversal task maps a random source sentence to its reverse, with each
//! token relabelled through a fixed seeded bijection. Solving it needs both
//! content lookup across the sentence and position handling.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const N_SPECIAL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Valid => 0x7661_6c69_6400_0000,
            Split::Test => 0x7465_7374_0000_0000,
        }
    }

    pub fn file_stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
}

/// Vocabulary layout: ids `0..4` are pad/bos/eos/unk, the rest are content
/// tokens. `mapping[t]` is the relabelled target token for source token `t`
/// (identity on the specials).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub vocab_size: usize,
    pub mapping: Vec<TokenId>,
}

impl Vocab {
    pub fn inverse(&self) -> Vec<TokenId> {
        let mut inv = vec![0; self.vocab_size];
        for (s, &t) in self.mapping.iter().enumerate() {
            inv[t] = s;
        }
        inv
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
    pub vocab: Vocab,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

fn check_args(vocab_size: usize, len_range: (usize, usize)) -> Result<()> {
    if vocab_size < 8 {
        return Err(Error::InvalidInput(format!("vocab_size {vocab_size} < 8")));
    }
    let (lo, hi) = len_range;
    if lo < 1 || hi > 64 || lo > hi {
        return Err(Error::InvalidInput(format!(
            "length range ({lo}, {hi}) must satisfy 1 ≤ min ≤ max ≤ 64"
        )));
    }
    Ok(())
}

fn bijection(vocab_size: usize, seed: u64) -> Vocab {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151_0000_0000_5151);
    let mut content: Vec<TokenId> = (N_SPECIAL..vocab_size).collect();
    content.shuffle(&mut rng);
    let mut mapping: Vec<TokenId> = (0..N_SPECIAL).collect();
    mapping.extend(content);
    Vocab { vocab_size, mapping }
}

fn sentence_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split.salt());
    rng.set_stream(index as u64 + 1);
    rng
}

fn make_pair(vocab: &Vocab, rng: &mut ChaCha8Rng, len_range: (usize, usize)) -> SentencePair {
    let len = rng.gen_range(len_range.0..=len_range.1);
    let src: Vec<TokenId> = (0..len)
        .map(|_| rng.gen_range(N_SPECIAL..vocab.vocab_size))
        .collect();
    let tgt = src.iter().rev().map(|&t| vocab.mapping[t]).collect();
    SentencePair { src, tgt }
}

fn generate_split(
    vocab: &Vocab,
    n_pairs: usize,
    len_range: (usize, usize),
    seed: u64,
    split: Split,
) -> Corpus {
    let pairs = (0..n_pairs)
        .map(|i| make_pair(vocab, &mut sentence_rng(seed, split, i), len_range))
        .collect();
    Corpus {
        pairs,
        vocab: vocab.clone(),
        split,
    }
}

/// A single reversal corpus (tagged as the training split).
pub fn generate_bijective_reversal(
    vocab_size: usize,
    n_pairs: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<Corpus> {
    check_args(vocab_size, len_range)?;
    let vocab = bijection(vocab_size, seed);
    Ok(generate_split(&vocab, n_pairs, len_range, seed, Split::Train))
}

/// Train/valid/test corpora sharing one bijection. Each sentence is drawn
/// from its own (split, index) stream, so splits never share a generator.
pub fn generate_splits(
    vocab_size: usize,
    sizes: (usize, usize, usize),
    len_range: (usize, usize),
    seed: u64,
) -> Result<CorpusSplits> {
    check_args(vocab_size, len_range)?;
    let vocab = bijection(vocab_size, seed);
    Ok(CorpusSplits {
        train: generate_split(&vocab, sizes.0, len_range, seed, Split::Train),
        valid: generate_split(&vocab, sizes.1, len_range, seed, Split::Valid),
        test: generate_split(&vocab, sizes.2, len_range, seed, Split::Test),
    })
}

impl CorpusSplits {
    /// Writes `vocab.json` and `{train,valid,test}.jsonl` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        crate::artifacts::save_versioned(&self.train.vocab, &dir.join("vocab.json"))?;
        for c in [&self.train, &self.valid, &self.test] {
            c.write_jsonl(&dir.join(format!("{}.jsonl", c.split.file_stem())))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let vocab: Vocab = crate::artifacts::load_versioned(&dir.join("vocab.json"))?;
        let read = |split: Split| Corpus::read_jsonl(&dir.join(format!("{}.jsonl", split.file_stem())), vocab.clone(), split);
        Ok(Self {
            train: read(Split::Train)?,
            valid: read(Split::Valid)?,
            test: read(Split::Test)?,
        })
    }
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            if p.src.is_empty() || p.tgt.is_empty() {
                return Err(Error::InvalidInput(format!("pair {i} has an empty side")));
            }
            if let Some(&id) = p.src.iter().chain(&p.tgt).find(|&&t| t >= self.vocab.vocab_size) {
                return Err(Error::OutOfVocab {
                    id,
                    vocab_size: self.vocab.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// A corpus containing the first `n` pairs.
    pub fn truncated(&self, n: usize) -> Corpus {
        Corpus {
            pairs: self.pairs[..n.min(self.pairs.len())].to_vec(),
            vocab: self.vocab.clone(),
            split: self.split,
        }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for p in &self.pairs {
            serde_json::to_writer(&mut f, p)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path, vocab: Vocab, split: Split) -> Result<Corpus> {
        let f = BufReader::new(fs::File::open(path)?);
        let mut pairs = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            pairs.push(serde_json::from_str(&line)?);
        }
        let c = Corpus { pairs, vocab, split };
        c.validate()?;
        Ok(c)
    }
}

/// A padded `batch × len` id matrix; `valid[i]` is false exactly where
/// `ids[i] == PAD` was inserted as padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<TokenId>,
    pub valid: Vec<bool>,
}

impl PaddedBatch {
    pub fn from_sequences(seqs: &[&[TokenId]]) -> Self {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            valid.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
            valid.extend(std::iter::repeat_n(false, len - s.len()));
        }
        Self {
            batch: seqs.len(),
            len,
            ids,
            valid,
        }
    }

    pub fn row(&self, b: usize) -> &[TokenId] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Source ids plus teacher-forcing decoder input (`bos` + target) and the
/// shifted output (target + `eos`).
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub src: PaddedBatch,
    pub tgt_in: PaddedBatch,
    pub tgt_out: PaddedBatch,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SentencePair], indices: Vec<usize>) -> Self {
        let srcs: Vec<&[TokenId]> = pairs.iter().map(|p| p.src.as_slice()).collect();
        let tin: Vec<Vec<TokenId>> = pairs
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.tgt.iter().copied()).collect())
            .collect();
        let tout: Vec<Vec<TokenId>> = pairs
            .iter()
            .map(|p| p.tgt.iter().copied().chain(std::iter::once(EOS)).collect())
            .collect();
        let tin_refs: Vec<&[TokenId]> = tin.iter().map(|v| v.as_slice()).collect();
        let tout_refs: Vec<&[TokenId]> = tout.iter().map(|v| v.as_slice()).collect();
        Self {
            indices,
            src: PaddedBatch::from_sequences(&srcs),
            tgt_in: PaddedBatch::from_sequences(&tin_refs),
            tgt_out: PaddedBatch::from_sequences(&tout_refs),
        }
    }
}

/// Epoch-wise shuffled batching; epoch `k` uses its own deterministic order.
pub struct Batcher<'c> {
    corpus: &'c Corpus,
    batch_size: usize,
    seed: u64,
}

pub fn batch_iterator(corpus: &Corpus, batch_size: usize, seed: u64) -> Batcher<'_> {
    Batcher {
        corpus,
        batch_size: batch_size.max(1),
        seed,
    }
}

impl<'c> Batcher<'c> {
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Batch> + 'c {
        let mut order: Vec<usize> = (0..self.corpus.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        let corpus = self.corpus;
        let bs = self.batch_size;
        let chunks: Vec<Vec<usize>> = order.chunks(bs).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |idx| {
            let pairs: Vec<&SentencePair> = idx.iter().map(|&i| &corpus.pairs[i]).collect();
            Batch::from_pairs(&pairs, idx)
        })
    }

    /// Endless stream of batches, epoch after epoch.
    pub fn stream(&self) -> impl Iterator<Item = Batch> + 'c {
        let batcher = Batcher {
            corpus: self.corpus,
            batch_size: self.batch_size,
            seed: self.seed,
        };
        (0u64..).flat_map(move |e| batcher.epoch(e))
    }
}

/// Unshuffled batches in corpus order (evaluation).
pub fn sequential_batches(corpus: &Corpus, batch_size: usize) -> Vec<Batch> {
    (0..corpus.len())
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(|idx| {
            let pairs: Vec<&SentencePair> = idx.iter().map(|&i| &corpus.pairs[i]).collect();
            Batch::from_pairs(&pairs, idx.to_vec())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_is_mapped_reverse() {
        let c = generate_bijective_reversal(16, 20, (3, 6), 7).unwrap();
        for p in &c.pairs {
            let expect: Vec<_> = p.src.iter().rev().map(|&t| c.vocab.mapping[t]).collect();
            assert_eq!(p.tgt, expect);
            assert!(p.src.iter().all(|&t| (N_SPECIAL..16).contains(&t)));
        }
    }

    #[test]
    fn inverse_mapping_recovers_source() {
        let c = generate_bijective_reversal(32, 200, (1, 12), 3).unwrap();
        let inv = c.vocab.inverse();
        for p in &c.pairs {
            let back: Vec<_> = p.tgt.iter().rev().map(|&t| inv[t]).collect();
            assert_eq!(back, p.src);
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_splits(20, (10, 5, 5), (2, 5), 11).unwrap();
        let b = generate_splits(20, (10, 5, 5), (2, 5), 11).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.valid, b.valid);
        assert_ne!(a.train.pairs, a.valid.pairs[..].to_vec());
    }

    #[test]
    fn bad_arguments_rejected() {
        assert!(generate_bijective_reversal(7, 1, (1, 2), 0).is_err());
        assert!(generate_bijective_reversal(8, 1, (0, 2), 0).is_err());
        assert!(generate_bijective_reversal(8, 1, (3, 65), 0).is_err());
        assert!(generate_bijective_reversal(8, 1, (4, 3), 0).is_err());
    }

    #[test]
    fn batch_size_one_yields_individual_sentences() {
        let c = generate_bijective_reversal(16, 7, (2, 5), 1).unwrap();
        let batches: Vec<_> = batch_iterator(&c, 1, 9).epoch(0).collect();
        assert_eq!(batches.len(), 7);
        for b in &batches {
            assert_eq!(b.src.row(0), c.pairs[b.indices[0]].src.as_slice());
            assert!(b.src.valid.iter().all(|&v| v));
        }
    }

    #[test]
    fn epoch_covers_corpus_once_and_masks_match_padding() {
        let c = generate_bijective_reversal(16, 53, (1, 9), 4).unwrap();
        let batcher = batch_iterator(&c, 8, 2);
        let mut seen: Vec<usize> = Vec::new();
        for b in batcher.epoch(3) {
            for (row, &i) in b.indices.iter().enumerate() {
                let n = c.pairs[i].src.len();
                for pos in 0..b.src.len {
                    let id = b.src.ids[row * b.src.len + pos];
                    assert_eq!(b.src.valid[row * b.src.len + pos], pos < n);
                    assert_eq!(id == PAD, pos >= n);
                }
            }
            seen.extend(b.indices);
        }
        seen.sort();
        assert_eq!(seen, (0..53).collect::<Vec<_>>());
        let e0: Vec<_> = batcher.epoch(0).flat_map(|b| b.indices).collect();
        let e0b: Vec<_> = batcher.epoch(0).flat_map(|b| b.indices).collect();
        let e1: Vec<_> = batcher.epoch(1).flat_map(|b| b.indices).collect();
        assert_eq!(e0, e0b);
        assert_ne!(e0, e1);
    }

    #[test]
    fn jsonl_round_trip() {
        let c = generate_bijective_reversal(16, 12, (1, 5), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        c.write_jsonl(&path).unwrap();
        let back = Corpus::read_jsonl(&path, c.vocab.clone(), Split::Train).unwrap();
        assert_eq!(back, c);
    }
}
