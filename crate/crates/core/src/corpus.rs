//! Synthetic training corpus with planted, heavily duplicated canaries.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenSequence;

/// How background (non-canary) sequences are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundModel {
    /// Every token i.i.d. uniform over the vocabulary.
    Uniform,
    /// A fixed sparse first-order Markov chain: every token has `branching`
    /// successors with geometrically decaying probabilities (ratio `decay`).
    /// The chain is derived from the corpus seed.
    Markov { branching: usize, decay: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub n_background: usize,
    pub seq_len: usize,
    pub n_canaries: usize,
    pub canary_dup: usize,
    pub seed: u64,
    /// Size of the fresh held-out set used for perplexity.
    #[serde(default = "default_heldout")]
    pub n_heldout: usize,
    /// Length of the prefix that must be unique across all records.
    #[serde(default = "default_unique_prefix")]
    pub unique_prefix_len: usize,
    #[serde(default = "default_background")]
    pub background: BackgroundModel,
}

fn default_heldout() -> usize {
    256
}

fn default_unique_prefix() -> usize {
    4
}

fn default_background() -> BackgroundModel {
    BackgroundModel::Uniform
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("corpus vocab_size must be at least 2"));
        }
        if self.seq_len < 2 {
            return Err(Error::config("corpus seq_len must be at least 2"));
        }
        if self.n_canaries < 1 {
            return Err(Error::config("n_canaries must be at least 1"));
        }
        if self.canary_dup < 1 {
            return Err(Error::config("canary_dup must be at least 1"));
        }
        if self.unique_prefix_len == 0 || self.unique_prefix_len > self.seq_len {
            return Err(Error::config("unique_prefix_len must lie in [1, seq_len]"));
        }
        if let BackgroundModel::Markov { branching, decay } = self.background {
            if branching == 0 || branching > self.vocab_size {
                return Err(Error::config("markov branching must lie in [1, vocab_size]"));
            }
            if !(decay > 0.0 && decay <= 1.0) {
                return Err(Error::config("markov decay must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    fn total_records(&self) -> usize {
        self.n_background + self.n_canaries
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub tokens: TokenSequence,
    pub is_canary: bool,
    pub dup_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Canaries first, then background, each unique.
    pub records: Vec<SequenceRecord>,
    /// Record indices, one per training occurrence, in shuffled order.
    pub stream: Vec<usize>,
}

impl Corpus {
    /// Expands records by `dup_count` and shuffles the occurrences with `seed`.
    pub fn from_records(records: Vec<SequenceRecord>, seed: u64) -> Self {
        let mut stream: Vec<usize> = records
            .iter()
            .enumerate()
            .flat_map(|(i, r)| std::iter::repeat_n(i, r.dup_count))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_5245_414d);
        stream.shuffle(&mut rng);
        Self { records, stream }
    }

    pub fn training_sequences(&self) -> Vec<&[u32]> {
        self.stream.iter().map(|&i| &self.records[i].tokens[..]).collect()
    }

    pub fn canaries(&self) -> impl Iterator<Item = &SequenceRecord> {
        self.records.iter().filter(|r| r.is_canary)
    }

    pub fn background(&self) -> impl Iterator<Item = &SequenceRecord> {
        self.records.iter().filter(|r| !r.is_canary)
    }
}

struct Sampler {
    vocab: usize,
    chain: Option<MarkovChain>,
}

struct MarkovChain {
    successors: Vec<Vec<u32>>,
    cumulative: Vec<f64>,
}

impl MarkovChain {
    fn new(vocab: usize, branching: usize, decay: f64, rng: &mut ChaCha8Rng) -> Self {
        let all: Vec<u32> = (0..vocab as u32).collect();
        let successors = (0..vocab)
            .map(|_| all.choose_multiple(rng, branching).copied().collect())
            .collect();
        let weights: Vec<f64> = (0..branching).map(|i| decay.powi(i as i32)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Self { successors, cumulative }
    }

    fn next(&self, prev: u32, rng: &mut ChaCha8Rng) -> u32 {
        let u: f64 = rng.random();
        let slot = self
            .cumulative
            .iter()
            .position(|c| u < *c)
            .unwrap_or(self.cumulative.len() - 1);
        self.successors[prev as usize][slot]
    }
}

impl Sampler {
    fn uniform(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        (0..len).map(|_| rng.random_range(0..self.vocab as u32)).collect()
    }

    fn background(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        match &self.chain {
            None => self.uniform(len, rng),
            Some(chain) => {
                let mut out = Vec::with_capacity(len);
                out.push(rng.random_range(0..self.vocab as u32));
                while out.len() < len {
                    let prev = *out.last().unwrap();
                    out.push(chain.next(prev, rng));
                }
                out
            }
        }
    }
}

fn sampler(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Sampler {
    let chain = match spec.background {
        BackgroundModel::Uniform => None,
        BackgroundModel::Markov { branching, decay } => {
            Some(MarkovChain::new(spec.vocab_size, branching, decay, rng))
        }
    };
    Sampler {
        vocab: spec.vocab_size,
        chain,
    }
}

/// `vocab^len`, saturating.
fn sequence_space(vocab: usize, len: usize) -> u128 {
    let mut acc: u128 = 1;
    for _ in 0..len {
        acc = acc.saturating_mul(vocab as u128);
    }
    acc
}

const MAX_DRAWS_PER_RECORD: usize = 1000;

/// Deterministically draws canaries then background sequences, rejecting
/// any draw whose `unique_prefix_len` prefix collides with an earlier record.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let needed = spec.total_records() as u128;
    if sequence_space(spec.vocab_size, spec.unique_prefix_len) < needed * 2 {
        return Err(Error::Capacity(format!(
            "{} distinct {}-token prefixes over a vocab of {} cannot be drawn reliably",
            needed, spec.unique_prefix_len, spec.vocab_size
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sampler = sampler(spec, &mut rng);
    let mut prefixes: HashSet<Vec<u32>> = HashSet::with_capacity(spec.total_records());
    let mut records = Vec::with_capacity(spec.total_records());

    for i in 0..spec.total_records() {
        let is_canary = i < spec.n_canaries;
        let mut draws = 0;
        let tokens = loop {
            let t = if is_canary {
                sampler.uniform(spec.seq_len, &mut rng)
            } else {
                sampler.background(spec.seq_len, &mut rng)
            };
            if prefixes.insert(t[..spec.unique_prefix_len].to_vec()) {
                break t;
            }
            draws += 1;
            if draws >= MAX_DRAWS_PER_RECORD {
                return Err(Error::Capacity(format!(
                    "could not draw a record with a unique {}-token prefix after {draws} tries",
                    spec.unique_prefix_len
                )));
            }
        };
        records.push(SequenceRecord {
            tokens: TokenSequence(tokens),
            is_canary,
            dup_count: if is_canary { spec.canary_dup } else { 1 },
        });
    }
    Ok(Corpus::from_records(records, spec.seed))
}

/// Fresh sequences from the background distribution, none equal to a
/// training record.
pub fn generate_heldout(spec: &CorpusSpec, corpus: &Corpus) -> Result<Vec<TokenSequence>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Rebuild the same chain the corpus used, then move to an independent stream.
    let sampler = sampler(spec, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0048_454c_444f_5554);
    let seen: HashSet<&[u32]> = corpus.records.iter().map(|r| &r.tokens[..]).collect();
    let mut out = Vec::with_capacity(spec.n_heldout);
    let mut draws = 0;
    while out.len() < spec.n_heldout {
        let t = sampler.background(spec.seq_len, &mut rng);
        draws += 1;
        if !seen.contains(&t[..]) {
            out.push(TokenSequence(t));
        } else if draws > spec.n_heldout * MAX_DRAWS_PER_RECORD {
            return Err(Error::Capacity("held-out set collides with training data".into()));
        }
    }
    Ok(out)
}

/// Splits into a `k`-token prefix and the remaining suffix.
pub fn split_prefix_suffix(record: &SequenceRecord, k: usize) -> Result<(&[u32], &[u32])> {
    let len = record.tokens.len();
    if k >= len {
        return Err(Error::degenerate(format!(
            "prefix length {k} leaves no suffix in a {len}-token record"
        )));
    }
    Ok(record.tokens.split_at(k))
}

pub fn write_records_jsonl(path: &Path, records: &[SequenceRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<SequenceRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        if rec.dup_count == 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: dup_count must be at least 1", i + 1),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Held-out sequences reuse the record schema (`is_canary = false`,
/// `dup_count = 1`) so one reader serves both files.
pub fn write_heldout_jsonl(path: &Path, seqs: &[TokenSequence]) -> Result<()> {
    let records: Vec<SequenceRecord> = seqs
        .iter()
        .map(|s| SequenceRecord {
            tokens: s.clone(),
            is_canary: false,
            dup_count: 1,
        })
        .collect();
    write_records_jsonl(path, &records)
}

pub fn read_heldout_jsonl(path: &Path) -> Result<Vec<TokenSequence>> {
    Ok(read_records_jsonl(path)?.into_iter().map(|r| r.tokens).collect())
}
