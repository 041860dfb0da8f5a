//! Verbatim-extraction audit and held-out perplexity.
//!
//! A record is extractable at context `k` when greedy decoding from its first
//! `k` tokens reproduces the next `suffix_len` tokens exactly.
//!
//! [`is_extractable`] runs the decode literally. [`memorized_fraction`] gets
//! the same answer from one causal pass over the true sequence: as long as
//! every earlier greedy token matched the truth, the decoder's input equals
//! the true prefix, so the first mismatch is the first position whose argmax
//! differs from the next true token. One pass then serves every `k`.

use std::sync::OnceLock;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SequenceRecord;
use crate::error::{Error, Result};
use crate::model::{ModelParams, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSpec {
    pub context_lengths: Vec<usize>,
    pub suffix_len: usize,
    /// Records sampled (without replacement) from each audited population.
    pub n_samples: usize,
    pub seed: u64,
}

impl AuditSpec {
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.context_lengths.is_empty() {
            return Err(Error::config("audit needs at least one context length"));
        }
        if self.suffix_len == 0 {
            return Err(Error::config("suffix_len must be positive"));
        }
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be positive"));
        }
        for &k in &self.context_lengths {
            if k == 0 {
                return Err(Error::config("context lengths must be positive"));
            }
            if k + self.suffix_len > seq_len {
                return Err(Error::config(format!(
                    "context {k} + suffix {} exceeds sequence length {seq_len}",
                    self.suffix_len
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub record_id: usize,
    pub k: usize,
    pub extracted: bool,
    /// Leading suffix tokens reproduced before the first miss.
    pub matched_prefix_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Extraction {
    Checked(ExtractionResult),
    /// The record is shorter than `k + suffix_len`.
    Skipped { record_id: usize, k: usize, record_len: usize },
}

impl Extraction {
    pub fn extracted(&self) -> Option<bool> {
        match self {
            Extraction::Checked(r) => Some(r.extracted),
            Extraction::Skipped { .. } => None,
        }
    }
}

fn check_lengths(k: usize, suffix_len: usize) -> Result<()> {
    if suffix_len == 0 {
        return Err(Error::degenerate("suffix_len 0 makes every record vacuously extractable"));
    }
    if k == 0 {
        return Err(Error::degenerate("greedy decoding needs a non-empty prefix (k >= 1)"));
    }
    Ok(())
}

/// Greedy-decodes `suffix_len` tokens from the record's first `k` and
/// compares them with the true continuation.
pub fn is_extractable(
    params: &ModelParams,
    record_id: usize,
    record: &SequenceRecord,
    k: usize,
    suffix_len: usize,
) -> Result<Extraction> {
    check_lengths(k, suffix_len)?;
    let tokens = &record.tokens;
    if k + suffix_len > tokens.len() {
        return Ok(Extraction::Skipped {
            record_id,
            k,
            record_len: tokens.len(),
        });
    }
    let decoded = params.greedy_decode(&tokens[..k], suffix_len)?;
    let truth = &tokens[k..k + suffix_len];
    let matched = decoded.iter().zip(truth).take_while(|(a, b)| a == b).count();
    Ok(Extraction::Checked(ExtractionResult {
        record_id,
        k,
        extracted: matched == suffix_len,
        matched_prefix_len: matched,
    }))
}

/// Matched-prefix length for every `k`, from one forward pass; `None` where
/// the record is too short.
pub fn scan_record(
    params: &ModelParams,
    tokens: &[u32],
    context_lengths: &[usize],
    suffix_len: usize,
) -> Result<Vec<Option<usize>>> {
    for &k in context_lengths {
        check_lengths(k, suffix_len)?;
    }
    let needed = context_lengths
        .iter()
        .filter(|&&k| k + suffix_len <= tokens.len())
        .map(|&k| k + suffix_len - 1)
        .max();
    let Some(needed) = needed else {
        return Ok(vec![None; context_lengths.len()]);
    };
    let preds = params.greedy_predictions(&tokens[..needed])?;
    Ok(context_lengths
        .iter()
        .map(|&k| {
            (k + suffix_len <= tokens.len()).then(|| {
                (0..suffix_len)
                    .take_while(|&j| preds[k - 1 + j] == tokens[k + j])
                    .count()
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KTally {
    pub k: usize,
    pub evaluated: usize,
    pub extracted: usize,
    pub skipped: usize,
    /// `extracted / evaluated`; skipped records are outside the denominator.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScan {
    pub record_id: usize,
    /// Per context length, as in [`scan_record`].
    pub matched: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionScan {
    pub requested: usize,
    /// True when fewer records existed than were requested.
    pub clamped: bool,
    pub sampled_ids: Vec<usize>,
    pub suffix_len: usize,
    pub per_k: Vec<KTally>,
    pub records: Vec<RecordScan>,
}

impl FractionScan {
    /// Records extracted at some `k` but not at a larger one. Reported, never
    /// asserted: extraction need not be monotone in context length.
    pub fn context_monotonicity_violations(&self) -> usize {
        self.records
            .iter()
            .filter(|r| {
                let flags: Vec<bool> = r
                    .matched
                    .iter()
                    .flatten()
                    .map(|&m| m == self.suffix_len)
                    .collect();
                flags.windows(2).any(|w| w[0] && !w[1])
            })
            .count()
    }
}

/// Seeded sample of `n` ids out of `0..len` without replacement, sorted.
pub fn sample_ids(len: usize, n: usize, seed: u64) -> (Vec<usize>, bool) {
    let clamped = n > len;
    let take = n.min(len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = index::sample(&mut rng, len, take).into_vec();
    ids.sort_unstable();
    (ids, clamped)
}

/// Caps audit parallelism at `PRUNEMEM_THREADS` when set.
pub fn audit_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("PRUNEMEM_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|n| *n > 0)
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("audit thread pool")
    })
}

/// Share of sampled records that are extractable, per context length.
pub fn memorized_fraction(
    params: &ModelParams,
    dataset: &[SequenceRecord],
    spec: &AuditSpec,
) -> Result<FractionScan> {
    if dataset.is_empty() {
        return Err(Error::degenerate("cannot audit an empty dataset"));
    }
    let (ids, clamped) = sample_ids(dataset.len(), spec.n_samples, spec.seed);
    if clamped {
        log::debug!(
            "requested {} samples from {} records; auditing all of them",
            spec.n_samples,
            dataset.len()
        );
    }
    let records: Vec<RecordScan> = audit_pool().install(|| {
        ids.par_iter()
            .map(|&id| {
                let matched = scan_record(params, &dataset[id].tokens, &spec.context_lengths, spec.suffix_len)?;
                Ok(RecordScan { record_id: id, matched })
            })
            .collect::<Result<_>>()
    })?;

    let per_k = spec
        .context_lengths
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut t = KTally {
                k,
                evaluated: 0,
                extracted: 0,
                skipped: 0,
                fraction: 0.0,
            };
            for r in &records {
                match r.matched[i] {
                    None => t.skipped += 1,
                    Some(m) => {
                        t.evaluated += 1;
                        if m == spec.suffix_len {
                            t.extracted += 1;
                        }
                    }
                }
            }
            if t.evaluated > 0 {
                t.fraction = t.extracted as f64 / t.evaluated as f64;
            }
            t
        })
        .collect();

    Ok(FractionScan {
        requested: spec.n_samples,
        clamped,
        sampled_ids: ids,
        suffix_len: spec.suffix_len,
        per_k,
        records,
    })
}

/// `exp` of the token-weighted mean next-token NLL over `heldout`.
pub fn perplexity(params: &ModelParams, heldout: &[TokenSequence]) -> Result<f64> {
    Ok(mean_nll(params, heldout)?.exp())
}

/// Token-weighted mean NLL (nats per predicted token).
pub fn mean_nll(params: &ModelParams, heldout: &[TokenSequence]) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::degenerate("held-out set is empty"));
    }
    let parts: Vec<(f64, usize)> = audit_pool().install(|| {
        heldout
            .par_iter()
            .map(|s| {
                let n = s.len().saturating_sub(1);
                Ok((params.sequence_nll(s)? * n as f64, n))
            })
            .collect::<Result<_>>()
    })?;
    let (total, tokens) = parts
        .iter()
        .fold((0.0, 0usize), |(a, n), (b, m)| (a + b, n + m));
    Ok(total / tokens as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::trainer::{train, TrainConfig};
    use rand::Rng;

    fn config(vocab: usize, seq: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_seq_len: seq,
            seed: 5,
        }
    }

    fn random_records(n: usize, vocab: usize, len: usize, seed: u64) -> Vec<SequenceRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| SequenceRecord {
                tokens: TokenSequence((0..len).map(|_| rng.random_range(0..vocab as u32)).collect()),
                is_canary: true,
                dup_count: 1,
            })
            .collect()
    }

    fn memorizer(records: &[SequenceRecord], vocab: usize, len: usize) -> ModelParams {
        let stream: Vec<&[u32]> = records
            .iter()
            .flat_map(|r| std::iter::repeat_n(&r.tokens[..], 8))
            .collect();
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 8,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        train(ModelParams::init(&config(vocab, len)).unwrap(), &stream, &cfg)
            .unwrap()
            .params
    }

    #[test]
    fn saturated_model_scores_one_everywhere() {
        let recs = random_records(4, 16, 12, 1);
        let params = memorizer(&recs, 16, 12);
        let spec = AuditSpec {
            context_lengths: vec![1, 2, 4],
            suffix_len: 8,
            n_samples: 4,
            seed: 0,
        };
        let scan = memorized_fraction(&params, &recs, &spec).unwrap();
        for t in &scan.per_k {
            assert_eq!(t.fraction, 1.0, "k = {}", t.k);
        }
    }

    #[test]
    fn fraction_matches_recount_with_literal_decoding() {
        // A half-trained model gives a mix of hits and misses.
        let recs = random_records(24, 8, 14, 2);
        let stream: Vec<&[u32]> = recs.iter().map(|r| &r.tokens[..]).collect();
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let params = train(ModelParams::init(&config(8, 14)).unwrap(), &stream, &cfg).unwrap().params;
        let spec = AuditSpec {
            context_lengths: vec![1, 3, 6],
            suffix_len: 3,
            n_samples: 20,
            seed: 9,
        };
        let scan = memorized_fraction(&params, &recs, &spec).unwrap();
        let mut any_hit = false;
        let mut any_miss = false;
        for (ki, &k) in spec.context_lengths.iter().enumerate() {
            let mut hits = 0;
            for (ri, &id) in scan.sampled_ids.iter().enumerate() {
                let Extraction::Checked(r) = is_extractable(&params, id, &recs[id], k, spec.suffix_len).unwrap() else {
                    panic!("no record is short here");
                };
                assert_eq!(Some(r.matched_prefix_len), scan.records[ri].matched[ki]);
                assert_eq!(r.extracted, r.matched_prefix_len == spec.suffix_len);
                hits += r.extracted as usize;
            }
            any_hit |= hits > 0;
            any_miss |= hits < scan.sampled_ids.len();
            assert_eq!(scan.per_k[ki].extracted, hits);
            assert_eq!(scan.per_k[ki].fraction, hits as f64 / 20.0);
        }
        assert!(any_hit && any_miss, "test model should be partially memorizing");
    }

    #[test]
    fn zero_model_does_not_reproduce_a_random_suffix() {
        let params = ModelParams::zeros(&config(64, 32)).unwrap();
        let rec = random_records(1, 64, 32, 3).remove(0);
        let out = is_extractable(&params, 0, &rec, 8, 16).unwrap();
        assert_eq!(out.extracted(), Some(false));
    }

    #[test]
    fn degenerate_lengths_are_rejected() {
        let params = ModelParams::zeros(&config(8, 8)).unwrap();
        let rec = random_records(1, 8, 8, 4).remove(0);
        assert!(matches!(is_extractable(&params, 0, &rec, 2, 0), Err(Error::DegenerateInput(_))));
        assert!(matches!(is_extractable(&params, 0, &rec, 0, 2), Err(Error::DegenerateInput(_))));
        assert!(memorized_fraction(&params, &[], &AuditSpec {
            context_lengths: vec![1],
            suffix_len: 1,
            n_samples: 1,
            seed: 0
        })
        .is_err());
    }

    #[test]
    fn short_records_are_skipped_not_dropped() {
        let params = ModelParams::zeros(&config(8, 8)).unwrap();
        let mut recs = random_records(3, 8, 8, 5);
        recs[1].tokens.0.truncate(4);
        let single = is_extractable(&params, 1, &recs[1], 2, 4).unwrap();
        assert_eq!(single, Extraction::Skipped { record_id: 1, k: 2, record_len: 4 });
        let spec = AuditSpec {
            context_lengths: vec![2],
            suffix_len: 4,
            n_samples: 3,
            seed: 0,
        };
        let scan = memorized_fraction(&params, &recs, &spec).unwrap();
        assert_eq!((scan.per_k[0].evaluated, scan.per_k[0].skipped), (2, 1));
    }

    #[test]
    fn oversampling_is_clamped_and_sampling_is_seeded() {
        let (ids, clamped) = sample_ids(5, 9, 1);
        assert!(clamped);
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        let a = sample_ids(100, 10, 7);
        assert_eq!(a, sample_ids(100, 10, 7));
        assert!(!a.1);
        assert!(a.0.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let params = ModelParams::zeros(&config(64, 16)).unwrap();
        let held: Vec<TokenSequence> = random_records(5, 64, 16, 6).into_iter().map(|r| r.tokens).collect();
        let ppl = perplexity(&params, &held).unwrap();
        assert!((ppl - 64.0).abs() < 0.5, "{ppl}");
        assert!(matches!(perplexity(&params, &[]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn perplexity_matches_naive_token_weighted_oracle() {
        let params = ModelParams::init_with_std(&config(11, 12), 0.5).unwrap();
        let mut held: Vec<TokenSequence> = random_records(6, 11, 12, 7).into_iter().map(|r| r.tokens).collect();
        held[2].0.truncate(5);
        held[4].0.truncate(2);
        let mut total = 0.0;
        let mut count = 0usize;
        for s in &held {
            let logits = params.forward(s).unwrap();
            for t in 0..s.len() - 1 {
                let row = logits.row(t);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                total += z.ln() + m - row[s[t + 1] as usize];
                count += 1;
            }
        }
        let oracle = (total / count as f64).exp();
        let ppl = perplexity(&params, &held).unwrap();
        assert!((ppl - oracle).abs() / oracle < 1e-12);
        assert!((ppl.ln() - mean_nll(&params, &held).unwrap()).abs() < 1e-9);
    }
}
