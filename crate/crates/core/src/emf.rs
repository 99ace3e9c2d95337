//! Entropy-minimisation filter: score candidates by the prediction entropy of
//! a frozen classifier and keep the `k` most confident.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationRecord, CandidateKey};
use crate::backbone::SentenceEncoder;
use crate::data::{find_token_span, BasicTokenizer, Tokenizer};
use crate::error::{Error, Result};
use crate::metrics::CLASS_COUNT;
use crate::trainer::PredictionModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyScore {
    pub key: CandidateKey,
    pub probabilities: [f64; CLASS_COUNT],
    /// Bits.
    pub entropy: f64,
}

/// `−Σ p log₂ p` with `0 log 0 = 0`.
pub fn prediction_entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() || p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::argument("probabilities must be finite and non-negative"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::argument(format!("probabilities sum to {total}, not 1")));
    }
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|x| x * x.log2()).sum::<f64>())
}

/// Score every valid candidate. The pooled span is the sampled aspect for
/// aspect-channel candidates and the source aspect otherwise; when that span
/// is absent from the text the whole sentence is pooled.
pub fn score_candidates<E: SentenceEncoder>(model: &PredictionModel<E>, mut record: AugmentationRecord) -> Result<AugmentationRecord> {
    let tok = BasicTokenizer::default();
    let max = model.encoder.max_seq_len();
    for c in record.candidates.iter_mut() {
        c.score = None;
        if !c.valid {
            continue;
        }
        let mut words = tok.words(&c.text);
        words.truncate(max);
        let aspect = if c.key.aspect_derived() {
            &record.sampled_aspect
        } else {
            &record.source.aspect_text
        };
        let positions: Vec<usize> = match find_token_span(&words, &tok.words(aspect)) {
            Some((s, e)) => (s..e).collect(),
            None => (0..words.len()).collect(),
        };
        let probabilities = model.probabilities_pooled(&model.ids(&words), &positions)?;
        c.score = Some(EntropyScore {
            key: c.key,
            probabilities,
            entropy: prediction_entropy(&probabilities)?,
        });
    }
    if record.candidates.iter().all(|c| c.score.is_none()) {
        log::warn!("no valid candidate for `{}`", record.source.raw_text);
    }
    Ok(record)
}

/// The `k` lowest-entropy keys; ties go to the earlier key in `AAC, PAC, PA, AP`.
pub fn emf_select(scores: &[EntropyScore], k: usize) -> Vec<CandidateKey> {
    let mut sorted: Vec<&EntropyScore> = scores.iter().collect();
    sorted.sort_by(|a, b| a.entropy.total_cmp(&b.entropy).then(a.key.cmp(&b.key)));
    sorted.into_iter().take(k).map(|s| s.key).collect()
}

/// Score and select over all records, preserving order.
pub fn filter_records<E: SentenceEncoder>(
    model: &PredictionModel<E>,
    records: Vec<AugmentationRecord>,
    k: usize,
) -> Result<Vec<AugmentationRecord>> {
    if k == 0 {
        return Err(Error::argument("k must be ≥ 1"));
    }
    records
        .into_par_iter()
        .map(|r| {
            let mut r = score_candidates(model, r)?;
            let scores: Vec<EntropyScore> = r.candidates.iter().filter_map(|c| c.score).collect();
            r.selected = emf_select(&scores, k);
            Ok(r)
        })
        .collect()
}

/// Keep every valid candidate without scoring.
pub fn select_all_valid(records: Vec<AugmentationRecord>) -> Vec<AugmentationRecord> {
    records
        .into_iter()
        .map(|mut r| {
            r.selected = r.candidates.iter().filter(|c| c.valid).map(|c| c.key).collect();
            r
        })
        .collect()
}
