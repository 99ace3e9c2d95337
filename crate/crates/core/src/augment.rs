//! Cross-channel sentence generation.
//!
//! Per source triplet: `AAC(s, Â)`, `PAC(s, P̂)`, `PA = AAC(PAC(s, P̂), Â)` and
//! `AP = PAC(AAC(s, Â), P̂)`.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{DecodeConfig, Seq2SeqBackbone};
use crate::data::{
    concat_condition, find_token_span, opposite_polarity, AbsaTriplet, AspectVocabulary, BasicTokenizer, Dataset,
    Polarity, PolaritySeedMap, Tokenizer,
};
use crate::emf::EntropyScore;
use crate::error::{Error, Result};
use crate::peft::AdaptedGenerator;
use crate::vocab::TextCodec;

/// Text produced by a generator for one condition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub text: String,
    pub truncated: bool,
}

/// Anything that maps a conditioned input string to a sentence.
pub trait Generator: Sync {
    fn generate(&self, input: &str) -> Result<Generated>;
}

/// A frozen adapted generator with its text codec and decoding strategy.
pub struct HandleGenerator<'a, B> {
    pub handle: &'a AdaptedGenerator<B>,
    pub codec: &'a TextCodec,
    pub decode: DecodeConfig,
}

impl<B: Seq2SeqBackbone> Generator for HandleGenerator<'_, B> {
    fn generate(&self, input: &str) -> Result<Generated> {
        let out = self.handle.generate(&self.codec.encode_source(input), &self.decode)?;
        Ok(Generated {
            text: self.codec.decode(&out.ids),
            truncated: out.truncated,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Channel {
    Aac,
    Pac,
}

/// Candidate keys in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CandidateKey {
    Aac,
    Pac,
    Pa,
    Ap,
}

impl CandidateKey {
    pub const ALL: [CandidateKey; 4] = [CandidateKey::Aac, CandidateKey::Pac, CandidateKey::Pa, CandidateKey::Ap];

    /// Channels applied to the source, in order.
    pub fn chain(self) -> Vec<Channel> {
        match self {
            CandidateKey::Aac => vec![Channel::Aac],
            CandidateKey::Pac => vec![Channel::Pac],
            CandidateKey::Pa => vec![Channel::Pac, Channel::Aac],
            CandidateKey::Ap => vec![Channel::Aac, Channel::Pac],
        }
    }

    /// Whether the aspect channel took part, so the sampled aspect must appear.
    pub fn aspect_derived(self) -> bool {
        self.chain().contains(&Channel::Aac)
    }
}

impl fmt::Display for CandidateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CandidateKey::Aac => "AAC",
            CandidateKey::Pac => "PAC",
            CandidateKey::Pa => "PA",
            CandidateKey::Ap => "AP",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub key: CandidateKey,
    pub chain: Vec<Channel>,
    pub text: String,
    pub valid: bool,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<EntropyScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub source: AbsaTriplet,
    pub sampled_aspect: String,
    pub inverted_polarity: Polarity,
    pub seed_span: String,
    /// Always four, in `CandidateKey::ALL` order.
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub selected: Vec<CandidateKey>,
}

impl AugmentationRecord {
    pub fn candidate(&self, key: CandidateKey) -> &Candidate {
        self.candidates.iter().find(|c| c.key == key).expect("all four keys present")
    }

    pub fn selected_candidates(&self) -> impl Iterator<Item = &Candidate> {
        self.selected.iter().map(|k| self.candidate(*k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Apply the validity rules; when off only failed or empty generations are invalid.
    pub validity: bool,
    pub decode: DecodeConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            validity: true,
            decode: DecodeConfig::default(),
        }
    }
}

pub fn aac_generate(gen: &dyn Generator, sentence: &str, aspect: &str) -> Result<Generated> {
    gen.generate(&concat_condition(sentence, aspect)?)
}

pub fn pac_generate(
    gen: &dyn Generator,
    sentence: &str,
    polarity: Polarity,
    seeds: &PolaritySeedMap,
    span_index: usize,
) -> Result<Generated> {
    gen.generate(&concat_condition(sentence, &seeds.span_round_robin(polarity, span_index))?)
}

/// Uniform draw from the aspect set, excluding `own` when another aspect exists.
pub fn sample_aspect<R: Rng + ?Sized>(vocab: &AspectVocabulary, own: &str, rng: &mut R) -> Result<String> {
    let pool: Vec<&String> = if vocab.len() > 1 {
        vocab.aspects().iter().filter(|a| a.as_str() != own).collect()
    } else {
        vocab.aspects().iter().collect()
    };
    pool.choose(rng)
        .map(|a| (*a).clone())
        .ok_or_else(|| Error::argument("empty aspect vocabulary"))
}

fn check_validity(text: &str, source: &AbsaTriplet, aspect: &str, key: CandidateKey, rules: bool) -> bool {
    if text.trim().is_empty() {
        return false;
    }
    if !rules {
        return true;
    }
    let tok = BasicTokenizer::default();
    let words = tok.words(text);
    if words == source.tokens || text == source.raw_text {
        return false;
    }
    !key.aspect_derived() || find_token_span(&words, &tok.words(aspect)).is_some()
}

/// Generate the four candidates for given draws; generation errors stay on the candidate.
pub fn generate_record(
    gen: &dyn Generator,
    source: &AbsaTriplet,
    aspect: &str,
    polarity: Polarity,
    seeds: &PolaritySeedMap,
    span_index: usize,
    validity: bool,
) -> AugmentationRecord {
    let s = source.raw_text.as_str();
    let a = aac_generate(gen, s, aspect);
    let p = pac_generate(gen, s, polarity, seeds, span_index);
    let chained = |upstream: &Result<Generated>, f: &dyn Fn(&str) -> Result<Generated>| match upstream {
        Ok(g) if !g.text.trim().is_empty() => f(&g.text),
        Ok(_) => Err(Error::argument("upstream channel produced empty text")),
        Err(e) => Err(Error::argument(format!("upstream channel failed: {e}"))),
    };
    let pa = chained(&p, &|t| aac_generate(gen, t, aspect));
    let ap = chained(&a, &|t| pac_generate(gen, t, polarity, seeds, span_index));
    let candidates = CandidateKey::ALL
        .into_iter()
        .zip([a, p, pa, ap])
        .map(|(key, res)| match res {
            Ok(g) => Candidate {
                key,
                chain: key.chain(),
                valid: check_validity(&g.text, source, aspect, key, validity),
                text: g.text,
                truncated: g.truncated,
                error: None,
                score: None,
            },
            Err(e) => Candidate {
                key,
                chain: key.chain(),
                text: String::new(),
                valid: false,
                truncated: false,
                error: Some(e.to_string()),
                score: None,
            },
        })
        .collect();
    AugmentationRecord {
        source: source.clone(),
        sampled_aspect: aspect.to_string(),
        inverted_polarity: polarity,
        seed_span: seeds.span_round_robin(polarity, span_index),
        candidates,
        selected: Vec::new(),
    }
}

/// Draw `Â` and `P̂` for one triplet and run both channels and their cross-feeds.
pub fn cross_channel<R: Rng + ?Sized>(
    gen: &dyn Generator,
    triplet: &AbsaTriplet,
    vocab: &AspectVocabulary,
    seeds: &PolaritySeedMap,
    rng: &mut R,
    span_index: usize,
    validity: bool,
) -> Result<AugmentationRecord> {
    let aspect = sample_aspect(vocab, &triplet.aspect_text, rng)?;
    let polarity = opposite_polarity(triplet.polarity, rng);
    Ok(generate_record(gen, triplet, &aspect, polarity, seeds, span_index, validity))
}

/// One record per triplet, in dataset order. Draws are sequential from `seed`;
/// generation runs in parallel.
pub fn augment_dataset(
    gen: &dyn Generator,
    dataset: &Dataset,
    seeds: &PolaritySeedMap,
    validity: bool,
    seed: u64,
) -> Result<Vec<AugmentationRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = dataset.aspect_vocabulary();
    let draws = dataset
        .triplets()
        .iter()
        .map(|t| Ok((sample_aspect(vocab, &t.aspect_text, &mut rng)?, opposite_polarity(t.polarity, &mut rng))))
        .collect::<Result<Vec<_>>>()?;
    Ok(dataset
        .triplets()
        .par_iter()
        .zip(draws.par_iter())
        .enumerate()
        .map(|(i, (t, (aspect, pol)))| generate_record(gen, t, aspect, *pol, seeds, i, validity))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentHeader {
    pub seed: u64,
    pub records: usize,
    pub validity: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_k: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: AugmentHeader,
}

pub fn augmentations_to_jsonl(header: &AugmentHeader, records: &[AugmentationRecord]) -> Result<String> {
    let mut out = serde_json::to_string(&HeaderLine { header: header.clone() })?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_augmentations(path: impl AsRef<Path>, header: &AugmentHeader, records: &[AugmentationRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(augmentations_to_jsonl(header, records)?.as_bytes())?;
    Ok(())
}

pub fn read_augmentations(path: impl AsRef<Path>) -> Result<(AugmentHeader, Vec<AugmentationRecord>)> {
    let path = path.as_ref();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let first = lines.next().ok_or_else(|| parse_err(1, "missing header line".into()))??;
    let header: HeaderLine = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AugmentationRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
        if rec.candidates.len() != 4 {
            return Err(parse_err(i + 2, format!("expected 4 candidates, got {}", rec.candidates.len())));
        }
        records.push(rec);
    }
    Ok((header.header, records))
}
