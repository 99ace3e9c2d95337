//! ABSA data: canonical triplets, tokenization, aspect statistics, polarity
//! algebra, condition concatenation and dataset I/O.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use quick_xml::events::Event;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Literal separator between a sentence and its generation condition.
pub const SEPARATOR: &str = "<eos>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative = 0,
    Neutral = 1,
    Positive = 2,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Negative, Polarity::Neutral, Polarity::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Label(format!("class index {i} outside 0..=2")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
            Polarity::Positive => "positive",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "negative" | "neg" | "0" => Ok(Polarity::Negative),
            "neutral" | "neu" | "1" => Ok(Polarity::Neutral),
            "positive" | "pos" | "2" => Ok(Polarity::Positive),
            other => Err(Error::Label(other.to_string())),
        }
    }
}

/// Polarity used by the polarity channel for a source with polarity `p`.
///
/// Positive and Negative swap. Neutral has no opposite, so one of the two is
/// drawn uniformly from `rng`.
pub fn opposite_polarity<R: Rng + ?Sized>(p: Polarity, rng: &mut R) -> Polarity {
    match p {
        Polarity::Positive => Polarity::Negative,
        Polarity::Negative => Polarity::Positive,
        Polarity::Neutral => {
            if rng.gen_bool(0.5) {
                Polarity::Positive
            } else {
                Polarity::Negative
            }
        }
    }
}

/// Index-based variant for callers holding raw labels.
pub fn opposite_polarity_index<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Result<usize> {
    Ok(opposite_polarity(Polarity::from_index(p)?, rng).index())
}

/// `sentence <eos> condition`
pub fn concat_condition(sentence: &str, condition: &str) -> Result<String> {
    if sentence.is_empty() || condition.is_empty() {
        return Err(Error::argument("concat_condition requires non-empty inputs"));
    }
    Ok(format!("{sentence} {SEPARATOR} {condition}"))
}

// ---------------------------------------------------------------------------
// Tokenization

/// A token with its half-open character span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<Token>;

    fn words(&self, text: &str) -> Vec<String> {
        self.tokenize(text).into_iter().map(|t| t.text).collect()
    }
}

/// Whitespace + punctuation splitter. Registered specials (always including
/// the separator) are kept whole.
#[derive(Debug, Clone)]
pub struct BasicTokenizer {
    specials: Vec<Vec<char>>,
}

impl Default for BasicTokenizer {
    fn default() -> Self {
        Self::with_specials(&[])
    }
}

impl BasicTokenizer {
    pub fn with_specials(extra: &[&str]) -> Self {
        let mut specials: Vec<Vec<char>> = std::iter::once(SEPARATOR)
            .chain(extra.iter().copied())
            .map(|s| s.chars().collect())
            .collect();
        specials.sort_by_key(|s| std::cmp::Reverse(s.len()));
        specials.dedup();
        Self { specials }
    }
}

impl Tokenizer for BasicTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut word_start: Option<usize> = None;
        let flush = |out: &mut Vec<Token>, start: &mut Option<usize>, end: usize| {
            if let Some(s) = start.take() {
                out.push(Token {
                    text: chars[s..end].iter().collect(),
                    start: s,
                    end,
                });
            }
        };
        let mut i = 0;
        while i < chars.len() {
            if let Some(sp) = self
                .specials
                .iter()
                .find(|sp| chars[i..].starts_with(sp))
            {
                flush(&mut out, &mut word_start, i);
                out.push(Token {
                    text: sp.iter().collect(),
                    start: i,
                    end: i + sp.len(),
                });
                i += sp.len();
                continue;
            }
            let c = chars[i];
            if c.is_whitespace() {
                flush(&mut out, &mut word_start, i);
            } else if c.is_alphanumeric() {
                word_start.get_or_insert(i);
            } else {
                flush(&mut out, &mut word_start, i);
                out.push(Token {
                    text: c.to_string(),
                    start: i,
                    end: i + 1,
                });
            }
            i += 1;
        }
        flush(&mut out, &mut word_start, chars.len());
        out
    }
}

/// Join tokens the way generated text is rendered.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// Positions where `needle` occurs as a contiguous token run in `haystack`.
pub fn find_token_span<S: AsRef<str>, T: AsRef<str>>(haystack: &[S], needle: &[T]) -> Option<(usize, usize)> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len())
        .find(|&s| {
            needle
                .iter()
                .zip(&haystack[s..])
                .all(|(n, h)| n.as_ref() == h.as_ref())
        })
        .map(|s| (s, s + needle.len()))
}

// ---------------------------------------------------------------------------
// Triplets

/// One labelled instance: a sentence, its aspect-span indicator and polarity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbsaTriplet {
    pub tokens: Vec<String>,
    pub aspect_indicator: Vec<u8>,
    pub polarity: Polarity,
    pub raw_text: String,
    pub aspect_text: String,
    /// Character offsets of the aspect in `raw_text` (half-open).
    pub aspect_char_start: usize,
    pub aspect_char_end: usize,
}

impl AbsaTriplet {
    /// Tokenize `text` and mark the tokens covering `[start, end)`.
    pub fn from_offsets(
        tokenizer: &dyn Tokenizer,
        text: &str,
        aspect: &str,
        start: usize,
        end: usize,
        polarity: Polarity,
    ) -> Result<Self> {
        let align_err = || Error::Alignment {
            text: text.to_string(),
            start,
            end,
        };
        let n_chars = text.chars().count();
        if start >= end || end > n_chars {
            return Err(align_err());
        }
        let slice: String = text.chars().skip(start).take(end - start).collect();
        if slice != aspect {
            return Err(Error::Schema(format!(
                "aspect {aspect:?} does not match text slice {slice:?} at {start}..{end}"
            )));
        }
        let toks = tokenizer.tokenize(text);
        let mut indicator = vec![0u8; toks.len()];
        let mut first = None;
        let mut last = None;
        for (i, t) in toks.iter().enumerate() {
            if t.end > start && t.start < end {
                indicator[i] = 1;
                first.get_or_insert(t.start);
                last = Some(t.end);
            }
        }
        if first != Some(start) || last != Some(end) {
            return Err(align_err());
        }
        let triplet = Self {
            tokens: toks.into_iter().map(|t| t.text).collect(),
            aspect_indicator: indicator,
            polarity,
            raw_text: text.to_string(),
            aspect_text: aspect.to_string(),
            aspect_char_start: start,
            aspect_char_end: end,
        };
        triplet.validate()?;
        Ok(triplet)
    }

    pub fn validate(&self) -> Result<()> {
        if self.aspect_indicator.len() != self.tokens.len() {
            return Err(Error::Schema("indicator length differs from sentence length".into()));
        }
        let marked: Vec<usize> = self.aspect_positions();
        if marked.is_empty() {
            return Err(Error::Schema("aspect indicator marks no token".into()));
        }
        if marked.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Schema("aspect indicator is not contiguous".into()));
        }
        if self.aspect_indicator.iter().any(|&b| b > 1) {
            return Err(Error::Schema("aspect indicator must be binary".into()));
        }
        Ok(())
    }

    pub fn aspect_positions(&self) -> Vec<usize> {
        self.aspect_indicator
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect()
    }

    /// Surface text of the marked tokens, recovered from the raw sentence.
    pub fn marked_text(&self) -> String {
        self.raw_text
            .chars()
            .skip(self.aspect_char_start)
            .take(self.aspect_char_end - self.aspect_char_start)
            .collect()
    }

    fn to_record(&self) -> JsonRecord {
        JsonRecord {
            text: self.raw_text.clone(),
            aspect: self.aspect_text.clone(),
            aspect_char_start: self.aspect_char_start,
            aspect_char_end: self.aspect_char_end,
            polarity: self.polarity.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JsonRecord {
    text: String,
    aspect: String,
    aspect_char_start: usize,
    aspect_char_end: usize,
    polarity: String,
}

// ---------------------------------------------------------------------------
// Aspect statistics and seeds

/// Distinct aspects in first-occurrence order with annotation counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectVocabulary {
    aspects: Vec<String>,
    counts: Vec<usize>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl AspectVocabulary {
    pub fn from_triplets<'a>(triplets: impl IntoIterator<Item = &'a AbsaTriplet>) -> Self {
        let mut v = Self::default();
        for t in triplets {
            v.observe(&t.aspect_text);
        }
        v
    }

    fn observe(&mut self, aspect: &str) {
        match self.index.get(aspect) {
            Some(&i) => self.counts[i] += 1,
            None => {
                self.index.insert(aspect.to_string(), self.aspects.len());
                self.aspects.push(aspect.to_string());
                self.counts.push(1);
            }
        }
    }

    pub fn aspects(&self) -> &[String] {
        &self.aspects
    }

    /// M_j for an aspect, 0 if unseen.
    pub fn frequency(&self, aspect: &str) -> usize {
        self.aspects
            .iter()
            .position(|a| a == aspect)
            .map_or(0, |i| self.counts[i])
    }

    pub fn frequencies(&self) -> impl Iterator<Item = (&str, usize)> {
        self.aspects.iter().map(String::as_str).zip(self.counts.iter().copied())
    }

    /// M_asp: number of distinct aspect items.
    pub fn total_instances(&self) -> usize {
        self.aspects.len()
    }

    pub fn annotation_count(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.aspects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aspects.is_empty()
    }
}

/// Seed spans per polarity used as polarity-channel conditions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolaritySeedMap {
    spans: BTreeMap<Polarity, Vec<String>>,
}

impl Default for PolaritySeedMap {
    fn default() -> Self {
        let mut spans = BTreeMap::new();
        spans.insert(Polarity::Positive, vec!["so good".to_string()]);
        spans.insert(Polarity::Negative, vec!["so bad".to_string()]);
        Self { spans }
    }
}

impl PolaritySeedMap {
    pub fn new(spans: BTreeMap<Polarity, Vec<String>>) -> Result<Self> {
        for p in [Polarity::Positive, Polarity::Negative] {
            if spans.get(&p).map_or(true, Vec::is_empty) {
                return Err(Error::config(format!("no seed span for {p}")));
            }
        }
        if spans.values().flatten().any(|s| s.trim().is_empty()) {
            return Err(Error::config("seed spans must be non-empty"));
        }
        Ok(Self { spans })
    }

    pub fn spans(&self, p: Polarity) -> &[String] {
        self.spans.get(&p).map_or(&[], Vec::as_slice)
    }

    /// The `n`-th span for `p`, cycling; polarities without spans fall back to the label name.
    pub fn span_round_robin(&self, p: Polarity, n: usize) -> String {
        let spans = self.spans(p);
        if spans.is_empty() {
            p.name().to_string()
        } else {
            spans[n % spans.len()].clone()
        }
    }

    pub fn all_spans(&self) -> impl Iterator<Item = &str> {
        self.spans.values().flatten().map(String::as_str)
    }
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub split: String,
    triplets: Vec<AbsaTriplet>,
    vocab: AspectVocabulary,
}

impl Dataset {
    pub fn new(split: impl Into<String>, triplets: Vec<AbsaTriplet>) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::argument("dataset must not be empty"));
        }
        let vocab = AspectVocabulary::from_triplets(&triplets);
        Ok(Self {
            split: split.into(),
            triplets,
            vocab,
        })
    }

    pub fn triplets(&self) -> &[AbsaTriplet] {
        &self.triplets
    }

    pub fn aspect_vocabulary(&self) -> &AspectVocabulary {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for t in &self.triplets {
            out.push_str(&serde_json::to_string(&t.to_record())?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    load_jsonl_with(path, &BasicTokenizer::default())
}

pub fn load_jsonl_with(path: impl AsRef<Path>, tokenizer: &dyn Tokenizer) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut triplets = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let polarity: Polarity = rec.polarity.parse()?;
        triplets.push(AbsaTriplet::from_offsets(
            tokenizer,
            &rec.text,
            &rec.aspect,
            rec.aspect_char_start,
            rec.aspect_char_end,
            polarity,
        )?);
    }
    let split = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(split, triplets)
}

// ---------------------------------------------------------------------------
// SemEval-2014 Task 4 XML

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConvertReport {
    pub records: usize,
    pub conflicts_dropped: usize,
}

/// Flatten SemEval XML into canonical JSONL, one line per (sentence, aspectTerm).
pub fn convert_semeval_xml(input: impl AsRef<Path>, output: impl AsRef<Path>) -> Result<ConvertReport> {
    let xml = fs::read_to_string(input.as_ref())?;
    let mut out = BufWriter::new(File::create(output.as_ref())?);
    let report = convert_semeval_str(&xml, &mut out)?;
    out.flush()?;
    if report.conflicts_dropped > 0 {
        warn!(
            "dropped {} aspect terms with polarity \"conflict\"",
            report.conflicts_dropped
        );
    }
    Ok(report)
}

pub fn convert_semeval_str<W: Write>(xml: &str, out: &mut W) -> Result<ConvertReport> {
    let mut reader = quick_xml::Reader::from_str(xml);
    let mut report = ConvertReport::default();
    let mut in_text = false;
    let mut text = String::new();
    let mut terms: Vec<(String, usize, usize, String)> = Vec::new();
    let xml_err = |e: &dyn fmt::Display| Error::Xml(e.to_string());

    loop {
        let ev = reader.read_event().map_err(|e| xml_err(&e))?;
        match ev {
            Event::Start(e) | Event::Empty(e) if e.name().as_ref() == b"aspectTerm" => {
                let mut attr = HashMap::new();
                for a in e.attributes() {
                    let a = a.map_err(|e| xml_err(&e))?;
                    let key = String::from_utf8_lossy(a.key.as_ref()).into_owned();
                    let val = a
                        .decode_and_unescape_value(reader.decoder())
                        .map_err(|e| xml_err(&e))?
                        .into_owned();
                    attr.insert(key, val);
                }
                let get = |k: &str| {
                    attr.get(k)
                        .cloned()
                        .ok_or_else(|| Error::Schema(format!("aspectTerm missing attribute `{k}`")))
                };
                let num = |k: &str| -> Result<usize> {
                    get(k)?
                        .parse()
                        .map_err(|_| Error::Schema(format!("aspectTerm attribute `{k}` is not an integer")))
                };
                terms.push((get("term")?, num("from")?, num("to")?, get("polarity")?));
            }
            Event::Start(e) if e.name().as_ref() == b"sentence" => {
                text.clear();
                terms.clear();
            }
            Event::Start(e) if e.name().as_ref() == b"text" => in_text = true,
            Event::End(e) if e.name().as_ref() == b"text" => in_text = false,
            Event::Text(t) if in_text => {
                text.push_str(&t.decode().map_err(|e| xml_err(&e))?);
            }
            Event::GeneralRef(r) if in_text => {
                let name = r.decode().map_err(|e| xml_err(&e))?;
                let resolved = match name.as_ref() {
                    "amp" => "&".to_string(),
                    "lt" => "<".to_string(),
                    "gt" => ">".to_string(),
                    "quot" => "\"".to_string(),
                    "apos" => "'".to_string(),
                    other => match r.resolve_char_ref().map_err(|e| xml_err(&e))? {
                        Some(c) => c.to_string(),
                        None => return Err(Error::Xml(format!("unknown entity &{other};"))),
                    },
                };
                text.push_str(&resolved);
            }
            Event::CData(c) if in_text => {
                text.push_str(&String::from_utf8_lossy(&c));
            }
            Event::End(e) if e.name().as_ref() == b"sentence" => {
                for (term, from, to, polarity) in terms.drain(..) {
                    if polarity.eq_ignore_ascii_case("conflict") {
                        report.conflicts_dropped += 1;
                        continue;
                    }
                    let rec = JsonRecord {
                        text: text.clone(),
                        aspect: term,
                        aspect_char_start: from,
                        aspect_char_end: to,
                        polarity: polarity.parse::<Polarity>()?.name().to_string(),
                    };
                    serde_json::to_writer(&mut *out, &rec)?;
                    out.write_all(b"\n")?;
                    report.records += 1;
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Toy data

pub const TOY_ASPECTS: [&str; 10] = [
    "food", "service", "staff", "price", "ambience", "drinks", "menu", "music", "decor", "location",
];
pub const TOY_POSITIVE: [&str; 6] = ["great", "good", "tasty", "friendly", "lovely", "excellent"];
pub const TOY_NEGATIVE: [&str; 6] = ["bad", "awful", "terrible", "rude", "bland", "poor"];

/// Templated two-aspect sentences `"<adj1> <aspect1> but <adj2> <aspect2>"`
/// with opposite polarities; `n` sentences yield `2n` triplets.
pub fn synthesize_toy_dataset<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Dataset> {
    synthesize_toy_split("toy", n, rng)
}

pub fn synthesize_toy_split<R: Rng + ?Sized>(split: &str, n: usize, rng: &mut R) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::argument(format!("toy dataset needs at least 2 sentences, got {n}")));
    }
    let tokenizer = BasicTokenizer::default();
    let mut triplets = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let mut aspects = TOY_ASPECTS.choose_multiple(rng, 2);
        let (a1, a2) = (*aspects.next().unwrap(), *aspects.next().unwrap());
        let first_positive = rng.gen_bool(0.5);
        let pos = *TOY_POSITIVE.choose(rng).unwrap();
        let neg = *TOY_NEGATIVE.choose(rng).unwrap();
        let (adj1, p1, adj2, p2) = if first_positive {
            (pos, Polarity::Positive, neg, Polarity::Negative)
        } else {
            (neg, Polarity::Negative, pos, Polarity::Positive)
        };
        let text = format!("{adj1} {a1} but {adj2} {a2}");
        let s1 = adj1.chars().count() + 1;
        let s2 = s1 + a1.chars().count() + " but ".len() + adj2.chars().count() + 1;
        triplets.push(AbsaTriplet::from_offsets(&tokenizer, &text, a1, s1, s1 + a1.len(), p1)?);
        triplets.push(AbsaTriplet::from_offsets(&tokenizer, &text, a2, s2, s2 + a2.len(), p2)?);
    }
    Dataset::new(split, triplets)
}
