//! Aspect-level sentiment classifier: aspect-pooled representations, the
//! supervised term over source and augmented inputs, the triplet term, and
//! the training loop.
//!
//! For a source `s` with selected augmentations `ŝ_1..ŝ_k`:
//!
//! * `h`   : mean of the encoder output of `s` over the aspect tokens
//! * `h_p` : mean of the encoder output of `s <eos> ŝ_c` over the same aspect tokens
//! * `h_n` : mean of the encoder output of `s <eos> ŝ_c` over the `ŝ_c` tokens
//!
//! `SCT = CE(h) + α · mean_c CE(h_p,c)`, `CT = mean_c max(d(h, h_p,c) − d(h, h_n,c) + ξ, 0)`
//! with `d` the negative cosine, and the batch objective is
//! `Σ SCT / N + β · Σ CT / N`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationRecord;
use crate::backbone::{bind_params, ForwardCtx, SentenceEncoder};
use crate::data::{AbsaTriplet, BasicTokenizer, Dataset, Polarity, Tokenizer};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, macro_f1, CLASS_COUNT};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::{self, DType, ParamStore};
use crate::tensor::{softmax_rows, Graph, Mat, Var};
use crate::vocab::{Vocab, EOS_ID};

const HEAD_WEIGHT: usize = 0;
const HEAD_BIAS: usize = 1;

/// Linear map from a pooled `1 × D` representation to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationHead {
    params: ParamStore,
}

impl ClassificationHead {
    pub fn from_parts(weight: Mat, bias: Mat) -> Result<Self> {
        if weight.ncols() != CLASS_COUNT || bias.dim() != (1, CLASS_COUNT) {
            return Err(Error::config(format!(
                "head shapes {:?} / {:?} do not map to {CLASS_COUNT} classes",
                weight.dim(),
                bias.dim()
            )));
        }
        let mut params = ParamStore::new();
        params.insert("head.weight", weight)?;
        params.insert("head.bias", bias)?;
        Ok(Self { params })
    }

    /// Weight `N(0, 1/D)`, zero bias.
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0 / (width as f64).sqrt()).expect("finite std");
        let w = Mat::from_shape_fn((width, CLASS_COUNT), |_| dist.sample(&mut rng));
        Self::from_parts(w, Mat::zeros((1, CLASS_COUNT))).expect("shapes fixed")
    }

    pub fn zeros(width: usize) -> Self {
        Self::from_parts(Mat::zeros((width, CLASS_COUNT)), Mat::zeros((1, CLASS_COUNT))).expect("shapes fixed")
    }

    pub fn width(&self) -> usize {
        self.weight().nrows()
    }

    pub fn weight(&self) -> &Mat {
        self.params.get(HEAD_WEIGHT)
    }

    pub fn bias(&self) -> &Mat {
        self.params.get(HEAD_BIAS)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn logits(&self, h: &[f64]) -> Result<[f64; CLASS_COUNT]> {
        if h.len() != self.width() {
            return Err(Error::argument(format!("representation width {} ≠ head width {}", h.len(), self.width())));
        }
        let mut out = [0.0; CLASS_COUNT];
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.bias()[[0, c]] + h.iter().enumerate().map(|(d, x)| x * self.weight()[[d, c]]).sum::<f64>();
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    pub k: usize,
    pub lr: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 2.0,
            margin: 0.3,
            k: 1,
            lr: 1e-3,
            dropout: 0.3,
            epochs: 15,
            batch_size: 16,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !nonneg(self.alpha) || !nonneg(self.beta) || !nonneg(self.margin) {
            return Err(Error::argument("alpha, beta and margin must be finite and ≥ 0"));
        }
        if !(1..=4).contains(&self.k) {
            return Err(Error::argument(format!("k must lie in 1..=4, got {}", self.k)));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::argument("lr must be > 0 and dropout in [0, 1)"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::argument("epochs and batch_size must be ≥ 1"));
        }
        Ok(())
    }
}

/// Encoder, head and the token table they read.
#[derive(Debug, Clone)]
pub struct PredictionModel<E> {
    pub encoder: E,
    pub head: ClassificationHead,
    pub vocab: Vocab,
}

impl<E: SentenceEncoder> PredictionModel<E> {
    pub fn new(encoder: E, vocab: Vocab, seed: u64) -> Self {
        let head = ClassificationHead::new(encoder.width(), seed);
        Self { encoder, head, vocab }
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        self.vocab.encode(tokens)
    }

    /// Per-token embeddings (`L × D`) in evaluation mode.
    pub fn embed(&self, ids: &[usize]) -> Result<Mat> {
        let mut g = Graph::new();
        let bound = bind_params(&mut g, self.encoder.params(), false);
        let x = self.encoder.embed(&mut g, &bound, ids, &mut ForwardCtx::eval())?;
        Ok(g.value(x).clone())
    }

    /// Class probabilities from the mean embedding over `positions`.
    pub fn probabilities_pooled(&self, ids: &[usize], positions: &[usize]) -> Result<[f64; CLASS_COUNT]> {
        let h = pool(&self.embed(ids)?, positions)?;
        Ok(softmax3(self.head.logits(&h)?))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let mut store = self.encoder.params().clone();
        for (name, t) in self.head.params().iter() {
            store.insert(name, t.clone())?;
        }
        let meta = serde_json::json!({ "kind": "classifier", "vocab": self.vocab, "meta": meta });
        params::save_checkpoint(path, &store, meta, DType::F64)
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let (store, meta) = params::load_checkpoint(path)?;
        let vocab: Vocab = serde_json::from_value(meta["vocab"].clone())
            .map_err(|e| Error::Checkpoint(format!("classifier vocab: {e}")))?;
        let mut enc = ParamStore::new();
        let mut head = ParamStore::new();
        for (name, t) in store.iter() {
            if name.starts_with("head.") {
                head.insert(name, t.clone())?;
            } else {
                enc.insert(name, t.clone())?;
            }
        }
        self.encoder.params_mut().load_from(&enc)?;
        self.head.params_mut().load_from(&head)?;
        self.vocab = vocab;
        Ok(())
    }
}

fn softmax3(logits: [f64; CLASS_COUNT]) -> [f64; CLASS_COUNT] {
    let row = Mat::from_shape_vec((1, CLASS_COUNT), logits.to_vec()).expect("1×3");
    let p = softmax_rows(&row);
    [p[[0, 0]], p[[0, 1]], p[[0, 2]]]
}

fn pool(x: &Mat, positions: &[usize]) -> Result<Vec<f64>> {
    if positions.is_empty() {
        return Err(Error::argument("no positions to pool"));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= x.nrows()) {
        return Err(Error::argument(format!("position {p} outside a {}-token input", x.nrows())));
    }
    let mut h = vec![0.0; x.ncols()];
    for &p in positions {
        for (acc, v) in h.iter_mut().zip(x.row(p)) {
            *acc += v;
        }
    }
    Ok(h.into_iter().map(|v| v / positions.len() as f64).collect())
}

/// Mean encoder embedding over the marked positions.
pub fn encode_with_aspect<E: SentenceEncoder>(
    model: &PredictionModel<E>,
    ids: &[usize],
    indicator: &[u8],
) -> Result<Vec<f64>> {
    if indicator.len() != ids.len() {
        return Err(Error::argument("indicator length differs from sentence length"));
    }
    let positions: Vec<usize> = (0..ids.len()).filter(|&i| indicator[i] == 1).collect();
    if positions.is_empty() {
        return Err(Error::argument("aspect indicator marks no token"));
    }
    pool(&model.embed(ids)?, &positions)
}

pub fn predict<E: SentenceEncoder>(model: &PredictionModel<E>, triplet: &AbsaTriplet) -> Result<(Polarity, [f64; CLASS_COUNT])> {
    let item = prepare_item(model, &TrainItem::source_only(triplet.clone()), model.encoder.max_seq_len())?;
    let p = model.probabilities_pooled(&item.src_ids, &item.src_aspect)?;
    let best = crate::backbone::argmax(&p);
    Ok((Polarity::from_index(best)?, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
}

pub fn evaluate<E: SentenceEncoder>(model: &PredictionModel<E>, dataset: &Dataset) -> Result<Evaluation> {
    let preds = dataset
        .triplets()
        .par_iter()
        .map(|t| predict(model, t).map(|(p, _)| p.index()))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<usize> = dataset.triplets().iter().map(|t| t.polarity.index()).collect();
    Ok(Evaluation {
        accuracy: accuracy(&preds, &gold)?,
        macro_f1: macro_f1(&preds, &gold)?,
    })
}

// ---------------------------------------------------------------------------
// Loss terms

/// The three pooled vectors entering the triplet term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRepresentations {
    pub h: Vec<f64>,
    pub h_p: Vec<f64>,
    pub h_n: Vec<f64>,
}

fn row(g: &mut Graph, v: &[f64]) -> Var {
    g.constant(Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row"))
}

fn distance(g: &mut Graph, a: Var, b: Var) -> Var {
    let c = g.cosine(a, b);
    g.scale(c, -1.0)
}

fn hinge_term(g: &mut Graph, h: Var, h_p: Var, h_n: Var, margin: f64) -> Var {
    let dp = distance(g, h, h_p);
    let dn = distance(g, h, h_n);
    let neg = g.scale(dn, -1.0);
    let diff = g.add(dp, neg);
    let shifted = g.add_const(diff, &Mat::from_elem((1, 1), margin));
    g.relu(shifted)
}

fn class_ce(g: &mut Graph, h: Var, w: Var, b: Var, label: usize) -> Var {
    let z = g.matmul(h, w);
    let z = g.add_row(z, b);
    g.cross_entropy(z, &[label])
}

/// `(SCT, CT)` for one item; CT is `None` without augmentations.
fn item_terms(
    g: &mut Graph,
    head: (Var, Var),
    h: Var,
    augs: &[(Var, Var)],
    label: usize,
    alpha: f64,
    margin: f64,
) -> (Var, Option<Var>) {
    let ce = class_ce(g, h, head.0, head.1, label);
    if augs.is_empty() {
        return (ce, None);
    }
    let k = augs.len() as f64;
    let aug_ce: Vec<Var> = augs.iter().map(|&(hp, _)| class_ce(g, hp, head.0, head.1, label)).collect();
    let hinges: Vec<Var> = augs.iter().map(|&(hp, hn)| hinge_term(g, h, hp, hn, margin)).collect();
    let aug_sum = g.sum(&aug_ce);
    let aug_term = g.scale(aug_sum, alpha / k);
    let sct = g.add(ce, aug_term);
    let ct_sum = g.sum(&hinges);
    (sct, Some(g.scale(ct_sum, 1.0 / k)))
}

fn check_nonzero(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| *x == 0.0) {
        return Err(Error::argument("cosine distance of a zero vector"));
    }
    Ok(())
}

/// Negative cosine similarity.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::argument("cosine distance needs equal, non-empty widths"));
    }
    check_nonzero(u)?;
    check_nonzero(v)?;
    let mut g = Graph::new();
    let (a, b) = (row(&mut g, u), row(&mut g, v));
    let d = distance(&mut g, a, b);
    Ok(g.scalar(d))
}

pub fn triplet_ct_loss(reps: &PooledRepresentations, margin: f64) -> Result<f64> {
    cosine_distance(&reps.h, &reps.h_p)?;
    cosine_distance(&reps.h, &reps.h_n)?;
    let mut g = Graph::new();
    let (h, hp, hn) = (row(&mut g, &reps.h), row(&mut g, &reps.h_p), row(&mut g, &reps.h_n));
    let t = hinge_term(&mut g, h, hp, hn, margin);
    Ok(g.scalar(t))
}

fn bind_head(g: &mut Graph, head: &ClassificationHead) -> (Var, Var) {
    (g.constant(head.weight().clone()), g.constant(head.bias().clone()))
}

/// `CE(h) + α · mean_c CE(h_p,c)`.
pub fn sct_loss(h: &[f64], h_ps: &[Vec<f64>], label: usize, head: &ClassificationHead, alpha: f64) -> Result<f64> {
    Polarity::from_index(label)?;
    let mut g = Graph::new();
    let hv = row(&mut g, h);
    let augs: Vec<(Var, Var)> = h_ps.iter().map(|v| (row(&mut g, v), hv)).collect();
    let hb = bind_head(&mut g, head);
    let (sct, _) = item_terms(&mut g, hb, hv, &augs, label, alpha, 0.0);
    Ok(g.scalar(sct))
}

/// Pooled vectors of one batch item; `augs` holds `(h_p, h_n)` per selected candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemRepresentations {
    pub h: Vec<f64>,
    pub augs: Vec<(Vec<f64>, Vec<f64>)>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// `sct + β · ct`.
    pub total: f64,
    /// Mean supervised term over the batch.
    pub sct: f64,
    /// Triplet term summed over items with augmentations, divided by the batch size.
    pub ct: f64,
}

fn combine(sct_sum: f64, ct_sum: f64, n: usize, beta: f64) -> LossTerms {
    let sct = sct_sum / n as f64;
    let ct = ct_sum / n as f64;
    LossTerms {
        total: sct + beta * ct,
        sct,
        ct,
    }
}

/// Batch objective from precomputed representations.
pub fn total_loss(batch: &[ItemRepresentations], head: &ClassificationHead, cfg: &TrainingConfig) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::argument("empty batch"));
    }
    let (mut sct_sum, mut ct_sum) = (0.0, 0.0);
    for item in batch {
        Polarity::from_index(item.label)?;
        let mut g = Graph::new();
        let hb = bind_head(&mut g, head);
        let h = row(&mut g, &item.h);
        let augs: Vec<(Var, Var)> = item.augs.iter().map(|(p, n)| (row(&mut g, p), row(&mut g, n))).collect();
        let (sct, ct) = item_terms(&mut g, hb, h, &augs, item.label, cfg.alpha, cfg.margin);
        sct_sum += g.scalar(sct);
        ct_sum += ct.map_or(0.0, |c| g.scalar(c));
    }
    Ok(combine(sct_sum, ct_sum, batch.len(), cfg.beta))
}

// ---------------------------------------------------------------------------
// Training data

/// A source triplet and the token sequences of its selected augmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub triplet: AbsaTriplet,
    pub augmentations: Vec<Vec<String>>,
}

impl TrainItem {
    pub fn source_only(triplet: AbsaTriplet) -> Self {
        Self {
            triplet,
            augmentations: Vec::new(),
        }
    }
}

/// Pair each triplet with the selected candidates of its record (records in dataset order).
pub fn build_items(dataset: &Dataset, records: Option<&[AugmentationRecord]>) -> Result<Vec<TrainItem>> {
    let Some(records) = records else {
        return Ok(dataset.triplets().iter().cloned().map(TrainItem::source_only).collect());
    };
    if records.len() != dataset.len() {
        return Err(Error::argument(format!(
            "{} augmentation records for {} triplets",
            records.len(),
            dataset.len()
        )));
    }
    let tok = BasicTokenizer::default();
    dataset
        .triplets()
        .iter()
        .zip(records)
        .map(|(t, r)| {
            if r.source != *t {
                return Err(Error::argument("augmentation record does not match its triplet"));
            }
            Ok(TrainItem {
                triplet: t.clone(),
                augmentations: r
                    .selected_candidates()
                    .map(|c| tok.words(&c.text))
                    .filter(|w| !w.is_empty())
                    .collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
struct PreparedAug {
    ids: Vec<usize>,
    aspect: Vec<usize>,
    tail: Vec<usize>,
}

#[derive(Debug, Clone)]
struct PreparedItem {
    src_ids: Vec<usize>,
    src_aspect: Vec<usize>,
    label: usize,
    augs: Vec<PreparedAug>,
}

/// Start of a `keep`-token window over `len` tokens containing `[s, e)`.
fn window(len: usize, (s, e): (usize, usize), keep: usize) -> Result<usize> {
    if len <= keep {
        return Ok(0);
    }
    if e - s > keep {
        return Err(Error::Length { len: e - s, max: keep });
    }
    Ok(s.saturating_sub((keep - (e - s)) / 2).min(len - keep))
}

fn prepare_item<E: SentenceEncoder>(model: &PredictionModel<E>, item: &TrainItem, max: usize) -> Result<PreparedItem> {
    let t = &item.triplet;
    t.validate()?;
    let ids = model.ids(&t.tokens);
    let pos = t.aspect_positions();
    let span = (pos[0], pos[pos.len() - 1] + 1);
    let cut = |keep: usize| -> Result<(Vec<usize>, Vec<usize>)> {
        let start = window(ids.len(), span, keep)?;
        let end = (start + keep).min(ids.len());
        Ok((ids[start..end].to_vec(), pos.iter().map(|p| p - start).collect()))
    };
    let (src_ids, src_aspect) = cut(max)?;
    let mut augs = Vec::with_capacity(item.augmentations.len());
    for aug in &item.augmentations {
        let aug_ids = model.ids(aug);
        if aug_ids.is_empty() {
            continue;
        }
        let src_keep = ids.len().min(max - 1 - aug_ids.len().min(max / 2));
        let (mut joined, aspect) = cut(src_keep)?;
        joined.push(EOS_ID);
        let sep = joined.len();
        joined.extend(aug_ids.iter().take(max - sep));
        augs.push(PreparedAug {
            tail: (sep..joined.len()).collect(),
            ids: joined,
            aspect,
        });
    }
    Ok(PreparedItem {
        src_ids,
        src_aspect,
        label: t.polarity.index(),
        augs,
    })
}

/// Pooled vectors of an item in evaluation mode.
pub fn item_representations<E: SentenceEncoder>(model: &PredictionModel<E>, item: &TrainItem) -> Result<ItemRepresentations> {
    let p = prepare_item(model, item, model.encoder.max_seq_len())?;
    let h = pool(&model.embed(&p.src_ids)?, &p.src_aspect)?;
    let augs = p
        .augs
        .iter()
        .map(|a| {
            let x = model.embed(&a.ids)?;
            Ok((pool(&x, &a.aspect)?, pool(&x, &a.tail)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ItemRepresentations { h, augs, label: p.label })
}

/// `(h, h_p, h_n)` for a source and one augmentation.
pub fn pooled_representations<E: SentenceEncoder>(
    model: &PredictionModel<E>,
    triplet: &AbsaTriplet,
    augmentation: &[String],
) -> Result<PooledRepresentations> {
    let item = TrainItem {
        triplet: triplet.clone(),
        augmentations: vec![augmentation.to_vec()],
    };
    let mut reps = item_representations(model, &item)?;
    let (h_p, h_n) = reps
        .augs
        .pop()
        .ok_or_else(|| Error::argument("empty augmentation"))?;
    Ok(PooledRepresentations { h: reps.h, h_p, h_n })
}

// ---------------------------------------------------------------------------
// Optimisation

/// Gradients in encoder-then-head tensor order.
pub type ModelGrads = Vec<Option<Mat>>;

fn item_loss_and_grads<E: SentenceEncoder>(
    model: &PredictionModel<E>,
    item: &PreparedItem,
    cfg: &TrainingConfig,
    n: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, f64, ModelGrads)> {
    let mut g = Graph::new();
    let enc = bind_params(&mut g, model.encoder.params(), true);
    let head = bind_params(&mut g, model.head.params(), true);
    let mut ctx = match rng {
        Some(r) => ForwardCtx::train(cfg.dropout, r),
        None => ForwardCtx::eval(),
    };
    let x = model.encoder.embed(&mut g, &enc, &item.src_ids, &mut ctx)?;
    let h = g.mean_rows(x, &item.src_aspect);
    let mut augs = Vec::with_capacity(item.augs.len());
    for a in &item.augs {
        let x = model.encoder.embed(&mut g, &enc, &a.ids, &mut ctx)?;
        augs.push((g.mean_rows(x, &a.aspect), g.mean_rows(x, &a.tail)));
    }
    let (sct, ct) = item_terms(&mut g, (head[HEAD_WEIGHT], head[HEAD_BIAS]), h, &augs, item.label, cfg.alpha, cfg.margin);
    let objective = match ct {
        Some(ct) => {
            let w = g.scale(ct, cfg.beta);
            g.add(sct, w)
        }
        None => sct,
    };
    let objective = g.scale(objective, 1.0 / n as f64);
    let mut grads = g.backward(objective);
    let sct_v = g.scalar(sct);
    let ct_v = ct.map_or(0.0, |c| g.scalar(c));
    Ok((sct_v, ct_v, enc.iter().chain(&head).map(|v| grads.take(*v)).collect()))
}

fn batch_loss_and_grads<E: SentenceEncoder>(
    model: &PredictionModel<E>,
    batch: &[&PreparedItem],
    cfg: &TrainingConfig,
    dropout_seed: Option<u64>,
) -> Result<(LossTerms, ModelGrads)> {
    if batch.is_empty() {
        return Err(Error::argument("empty batch"));
    }
    let n = batch.len();
    let results: Vec<Result<(f64, f64, ModelGrads)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(derive_seed(&[s, i as u64])));
            item_loss_and_grads(model, item, cfg, n, rng.as_mut())
        })
        .collect();
    let (mut sct_sum, mut ct_sum) = (0.0, 0.0);
    let mut total: ModelGrads = Vec::new();
    for r in results {
        let (sct, ct, grads) = r?;
        sct_sum += sct;
        ct_sum += ct;
        if total.is_empty() {
            total = grads;
            continue;
        }
        for (acc, g) in total.iter_mut().zip(grads) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => *a += &g,
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    Ok((combine(sct_sum, ct_sum, n, cfg.beta), total))
}

/// Objective and gradients of a batch without dropout.
pub fn loss_and_grads<E: SentenceEncoder>(
    model: &PredictionModel<E>,
    batch: &[TrainItem],
    cfg: &TrainingConfig,
) -> Result<(LossTerms, ModelGrads)> {
    let max = model.encoder.max_seq_len();
    let prepared = batch.iter().map(|i| prepare_item(model, i, max)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PreparedItem> = prepared.iter().collect();
    batch_loss_and_grads(model, &refs, cfg, None)
}

/// SplitMix64 over the parts; independent streams for (seed, epoch, step, item).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<Evaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    /// Indices into the training items, in batch order.
    pub items: Vec<usize>,
    pub terms: LossTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose parameters the model holds on return (1-based).
    pub selected_epoch: usize,
    pub steps: Vec<StepLog>,
}

/// Train encoder and head with Adam. With a validation split the parameters of
/// the best validation Macro-F1 epoch are kept, otherwise the last epoch's.
pub fn train<E: SentenceEncoder>(
    model: &mut PredictionModel<E>,
    items: &[TrainItem],
    validation: Option<&Dataset>,
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::argument("no training items"));
    }
    let max = model.encoder.max_seq_len();
    let prepared = items.iter().map(|i| prepare_item(model, i, max)).collect::<Result<Vec<_>>>()?;
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.lr));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5EED]));
    let n_enc = model.encoder.params().len();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize, ParamStore, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut n_steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedItem> = chunk.iter().map(|&i| &prepared[i]).collect();
            let dropout_seed = derive_seed(&[seed, epoch as u64, step as u64]);
            let (terms, grads) = batch_loss_and_grads(model, &batch, cfg, Some(dropout_seed))?;
            opt.begin_step();
            for (id, g) in grads.into_iter().enumerate() {
                let Some(g) = g else { continue };
                if id < n_enc {
                    opt.update(id, model.encoder.params_mut().get_mut(id), &g);
                } else {
                    opt.update(id, model.head.params_mut().get_mut(id - n_enc), &g);
                }
            }
            loss_sum += terms.total;
            n_steps += 1;
            steps.push(StepLog {
                epoch,
                step,
                items: chunk.to_vec(),
                terms,
            });
        }
        let validation = validation.map(|v| evaluate(model, v)).transpose()?;
        log::debug!("epoch {epoch} loss {:.4} validation {validation:?}", loss_sum / n_steps as f64);
        if let Some(v) = validation {
            if best.as_ref().map_or(true, |b| v.macro_f1 > b.0) {
                best = Some((v.macro_f1, epoch, model.encoder.params().clone(), model.head.params().clone()));
            }
        }
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n_steps as f64,
            validation,
        });
    }
    let selected_epoch = match best {
        Some((_, epoch, enc, head)) => {
            *model.encoder.params_mut() = enc;
            *model.head.params_mut() = head;
            epoch
        }
        None => cfg.epochs,
    };
    Ok(TrainOutcome {
        epochs,
        selected_epoch,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reps(h: [f64; 2], hp: [f64; 2], hn: [f64; 2]) -> PooledRepresentations {
        PooledRepresentations {
            h: h.to_vec(),
            h_p: hp.to_vec(),
            h_n: hn.to_vec(),
        }
    }

    #[test]
    fn triplet_hand_cases() {
        assert_eq!(triplet_ct_loss(&reps([1.0, 0.0], [1.0, 0.0], [0.0, 1.0]), 0.3).unwrap(), 0.0);
        assert!((triplet_ct_loss(&reps([1.0, 0.0], [0.0, 1.0], [1.0, 0.0]), 0.3).unwrap() - 1.3).abs() < 1e-12);
        assert!((triplet_ct_loss(&reps([0.6, 0.8], [0.6, 0.8], [0.6, 0.8]), 0.7).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn cosine_distance_cases() {
        assert!((cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine_distance(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn uniform_head_gives_ln3_terms() {
        let head = ClassificationHead::zeros(2);
        let h = [0.3, -0.2];
        let hp = vec![vec![1.0, 1.0]];
        let ln3 = 3f64.ln();
        assert!((sct_loss(&h, &hp, 1, &head, 0.5).unwrap() - 1.5 * ln3).abs() < 1e-12);
        assert!((sct_loss(&h, &hp, 0, &head, 0.0).unwrap() - ln3).abs() < 1e-12);
        assert!(sct_loss(&h, &hp, 3, &head, 0.5).is_err());
    }

    #[test]
    fn total_loss_without_triplet_weight_is_mean_sct() {
        let head = ClassificationHead::new(2, 5);
        let cfg = TrainingConfig {
            beta: 0.0,
            ..Default::default()
        };
        let batch = vec![
            ItemRepresentations {
                h: vec![1.0, 0.5],
                augs: vec![(vec![0.2, 0.1], vec![-1.0, 0.3])],
                label: 2,
            },
            ItemRepresentations {
                h: vec![-0.4, 0.9],
                augs: vec![],
                label: 0,
            },
        ];
        let t = total_loss(&batch, &head, &cfg).unwrap();
        assert_eq!(t.total, t.sct);
        let by_hand = (sct_loss(&batch[0].h, &[batch[0].augs[0].0.clone()], 2, &head, 0.5).unwrap()
            + sct_loss(&batch[1].h, &[], 0, &head, 0.5).unwrap())
            / 2.0;
        assert!((t.sct - by_hand).abs() < 1e-12);
        assert!(total_loss(&[], &head, &cfg).is_err());
    }

    #[test]
    fn window_keeps_aspect() {
        assert_eq!(window(10, (2, 3), 20).unwrap(), 0);
        let s = window(100, (80, 82), 10).unwrap();
        assert!(s <= 80 && 82 <= s + 10);
        assert!(window(100, (0, 20), 10).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(derive_seed(&[7, 7]), derive_seed(&[7, 7]));
    }
}
