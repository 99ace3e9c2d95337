//! Generator fine-tuning on condition → sentence pairs.
//!
//! Each draw samples a context sentence `s_i` and a target instance
//! `(s_j, a_j, p_j)` and yields two pairs that both reconstruct `s_j`:
//! one conditioned on the aspect text, one on a polarity seed span.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Seq2SeqBackbone;
use crate::data::{concat_condition, Dataset, PolaritySeedMap};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::peft::{AdaptedGenerator, AdapterMethod, TrainPair};
use crate::vocab::TextCodec;

/// Instance multiplier parameters: `Δ = 1 / (1 + C·(M_j + B)^(−A))`,
/// `C = (ln M_asp − 1)·(B + 1)^A`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReweightParams {
    pub a: f64,
    pub b: f64,
    /// Use `1 − Δ` so rare aspects weigh more.
    #[serde(default)]
    pub invert: bool,
}

impl Default for ReweightParams {
    fn default() -> Self {
        Self {
            a: 0.55,
            b: 1.5,
            invert: false,
        }
    }
}

impl ReweightParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) || !(self.b > -1.0) {
            return Err(Error::config(format!(
                "reweight needs A > 0 and B > -1, got A={} B={}",
                self.a, self.b
            )));
        }
        Ok(())
    }

    pub fn c(&self, m_asp: usize) -> f64 {
        ((m_asp as f64).ln() - 1.0) * (self.b + 1.0).powf(self.a)
    }
}

/// Multiplier for an instance whose aspect occurs `m_j` times among `m_asp` aspect items.
pub fn reweight_multiplier(m_j: usize, m_asp: usize, params: &ReweightParams) -> Result<f64> {
    params.validate()?;
    if m_j == 0 {
        return Err(Error::argument("aspect frequency must be ≥ 1"));
    }
    let ln_m = (m_asp as f64).ln();
    if !(ln_m > 1.0) {
        return Err(Error::ReweightUndefined { m_asp, ln_m });
    }
    let c = params.c(m_asp);
    let delta = 1.0 / (1.0 + c * (-params.a * (m_j as f64 + params.b).ln()).exp());
    Ok(if params.invert { 1.0 - delta } else { delta })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub reweight: Option<ReweightParams>,
    pub seed: u64,
    /// Overrides `epochs` with an explicit step budget.
    pub steps: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            optimizer: OptimizerConfig::adafactor(1e-2),
            reweight: None,
            seed: 0,
            steps: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.steps == Some(0) {
            return Err(Error::config("epochs, batch_size and steps must be ≥ 1"));
        }
        if let Some(r) = &self.reweight {
            r.validate()?;
        }
        Ok(())
    }

    /// One epoch is `N` draws (`2N` pairs).
    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * dataset_len.div_ceil(self.batch_size))
    }
}

/// One condition → sentence example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionPair {
    pub condition: String,
    pub target: String,
    pub target_aspect: String,
}

/// The two pairs of one draw, both targeting the same sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairDraw {
    pub source_index: usize,
    pub target_index: usize,
    pub aspect_pair: ConditionPair,
    pub polarity_pair: ConditionPair,
}

/// Seed-deterministic stream of pair draws over a dataset.
pub struct PairingStream<'a> {
    dataset: &'a Dataset,
    seeds: &'a PolaritySeedMap,
    rng: ChaCha8Rng,
    span_cursor: [usize; 3],
}

impl Iterator for PairingStream<'_> {
    type Item = PairDraw;

    fn next(&mut self) -> Option<PairDraw> {
        let triplets = self.dataset.triplets();
        let i = self.rng.gen_range(0..triplets.len());
        let j = self.rng.gen_range(0..triplets.len());
        let (si, tj) = (&triplets[i], &triplets[j]);
        let p = tj.polarity.index();
        let span = self.seeds.span_round_robin(tj.polarity, self.span_cursor[p]);
        self.span_cursor[p] += 1;
        let pair = |cond: &str| ConditionPair {
            condition: concat_condition(&si.raw_text, cond).expect("non-empty sentence and condition"),
            target: tj.raw_text.clone(),
            target_aspect: tj.aspect_text.clone(),
        };
        Some(PairDraw {
            source_index: i,
            target_index: j,
            aspect_pair: pair(&tj.aspect_text),
            polarity_pair: pair(&span),
        })
    }
}

pub fn build_pairing<'a>(dataset: &'a Dataset, seeds: &'a PolaritySeedMap, seed: u64) -> Result<PairingStream<'a>> {
    if dataset.len() < 2 {
        return Err(Error::argument(format!(
            "pairing needs at least 2 instances, got {}",
            dataset.len()
        )));
    }
    if dataset.triplets().iter().any(|t| t.raw_text.trim().is_empty()) {
        return Err(Error::argument("pairing needs non-empty sentences"));
    }
    Ok(PairingStream {
        dataset,
        seeds,
        rng: ChaCha8Rng::seed_from_u64(seed),
        span_cursor: [0; 3],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Unweighted mean per-token NLL of the step's pairs.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub log: Vec<LogEntry>,
}

impl FinetuneOutcome {
    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |e| e.loss)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "step,loss")?;
        for e in &self.log {
            writeln!(out, "{},{}", e.step, e.loss)?;
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Training pairs of one batch of draws, weighted `Δ / draws`.
pub fn batch_pairs(
    draws: &[PairDraw],
    codec: &TextCodec,
    dataset: &Dataset,
    reweight: Option<&ReweightParams>,
) -> Result<Vec<TrainPair>> {
    let vocab = dataset.aspect_vocabulary();
    let mut pairs = Vec::with_capacity(2 * draws.len());
    for d in draws {
        let delta = match reweight {
            Some(r) => reweight_multiplier(vocab.frequency(&d.aspect_pair.target_aspect), vocab.total_instances(), r)?,
            None => 1.0,
        };
        let weight = delta / draws.len() as f64;
        for p in [&d.aspect_pair, &d.polarity_pair] {
            pairs.push(TrainPair {
                source: codec.encode_source(&p.condition),
                target: codec.encode_target(&p.target),
                weight,
            });
        }
    }
    Ok(pairs)
}

/// Fine-tune `handle` on pairs drawn from `dataset`; the optimizer steps once
/// per batch on the summed aspect- and polarity-conditioned losses.
pub fn finetune<B: Seq2SeqBackbone>(
    handle: &mut AdaptedGenerator<B>,
    codec: &TextCodec,
    dataset: &Dataset,
    seeds: &PolaritySeedMap,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if handle.config().method == AdapterMethod::None {
        return Err(Error::NotTrainable(AdapterMethod::None.name().into()));
    }
    let mut stream = build_pairing(dataset, seeds, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let steps = cfg.total_steps(dataset.len());
    let mut log = Vec::with_capacity(steps);
    for step in 1..=steps {
        let draws: Vec<PairDraw> = stream.by_ref().take(cfg.batch_size).collect();
        let pairs = batch_pairs(&draws, codec, dataset, cfg.reweight.as_ref())?;
        let report = handle.adapter_step(&pairs, &mut opt)?;
        if step % 100 == 0 || step == steps {
            log::debug!("finetune step {step}/{steps} loss {:.5}", report.raw_loss);
        }
        log.push(LogEntry {
            step,
            loss: report.raw_loss,
        });
    }
    Ok(FinetuneOutcome { log })
}

/// Sliding-window percentile (linear interpolation), window centred and
/// truncated at the edges.
pub fn smooth_curve(series: &[f64], window: usize, percentile: f64) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::argument("cannot smooth an empty series"));
    }
    if window == 0 || !(0.0..=1.0).contains(&percentile) {
        return Err(Error::argument("window must be ≥ 1 and percentile in [0, 1]"));
    }
    let half = window / 2;
    Ok((0..series.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(series.len());
            let mut w = series[lo..hi].to_vec();
            w.sort_by(f64::total_cmp);
            let pos = percentile * (w.len() - 1) as f64;
            let (f, c) = (pos.floor() as usize, pos.ceil() as usize);
            w[f] + (w[c] - w[f]) * (pos - f as f64)
        })
        .collect())
}
