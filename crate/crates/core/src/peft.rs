//! Parameter-efficient adapters over a [`Seq2SeqBackbone`].
//!
//! | method | learnable tensors                                        | count                                  |
//! |--------|----------------------------------------------------------|----------------------------------------|
//! | none   | (none)                                                   | 0                                      |
//! | full   | the backbone inventory                                   | backbone total                         |
//! | prompt | `prompt_length × d_model` encoder-input vectors          | `prompt_length · d_model`              |
//! | prefix | per self-attention site, keys and values `P × d_model`   | `P · 2 · d_model · sites`              |
//! | lora   | per self-attention site, query and value `A`, `B` factors | `Σ r · (d_in + d_out)`                 |
//!
//! LoRA adds `x·Aᵀ·Bᵀ` (scaling 1) to the projection output; `B` starts at
//! zero so a fresh adapter leaves the backbone function unchanged.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    bind_params, generate_with, nll_graph, DecodeConfig, ForwardCtx, Generation, Hooks, Projection,
    Seq2SeqBackbone,
};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::params::{self, DType, ParamStore, TensorInfo};
use crate::tensor::{Graph, Mat, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterMethod {
    Full,
    None,
    Prompt,
    Prefix,
    Lora,
}

impl AdapterMethod {
    pub const ALL: [AdapterMethod; 5] = [
        AdapterMethod::Full,
        AdapterMethod::None,
        AdapterMethod::Prompt,
        AdapterMethod::Prefix,
        AdapterMethod::Lora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterMethod::Full => "full",
            AdapterMethod::None => "none",
            AdapterMethod::Prompt => "prompt",
            AdapterMethod::Prefix => "prefix",
            AdapterMethod::Lora => "lora",
        }
    }
}

impl std::str::FromStr for AdapterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown adapter method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub method: AdapterMethod,
    pub prompt_length: usize,
    pub prefix_length: usize,
    pub lora_rank: usize,
    pub lora_dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            method: AdapterMethod::Lora,
            prompt_length: 100,
            prefix_length: 6,
            lora_rank: 8,
            lora_dropout: 0.0,
        }
    }
}

impl AdapterConfig {
    pub fn with_method(method: AdapterMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            AdapterMethod::Prompt if self.prompt_length == 0 => Err(Error::config("prompt_length must be ≥ 1")),
            AdapterMethod::Prefix if self.prefix_length == 0 => Err(Error::config("prefix_length must be ≥ 1")),
            AdapterMethod::Lora if self.lora_rank == 0 => Err(Error::config("lora_rank must be ≥ 1")),
            AdapterMethod::Lora if !(0.0..1.0).contains(&self.lora_dropout) => {
                Err(Error::config("lora_dropout must lie in [0, 1)"))
            }
            _ => Ok(()),
        }
    }
}

const LORA_TARGETS: [Projection; 2] = [Projection::Query, Projection::Value];

fn proj_tag(p: Projection) -> &'static str {
    match p {
        Projection::Query => "q",
        Projection::Value => "v",
    }
}

/// Learnable adapter tensors and where they plug in.
#[derive(Debug, Clone)]
pub struct AdapterState {
    params: ParamStore,
    prompt: Option<usize>,
    prefix: Vec<(usize, usize, usize)>,
    lora: Vec<(usize, Projection, usize, usize)>,
}

impl AdapterState {
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn init(bb: &dyn Seq2SeqBackbone, cfg: &AdapterConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = bb.d_model();
        let mut store = ParamStore::new();
        let mut normal = |store: &mut ParamStore, name: String, r: usize, c: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("finite std");
            store.insert(name, Mat::from_shape_fn((r, c), |_| dist.sample(&mut *rng)))
        };
        let mut state = Self {
            params: ParamStore::new(),
            prompt: None,
            prefix: Vec::new(),
            lora: Vec::new(),
        };
        match cfg.method {
            AdapterMethod::None | AdapterMethod::Full => {}
            AdapterMethod::Prompt => {
                state.prompt = Some(normal(&mut store, "adapter.prompt".into(), cfg.prompt_length, d, 1.0)?);
            }
            AdapterMethod::Prefix => {
                for site in 0..bb.self_attention_sites() {
                    let k = normal(&mut store, format!("adapter.prefix.{site}.key"), cfg.prefix_length, d, 1.0)?;
                    let v = normal(&mut store, format!("adapter.prefix.{site}.value"), cfg.prefix_length, d, 1.0)?;
                    state.prefix.push((site, k, v));
                }
            }
            AdapterMethod::Lora => {
                let r = cfg.lora_rank;
                for site in 0..bb.self_attention_sites() {
                    for proj in LORA_TARGETS {
                        let (d_in, d_out) = bb.projection_dims(site, proj);
                        if r > d_in.min(d_out) {
                            return Err(Error::config(format!(
                                "lora rank {r} exceeds projection dims {d_in}×{d_out}"
                            )));
                        }
                        let tag = proj_tag(proj);
                        let a = normal(
                            &mut store,
                            format!("adapter.lora.{site}.{tag}.a"),
                            r,
                            d_in,
                            1.0 / (d_in as f64).sqrt(),
                        )?;
                        let b = store.insert(format!("adapter.lora.{site}.{tag}.b"), Mat::zeros((d_out, r)))?;
                        state.lora.push((site, proj, a, b));
                    }
                }
            }
        }
        if let Some(clash) = store.names().iter().find(|n| bb.params().id(n).is_some()) {
            return Err(Error::config(format!("adapter tensor `{clash}` shadows a backbone tensor")));
        }
        state.params = store;
        Ok(state)
    }

    fn hooks(&self, bound: &[Var], lora_dropout: f64) -> Hooks {
        let mut hooks = Hooks {
            prompt: self.prompt.map(|i| bound[i]),
            lora_dropout,
            ..Hooks::default()
        };
        for &(site, k, v) in &self.prefix {
            hooks.prefix.insert(site, (bound[k], bound[v]));
        }
        for &(site, proj, a, b) in &self.lora {
            hooks.lora.insert((site, proj), (bound[a], bound[b]));
        }
        hooks
    }
}

/// One teacher-forced training example with its objective weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// `Σ weight · nll` over the batch; the quantity differentiated.
    pub objective: f64,
    /// Unweighted mean per-token NLL over the batch.
    pub raw_loss: f64,
}

/// A backbone wrapped with an adapter.
#[derive(Debug, Clone)]
pub struct AdaptedGenerator<B> {
    backbone: B,
    cfg: AdapterConfig,
    state: AdapterState,
}

/// Attach an adapter; `seed` drives adapter initialisation.
pub fn attach<B: Seq2SeqBackbone>(backbone: B, cfg: AdapterConfig, seed: u64) -> Result<AdaptedGenerator<B>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = AdapterState::init(&backbone, &cfg, &mut rng)?;
    Ok(AdaptedGenerator { backbone, cfg, state })
}

impl<B: Seq2SeqBackbone> AdaptedGenerator<B> {
    pub fn backbone(&self) -> &B {
        &self.backbone
    }

    pub fn into_backbone(self) -> B {
        self.backbone
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn state(&self) -> &AdapterState {
        &self.state
    }

    fn backbone_trainable(&self) -> bool {
        self.cfg.method == AdapterMethod::Full
    }

    /// The tensors an optimizer step may change.
    pub fn trainable_store(&self) -> &ParamStore {
        if self.backbone_trainable() {
            self.backbone.params()
        } else {
            &self.state.params
        }
    }

    pub fn trainable_store_mut(&mut self) -> &mut ParamStore {
        if self.backbone_trainable() {
            self.backbone.params_mut()
        } else {
            &mut self.state.params
        }
    }

    pub fn trainable_manifest(&self) -> Vec<TensorInfo> {
        self.trainable_store().manifest(DType::F32)
    }

    pub fn trainable_parameter_count(&self) -> usize {
        match self.cfg.method {
            AdapterMethod::None => 0,
            _ => self.trainable_store().element_count(),
        }
    }

    /// Bind backbone and adapter tensors; returns (backbone vars, hooks, trainable vars).
    pub fn bind(&self, g: &mut Graph, train: bool) -> (Vec<Var>, Hooks, Vec<Var>) {
        let full = self.backbone_trainable() && train;
        let bb = bind_params(g, self.backbone.params(), full);
        let adapter = bind_params(g, &self.state.params, train);
        let hooks = self.state.hooks(&adapter, self.cfg.lora_dropout);
        let trainable = if self.backbone_trainable() { bb.clone() } else { adapter };
        (bb, hooks, trainable)
    }

    pub fn nll(&self, source: &[usize], target: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let (bb, hooks, _) = self.bind(&mut g, false);
        let loss = nll_graph(&self.backbone, &mut g, &bb, &hooks, source, target, &mut ForwardCtx::eval())?;
        Ok(g.scalar(loss))
    }

    pub fn generate(&self, source: &[usize], decode: &DecodeConfig) -> Result<Generation> {
        generate_with(
            &self.backbone,
            &|g| {
                let (bb, hooks, _) = self.bind(g, false);
                (bb, hooks)
            },
            source,
            decode,
        )
    }

    /// Objective, raw loss and gradients for the trainable tensors.
    pub fn loss_and_grads(&self, batch: &[TrainPair], seed: u64) -> Result<(StepReport, Vec<Option<Mat>>)> {
        if batch.is_empty() {
            return Err(Error::argument("empty training batch"));
        }
        let per_pair: Vec<Result<(f64, Vec<Option<Mat>>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, pair)| {
                let mut g = Graph::new();
                let (bb, hooks, trainable) = self.bind(&mut g, true);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut ctx = ForwardCtx::train(0.0, &mut rng);
                let nll = nll_graph(&self.backbone, &mut g, &bb, &hooks, &pair.source, &pair.target, &mut ctx)?;
                let raw = g.scalar(nll);
                let weighted = g.scale(nll, pair.weight);
                let mut grads = g.backward(weighted);
                Ok((raw, trainable.iter().map(|v| grads.take(*v)).collect()))
            })
            .collect();
        let n = self.trainable_store().len();
        let mut total: Vec<Option<Mat>> = vec![None; n];
        let mut objective = 0.0;
        let mut raw_sum = 0.0;
        for (pair, res) in batch.iter().zip(per_pair) {
            let (raw, grads) = res?;
            objective += pair.weight * raw;
            raw_sum += raw;
            for (slot, g) in total.iter_mut().zip(grads) {
                if let Some(g) = g {
                    match slot {
                        Some(acc) => *acc += &g,
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok((
            StepReport {
                objective,
                raw_loss: raw_sum / batch.len() as f64,
            },
            total,
        ))
    }

    /// One optimizer step on `Σ weight · nll`; only trainable tensors change.
    pub fn adapter_step(&mut self, batch: &[TrainPair], opt: &mut Optimizer) -> Result<StepReport> {
        if self.cfg.method == AdapterMethod::None {
            return Err(Error::NotTrainable(self.cfg.method.name().into()));
        }
        let seed = opt.steps_taken();
        let (report, grads) = self.loss_and_grads(batch, seed)?;
        opt.begin_step();
        let store = self.trainable_store_mut();
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                opt.update(id, store.get_mut(id), &g);
            }
        }
        Ok(report)
    }

    /// Adapter container: header meta records the adapter config.
    pub fn save_adapter(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({ "kind": "adapter", "adapter": self.cfg });
        params::save_checkpoint(path, self.trainable_store(), meta, DType::F32)
    }

    pub fn load_adapter(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let (store, meta) = params::load_checkpoint(path)?;
        let cfg: AdapterConfig = serde_json::from_value(meta["adapter"].clone())
            .map_err(|e| Error::Checkpoint(format!("adapter header: {e}")))?;
        if cfg != self.cfg {
            return Err(Error::Checkpoint("adapter config in checkpoint differs from handle".into()));
        }
        if self.backbone_trainable() {
            self.backbone.params_mut().load_from(&store)
        } else {
            self.state.params.load_from(&store)
        }
    }
}
