//! End-to-end orchestration: data → generator fine-tuning → augmentation →
//! warm-up + filtering → classifier training → evaluation.
//!
//! Every stage writes its artifacts plus `<stage>.manifest.json` holding a
//! hash of the configuration it depends on. A rerun skips a stage whose
//! manifest hash matches and whose artifacts exist.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_dataset, read_augmentations, write_augmentations, AugmentHeader, AugmentationRecord, HandleGenerator};
use crate::backbone::{DecodeConfig, DecodeStrategy, TinyTransformer, TinyTransformerConfig};
use crate::data::{
    convert_semeval_xml, load_jsonl, synthesize_toy_split, Dataset, PolaritySeedMap, TOY_ASPECTS,
};
use crate::emf::{filter_records, select_all_valid};
use crate::error::{Error, Result};
use crate::genfinetune::{finetune, smooth_curve, FinetuneConfig, FinetuneOutcome, ReweightParams};
use crate::metrics::{SeedMetrics, SeedReport};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::peft::{attach, AdaptedGenerator, AdapterConfig, AdapterMethod};
use crate::trainer::{build_items, derive_seed, evaluate, train, PredictionModel, TrainOutcome, TrainingConfig};
use crate::vocab::{TextCodec, Vocab};

/// Flat run configuration. Every field has a default, so `{}` is a valid file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,

    // data
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub validation_path: Option<PathBuf>,
    pub train_xml: Option<PathBuf>,
    pub test_xml: Option<PathBuf>,
    pub toy_train_sentences: usize,
    pub toy_test_sentences: usize,
    pub toy_validation_sentences: usize,
    pub positive_seeds: Vec<String>,
    pub negative_seeds: Vec<String>,
    pub neutral_seeds: Vec<String>,

    // adapter
    pub adapter_method: AdapterMethod,
    pub prompt_length: usize,
    pub prefix_length: usize,
    pub lora_rank: usize,
    pub lora_dropout: f64,

    // generator fine-tuning
    pub generator_epochs: usize,
    pub generator_batch_size: usize,
    pub generator_optimizer: OptimizerKind,
    pub generator_lr: f64,
    pub generator_steps: Option<usize>,
    pub reweight: bool,
    pub reweight_a: f64,
    pub reweight_b: f64,
    pub reweight_invert: bool,

    // generation
    pub decode_strategy: String,
    pub decode_top_k: usize,
    pub decode_max_len: usize,

    // augmentation and filtering
    pub augment: bool,
    pub validity: bool,
    pub emf: bool,
    pub warmup_epochs: usize,

    // classifier
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

impl Default for PipelineConfig {
    fn default() -> Self {
        let adapter = AdapterConfig::default();
        let ft = FinetuneConfig::default();
        let rw = ReweightParams::default();
        let tc = TrainingConfig::default();
        let seeds = PolaritySeedMap::default();
        let span = |p| seeds.spans(p).to_vec();
        Self {
            seed: 0,
            train_path: None,
            test_path: None,
            validation_path: None,
            train_xml: None,
            test_xml: None,
            toy_train_sentences: 300,
            toy_test_sentences: 100,
            toy_validation_sentences: 0,
            positive_seeds: span(crate::data::Polarity::Positive),
            negative_seeds: span(crate::data::Polarity::Negative),
            neutral_seeds: span(crate::data::Polarity::Neutral),
            adapter_method: adapter.method,
            prompt_length: adapter.prompt_length,
            prefix_length: adapter.prefix_length,
            lora_rank: adapter.lora_rank,
            lora_dropout: adapter.lora_dropout,
            generator_epochs: ft.epochs,
            generator_batch_size: ft.batch_size,
            generator_optimizer: ft.optimizer.kind,
            generator_lr: ft.optimizer.lr,
            generator_steps: None,
            reweight: false,
            reweight_a: rw.a,
            reweight_b: rw.b,
            reweight_invert: rw.invert,
            decode_strategy: "greedy".into(),
            decode_top_k: 10,
            decode_max_len: DecodeConfig::default().max_len,
            augment: true,
            validity: true,
            emf: true,
            warmup_epochs: 3,
            alpha: tc.alpha,
            beta: tc.beta,
            margin: tc.margin,
            k: tc.k,
            lr: tc.lr,
            dropout: tc.dropout,
            epochs: tc.epochs,
            batch_size: tc.batch_size,
            seeds: tc.seeds,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn adapter(&self) -> AdapterConfig {
        AdapterConfig {
            method: self.adapter_method,
            prompt_length: self.prompt_length,
            prefix_length: self.prefix_length,
            lora_rank: self.lora_rank,
            lora_dropout: self.lora_dropout,
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        let optimizer = match self.generator_optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(self.generator_lr),
            OptimizerKind::Adafactor => OptimizerConfig::adafactor(self.generator_lr),
        };
        FinetuneConfig {
            epochs: self.generator_epochs,
            batch_size: self.generator_batch_size,
            optimizer,
            reweight: self.reweight.then_some(ReweightParams {
                a: self.reweight_a,
                b: self.reweight_b,
                invert: self.reweight_invert,
            }),
            seed: self.seed,
            steps: self.generator_steps,
        }
    }

    pub fn decode(&self) -> Result<DecodeConfig> {
        let strategy = match self.decode_strategy.as_str() {
            "greedy" => DecodeStrategy::Greedy,
            "top_k" => DecodeStrategy::TopK {
                k: self.decode_top_k,
                seed: self.seed,
            },
            other => return Err(Error::config(format!("unknown decode strategy `{other}`"))),
        };
        Ok(DecodeConfig {
            strategy,
            max_len: self.decode_max_len,
        })
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            alpha: self.alpha,
            beta: self.beta,
            margin: self.margin,
            k: self.k,
            lr: self.lr,
            dropout: self.dropout,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seeds: self.seeds.clone(),
        }
    }

    pub fn seed_map(&self) -> Result<PolaritySeedMap> {
        use crate::data::Polarity::*;
        PolaritySeedMap::new(
            [
                (Positive, self.positive_seeds.clone()),
                (Negative, self.negative_seeds.clone()),
                (Neutral, self.neutral_seeds.clone()),
            ]
            .into_iter()
            .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.adapter().validate()?;
        self.finetune().validate()?;
        self.training().validate()?;
        self.decode()?;
        self.seed_map()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.augment && self.adapter_method == AdapterMethod::None {
            return Err(Error::config("augmentation needs a trainable adapter method"));
        }
        Ok(())
    }

    /// The row of the ablation table this configuration reproduces.
    pub fn ablation_label(&self) -> &'static str {
        let no_emf = self.k == 4 && (!self.validity || !self.emf);
        match (self.augment, self.beta == 0.0) {
            (false, true) => "w/o DA & CL",
            (false, false) => "w/o DA",
            (true, true) => "w/o CL",
            (true, false) if no_emf => "w/o EMF",
            _ => "full",
        }
    }
}

// ---------------------------------------------------------------------------
// Stage bookkeeping

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
}

fn hash_of(parts: &[&serde_json::Value]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_string().as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Stage<'a> {
    out: &'a Path,
    name: String,
    hash: String,
    seed: u64,
    artifacts: Vec<String>,
}

impl Stage<'_> {
    fn manifest_path(&self) -> PathBuf {
        self.out.join(format!("{}.manifest.json", self.name))
    }

    fn path(&self, artifact: &str) -> PathBuf {
        self.out.join(artifact)
    }

    fn is_done(&self) -> bool {
        let Ok(text) = fs::read_to_string(self.manifest_path()) else { return false };
        let Ok(m) = serde_json::from_str::<StageManifest>(&text) else { return false };
        m.config_hash == self.hash && m.artifacts.iter().all(|a| self.out.join(a).exists())
    }

    fn finish(&self) -> Result<()> {
        let m = StageManifest {
            stage: self.name.clone(),
            config_hash: self.hash.clone(),
            seed: self.seed,
            artifacts: self.artifacts.clone(),
        };
        fs::write(self.manifest_path(), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}

fn in_stage<T>(stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage {
        stage: stage.to_string(),
        source: Box::new(e),
    })
}

// ---------------------------------------------------------------------------
// Stage bodies, usable individually from the command line

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub validation: Option<Dataset>,
}

/// Toy splits drawn from independent seeded streams.
pub fn toy_splits(cfg: &PipelineConfig) -> Result<Splits> {
    let rng = |tag: u64| ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, tag]));
    Ok(Splits {
        train: synthesize_toy_split("train", cfg.toy_train_sentences, &mut rng(1))?,
        test: synthesize_toy_split("test", cfg.toy_test_sentences, &mut rng(2))?,
        validation: match cfg.toy_validation_sentences {
            0 => None,
            n => Some(synthesize_toy_split("validation", n, &mut rng(3))?),
        },
    })
}

/// Load or build the splits and write them as canonical JSONL into `out`.
pub fn prepare_data(cfg: &PipelineConfig, out: &Path) -> Result<Splits> {
    fs::create_dir_all(out)?;
    let converted = |xml: &Option<PathBuf>, name: &str| -> Result<Option<PathBuf>> {
        xml.as_ref()
            .map(|x| {
                let p = out.join(format!("{name}.converted.jsonl"));
                let report = convert_semeval_xml(x, &p)?;
                log::info!("converted {}: {} records, {} conflicts dropped", x.display(), report.records, report.conflicts_dropped);
                Ok(p)
            })
            .transpose()
    };
    let train_path = converted(&cfg.train_xml, "train")?.or_else(|| cfg.train_path.clone());
    let test_path = converted(&cfg.test_xml, "test")?.or_else(|| cfg.test_path.clone());
    let splits = match (train_path, test_path) {
        (Some(tr), Some(te)) => Splits {
            train: load_jsonl(tr)?,
            test: load_jsonl(te)?,
            validation: cfg.validation_path.as_ref().map(load_jsonl).transpose()?,
        },
        (None, None) => toy_splits(cfg)?,
        _ => return Err(Error::config("give both train and test data, or neither for the toy task")),
    };
    splits.train.write_jsonl(out.join("train.jsonl"))?;
    splits.test.write_jsonl(out.join("test.jsonl"))?;
    if let Some(v) = &splits.validation {
        v.write_jsonl(out.join("validation.jsonl"))?;
    }
    Ok(splits)
}

fn load_splits(out: &Path) -> Result<Splits> {
    let v = out.join("validation.jsonl");
    Ok(Splits {
        train: load_jsonl(out.join("train.jsonl"))?,
        test: load_jsonl(out.join("test.jsonl"))?,
        validation: v.exists().then(|| load_jsonl(v)).transpose()?,
    })
}

/// Generator codec covering the training sentences, aspects and seed spans.
pub fn generator_codec(train: &Dataset, seeds: &PolaritySeedMap) -> TextCodec {
    let texts = train
        .triplets()
        .iter()
        .map(|t| t.raw_text.as_str())
        .chain(train.aspect_vocabulary().aspects().iter().map(String::as_str))
        .chain(seeds.all_spans())
        .chain(crate::data::Polarity::ALL.map(|p| p.name()))
        .chain(TOY_ASPECTS);
    TextCodec::fit(texts, TinyTransformerConfig::new(1).max_seq_len)
}

pub fn generator_backbone(codec: &TextCodec, seed: u64) -> Result<TinyTransformer> {
    TinyTransformer::new(TinyTransformerConfig::new(codec.vocab.len()), derive_seed(&[seed, 0xB0]))
}

pub fn train_generator(
    cfg: &PipelineConfig,
    train: &Dataset,
) -> Result<(AdaptedGenerator<TinyTransformer>, TextCodec, FinetuneOutcome)> {
    let seeds = cfg.seed_map()?;
    let codec = generator_codec(train, &seeds);
    let backbone = generator_backbone(&codec, cfg.seed)?;
    let mut handle = attach(backbone, cfg.adapter(), derive_seed(&[cfg.seed, 0xAD]))?;
    let outcome = finetune(&mut handle, &codec, train, &seeds, &cfg.finetune())?;
    Ok((handle, codec, outcome))
}

pub fn load_generator(cfg: &PipelineConfig, dir: &Path) -> Result<(AdaptedGenerator<TinyTransformer>, TextCodec)> {
    let vocab: Vocab = serde_json::from_str(&fs::read_to_string(dir.join("generator_vocab.json"))?)?;
    let codec = TextCodec::new(vocab, TinyTransformerConfig::new(1).max_seq_len);
    let backbone = generator_backbone(&codec, cfg.seed)?;
    let mut handle = attach(backbone, cfg.adapter(), derive_seed(&[cfg.seed, 0xAD]))?;
    handle.load_adapter(dir.join("generator.ckpt"))?;
    Ok((handle, codec))
}

pub fn save_generator(handle: &AdaptedGenerator<TinyTransformer>, codec: &TextCodec, dir: &Path) -> Result<()> {
    fs::write(dir.join("generator_vocab.json"), serde_json::to_string(&codec.vocab)?)?;
    handle.save_adapter(dir.join("generator.ckpt"))
}

pub fn run_augmentation(
    cfg: &PipelineConfig,
    handle: &AdaptedGenerator<TinyTransformer>,
    codec: &TextCodec,
    train: &Dataset,
) -> Result<Vec<AugmentationRecord>> {
    let gen = HandleGenerator {
        handle,
        codec,
        decode: cfg.decode()?,
    };
    augment_dataset(&gen, train, &cfg.seed_map()?, cfg.validity, derive_seed(&[cfg.seed, 0xA6]))
}

/// Classifier token table: training tokens plus every generated candidate.
pub fn classifier_vocab(train: &Dataset, records: Option<&[AugmentationRecord]>) -> Vocab {
    let tok = crate::data::BasicTokenizer::default();
    let mut vocab = Vocab::default();
    for t in train.triplets() {
        for w in &t.tokens {
            vocab.add(w);
        }
    }
    for r in records.into_iter().flatten() {
        for c in &r.candidates {
            for w in crate::data::Tokenizer::words(&tok, &c.text) {
                vocab.add(&w);
            }
        }
    }
    vocab
}

pub fn fresh_classifier(vocab: &Vocab, run_seed: u64, seed: u64) -> Result<PredictionModel<TinyTransformer>> {
    let encoder = TinyTransformer::new_encoder(TinyTransformerConfig::new(vocab.len()), derive_seed(&[run_seed, seed, 0xE1]))?;
    Ok(PredictionModel::new(encoder, vocab.clone(), derive_seed(&[run_seed, seed, 0x4E])))
}

/// Source-only warm-up, then entropy scoring and selection (or all valid when the filter is off).
pub fn warmup_and_filter(
    cfg: &PipelineConfig,
    train: &Dataset,
    records: Vec<AugmentationRecord>,
    vocab: &Vocab,
    seed: u64,
) -> Result<Vec<AugmentationRecord>> {
    if !cfg.emf {
        return Ok(select_all_valid(records));
    }
    let mut warm = fresh_classifier(vocab, cfg.seed, seed)?;
    let warm_cfg = TrainingConfig {
        alpha: 0.0,
        beta: 0.0,
        epochs: cfg.warmup_epochs.max(1),
        ..cfg.training()
    };
    let items = build_items(train, None)?;
    crate::trainer::train(&mut warm, &items, None, &warm_cfg, derive_seed(&[cfg.seed, seed, 0x3A]))?;
    filter_records(&warm, records, cfg.k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub training: TrainOutcome,
    pub test_accuracy: f64,
    pub test_macro_f1: f64,
}

pub fn train_and_evaluate(
    cfg: &PipelineConfig,
    splits: &Splits,
    records: Option<&[AugmentationRecord]>,
    vocab: &Vocab,
    seed: u64,
) -> Result<(SeedRun, PredictionModel<TinyTransformer>)> {
    let mut model = fresh_classifier(vocab, cfg.seed, seed)?;
    let items = build_items(&splits.train, records)?;
    let training = train(&mut model, &items, splits.validation.as_ref(), &cfg.training(), derive_seed(&[cfg.seed, seed]))?;
    let test = evaluate(&model, &splits.test)?;
    let run = SeedRun {
        seed,
        training,
        test_accuracy: test.accuracy,
        test_macro_f1: test.macro_f1,
    };
    Ok((run, model))
}

/// Rebuild a saved classifier; the architecture follows the stored token table.
pub fn load_classifier(path: &Path) -> Result<PredictionModel<TinyTransformer>> {
    let (_, meta) = crate::params::load_checkpoint(path)?;
    let vocab: Vocab = serde_json::from_value(meta["vocab"].clone())
        .map_err(|e| Error::Checkpoint(format!("classifier vocab: {e}")))?;
    let mut model = fresh_classifier(&vocab, 0, 0)?;
    model.load(path)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub ablation: String,
    pub report: SeedReport,
    pub config: PipelineConfig,
}

// ---------------------------------------------------------------------------
// Full pipeline

pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<RunReport> {
    in_stage("config", || cfg.validate())?;
    fs::create_dir_all(out)?;
    let cfg_json = serde_json::to_value(cfg)?;
    let pick = |keys: &[&str]| -> serde_json::Value {
        keys.iter().map(|k| (k.to_string(), cfg_json[*k].clone())).collect::<serde_json::Map<_, _>>().into()
    };

    let data_cfg = pick(&[
        "seed", "train_path", "test_path", "validation_path", "train_xml", "test_xml",
        "toy_train_sentences", "toy_test_sentences", "toy_validation_sentences",
    ]);
    let data = Stage {
        out,
        name: "data".into(),
        hash: hash_of(&[&data_cfg]),
        seed: cfg.seed,
        artifacts: {
            let mut a = vec!["train.jsonl".to_string(), "test.jsonl".to_string()];
            if cfg.validation_path.is_some() || cfg.toy_validation_sentences > 0 {
                a.push("validation.jsonl".into());
            }
            a
        },
    };
    let splits = in_stage("data", || {
        if data.is_done() {
            log::info!("data: up to date");
            return load_splits(out);
        }
        let s = prepare_data(cfg, out)?;
        data.finish()?;
        Ok(s)
    })?;

    let records = if cfg.augment {
        let gen_cfg = pick(&[
            "positive_seeds", "negative_seeds", "neutral_seeds", "adapter_method", "prompt_length", "prefix_length",
            "lora_rank", "lora_dropout", "generator_epochs", "generator_batch_size", "generator_optimizer",
            "generator_lr", "generator_steps", "reweight", "reweight_a", "reweight_b", "reweight_invert",
        ]);
        let generator = Stage {
            out,
            name: "generator".into(),
            hash: hash_of(&[&serde_json::Value::String(data.hash.clone()), &gen_cfg]),
            seed: cfg.seed,
            artifacts: vec!["generator.ckpt".into(), "generator_vocab.json".into(), "convergence.csv".into()],
        };
        let aug_cfg = pick(&["decode_strategy", "decode_top_k", "decode_max_len", "validity"]);
        let augment = Stage {
            out,
            name: "augment".into(),
            hash: hash_of(&[&serde_json::Value::String(generator.hash.clone()), &aug_cfg]),
            seed: cfg.seed,
            artifacts: vec!["augmentations.jsonl".into()],
        };
        let recs = in_stage("augment", || {
            if augment.is_done() {
                log::info!("augment: up to date");
                return Ok(read_augmentations(augment.path("augmentations.jsonl"))?.1);
            }
            let (handle, codec) = in_stage("generator", || {
                if generator.is_done() {
                    log::info!("generator: up to date");
                    return load_generator(cfg, out);
                }
                let (handle, codec, outcome) = train_generator(cfg, &splits.train)?;
                save_generator(&handle, &codec, out)?;
                outcome.write_csv(out.join("convergence.csv"))?;
                generator.finish()?;
                Ok((handle, codec))
            })?;
            let recs = run_augmentation(cfg, &handle, &codec, &splits.train)?;
            let header = AugmentHeader {
                seed: cfg.seed,
                records: recs.len(),
                validity: cfg.validity,
                filter_k: None,
            };
            write_augmentations(augment.path("augmentations.jsonl"), &header, &recs)?;
            augment.finish()?;
            Ok(recs)
        })?;
        Some((recs, augment.hash))
    } else {
        None
    };

    let vocab = classifier_vocab(&splits.train, records.as_ref().map(|(r, _)| r.as_slice()));
    let upstream = records.as_ref().map_or(data.hash.clone(), |(_, h)| h.clone());
    let filter_cfg = pick(&["emf", "warmup_epochs", "k", "lr", "dropout", "batch_size"]);
    let train_cfg = pick(&["alpha", "beta", "margin", "k", "lr", "dropout", "epochs", "batch_size", "augment"]);
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let filtered = match &records {
            Some((recs, aug_hash)) => {
                let filter = Stage {
                    out,
                    name: format!("filter_seed{seed}"),
                    hash: hash_of(&[&serde_json::Value::String(aug_hash.clone()), &filter_cfg, &seed.into()]),
                    seed,
                    artifacts: vec![format!("filtered_seed{seed}.jsonl")],
                };
                Some(in_stage("filter", || {
                    let path = filter.path(&filter.artifacts[0]);
                    if filter.is_done() {
                        log::info!("filter seed {seed}: up to date");
                        return Ok(read_augmentations(&path)?.1);
                    }
                    let f = warmup_and_filter(cfg, &splits.train, recs.clone(), &vocab, seed)?;
                    let header = AugmentHeader {
                        seed,
                        records: f.len(),
                        validity: cfg.validity,
                        filter_k: Some(cfg.k),
                    };
                    write_augmentations(&path, &header, &f)?;
                    filter.finish()?;
                    Ok(f)
                })?)
            }
            None => None,
        };
        let stage = Stage {
            out,
            name: format!("train_seed{seed}"),
            hash: hash_of(&[&serde_json::Value::String(upstream.clone()), &filter_cfg, &train_cfg, &seed.into()]),
            seed,
            artifacts: vec![format!("run_seed{seed}.json"), format!("classifier_seed{seed}.ckpt")],
        };
        let run = in_stage("train", || {
            let path = stage.path(&stage.artifacts[0]);
            if stage.is_done() {
                log::info!("train seed {seed}: up to date");
                return Ok(serde_json::from_str::<SeedRun>(&fs::read_to_string(&path)?)?);
            }
            let (run, model) = train_and_evaluate(cfg, &splits, filtered.as_deref(), &vocab, seed)?;
            fs::write(&path, serde_json::to_string_pretty(&run)? + "\n")?;
            model.save(stage.path(&stage.artifacts[1]), serde_json::json!({ "seed": seed }))?;
            stage.finish()?;
            Ok(run)
        })?;
        log::info!("seed {seed}: test accuracy {:.4} macro-F1 {:.4}", run.test_accuracy, run.test_macro_f1);
        runs.push(run);
    }

    in_stage("evaluate", || {
        let report = SeedReport::from_runs(
            runs.iter()
                .map(|r| SeedMetrics {
                    seed: r.seed,
                    accuracy: r.test_accuracy,
                    macro_f1: r.test_macro_f1,
                })
                .collect(),
        )?;
        let report = RunReport {
            ablation: cfg.ablation_label().into(),
            report,
            config: cfg.clone(),
        };
        fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        Ok(report)
    })
}

// ---------------------------------------------------------------------------
// Adapter comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterComparison {
    pub method: AdapterMethod,
    pub final_raw_loss: f64,
    pub final_smoothed_loss: f64,
    pub trainable_parameters: usize,
}

/// Fine-tune one generator per method on the same data and step budget.
pub fn compare_adapters(cfg: &PipelineConfig, train: &Dataset, methods: &[AdapterMethod]) -> Result<Vec<AdapterComparison>> {
    methods
        .iter()
        .map(|&method| {
            let cfg = PipelineConfig {
                adapter_method: method,
                ..cfg.clone()
            };
            let (handle, _, outcome) = train_generator(&cfg, train)?;
            let raw: Vec<f64> = outcome.log.iter().map(|e| e.loss).collect();
            let smoothed = smooth_curve(&raw, 20, 0.5)?;
            Ok(AdapterComparison {
                method,
                final_raw_loss: outcome.final_loss(),
                final_smoothed_loss: *smoothed.last().expect("non-empty log"),
                trainable_parameters: handle.trainable_parameter_count(),
            })
        })
        .collect()
}

pub fn comparison_csv(rows: &[AdapterComparison]) -> String {
    let mut s = String::from("method,final_raw_loss,final_smoothed_loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.method.name(), r.final_raw_loss, r.final_smoothed_loss));
    }
    s
}
