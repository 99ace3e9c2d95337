use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use c3da::augment::{read_augmentations, write_augmentations, AugmentHeader};
use c3da::data::{convert_semeval_xml, load_jsonl};
use c3da::metrics::{SeedMetrics, SeedReport};
use c3da::peft::AdapterMethod;
use c3da::pipeline::{
    classifier_vocab, compare_adapters, comparison_csv, load_classifier, load_generator, run_augmentation,
    run_pipeline, save_generator, toy_splits, train_and_evaluate, train_generator, warmup_and_filter,
    PipelineConfig, RunReport, Splits,
};
use c3da::trainer::evaluate;

#[derive(Parser)]
#[command(name = "c3da", version, about = "Cross-channel data augmentation for aspect-based sentiment analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, default_value = "./artifacts")]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Convert SemEval-2014 XML into canonical JSONL.
    ConvertData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Output file name inside --out.
        #[arg(long, default_value = "train.jsonl")]
        name: String,
    },
    /// Write the synthetic two-aspect toy splits.
    SynthToy {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune the conditional generator on train.jsonl.
    FinetuneGenerator {
        #[command(flatten)]
        common: Common,
    },
    /// Generate the four cross-channel candidates per training triplet.
    Augment {
        #[command(flatten)]
        common: Common,
    },
    /// Warm up a source-only classifier and keep the k lowest-entropy candidates.
    Filter {
        #[command(flatten)]
        common: Common,
    },
    /// Train one classifier per configured seed.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score the saved classifiers on test.jsonl and write metrics.json.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune the generator under each adapter method and report final losses.
    CompareAdapters {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods.
        #[arg(long, value_delimiter = ',', default_value = "full,lora,prompt,prefix")]
        methods: Vec<AdapterMethod>,
    },
    /// Run every stage, skipping those whose manifests are current.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

fn train_split(cfg: &PipelineConfig, out: &Path) -> Result<c3da::data::Dataset> {
    let path = cfg.train_path.clone().unwrap_or_else(|| out.join("train.jsonl"));
    load_jsonl(&path).with_context(|| format!("loading {}", path.display()))
}

fn splits(cfg: &PipelineConfig, out: &Path) -> Result<Splits> {
    let test = cfg.test_path.clone().unwrap_or_else(|| out.join("test.jsonl"));
    let validation = cfg.validation_path.clone().unwrap_or_else(|| out.join("validation.jsonl"));
    Ok(Splits {
        train: train_split(cfg, out)?,
        test: load_jsonl(&test).with_context(|| format!("loading {}", test.display()))?,
        validation: validation.exists().then(|| load_jsonl(&validation)).transpose()?,
    })
}

fn filtered_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("filtered_seed{seed}.jsonl"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ConvertData { common, input, name } => {
            common.config()?;
            let report = convert_semeval_xml(&input, common.out.join(&name))?;
            println!(
                "{} records written, {} conflicting annotations dropped",
                report.records, report.conflicts_dropped
            );
        }
        Command::SynthToy { common } => {
            let cfg = common.config()?;
            let s = toy_splits(&cfg)?;
            s.train.write_jsonl(common.out.join("train.jsonl"))?;
            s.test.write_jsonl(common.out.join("test.jsonl"))?;
            if let Some(v) = &s.validation {
                v.write_jsonl(common.out.join("validation.jsonl"))?;
            }
            println!("{} train / {} test triplets", s.train.len(), s.test.len());
        }
        Command::FinetuneGenerator { common } => {
            let cfg = common.config()?;
            let train = train_split(&cfg, &common.out)?;
            let (handle, codec, outcome) = train_generator(&cfg, &train)?;
            save_generator(&handle, &codec, &common.out)?;
            outcome.write_csv(common.out.join("convergence.csv"))?;
            println!("{} steps, final loss {:.5}", outcome.log.len(), outcome.final_loss());
        }
        Command::Augment { common } => {
            let cfg = common.config()?;
            let train = train_split(&cfg, &common.out)?;
            let (handle, codec) = load_generator(&cfg, &common.out)?;
            let records = run_augmentation(&cfg, &handle, &codec, &train)?;
            let header = AugmentHeader {
                seed: cfg.seed,
                records: records.len(),
                validity: cfg.validity,
                filter_k: None,
            };
            write_augmentations(common.out.join("augmentations.jsonl"), &header, &records)?;
            let valid: usize = records.iter().map(|r| r.candidates.iter().filter(|c| c.valid).count()).sum();
            println!("{} records, {valid} valid candidates", records.len());
        }
        Command::Filter { common } => {
            let cfg = common.config()?;
            let train = train_split(&cfg, &common.out)?;
            let (_, records) = read_augmentations(common.out.join("augmentations.jsonl"))?;
            let vocab = classifier_vocab(&train, Some(&records));
            for &seed in &cfg.seeds {
                let f = warmup_and_filter(&cfg, &train, records.clone(), &vocab, seed)?;
                let header = AugmentHeader {
                    seed,
                    records: f.len(),
                    validity: cfg.validity,
                    filter_k: Some(cfg.k),
                };
                write_augmentations(filtered_path(&common.out, seed), &header, &f)?;
                println!("seed {seed}: {} records filtered", f.len());
            }
        }
        Command::Train { common } => {
            let cfg = common.config()?;
            let splits = splits(&cfg, &common.out)?;
            let all = if cfg.augment {
                Some(read_augmentations(common.out.join("augmentations.jsonl"))?.1)
            } else {
                None
            };
            let vocab = classifier_vocab(&splits.train, all.as_deref());
            for &seed in &cfg.seeds {
                let records = match &all {
                    Some(_) => {
                        let p = filtered_path(&common.out, seed);
                        if !p.exists() {
                            bail!("{} is missing; run `filter` first", p.display());
                        }
                        Some(read_augmentations(&p)?.1)
                    }
                    None => None,
                };
                let (run, model) = train_and_evaluate(&cfg, &splits, records.as_deref(), &vocab, seed)?;
                model.save(common.out.join(format!("classifier_seed{seed}.ckpt")), serde_json::json!({ "seed": seed }))?;
                fs::write(
                    common.out.join(format!("run_seed{seed}.json")),
                    serde_json::to_string_pretty(&run)? + "\n",
                )?;
                println!(
                    "seed {seed}: epoch {} selected, test accuracy {:.4}, macro-F1 {:.4}",
                    run.training.selected_epoch, run.test_accuracy, run.test_macro_f1
                );
            }
        }
        Command::Evaluate { common } => {
            let cfg = common.config()?;
            let splits = splits(&cfg, &common.out)?;
            let mut per_seed = Vec::new();
            for &seed in &cfg.seeds {
                let model = load_classifier(&common.out.join(format!("classifier_seed{seed}.ckpt")))?;
                let e = evaluate(&model, &splits.test)?;
                per_seed.push(SeedMetrics {
                    seed,
                    accuracy: e.accuracy,
                    macro_f1: e.macro_f1,
                });
            }
            let report = RunReport {
                ablation: cfg.ablation_label().into(),
                report: SeedReport::from_runs(per_seed)?,
                config: cfg,
            };
            fs::write(common.out.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            print_report(&report);
        }
        Command::CompareAdapters { common, methods } => {
            let cfg = common.config()?;
            let train = train_split(&cfg, &common.out)?;
            let rows = compare_adapters(&cfg, &train, &methods)?;
            let csv = comparison_csv(&rows);
            fs::write(common.out.join("adapter_comparison.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Pipeline { common } => {
            let cfg = common.config()?;
            let report = run_pipeline(&cfg, &common.out)?;
            print_report(&report);
        }
    }
    Ok(())
}

fn print_report(r: &RunReport) {
    for m in &r.report.per_seed {
        println!("seed {}: accuracy {:.4}, macro-F1 {:.4}", m.seed, m.accuracy, m.macro_f1);
    }
    println!(
        "{}: mean accuracy {:.4}, mean macro-F1 {:.4}",
        r.ablation, r.report.mean_accuracy, r.report.mean_macro_f1
    );
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        log::error!("{e:#}");
        std::process::exit(1);
    }
}
