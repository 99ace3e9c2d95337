#![allow(dead_code)]

use c3da::augment::{Generated, Generator};
use c3da::backbone::{SentenceEncoder, TinyTransformer, TinyTransformerConfig};
use c3da::trainer::{loss_and_grads, TrainItem, TrainingConfig};
use c3da::data::{synthesize_toy_dataset, Dataset, PolaritySeedMap};
use c3da::trainer::PredictionModel;
use c3da::vocab::Vocab;
use c3da::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy(n: usize, seed: u64) -> Dataset {
    synthesize_toy_dataset(n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// A small configuration for numerical checks.
pub fn small_config(vocab_size: usize) -> TinyTransformerConfig {
    TinyTransformerConfig {
        d_model: 16,
        heads: 2,
        encoder_layers: 2,
        decoder_layers: 2,
        ff_width: 24,
        max_seq_len: 48,
        vocab_size,
    }
}

pub fn small_classifier(dataset: &Dataset, extra: &[&str], seed: u64) -> PredictionModel<TinyTransformer> {
    let mut vocab = Vocab::default();
    for t in dataset.triplets() {
        for w in &t.tokens {
            vocab.add(w);
        }
    }
    for w in extra {
        vocab.add(w);
    }
    let enc = TinyTransformer::new_encoder(small_config(vocab.len()), seed).unwrap();
    PredictionModel::new(enc, vocab, seed + 1)
}

/// Appends a channel tag to the sentence part of its input, so the output
/// records which channels produced it. The condition itself is kept as a
/// bracketed token so aspect checks still see it.
pub struct Tagging {
    pub seeds: PolaritySeedMap,
}

impl Tagging {
    pub fn split(input: &str) -> (&str, &str) {
        input.rsplit_once(" <eos> ").expect("conditioned input")
    }

    /// Tags in order of application.
    pub fn tags(text: &str) -> Vec<String> {
        text.split_whitespace()
            .filter_map(|w| w.strip_prefix("#").map(str::to_string))
            .collect()
    }
}

impl Generator for Tagging {
    fn generate(&self, input: &str) -> Result<Generated> {
        let (sentence, condition) = Self::split(input);
        let tag = if self.seeds.all_spans().any(|s| s == condition) {
            "PAC"
        } else {
            "AAC"
        };
        Ok(Generated {
            text: format!("{sentence} #{tag} {condition}"),
            truncated: false,
        })
    }
}

/// Finite-difference check: returns the worst relative error over the probed coordinates.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub const EPS: f64 = 1e-5;

/// Worst relative error of the classifier objective gradient over random coordinates.
pub fn classifier_objective_check(beta: f64, probes: usize) -> f64 {
    let ds = toy(3, 8);
    let aug = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let items = vec![
        TrainItem {
            triplet: ds.triplets()[0].clone(),
            augmentations: vec![aug("awful food but great menu so bad"), aug("tasty staff")],
        },
        TrainItem {
            triplet: ds.triplets()[3].clone(),
            augmentations: vec![aug("terrible decor and rude staff")],
        },
        TrainItem::source_only(ds.triplets()[4].clone()),
    ];
    let extra = ["awful", "food", "great", "menu", "so", "tasty", "staff", "terrible", "decor", "and", "rude"];
    let mut model = small_classifier(&ds, &extra, 21);
    let cfg = TrainingConfig {
        beta,
        // A large margin keeps every hinge active, away from its kink.
        margin: 3.0,
        ..TrainingConfig::default()
    };
    let (terms, grads) = loss_and_grads(&model, &items, &cfg).unwrap();
    assert!(terms.ct > 0.0);
    let n_enc = model.encoder.params().len();
    let mut rng = ChaCha8Rng::seed_from_u64(beta.to_bits());
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let id = rng.gen_range(0..grads.len());
        let Some(g) = &grads[id] else { continue };
        let (r, c) = (rng.gen_range(0..g.nrows()), rng.gen_range(0..g.ncols()));
        let mut eval_at = |delta: f64| {
            let store = if id < n_enc {
                SentenceEncoder::params_mut(&mut model.encoder)
            } else {
                model.head.params_mut()
            };
            let local = if id < n_enc { id } else { id - n_enc };
            store.get_mut(local)[[r, c]] += delta;
            let v = loss_and_grads(&model, &items, &cfg).unwrap().0.total;
            let store = if id < n_enc {
                SentenceEncoder::params_mut(&mut model.encoder)
            } else {
                model.head.params_mut()
            };
            store.get_mut(local)[[r, c]] -= delta;
            v
        };
        let numeric = (eval_at(EPS) - eval_at(-EPS)) / (2.0 * EPS);
        worst = worst.max(relative_error(g[[r, c]], numeric));
    }
    worst
}
