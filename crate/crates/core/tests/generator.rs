mod common;

use c3da::backbone::{DecodeConfig, TinyTransformer};
use c3da::data::PolaritySeedMap;
use c3da::genfinetune::{batch_pairs, build_pairing, finetune, reweight_multiplier, FinetuneConfig, PairDraw, ReweightParams};
use c3da::optim::OptimizerConfig;
use c3da::params::{encode_checkpoint, DType};
use c3da::peft::{attach, AdaptedGenerator, AdapterConfig, AdapterMethod};
use c3da::vocab::TextCodec;
use common::{small_config, toy};

fn setup(method: AdapterMethod) -> (AdaptedGenerator<TinyTransformer>, TextCodec, c3da::data::Dataset) {
    let ds = toy(8, 12);
    let seeds = PolaritySeedMap::default();
    let codec = TextCodec::fit(
        ds.triplets().iter().map(|t| t.raw_text.as_str()).chain(seeds.all_spans()),
        48,
    );
    let bb = TinyTransformer::new(small_config(codec.vocab.len()), 1).unwrap();
    let cfg = AdapterConfig {
        prompt_length: 4,
        lora_rank: 4,
        ..AdapterConfig::with_method(method)
    };
    (attach(bb, cfg, 2).unwrap(), codec, ds)
}

fn short_run(steps: usize) -> FinetuneConfig {
    FinetuneConfig {
        batch_size: 4,
        steps: Some(steps),
        optimizer: OptimizerConfig::adam(1e-2),
        seed: 3,
        ..FinetuneConfig::default()
    }
}

#[test]
fn convergence_log_is_ordered_and_reproducible() {
    let run = || {
        let (mut h, codec, ds) = setup(AdapterMethod::Lora);
        finetune(&mut h, &codec, &ds, &PolaritySeedMap::default(), &short_run(12)).unwrap()
    };
    let a = run();
    assert_eq!(a.log.iter().map(|e| e.step).collect::<Vec<_>>(), (1..=12).collect::<Vec<_>>());
    assert_eq!(a, run());
}

#[test]
fn adapter_checkpoint_round_trip_preserves_generation() {
    let (mut h, codec, ds) = setup(AdapterMethod::Lora);
    finetune(&mut h, &codec, &ds, &PolaritySeedMap::default(), &short_run(30)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapter.ckpt");
    h.save_adapter(&path).unwrap();

    let (mut fresh, _, _) = setup(AdapterMethod::Lora);
    fresh.load_adapter(&path).unwrap();
    let decode = DecodeConfig::default();
    for t in ds.triplets() {
        let src = codec.encode_source(&format!("{} <eos> so bad", t.raw_text));
        assert_eq!(h.generate(&src, &decode).unwrap(), fresh.generate(&src, &decode).unwrap());
    }
    // Saving what was loaded reproduces the file byte for byte.
    let again = dir.path().join("again.ckpt");
    fresh.save_adapter(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn loading_an_adapter_of_another_method_fails() {
    let (h, _, _) = setup(AdapterMethod::Lora);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lora.ckpt");
    h.save_adapter(&path).unwrap();
    let (mut other, _, _) = setup(AdapterMethod::Prefix);
    assert!(matches!(other.load_adapter(&path), Err(c3da::Error::Checkpoint(_))));
}

fn draws(ds: &c3da::data::Dataset, seeds: &PolaritySeedMap, n: usize) -> Vec<PairDraw> {
    build_pairing(ds, seeds, 11).unwrap().take(n).collect()
}

#[test]
fn reweighted_step_matches_hand_assembled_objective() {
    let (h, codec, ds) = setup(AdapterMethod::Prefix);
    let seeds = PolaritySeedMap::default();
    let batch = draws(&ds, &seeds, 5);
    let params = ReweightParams::default();
    let pairs = batch_pairs(&batch, &codec, &ds, Some(&params)).unwrap();
    let vocab = ds.aspect_vocabulary();
    let mut expected = 0.0;
    for (d, two) in batch.iter().zip(pairs.chunks(2)) {
        let delta = reweight_multiplier(vocab.frequency(&d.aspect_pair.target_aspect), vocab.total_instances(), &params).unwrap();
        for p in two {
            assert_eq!(p.weight, delta / batch.len() as f64);
            expected += delta / batch.len() as f64 * h.nll(&p.source, &p.target).unwrap();
        }
    }
    let (report, _) = h.loss_and_grads(&pairs, 0).unwrap();
    assert!((report.objective - expected).abs() < 1e-12);
}

#[test]
fn reweight_off_is_unit_multiplier() {
    let (_, codec, ds) = setup(AdapterMethod::Lora);
    let batch = draws(&ds, &PolaritySeedMap::default(), 4);
    let pairs = batch_pairs(&batch, &codec, &ds, None).unwrap();
    assert_eq!(pairs.len(), 8);
    assert!(pairs.iter().all(|p| p.weight == 0.25));
}

#[test]
fn both_pairs_of_a_draw_target_the_same_sentence() {
    let ds = toy(6, 5);
    let seeds = PolaritySeedMap::default();
    for d in draws(&ds, &seeds, 50) {
        let target = &ds.triplets()[d.target_index];
        assert_eq!(d.aspect_pair.target, target.raw_text);
        assert_eq!(d.polarity_pair.target, target.raw_text);
        assert!(d.aspect_pair.condition.ends_with(&format!("<eos> {}", target.aspect_text)));
        let span = seeds.span_round_robin(target.polarity, 0);
        assert!(d.polarity_pair.condition.ends_with(&format!("<eos> {span}")));
        assert!(d.aspect_pair.condition.starts_with(&ds.triplets()[d.source_index].raw_text));
    }
}

#[test]
fn none_method_refuses_training() {
    let (mut h, codec, ds) = setup(AdapterMethod::None);
    assert!(matches!(
        finetune(&mut h, &codec, &ds, &PolaritySeedMap::default(), &short_run(1)),
        Err(c3da::Error::NotTrainable(_))
    ));
}

#[test]
fn checkpoint_header_is_little_endian_f32_by_default() {
    let (h, _, _) = setup(AdapterMethod::Prompt);
    let bytes = encode_checkpoint(h.trainable_store(), serde_json::json!({}), DType::F32).unwrap();
    assert_eq!(&bytes[..8], c3da::params::MAGIC);
    let payload = 4 * 4 * 16;
    assert!(bytes.len() > payload);
}
