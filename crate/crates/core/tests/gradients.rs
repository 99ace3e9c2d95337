mod common;

use c3da::backbone::{Seq2SeqBackbone, TinyTransformer};
use c3da::peft::{attach, AdaptedGenerator, AdapterConfig, AdapterMethod, TrainPair};
use c3da::vocab::TextCodec;
use common::{classifier_objective_check, relative_error, small_config, toy, EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn generator(method: AdapterMethod) -> (AdaptedGenerator<TinyTransformer>, Vec<TrainPair>) {
    let ds = toy(4, 3);
    let codec = TextCodec::fit(ds.triplets().iter().map(|t| t.raw_text.as_str()).chain(["so bad"]), 48);
    let bb = TinyTransformer::new(small_config(codec.vocab.len()), 5).unwrap();
    let cfg = AdapterConfig {
        method,
        prompt_length: 3,
        prefix_length: 2,
        lora_rank: 2,
        lora_dropout: 0.0,
    };
    let mut handle = attach(bb, cfg, 9).unwrap();
    // Move every trainable tensor off its initial value so the zero-initialised
    // low-rank factor does not mask gradients of its partner.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let store = handle.trainable_store_mut();
    for id in 0..store.len() {
        store.get_mut(id).mapv_inplace(|v| v + 0.1 * rng.gen_range(-1.0..1.0));
    }
    let t = &ds.triplets()[0];
    let u = &ds.triplets()[3];
    let pairs = vec![
        TrainPair {
            source: codec.encode_source(&format!("{} <eos> so bad", t.raw_text)),
            target: codec.encode_target(&u.raw_text),
            weight: 0.7,
        },
        TrainPair {
            source: codec.encode_source(&format!("{} <eos> {}", u.raw_text, t.aspect_text)),
            target: codec.encode_target(&t.raw_text),
            weight: 0.3,
        },
    ];
    (handle, pairs)
}

fn weighted_nll(handle: &AdaptedGenerator<TinyTransformer>, pairs: &[TrainPair]) -> f64 {
    pairs.iter().map(|p| p.weight * handle.nll(&p.source, &p.target).unwrap()).sum()
}

fn check_generator(method: AdapterMethod, probes: usize) {
    let (mut handle, pairs) = generator(method);
    let (report, grads) = handle.loss_and_grads(&pairs, 0).unwrap();
    assert!((report.objective - weighted_nll(&handle, &pairs)).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(method as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let id = rng.gen_range(0..grads.len());
        let Some(g) = &grads[id] else { continue };
        let (r, c) = (rng.gen_range(0..g.nrows()), rng.gen_range(0..g.ncols()));
        let orig = handle.trainable_store().get(id)[[r, c]];
        handle.trainable_store_mut().get_mut(id)[[r, c]] = orig + EPS;
        let up = weighted_nll(&handle, &pairs);
        handle.trainable_store_mut().get_mut(id)[[r, c]] = orig - EPS;
        let down = weighted_nll(&handle, &pairs);
        handle.trainable_store_mut().get_mut(id)[[r, c]] = orig;
        worst = worst.max(relative_error(g[[r, c]], (up - down) / (2.0 * EPS)));
    }
    assert!(worst <= TOL, "{}: worst relative error {worst:e}", method.name());
}

#[test]
fn full_tuning_gradients_match_finite_differences() {
    check_generator(AdapterMethod::Full, 60);
}

#[test]
fn prompt_gradients_match_finite_differences() {
    check_generator(AdapterMethod::Prompt, 40);
}

#[test]
fn prefix_gradients_match_finite_differences() {
    check_generator(AdapterMethod::Prefix, 40);
}

#[test]
fn lora_gradients_match_finite_differences() {
    check_generator(AdapterMethod::Lora, 40);
}

#[test]
fn lora_factor_b_starts_at_zero_so_factor_a_gets_no_gradient() {
    let ds = toy(3, 1);
    let codec = TextCodec::fit(ds.triplets().iter().map(|t| t.raw_text.as_str()), 48);
    let bb = TinyTransformer::new(small_config(codec.vocab.len()), 2).unwrap();
    let handle = attach(bb, AdapterConfig::with_method(AdapterMethod::Lora), 4).unwrap();
    let t = &ds.triplets()[0];
    let pair = TrainPair {
        source: codec.encode_source(&t.raw_text),
        target: codec.encode_target(&t.raw_text),
        weight: 1.0,
    };
    let (_, grads) = handle.loss_and_grads(&[pair], 0).unwrap();
    let store = handle.trainable_store();
    for (id, g) in grads.iter().enumerate() {
        let g = g.as_ref().unwrap();
        if store.name(id).ends_with(".a") {
            assert!(g.iter().all(|v| *v == 0.0), "{}", store.name(id));
        } else {
            assert!(g.iter().any(|v| *v != 0.0), "{}", store.name(id));
        }
    }
}

#[test]
fn classifier_objective_gradients_match_finite_differences() {
    for beta in [0.0, 2.0] {
        let worst = classifier_objective_check(beta, 50);
        assert!(worst <= TOL, "beta {beta}: worst relative error {worst:e}");
    }
}

#[test]
fn frozen_backbone_receives_no_gradient_slot() {
    let (handle, pairs) = generator(AdapterMethod::Prefix);
    let (_, grads) = handle.loss_and_grads(&pairs, 0).unwrap();
    assert_eq!(grads.len(), handle.trainable_store().len());
    assert!(grads.len() < Seq2SeqBackbone::params(handle.backbone()).len());
}
