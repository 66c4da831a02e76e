mod common;

use cehr_core::model::*;
use cehr_core::sequence::*;
use cehr_core::synth::{generate_synthetic, SynthConfig};
use cehr_tensor::weights;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_finite_differences() {
    for c in common::op_checks() {
        assert!(c.ok(), "{}: {:e} > {:e}", c.name, c.err, c.tol);
    }
}

#[test]
fn whole_model_matches_finite_differences() {
    let checks = common::model_checks();
    assert_eq!(checks.len(), 4);
    for c in checks {
        assert!(c.ok(), "{}: {:e} > {:e}", c.name, c.err, c.tol);
    }
}

#[test]
fn patience_counts_epochs_without_improvement() {
    let mut s = EarlyStopping::new(2);
    let steps: Vec<(bool, bool)> = [1.0, 0.9, 0.95, 0.9, 0.97].iter().map(|&l| s.update(l)).collect();
    assert_eq!(steps, [(true, false), (true, false), (false, false), (false, true), (false, true)]);
}

/// Rows carrying concept `FIRST_CONCEPT` are labelled `flip ^ 1`.
fn labelled(n: usize, flip: bool, seed: u64) -> Vec<Labeled> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let has = rng.gen_bool(0.5);
            let mut s = TokenSequence::default();
            let len = rng.gen_range(3..8);
            for i in 0..len {
                let tok = if has && i == 1 { FIRST_CONCEPT } else { FIRST_CONCEPT + rng.gen_range(1..8) };
                s.token_ids.push(tok);
                s.time_years.push(30.0 + i as f64 * 0.1);
                s.age_years.push(20.0 + i as f64 * 0.1);
                s.visit_segment.push(1);
                s.visit_type_ids.push(2);
                s.attention_mask.push(true);
            }
            let w = s.window(8, WindowMode::FinetunePreTruncate, &mut rng);
            (w, if has != flip { 1.0 } else { 0.0 })
        })
        .collect()
}

#[test]
fn early_stopping_halts_when_validation_diverges() {
    let mut model = CehrModel::new(common::tiny_config(EmbeddingMode::ConcatFc)).unwrap();
    let train = labelled(200, false, 1);
    let val = labelled(100, true, 2);
    let cfg = FitConfig {
        max_epochs: 10,
        patience: 1,
        batch_size: 16,
        lr: 3e-3,
        seed: 0,
    };
    let r = fit(&mut model, &train, &val, &cfg).unwrap();
    assert_eq!(r.stop_epoch, 2, "{r:?}");
    assert_eq!(r.best_epoch, 1);
    assert!(r.stopped_early);
    assert!(r.val_losses[1] > r.val_losses[0]);
    // the best weights are back in place
    let v = mean_loss(&model, &val, 16).unwrap();
    assert!((v - r.val_losses[0]).abs() < 1e-12, "{v} vs {}", r.val_losses[0]);
}

#[test]
fn fine_tuning_learns_a_presence_label() {
    let mut model = CehrModel::new(common::tiny_config(EmbeddingMode::ConcatFc)).unwrap();
    let train = labelled(300, false, 3);
    let val = labelled(100, false, 4);
    let cfg = FitConfig {
        max_epochs: 15,
        patience: 3,
        batch_size: 16,
        lr: 3e-3,
        seed: 0,
    };
    let r = fit(&mut model, &train, &val, &cfg).unwrap();
    assert!(r.val_losses[r.best_epoch - 1] < 0.3, "{r:?}");
}

fn small_store() -> (cehr_core::event_store::EventStore, Vocabulary) {
    let store = generate_synthetic(
        &SynthConfig {
            n_patients: 150,
            ..Default::default()
        },
        9,
    )
    .unwrap();
    let vocab = Vocabulary::from_store(&store).unwrap();
    (store, vocab)
}

fn small_config(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        k: 4,
        lstm_hidden: 8,
        vocab_size: vocab.len(),
        context_window: 64,
        ..Default::default()
    }
}

#[test]
fn pretraining_lowers_the_masked_loss() {
    let (store, vocab) = small_store();
    let seqs = pretraining_sequences(&store, Variant::Cehr, &vocab, &VisitTypes::default(), 5).unwrap();
    let mut model = CehrModel::new(small_config(&vocab)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = PretrainConfig {
        epochs: 4,
        batch_size: 8,
        lr: 3e-3,
        ..Default::default()
    };
    let trace = pretrain(&mut model, &seqs, &cfg, Some(dir.path())).unwrap();
    let means = epoch_means(&trace);
    assert_eq!(means.len(), 4);
    assert!(means[3] < means[0] - 0.5, "{means:?}");
    assert!(trace.iter().all(|r| r.vtp_loss.is_some_and(f64::is_finite)));
    for e in 1..=4 {
        assert!(dir.path().join(format!("epoch_{e}.cehrw")).exists());
    }
    let csv = loss_trace_csv(&trace);
    assert_eq!(csv.lines().count(), trace.len() + 1);
}

#[test]
fn checkpoints_round_trip_at_storage_precision() {
    let (store, vocab) = small_store();
    let types = VisitTypes::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seqs: Vec<TokenSequence> = store
        .patients()
        .iter()
        .take(20)
        .map(|p| {
            build_sequence(&store, &p.person.person_id, Variant::Cehr, &vocab, &types)
                .unwrap()
                .window(64, WindowMode::FinetunePreTruncate, &mut rng)
        })
        .collect();
    let mut a = CehrModel::new(small_config(&vocab)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cehrw");
    weights::save(&a.params, &path).unwrap();
    let mut b = CehrModel::new(ModelConfig {
        seed: 77,
        ..small_config(&vocab)
    })
    .unwrap();
    assert_ne!(predict(&a, &seqs, 8).unwrap(), predict(&b, &seqs, 8).unwrap());
    weights::load_into(&mut b.params, &path).unwrap();
    // files hold f32, so compare against the original to that precision
    let before = predict(&a, &seqs, 8).unwrap();
    for (x, y) in before.iter().zip(predict(&b, &seqs, 8).unwrap()) {
        assert!((x - y).abs() < 1e-6);
    }
    weights::load_into(&mut a.params, &path).unwrap();
    assert_eq!(predict(&a, &seqs, 8).unwrap(), predict(&b, &seqs, 8).unwrap());
    weights::save(&b.params, &path).unwrap();
    weights::load_into(&mut a.params, &path).unwrap();
    assert_eq!(a.params.snapshot(), b.params.snapshot());

    // a store of another shape is refused
    let mut c = CehrModel::new(ModelConfig {
        d_model: 32,
        ..small_config(&vocab)
    })
    .unwrap();
    assert!(weights::load_into(&mut c.params, &path).is_err());
}
