//! Training loops: null updates, loss reduction, zero-init validation
//! baselines, best-checkpoint selection, determinism and the desk anchor's
//! fit to its QA templates.

mod common;

use calm::calm::{ComposedModel, ConnectionSpec};
use calm::lm::{LanguageModel, TransformerModel};
use calm::lora::{attach_lora, default_targets};
use calm::pipeline::{pretrain_role, Role, RunConfig};
use calm::synth::gen_corpora;
use calm::tensor::argmax;
use calm::train::{
    mean_loss, pretrain, split_dataset, train_connector, train_lora, CachedComposed, Example, TrainConfig,
};
use common::{micro_config, random_tokens};
use proptest::prelude::*;

const VOCAB: usize = 14;
const PAD: usize = 0;

fn micro(seed: u64) -> TransformerModel {
    TransformerModel::init(micro_config(VOCAB, 2, 8, 2, seed)).unwrap()
}

/// Prompt/answer pairs whose answer is a fixed function of the prompt, with
/// the loss on the answer token only.
fn qa(n: usize, seed: u64) -> Vec<Example> {
    (0..n as u64)
        .map(|i| {
            let mut tokens = random_tokens(4, VOCAB - 1, seed * 1000 + i);
            tokens.iter_mut().for_each(|t| *t += 1);
            let answer = 1 + (tokens[0] + tokens[1]) % (VOCAB - 1);
            tokens.push(answer);
            Example { tokens, loss_from: 4 }
        })
        .collect()
}

fn cfg(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        lr,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn composed(seed: u64) -> ComposedModel {
    let spec = ConnectionSpec {
        pairs: vec![(1, 0)],
        n_cross_heads: 2,
    };
    ComposedModel::new(micro(seed), micro(seed + 50), spec, seed).unwrap()
}

/// Index of the smallest value, earliest on ties, by a plain loop.
fn first_min(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] < v[best] {
            best = i;
        }
    }
    best
}

#[test]
fn zero_learning_rate_is_a_null_update() {
    let mut m = micro(1);
    let before = m.weight_bytes();
    let corpus: Vec<Vec<usize>> = (0..12).map(|s| random_tokens(6, VOCAB, s)).collect();
    pretrain(&mut m, &corpus, &cfg(1, 0.0), PAD).unwrap();
    assert_eq!(m.weight_bytes(), before);
}

#[test]
fn pretraining_lowers_the_training_loss() {
    let mut m = micro(2);
    let corpus: Vec<Vec<usize>> = (0..24).map(|s| random_tokens(6, VOCAB, s % 6)).collect();
    let r = pretrain(&mut m, &corpus, &cfg(15, 3e-3), PAD).unwrap();
    assert!(r.train_loss.last().unwrap() < &r.train_loss[0]);
    assert_eq!(r.best_epoch, 15, "pretraining keeps the final weights");
}

#[test]
fn pretraining_a_frozen_model_is_rejected() {
    let mut m = micro(2);
    m.freeze(true);
    assert!(pretrain(&mut m, &[vec![1, 2, 3]], &cfg(1, 1e-3), PAD).is_err());
}

#[test]
fn connector_epoch_zero_matches_anchor_and_selection_is_argmin() {
    let data = qa(40, 1);
    let c = cfg(6, 1e-2);
    let mut cm = composed(4);
    let mut anchor = cm.anchor().clone();
    let report = train_connector(&mut cm, &data, &c, PAD).unwrap();

    let (_, val) = split_dataset(&data, c.split_ratio, c.seed).unwrap();
    let anchor_val = mean_loss(&mut anchor, &val, c.batch_size, PAD).unwrap();
    assert!((report.val_loss[0] - anchor_val).abs() <= 1e-12);

    assert_eq!(report.val_loss.len(), 7);
    assert!(report.val_loss.iter().all(|v| v.is_finite()));
    assert_eq!(report.best_epoch, first_min(&report.val_loss));
    let again = mean_loss(&mut CachedComposed::new(&mut cm), &val, c.batch_size, PAD).unwrap();
    assert!((again - report.val_loss[report.best_epoch]).abs() <= 1e-9);
    assert_eq!(report.trainable_params, 4 * 8 * 8);
    assert_eq!(cm.anchor().weight_bytes(), anchor.weight_bytes());
}

#[test]
fn lora_epoch_zero_matches_anchor_and_selection_is_argmin() {
    let data = qa(40, 2);
    let c = cfg(6, 1e-2);
    let mut anchor = micro(5);
    let mut lora = attach_lora(anchor.clone(), 2, 2.0, &default_targets(&anchor), 1).unwrap();
    let report = train_lora(&mut lora, &data, &c, PAD).unwrap();

    let (_, val) = split_dataset(&data, c.split_ratio, c.seed).unwrap();
    let anchor_val = mean_loss(&mut anchor, &val, c.batch_size, PAD).unwrap();
    assert!((report.val_loss[0] - anchor_val).abs() <= 1e-12);
    assert!(report.val_loss.iter().all(|v| v.is_finite()));
    assert_eq!(report.best_epoch, first_min(&report.val_loss));
    let again = mean_loss(&mut lora, &val, c.batch_size, PAD).unwrap();
    assert!((again - report.val_loss[report.best_epoch]).abs() <= 1e-9);
    assert_eq!(lora.anchor().weight_bytes(), anchor.weight_bytes());
}

#[test]
fn training_is_deterministic() {
    let data = qa(30, 3);
    let run = || {
        let mut cm = composed(6);
        let r = train_connector(&mut cm, &data, &cfg(3, 1e-2), PAD).unwrap();
        let bytes: Vec<u8> = cm.trainable_tensors().iter().flat_map(|t| t.to_le_bytes()).collect();
        (r, bytes)
    };
    let (r1, b1) = run();
    let (r2, b2) = run();
    assert_eq!(r1, r2);
    assert_eq!(b1, b2);
}

#[test]
fn connector_training_rejects_empty_or_unsplittable_data() {
    let mut cm = composed(7);
    assert!(train_connector(&mut cm, &[], &cfg(1, 1e-3), PAD).is_err());
    assert!(train_connector(&mut cm, &qa(1, 0), &cfg(1, 1e-3), PAD).is_err());
}

/// The shipped recipe (base from scratch, anchor continued on general QA)
/// predicts its QA answers almost perfectly.
#[test]
fn desk_anchor_fits_its_general_qa_templates() {
    let cfg = RunConfig::default().with_seed(0);
    let data = gen_corpora(&cfg.data).unwrap();
    let (base, _) = pretrain_role(&cfg, &data, Role::Base, None).unwrap();
    let (anchor, _) = pretrain_role(&cfg, &data, Role::Anchor, Some(&base)).unwrap();
    let answer = data.vocab.id("A").unwrap();
    let (mut correct, mut total) = (0, 0);
    for seq in &data.anchor_corpus {
        let logits = anchor.batch_logits(seq, 1, seq.len()).unwrap();
        let logits = logits.reshaped(vec![seq.len(), anchor.vocab_size()]).unwrap();
        let start = seq.iter().position(|&t| t == answer).unwrap();
        for p in start..seq.len() - 1 {
            total += 1;
            correct += usize::from(argmax(logits.row(p)) == seq[p + 1]);
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.95, "answer-position accuracy {acc:.4}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_are_disjoint_exhaustive_and_seeded(n in 2usize..400, ratio in 0.05f64..0.95, seed in 0u64..1000) {
        let items: Vec<usize> = (0..n).collect();
        let n_train = (ratio * n as f64).floor() as usize;
        if n_train == 0 || n_train == n {
            prop_assert!(split_dataset(&items, ratio, seed).is_err());
            return Ok(());
        }
        let (train, val) = split_dataset(&items, ratio, seed).unwrap();
        prop_assert_eq!(train.len(), n_train);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, items.clone());
        prop_assert_eq!(split_dataset(&items, ratio, seed).unwrap(), (train, val));
    }
}
