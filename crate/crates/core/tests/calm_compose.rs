mod common;

use calm::calm::{
    connector_param_count, cross_attention, make_topology, ComposedModel, ConnectionSpec, CrossAttnWeights, Topology,
};
use calm::lm::{generate_greedy, LanguageModel, TransformerModel};
use calm::tensor::{argmax, grad_check, seeded_rng, Tape, Tensor};
use calm::train::{CONNECTOR_GRAD_EPSILON, CONNECTOR_GRAD_TOLERANCE};
use common::*;

fn pair(la: usize, lb: usize, da: usize, db: usize) -> (TransformerModel, TransformerModel) {
    let anchor = TransformerModel::init(micro_config(13, lb, db, 2, 1)).unwrap();
    let augment = TransformerModel::init(micro_config(13, la, da, 2, 2)).unwrap();
    (anchor, augment)
}

fn spec(pairs: &[(usize, usize)], heads: usize) -> ConnectionSpec {
    ConnectionSpec {
        pairs: pairs.to_vec(),
        n_cross_heads: heads,
    }
}

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn identity_weights(d: usize) -> CrossAttnWeights {
    let mut eye = vec![0.0; d * d];
    (0..d).for_each(|i| eye[i * d + i] = 1.0);
    let e = Tensor::new(vec![d, d], eye).unwrap();
    CrossAttnWeights {
        w_q: e.clone(),
        w_k: e.clone(),
        w_v: e.clone(),
        w_o: e,
        proj: None,
    }
}

#[test]
fn cross_attention_hand_examples() {
    // A single key gets softmax weight 1, so the value row comes through.
    let out = cross_attention(&t(&[&[0.0, 1.0]]), &t(&[&[1.0, 0.0]]), &identity_weights(2), 1, true).unwrap();
    assert_eq!(out.data(), &[0.0, 1.0]);

    let mut rng = seeded_rng(3);
    let h_b = Tensor::randn(vec![4, 8], 1.0, &mut rng);
    let zeros = Tensor::zeros(vec![4, 8]);
    let w = random_bridges(&spec(&[(0, 0)], 2), 8, 8, 0.5, 4).remove(0);
    let out = cross_attention(&zeros, &h_b, &w, 2, true).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0), "zero values collapse the output");

    let h_a = Tensor::randn(vec![4, 8], 1.0, &mut rng);
    let mut w0 = w.clone();
    w0.w_o = Tensor::zeros(vec![8, 8]);
    let out = cross_attention(&h_a, &h_b, &w0, 2, true).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0), "zero output projection");
}

#[test]
fn cross_attention_matches_loop_oracle() {
    let mut rng = seeded_rng(5);
    let h_a = Tensor::randn(vec![5, 6], 1.0, &mut rng);
    let h_b = Tensor::randn(vec![5, 8], 1.0, &mut rng);
    let mut w = CrossAttnWeights::init(6, 8, &mut rng);
    w.w_o = Tensor::randn(vec![8, 8], 0.5, &mut rng);
    for causal in [true, false] {
        let got = cross_attention(&h_a, &h_b, &w, 4, causal).unwrap();
        let want = reference_cross(&to_mat(&h_a), &to_mat(&h_b), &w, 4, causal);
        assert!(max_diff(&to_mat(&got), &want) <= 1e-12);
    }
    let mut no_proj = w.clone();
    no_proj.proj = None;
    assert!(cross_attention(&h_a, &h_b, &no_proj, 4, true).is_err());
    assert!(cross_attention(&h_a, &Tensor::zeros(vec![4, 8]), &w, 4, true).is_err());
}

#[test]
fn zero_initialized_bridges_leave_anchor_logits_unchanged() {
    let (anchor, augment) = pair(4, 4, 8, 8);
    let cm = ComposedModel::new(anchor.clone(), augment, spec(&[(0, 0), (2, 1), (4, 2)], 2), 7).unwrap();
    let mut worst = 0.0f64;
    for s in 0..100 {
        let tokens = random_tokens(1 + s % 12, 13, s as u64);
        let composed = cm.composed_forward(&tokens).unwrap();
        let plain = anchor.forward(&tokens).unwrap().logits;
        worst = worst.max(composed.max_abs_diff(&plain));
    }
    assert!(worst <= 1e-12, "max diff {worst}");

    let (anchor, augment) = pair(4, 4, 8, 8);
    let empty = ComposedModel::new(anchor.clone(), augment, spec(&[], 2), 0).unwrap();
    let tokens = random_tokens(9, 13, 1);
    assert_eq!(
        empty.composed_forward(&tokens).unwrap(),
        anchor.forward(&tokens).unwrap().logits
    );
}

#[test]
fn composed_forward_matches_block_walk_oracle() {
    // Micro models of width 2, one connection.
    let (anchor, augment) = pair(2, 2, 2, 2);
    let sp = spec(&[(1, 0)], 1);
    let w = random_bridges(&sp, 2, 2, 0.7, 11);
    let cm = ComposedModel::new(anchor.clone(), augment.clone(), sp.clone(), 0)
        .unwrap()
        .with_weights(w.clone())
        .unwrap();
    let tokens = random_tokens(6, 13, 2);
    let got = to_mat(&cm.composed_forward(&tokens).unwrap());
    let want = reference_composed(&anchor, &augment, &sp, &w, &tokens);
    assert!(max_diff(&got, &want) <= 1e-10);

    // Wider models with different widths (projection) and three bridges.
    let (anchor, augment) = pair(3, 4, 4, 8);
    let sp = spec(&[(0, 0), (3, 1), (2, 2)], 4);
    let mut w = random_bridges(&sp, 4, 8, 0.3, 12);
    let mut rng = seeded_rng(13);
    for b in &mut w {
        b.proj = Some(Tensor::randn(vec![4, 8], 0.3, &mut rng));
    }
    let cm = ComposedModel::new(anchor.clone(), augment.clone(), sp.clone(), 0)
        .unwrap()
        .with_weights(w.clone())
        .unwrap();
    let tokens = random_tokens(7, 13, 3);
    let got = to_mat(&cm.composed_forward(&tokens).unwrap());
    let want = reference_composed(&anchor, &augment, &sp, &w, &tokens);
    assert!(max_diff(&got, &want) <= 1e-10);
}

fn trained_like(seed: u64) -> ComposedModel {
    let (anchor, augment) = pair(4, 4, 8, 8);
    let sp = spec(&[(0, 0), (2, 2)], 2);
    let w = random_bridges(&sp, 8, 8, 0.4, seed);
    ComposedModel::new(anchor, augment, sp, 0)
        .unwrap()
        .with_weights(w)
        .unwrap()
}

#[test]
fn causal_composition_ignores_future_tokens() {
    let cm = trained_like(21);
    let tokens = random_tokens(10, 13, 4);
    let base = cm.composed_forward(&tokens).unwrap();
    for cut in 0..9 {
        let mut edited = tokens.clone();
        for tok in &mut edited[cut + 1..] {
            *tok = (*tok + 5) % 13;
        }
        let out = cm.composed_forward(&edited).unwrap();
        let v = 13;
        assert_eq!(&base.data()[..(cut + 1) * v], &out.data()[..(cut + 1) * v]);
    }
}

#[test]
fn generation_agrees_with_full_forward() {
    let cm = trained_like(22);
    for s in 0..50u64 {
        let prompt = random_tokens(1 + (s as usize % 4), 13, 100 + s);
        let out = generate_greedy(&cm, &prompt, 6, None).unwrap();
        let logits = cm.composed_forward(&out).unwrap();
        for p in prompt.len()..out.len() {
            assert_eq!(out[p], argmax(logits.row(p - 1)), "prompt {s} position {p}");
        }
    }
    // Zero bridges generate exactly what the anchor generates.
    let (anchor, augment) = pair(4, 4, 8, 8);
    let cm = ComposedModel::new(anchor.clone(), augment, spec(&[(1, 1)], 2), 3).unwrap();
    let prompt = random_tokens(3, 13, 9);
    assert_eq!(
        generate_greedy(&cm, &prompt, 8, None).unwrap(),
        generate_greedy(&anchor, &prompt, 8, None).unwrap()
    );
}

#[test]
fn gradients_reach_bridges_only() {
    let cm = trained_like(23);
    let tokens = random_tokens(12, 13, 5);
    let states = cm.augment_states(&tokens, 2, 6).unwrap();
    let mut tape = Tape::new();
    let (logits, bound) = cm.forward_on(&mut tape, &tokens, 2, 6, &states).unwrap();
    let targets = random_tokens(12, 13, 6);
    let loss = tape.cross_entropy(logits, &targets, usize::MAX).unwrap();
    tape.backward(loss).unwrap();
    for b in &bound.bridges {
        for v in b.vars() {
            let g = tape.grad(v).expect("bridge gradient");
            assert!(g.iter().any(|&x| x != 0.0));
        }
    }
    for &v in &bound.anchor.vars {
        assert!(tape.grad(v).is_none());
    }
    assert_eq!(cm.trainable_params(), connector_param_count(cm.spec(), 8, 8));
}

#[test]
fn connector_gradients_match_finite_differences() {
    let cm = trained_like(24);
    let tokens = random_tokens(10, 13, 7);
    let targets = random_tokens(10, 13, 8);
    let states = cm.augment_states(&tokens, 2, 5).unwrap();
    let params: Vec<Tensor> = cm.trainable_tensors().into_iter().cloned().collect();
    let err = grad_check(
        |tape, vars| {
            // The composed forward rebuilt from the anchor's public pieces,
            // with the bridge weights supplied by the checker.
            let model = &cm;
            let bound = model.anchor().bind(tape);
            let mut x = model.anchor().embed(tape, &bound, &tokens, 2, 5)?;
            let mut next = 0;
            for j in 0..model.anchor().config().n_layers {
                if next < model.spec().pairs.len() && model.spec().pairs[next].1 == j {
                    let h_a = tape.leaf(&states[next]);
                    let bw = calm::calm::BoundCrossAttn {
                        w_q: vars[4 * next],
                        w_k: vars[4 * next + 1],
                        w_v: vars[4 * next + 2],
                        w_o: vars[4 * next + 3],
                        proj: None,
                    };
                    let c = calm::calm::cross_attention_on(tape, h_a, x, &bw, model.spec().n_cross_heads, true)?;
                    x = tape.add(x, c)?;
                    next += 1;
                }
                x = model.anchor().block(tape, &bound, j, x)?;
            }
            let logits = model.anchor().head(tape, &bound, x)?;
            tape.cross_entropy(logits, &targets, usize::MAX)
        },
        &params,
        CONNECTOR_GRAD_EPSILON,
    )
    .unwrap();
    assert!(err <= CONNECTOR_GRAD_TOLERANCE, "relative error {err}");
}

#[test]
fn param_counts_follow_the_closed_form() {
    assert_eq!(connector_param_count(&spec(&[(0, 0)], 1), 2, 2), 16);
    assert_eq!(connector_param_count(&spec(&[(0, 0), (4, 4)], 4), 64, 64), 32768);
    let ten: Vec<(usize, usize)> = (0..10).map(|k| (0, k)).collect();
    assert_eq!(connector_param_count(&spec(&ten, 1), 2, 4), 720);
}

#[test]
fn topologies() {
    let s = make_topology(&Topology::Stride(4), 40, 40, 128).unwrap();
    assert_eq!(s.pairs, (0..10).map(|m| (4 * m, 4 * m)).collect::<Vec<_>>());
    for (kind, want) in [(Topology::Head, 0), (Topology::Mid, 20), (Topology::Tail, 38)] {
        assert_eq!(make_topology(&kind, 40, 40, 128).unwrap().pairs, vec![(want, want)]);
    }
    for (kind, want) in [(Topology::Head, 0), (Topology::Mid, 4), (Topology::Tail, 6)] {
        assert_eq!(make_topology(&kind, 8, 8, 4).unwrap().pairs, vec![(want, want)]);
    }
    assert!(make_topology(&Topology::Stride(0), 8, 8, 4).is_err());
    assert!(make_topology(&Topology::Mid, 8, 6, 4).is_err());
}

#[test]
fn composition_rejects_bad_specs() {
    let (anchor, augment) = pair(4, 4, 8, 8);
    for bad in [
        spec(&[(5, 0)], 2),
        spec(&[(0, 3)], 2),
        spec(&[(0, 1), (1, 1)], 2),
        spec(&[(0, 0)], 3),
    ] {
        assert!(ComposedModel::new(anchor.clone(), augment.clone(), bad, 0).is_err());
    }
    let other = TransformerModel::init(micro_config(14, 4, 8, 2, 0)).unwrap();
    assert!(ComposedModel::new(anchor, other, spec(&[(0, 0)], 2), 0).is_err());
}

#[test]
fn bases_are_frozen_in_composition() {
    let cm = trained_like(25);
    assert!(cm.anchor().is_frozen() && cm.augment().is_frozen());
    assert_eq!(cm.vocab_size(), 13);
}
