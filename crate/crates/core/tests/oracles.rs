//! The tape-based model checked against loop-level references.

mod common;

use ctxf::attention::{attn, ctx_res_attn, mha, res_attn, ScoreState, ScoreTerms};
use ctxf::config::{CtxLayers, HistoryPolicy};
use ctxf::conversation::{select_history, Conversation, Utterance};
use ctxf::decoder::{context_fold, decode_forward};
use ctxf::encoder::encode_on_graph;
use ctxf::model::{EOS, SOS};
use ctxf::params::Graph;
use ctxf::search::beam_search;
use ctxf::tape::Tape;
use ctxf::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(n, k, m) in &[(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 32, 8)] {
        let a = rand_m(&mut rng, n, k);
        let b = rand_m(&mut rng, k, m);
        let got = to_t(&a).matmul(&to_t(&b)).unwrap();
        assert!(max_diff(&mm(&a, &b), &got) <= TOL);
    }
}

#[test]
fn attention_operators_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(tq, tk, dk) in &[(1, 1, 1), (4, 6, 3), (9, 9, 8)] {
        let (q, k, v) = (rand_m(&mut rng, tq, dk), rand_m(&mut rng, tk, dk), rand_m(&mut rng, tk, 5));
        let prev = scale(&rand_m(&mut rng, tq, tk), 3.0);
        let term = rand_m(&mut rng, tq, tk);
        let s = scale(&mm(&q, &transpose(&k)), 1.0 / (dk as f64).sqrt());

        let mut tape = Tape::new();
        let (vq, vk, vv) = (tape.leaf(to_t(&q)), tape.leaf(to_t(&k)), tape.leaf(to_t(&v)));
        let vp = tape.leaf(to_t(&prev));
        let vt = tape.leaf(to_t(&term));

        let plain = attn(&mut tape, vq, vk, vv).unwrap();
        assert!(max_diff(&mm(&softmax(&s), &v), tape.value(plain)) <= TOL);

        let (res, res_scores) = res_attn(&mut tape, vq, vk, vv, Some(vp)).unwrap();
        let s_res = add(&s, &prev);
        assert!(max_diff(&mm(&softmax(&s_res), &v), tape.value(res)) <= TOL);
        assert!(max_diff(&s_res, tape.value(res_scores)) <= TOL);

        let (ctx, _) = ctx_res_attn(&mut tape, vq, vk, vv, Some(vp), vt, 0.1).unwrap();
        let s_ctx = add(&s_res, &scale(&term, 0.1));
        assert!(max_diff(&mm(&softmax(&s_ctx), &v), tape.value(ctx)) <= TOL);
    }
}

#[test]
fn multi_head_is_per_head_attention_then_projection() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for heads in [1, 2, 4] {
        let mut c = cfg.clone();
        c.model.heads = heads;
        let model = scrambled_model(&c, heads as u64);
        let p = &model.encoder.layers[0].attn;
        let x = rand_m(&mut rng, 5, c.model.d_att);
        let y = rand_m(&mut rng, 7, c.model.d_att);

        let mut g = Graph::inference(&model.store);
        let (vx, vy) = (g.constant(to_t(&x)), g.constant(to_t(&y)));
        let out = mha(&mut g, vx, vy, vy, p, &ScoreTerms::default()).unwrap();
        let (want, scores) = ref_mha(&model, p, &x, &y, None, None, None);
        assert!(max_diff(&want, g.value(out.out)) <= TOL, "heads = {heads}");
        for h in 0..heads {
            assert!(max_diff(&scores[h], g.value(out.scores[h])) <= TOL);
            let w = g.value(out.weights[h]);
            for i in 0..w.rows() {
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

fn random_state(rng: &mut impl Rng, layers: usize, heads: usize, t: usize) -> ScoreState {
    ScoreState::new(
        (0..layers)
            .map(|_| {
                let data = (0..heads * t * t).map(|_| rng.gen_range(-2.0..2.0)).collect();
                Tensor::new(vec![heads, t, t], data).unwrap()
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn encoder_matches_reference_for_every_variant() {
    let base = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let variants: [(bool, bool, CtxLayers); 4] = [
        (false, false, CtxLayers::All),
        (true, false, CtxLayers::All),
        (true, true, CtxLayers::All),
        (false, true, CtxLayers::First),
    ];
    for (i, &(res, ctx, layers)) in variants.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.model.residual_attention = res;
        cfg.model.context_attention = ctx;
        cfg.model.ctx_layers = layers;
        cfg.model.enc_layers = 3;
        let model = scrambled_model(&cfg, 10 + i as u64);
        for &(t, t_prev) in &[(6, 4), (5, 5), (3, 7), (4, 1)] {
            let feats = to_t(&rand_m(&mut rng, t, cfg.model.d_in));
            let state = random_state(&mut rng, 3, cfg.model.heads, t_prev);
            for prev in [None, Some(&state)] {
                let mut g = Graph::inference(&model.store);
                let got = encode_on_graph(&mut g, &model, &feats, prev).unwrap();
                let (want, scores) = ref_encoder(&model, &feats, prev);
                assert!(max_diff(&want, g.value(got.hidden)) <= TOL, "variant {i}, t = {t}");
                for (l, heads) in scores.iter().enumerate() {
                    for (h, s) in heads.iter().enumerate() {
                        assert!(max_diff(s, g.value(got.layer_scores[l][h])) <= TOL);
                    }
                }
            }
        }
    }
}

#[test]
fn context_fold_matches_reference() {
    let cfg = small_config();
    let model = scrambled_model(&cfg, 20);
    let histories: Vec<Vec<Vec<u32>>> = vec![
        vec![vec![0]],
        vec![vec![2, 5, 7], vec![8, 3]],
        vec![vec![4], vec![2, 2, 2, 2], vec![6, 1, 5]],
    ];
    for h in &histories {
        let mut g = Graph::inference(&model.store);
        let got = context_fold(&mut g, &model, h).unwrap();
        let want = ref_fold(&model, h);
        assert_eq!(want.len(), h[0].len());
        assert!(max_diff(&want, g.value(got)) <= TOL);
    }
}

#[test]
fn decoder_without_context_matches_vanilla_reference() {
    let cfg = small_config();
    let model = scrambled_model(&cfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for targets in [vec![SOS], vec![SOS, 4, 7, 2], vec![SOS, 3, 3, 8, 5, 6, 2, 4]] {
        let enc = rand_m(&mut rng, 6, cfg.model.d_att);
        let mut g = Graph::inference(&model.store);
        let h = g.constant(to_t(&enc));
        let got = decode_forward(&mut g, &model, &targets, None, h).unwrap();
        assert!(max_diff(&ref_decoder(&model, &targets, None, &enc), g.value(got.logits)) <= TOL);
    }
}

#[test]
fn decoder_with_memory_prefix_matches_reference() {
    let cfg = small_config();
    let model = scrambled_model(&cfg, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let targets = vec![SOS, 5, 2, 7];
    let enc = rand_m(&mut rng, 4, cfg.model.d_att);
    let history = vec![vec![3, 6, 2], vec![7, 7]];
    let mut g = Graph::inference(&model.store);
    let h = g.constant(to_t(&enc));
    let mem = context_fold(&mut g, &model, &history).unwrap();
    let got = decode_forward(&mut g, &model, &targets, Some(mem), h).unwrap();
    assert_eq!(got.prefix_len, 3);
    let want = ref_decoder(&model, &targets, Some(&ref_fold(&model, &history)), &enc);
    assert!(max_diff(&want, g.value(got.logits)) <= TOL);
}

#[test]
fn causal_mask_hides_future_targets() {
    let cfg = small_config();
    let model = scrambled_model(&cfg, 23);
    let enc = to_t(&rand_m(&mut ChaCha8Rng::seed_from_u64(7), 3, cfg.model.d_att));
    let logits = |targets: &[u32]| {
        let mut g = Graph::inference(&model.store);
        let h = g.constant(enc.clone());
        let mem = context_fold(&mut g, &model, &[vec![4, 5]]).unwrap();
        let f = decode_forward(&mut g, &model, targets, Some(mem), h).unwrap();
        g.value(f.logits).clone()
    };
    let a = logits(&[SOS, 3, 4, 5]);
    let b = logits(&[SOS, 3, 8, 2]);
    for j in 0..cfg.model.vocab_size {
        assert_eq!(a.at(0, j), b.at(0, j));
        assert_eq!(a.at(1, j), b.at(1, j));
    }
    assert_ne!(a.row(2), b.row(2));
}

#[test]
fn wide_beam_equals_exhaustive_search() {
    let (vocab, max_len) = (5, 4);
    let hyp = beam_search(|p| Ok(scripted(p, vocab)), 10_000, max_len).unwrap();
    let (tokens, lp, score, truncated) = exhaustive_best(vocab, max_len);
    assert_eq!(hyp.tokens, tokens);
    assert!((hyp.log_prob - lp).abs() <= TOL);
    assert!((hyp.score - score).abs() <= TOL);
    assert_eq!(hyp.truncated, truncated);
    assert!(!hyp.tokens.contains(&SOS));
}

#[test]
fn single_beam_is_greedy() {
    let vocab = 5;
    let hyp = beam_search(|p| Ok(scripted(p, vocab)), 1, 4).unwrap();
    let mut prefix = vec![SOS];
    let mut lp = 0.0;
    for _ in 0..4 {
        let lps = scripted(&prefix, vocab);
        let (tok, l) = lps
            .iter()
            .enumerate()
            .skip(1)
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        lp += l;
        prefix.push(tok as u32);
        if tok as u32 == EOS {
            break;
        }
    }
    let mut want: Vec<u32> = prefix[1..].to_vec();
    if want.last() == Some(&EOS) {
        want.pop();
    }
    assert_eq!(hyp.tokens, want);
    assert!((hyp.log_prob - lp).abs() <= TOL);
}

fn conversation(speakers: &[&str]) -> Conversation {
    let utts = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| Utterance {
            id: format!("x-{i}"),
            conversation_id: "x".into(),
            speaker: s.to_string(),
            time_index: (i * 3) as u32,
            features: Tensor::zeros(&[1, 2]),
            transcript: vec![2],
            ambiguous: vec![false],
        })
        .collect();
    Conversation::new("x", utts).unwrap()
}

#[test]
fn history_selection_matches_brute_force_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let len = rng.gen_range(1..9);
        let speakers: Vec<&str> = (0..len).map(|_| ["A", "B", "C"][rng.gen_range(0..3)]).collect();
        let conv = conversation(&speakers);
        for pos in 0..len {
            for n in 0..4 {
                for policy in [HistoryPolicy::SpeakerIndependent, HistoryPolicy::SpeakerDependent] {
                    let mut want = Vec::new();
                    for j in (0..len).rev() {
                        let earlier = conv.utterances[j].time_index < conv.utterances[pos].time_index;
                        let same = speakers[j] == speakers[pos];
                        if earlier && (policy == HistoryPolicy::SpeakerIndependent || same) && want.len() < n {
                            want.push(j);
                        }
                    }
                    want.reverse();
                    assert_eq!(select_history(&conv, pos, n, policy), want);
                }
            }
        }
    }
}
