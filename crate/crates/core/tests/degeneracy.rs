//! Switching a mechanism off must reproduce the simpler model exactly.

use ctxf::attention::{attn, ctx_res_attn, res_attn, ScoreState};
use ctxf::config::Config;
use ctxf::encoder::encode_utterance;
use ctxf::model::Model;
use ctxf::tape::Tape;
use ctxf::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

#[test]
fn zero_alpha_and_zero_prev_collapse_to_plain_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (tq, tk, dk) = (rng.gen_range(1..8), rng.gen_range(1..8), rng.gen_range(1..6));
        let mut tape = Tape::new();
        let q = tape.leaf(rand_t(&mut rng, &[tq, dk], 2.0));
        let k = tape.leaf(rand_t(&mut rng, &[tk, dk], 2.0));
        let v = tape.leaf(rand_t(&mut rng, &[tk, 3], 2.0));
        let prev = tape.leaf(rand_t(&mut rng, &[tq, tk], 5.0));
        let term = tape.leaf(rand_t(&mut rng, &[tq, tk], 5.0));
        let zeros = tape.constant(Tensor::zeros(&[tq, tk]));

        let (ctx0, _) = ctx_res_attn(&mut tape, q, k, v, Some(prev), term, 0.0).unwrap();
        let (res, _) = res_attn(&mut tape, q, k, v, Some(prev)).unwrap();
        assert_eq!(tape.value(ctx0), tape.value(res));

        let (res0, _) = res_attn(&mut tape, q, k, v, Some(zeros)).unwrap();
        let plain = attn(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(res0), tape.value(plain));
        let (none, _) = res_attn(&mut tape, q, k, v, None).unwrap();
        assert_eq!(tape.value(none), tape.value(plain));
    }
}

fn features(rng: &mut impl Rng, t: usize, d: usize) -> Tensor {
    rand_t(rng, &[t, d], 1.0)
}

#[test]
fn context_encoder_with_zero_alpha_is_residual_encoder() {
    let mut cfg = Config::default();
    cfg.model.d_att = 8;
    cfg.model.d_ff = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = features(&mut rng, 7, cfg.model.d_in);
    let state = ScoreState::new(vec![rand_t(&mut rng, &[2, 5, 5], 3.0), rand_t(&mut rng, &[2, 5, 5], 3.0)]).unwrap();

    let mut ctx_cfg = cfg.model.clone();
    ctx_cfg.alpha = 0.0;
    ctx_cfg.context_attention = true;
    let mut res_cfg = cfg.model.clone();
    res_cfg.context_attention = false;
    res_cfg.residual_attention = true;

    let ctx_model = Model::init(&ctx_cfg, 3).unwrap();
    let res_model = Model::from_store(&res_cfg, ctx_model.store.clone()).unwrap();
    let a = encode_utterance(&ctx_model, &x, Some(&state)).unwrap();
    let b = encode_utterance(&res_model, &x, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn context_encoder_without_history_ignores_the_mechanism() {
    let mut cfg = Config::default();
    cfg.model.d_att = 8;
    cfg.model.d_ff = 16;
    let model = Model::init(&cfg.model, 4).unwrap();
    let mut res_cfg = cfg.model.clone();
    res_cfg.context_attention = false;
    let res_model = Model::from_store(&res_cfg, model.store.clone()).unwrap();
    let x = features(&mut ChaCha8Rng::seed_from_u64(13), 5, cfg.model.d_in);
    assert_eq!(
        encode_utterance(&model, &x, None).unwrap(),
        encode_utterance(&res_model, &x, None).unwrap()
    );
}
