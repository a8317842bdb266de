//! Tape gradients of every differentiable op against central differences.

use ctxf::attention::{ctx_res_attn, prev_ls, res_attn};
use ctxf::config::{Config, CtxLayers};
use ctxf::gradcheck::{finite_diff_check, Stencil, DEFAULT_STEP, MODEL_STEP};
use ctxf::params::{Graph, ParamStore};
use ctxf::tape::{Tape, Var};
use ctxf::training::model_gradcheck;
use ctxf::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

fn rand_t(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks `sum(W ⊙ op(inputs))` for a fixed random `W` over several seeds.
fn check_op(name: &str, shapes: &[&[usize]], op: OpFn) {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| store.add(format!("x{i}"), rand_t(&mut rng, s)).unwrap())
            .collect();
        let mut probe = Tape::new();
        let leaves: Vec<Var> = ids.iter().map(|&id| probe.leaf(store.get(id).clone())).collect();
        let out = op(&mut probe, &leaves).unwrap();
        let out_shape = probe.shape(out).to_vec();
        let weights = rand_t(&mut rng, &out_shape);

        let report = finite_diff_check(&store, DEFAULT_STEP, |p| {
            let mut g = Graph::new(p);
            let xs: Vec<Var> = ids.iter().map(|&id| g.p(id)).collect();
            let y = op(&mut g.tape, &xs)?;
            let w = g.constant(weights.clone());
            let wy = g.tape.mul(y, w)?;
            let loss = g.tape.sum(wy)?;
            let v = g.value(loss).data()[0];
            Ok((v, g.backward(loss)?))
        })
        .unwrap();
        assert!(
            report.max_rel_error <= 1e-5,
            "{name} seed {seed}: {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

#[test]
fn linear_algebra_ops() {
    check_op("matmul", &[&[3, 4], &[4, 2]], |t, x| t.matmul(x[0], x[1]));
    check_op("matmul_nt", &[&[3, 4], &[5, 4]], |t, x| t.matmul_nt(x[0], x[1]));
    check_op("transpose", &[&[3, 4]], |t, x| t.transpose(x[0]));
}

#[test]
fn elementwise_ops() {
    check_op("add", &[&[3, 4], &[3, 4]], |t, x| t.add(x[0], x[1]));
    check_op("sub", &[&[3, 4], &[3, 4]], |t, x| t.sub(x[0], x[1]));
    check_op("mul", &[&[3, 4], &[3, 4]], |t, x| t.mul(x[0], x[1]));
    check_op("scale", &[&[3, 4]], |t, x| t.scale(x[0], -1.7));
    check_op("add_bias", &[&[3, 4], &[4]], |t, x| t.add_bias(x[0], x[1]));
    check_op("mul_scalar", &[&[3, 4], &[1]], |t, x| t.mul_scalar(x[0], x[1]));
    check_op("add_scalar", &[&[3, 4], &[1]], |t, x| t.add_scalar(x[0], x[1]));
    check_op("relu", &[&[4, 5]], |t, x| t.relu(x[0]));
}

#[test]
fn normalizing_ops() {
    check_op("softmax_rows", &[&[3, 5]], |t, x| {
        let s = t.scale(x[0], 3.0)?;
        t.softmax_rows(s)
    });
    check_op("layer_norm", &[&[3, 5], &[5], &[5]], |t, x| t.layer_norm(x[0], x[1], x[2]));
    check_op("cross_entropy", &[&[4, 6]], |t, x| t.cross_entropy(x[0], &[0, 5, 2, 2], 0.0));
    check_op("cross_entropy_smoothed", &[&[4, 6]], |t, x| t.cross_entropy(x[0], &[1, 3, 4, 0], 0.1));
}

#[test]
fn structural_ops() {
    check_op("slice_cols", &[&[3, 6]], |t, x| t.slice_cols(x[0], 2, 3));
    check_op("slice_rows", &[&[5, 2]], |t, x| t.slice_rows(x[0], 1, 3));
    check_op("concat_cols", &[&[3, 2], &[3, 4]], |t, x| t.concat_cols(&[x[0], x[1], x[0]]));
    check_op("concat_rows", &[&[2, 3], &[4, 3]], |t, x| t.concat_rows(&[x[1], x[0]]));
    check_op("gather_rows", &[&[5, 3]], |t, x| t.gather_rows(x[0], &[4, 0, 4, 2]));
    check_op("mean_rows", &[&[4, 3]], |t, x| t.mean_rows(x[0]));
    check_op("repeat_rows", &[&[1, 3]], |t, x| t.repeat_rows(x[0], 4));
    check_op("sum", &[&[3, 3]], |t, x| t.sum(x[0]));
}

#[test]
fn attention_composites() {
    check_op("res_attn", &[&[3, 4], &[5, 4], &[5, 2], &[3, 5]], |t, x| {
        Ok(res_attn(t, x[0], x[1], x[2], Some(x[3]))?.0)
    });
    check_op("prev_ls", &[&[3, 3], &[3, 3], &[1], &[1]], |t, x| prev_ls(t, x[0], x[1], x[2], x[3], None));
    check_op("ctx_res_attn", &[&[4, 2], &[4, 2], &[4, 3], &[4, 4], &[4, 4], &[1], &[1]], |t, x| {
        let s = t.matmul_nt(x[0], x[1])?;
        let term = prev_ls(t, x[4], s, x[5], x[6], None)?;
        Ok(ctx_res_attn(t, x[0], x[1], x[2], Some(x[3]), term, 0.1)?.0)
    });
}

fn tiny() -> Config {
    let mut cfg = Config::default();
    for (k, v) in [
        ("vocab_size", "11"),
        ("keywords", "3"),
        ("d_att", "8"),
        ("heads", "2"),
        ("d_ff", "16"),
        ("decoder_history", "2"),
        ("label_smoothing", "0.1"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

#[test]
fn whole_model_variants() {
    let variants: [(&str, bool, bool, CtxLayers, usize); 4] = [
        ("baseline", false, false, CtxLayers::All, 0),
        ("residual", true, false, CtxLayers::All, 1),
        ("context-first", false, true, CtxLayers::First, 3),
        ("full", true, true, CtxLayers::All, 2),
    ];
    for (name, res, ctx, layers, n) in variants {
        let mut cfg = tiny();
        cfg.model.residual_attention = res;
        cfg.model.context_attention = ctx;
        cfg.model.ctx_layers = layers;
        cfg.model.decoder_history = n;
        let r = model_gradcheck(&cfg, 3, MODEL_STEP, Stencil::Central6).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{name}: {} at {:?}", r.max_rel_error, r.worst);
    }
}
