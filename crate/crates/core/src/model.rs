//! Parameter layout of the encoder–decoder model.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{CtxMixParams, MhaParams};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{xavier, Graph, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Start-of-sequence token id.
pub const SOS: u32 = 0;
/// End-of-sequence token id.
pub const EOS: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            w1: store.add(format!("{prefix}.w1"), xavier(rng, d, d_ff))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d_ff]))?,
            w2: store.add(format!("{prefix}.w2"), xavier(rng, d_ff, d))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d]))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::filled(&[d], 1.0))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.p(self.gain), g.p(self.bias));
        g.tape.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub attn: MhaParams,
    pub ffn: FfnParams,
    pub ln_attn: LayerNormParams,
    pub ln_ffn: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub layers: Vec<EncoderLayerParams>,
    pub ctx_mix: CtxMixParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub self_attn: MhaParams,
    pub cross_attn: MhaParams,
    pub ffn: FfnParams,
    pub ln_self: LayerNormParams,
    pub ln_cross: LayerNormParams,
    pub ln_ffn: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// `[V × d_att]` token embedding, shared by the context fold.
    pub embed: ParamId,
    pub layers: Vec<DecoderLayerParams>,
    pub w_out: ParamId,
    pub b_out: ParamId,
    /// `[2·d_att × d_att]` linear over `[attention output ; mean of newer transcript]`.
    pub combine_w: ParamId,
    pub combine_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

const OUTPUT_INIT_SCALE: f64 = 0.05;

fn unit_variance(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 3f64.sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

impl Model {
    /// Deterministic initialization from `seed`. Every variant allocates the
    /// same parameter layout; mechanisms that are switched off simply leave
    /// their parameters unused.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, d_ff, h) = (config.d_att, config.d_ff, config.heads);

        let w_in = store.add("enc.w_in", unit_variance(&mut rng, config.d_in, d))?;
        let b_in = store.add("enc.b_in", Tensor::zeros(&[d]))?;
        let mut enc_layers = Vec::with_capacity(config.enc_layers);
        for l in 0..config.enc_layers {
            let p = format!("enc.{l}");
            enc_layers.push(EncoderLayerParams {
                attn: MhaParams::init(&mut store, &format!("{p}.attn"), d, h, &mut rng)?,
                ffn: FfnParams::init(&mut store, &format!("{p}.ffn"), d, d_ff, &mut rng)?,
                ln_attn: LayerNormParams::init(&mut store, &format!("{p}.ln_attn"), d)?,
                ln_ffn: LayerNormParams::init(&mut store, &format!("{p}.ln_ffn"), d)?,
            });
        }
        let ctx_mix = CtxMixParams::init(&mut store, "enc.ctx_mix", config.enc_layers, config.alpha)?;

        let embed = store.add("dec.embed", unit_variance(&mut rng, config.vocab_size, d))?;
        let mut dec_layers = Vec::with_capacity(config.dec_layers);
        for l in 0..config.dec_layers {
            let p = format!("dec.{l}");
            dec_layers.push(DecoderLayerParams {
                self_attn: MhaParams::init(&mut store, &format!("{p}.self_attn"), d, h, &mut rng)?,
                cross_attn: MhaParams::init(&mut store, &format!("{p}.cross_attn"), d, h, &mut rng)?,
                ffn: FfnParams::init(&mut store, &format!("{p}.ffn"), d, d_ff, &mut rng)?,
                ln_self: LayerNormParams::init(&mut store, &format!("{p}.ln_self"), d)?,
                ln_cross: LayerNormParams::init(&mut store, &format!("{p}.ln_cross"), d)?,
                ln_ffn: LayerNormParams::init(&mut store, &format!("{p}.ln_ffn"), d)?,
            });
        }
        // Small output weights keep the initial prediction near uniform.
        let mut w_out = xavier(&mut rng, d, config.vocab_size);
        w_out.data_mut().iter_mut().for_each(|v| *v *= OUTPUT_INIT_SCALE);
        let w_out = store.add("dec.w_out", w_out)?;
        let b_out = store.add("dec.b_out", Tensor::zeros(&[config.vocab_size]))?;
        let combine_w = store.add("dec.combine.w", xavier(&mut rng, 2 * d, d))?;
        let combine_b = store.add("dec.combine.b", Tensor::zeros(&[d]))?;

        Ok(Self {
            config: config.clone(),
            store,
            encoder: EncoderParams {
                w_in,
                b_in,
                layers: enc_layers,
                ctx_mix,
            },
            decoder: DecoderParams {
                embed,
                layers: dec_layers,
                w_out,
                b_out,
                combine_w,
                combine_b,
            },
        })
    }

    /// Rebuilds the model structure around an existing parameter set.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        if !model.store.same_layout(&store) {
            return Err(Error::Contract(
                "parameter set does not match the configured model layout".into(),
            ));
        }
        model.store = store;
        Ok(model)
    }
}

/// Sinusoidal encoding for each (possibly negative) position.
pub fn sinusoid(positions: impl IntoIterator<Item = i64>, d: usize) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    for pos in positions {
        rows += 1;
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![rows, d], data).expect("non-empty position list")
}

/// `FFN(x) = ReLU(x·W1 + b1)·W2 + b2`.
pub fn ffn(g: &mut Graph, p: &FfnParams, x: Var) -> Result<Var> {
    let (w1, b1, w2, b2) = (g.p(p.w1), g.p(p.b1), g.p(p.w2), g.p(p.b2));
    let h = g.tape.matmul(x, w1)?;
    let h = g.tape.add_bias(h, b1)?;
    let h = g.tape.relu(h)?;
    let o = g.tape.matmul(h, w2)?;
    g.tape.add_bias(o, b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    #[test]
    fn init_is_deterministic_and_layout_stable() {
        let cfg = Config::default().model;
        let a = Model::init(&cfg, 5).unwrap();
        let b = Model::init(&cfg, 5).unwrap();
        let c = Model::init(&cfg, 6).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
        assert!(a.store.same_layout(&c.store));
        assert!(Model::from_store(&cfg, c.store.clone()).is_ok());
        let mut other = cfg.clone();
        other.d_att = 16;
        assert!(Model::from_store(&other, c.store).is_err());
    }

    #[test]
    fn sinusoid_at_origin() {
        let pe = sinusoid([0, -1], 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(1, 0) + 1f64.sin()).abs() < 1e-15);
    }
}
