//! Moment-set prediction network.
//!
//! Frame features are cut into non-overlapping windows by a strided linear
//! tokenizer, shifted by interpolated temporal embeddings, and run through a
//! pre-norm transformer encoder. A fixed set of learnable queries then decodes
//! the encoded video, and two FFN heads project every query to a unit visual
//! embedding plus unit start/end temporal embeddings.

mod config;

pub use config::ModelConfig;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::temporal::{interpolate_var, TemporalTable};

/// Initial contrastive temperature and bias.
pub const INIT_TEMPERATURE: f64 = 10.0;
pub const INIT_LOSS_BIAS: f64 = -10.0;

/// The prediction set: one row per query.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentPrediction<S> {
    /// `N × C`, unit rows.
    pub visual: Tensor<S>,
    /// `N × d`, unit rows.
    pub te_start: Tensor<S>,
    /// `N × d`, unit rows.
    pub te_end: Tensor<S>,
}

impl<S: Scalar> MomentPrediction<S> {
    pub fn num_queries(&self) -> usize {
        self.visual.rows()
    }
}

/// Tape handles for a [`MomentPrediction`].
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub visual: Var,
    pub te_start: Var,
    pub te_end: Var,
}

impl PredictionVars {
    pub fn read<S: Scalar>(&self, tape: &Tape<S>) -> MomentPrediction<S> {
        MomentPrediction {
            visual: tape.value(self.visual).clone().with_grad(false),
            te_start: tape.value(self.te_start).clone().with_grad(false),
            te_end: tape.value(self.te_end).clone().with_grad(false),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct EncoderLayer {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ffn: Ffn,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    cross_attn: Attention,
    norm3: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug, PartialEq)]
struct Slots {
    tokenizer: Linear,
    table: usize,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    queries: usize,
    visual_head: Ffn,
    temporal_head: Ffn,
    log_temperature: usize,
    loss_bias: usize,
}

struct Builder<'a, S> {
    store: ParamStore<S>,
    rng: &'a mut ChaCha8Rng,
}

impl<S: Scalar> Builder<'_, S> {
    fn add(&mut self, name: String, t: Tensor<S>) -> Result<usize> {
        self.store.insert(name, t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| S::of(self.rng.random_range(-bound..bound)))
            .collect();
        Ok(Linear {
            w: self.add(format!("{name}.weight"), Tensor::matrix(fan_in, fan_out, data)?)?,
            b: self.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]))?,
        })
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.add(format!("{name}.gain"), Tensor::full(&[1, dim], S::one()))?,
            bias: self.add(format!("{name}.bias"), Tensor::zeros(&[1, dim]))?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            out: self.linear(&format!("{name}.out"), d, d)?,
        })
    }

    fn ffn(&mut self, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Ffn> {
        Ok(Ffn {
            up: self.linear(&format!("{name}.up"), d_in, hidden)?,
            down: self.linear(&format!("{name}.down"), hidden, d_out)?,
        })
    }
}

/// Network configuration plus every learnable tensor, including the
/// temporal-embedding table and the contrastive temperature/bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    params: ParamStore<S>,
    slots: Slots,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let tokenizer = b.linear("tokenizer", c.conv_kernel * c.feature_dim, d)?;
        let table = b.add(
            "temporal.table".into(),
            TemporalTable::<S>::init_sinusoidal(c.te_rows, d)?.into_tensor(),
        )?;
        let mut encoder = Vec::with_capacity(c.enc_layers);
        for l in 0..c.enc_layers {
            let p = format!("encoder.{l}");
            encoder.push(EncoderLayer {
                norm1: b.norm(&format!("{p}.norm1"), d)?,
                attn: b.attention(&format!("{p}.attn"), d)?,
                norm2: b.norm(&format!("{p}.norm2"), d)?,
                ffn: b.ffn(&format!("{p}.ffn"), d, c.ffn_hidden, d)?,
            });
        }
        let mut decoder = Vec::with_capacity(c.dec_layers);
        for l in 0..c.dec_layers {
            let p = format!("decoder.{l}");
            decoder.push(DecoderLayer {
                norm1: b.norm(&format!("{p}.norm1"), d)?,
                self_attn: b.attention(&format!("{p}.self_attn"), d)?,
                norm2: b.norm(&format!("{p}.norm2"), d)?,
                cross_attn: b.attention(&format!("{p}.cross_attn"), d)?,
                norm3: b.norm(&format!("{p}.norm3"), d)?,
                ffn: b.ffn(&format!("{p}.ffn"), d, c.ffn_hidden, d)?,
            });
        }
        let qdata = (0..c.num_queries * d)
            .map(|_| S::of(StandardNormal.sample(&mut *b.rng)))
            .collect();
        let queries = b.add("queries".into(), Tensor::matrix(c.num_queries, d, qdata)?)?;
        let visual_head = b.ffn("head.visual", d, d, c.feature_dim)?;
        let temporal_head = b.ffn("head.temporal", d, d, 2 * d)?;
        let log_temperature = b.add(
            "loss.log_temperature".into(),
            Tensor::scalar(S::of(INIT_TEMPERATURE.ln())),
        )?;
        let loss_bias = b.add("loss.bias".into(), Tensor::scalar(S::of(INIT_LOSS_BIAS)))?;

        let params = b.store;
        Ok(Self {
            config,
            params,
            slots: Slots {
                tokenizer,
                table,
                encoder,
                decoder,
                queries,
                visual_head,
                temporal_head,
                log_temperature,
                loss_bias,
            },
        })
    }

    /// Rebuilds a model around previously saved parameters.
    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for slot in 0..model.params.len() {
            let name = model.params.name(slot).to_string();
            let src = params
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if src.shape() != model.params.at(slot).shape() {
                return Err(Error::Shape {
                    op: "load_params",
                    lhs: model.params.at(slot).shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            *model.params.at_mut(slot) = src.clone().with_grad(true);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn table(&self) -> &Tensor<S> {
        self.params.at(self.slots.table)
    }

    pub fn temperature(&self) -> S {
        self.params.at(self.slots.log_temperature).data()[0].exp()
    }

    pub fn loss_bias(&self) -> S {
        self.params.at(self.slots.loss_bias).data()[0]
    }

    pub fn table_var(&self, vars: &[Var]) -> Var {
        vars[self.slots.table]
    }

    pub fn log_temperature_var(&self, vars: &[Var]) -> Var {
        vars[self.slots.log_temperature]
    }

    pub fn loss_bias_var(&self, vars: &[Var]) -> Var {
        vars[self.slots.loss_bias]
    }

    /// Records every parameter on `tape`; the result is indexed by store slot.
    pub fn register(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<Var> {
        self.params.register(tape, trainable)
    }

    fn linear(&self, tape: &mut Tape<S>, vars: &[Var], l: Linear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[l.w])?;
        tape.add(y, vars[l.b])
    }

    fn norm(&self, tape: &mut Tape<S>, vars: &[Var], n: Norm, x: Var) -> Result<Var> {
        tape.layer_norm(x, vars[n.gain], vars[n.bias])
    }

    fn ffn(&self, tape: &mut Tape<S>, vars: &[Var], f: Ffn, x: Var) -> Result<Var> {
        let h = self.linear(tape, vars, f.up, x)?;
        let h = tape.gelu(h);
        self.linear(tape, vars, f.down, h)
    }

    /// Multi-head scaled dot-product attention of `queries` over `context`.
    fn attention(
        &self,
        tape: &mut Tape<S>,
        vars: &[Var],
        a: Attention,
        queries: Var,
        context: Var,
    ) -> Result<Var> {
        let q = self.linear(tape, vars, a.q, queries)?;
        let k = self.linear(tape, vars, a.k, context)?;
        let v = self.linear(tape, vars, a.v, context)?;
        let hd = self.config.head_dim;
        let scale = S::of(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.linear(tape, vars, a.out, merged)
    }

    /// Non-overlapping strided projection of `T × C` frames to `⌊T/k⌋ × d` tokens.
    /// Trailing frames that do not fill a window are dropped.
    pub fn tokenize(&self, tape: &mut Tape<S>, vars: &[Var], features: &Tensor<S>) -> Result<Var> {
        let (frames, width) = features.dims2()?;
        let k = self.config.conv_kernel;
        if width != self.config.feature_dim {
            return Err(Error::Shape {
                op: "tokenize",
                lhs: features.shape().to_vec(),
                rhs: vec![frames, self.config.feature_dim],
            });
        }
        if frames < k {
            return Err(Error::InputTooShort { frames, kernel: k });
        }
        let tokens = frames / k;
        let windows = Tensor::matrix(tokens, k * width, features.data()[..tokens * k * width].to_vec())?;
        let x = tape.constant(windows);
        self.linear(tape, vars, self.slots.tokenizer, x)
    }

    /// Adds interpolated temporal embeddings, then runs the encoder stack.
    pub fn encode(&self, tape: &mut Tape<S>, vars: &[Var], tokens: Var) -> Result<Var> {
        let len = tape.value(tokens).rows();
        let te = interpolate_var(tape, vars[self.slots.table], len)?;
        let mut x = tape.add(tokens, te)?;
        for layer in &self.slots.encoder {
            let h = self.norm(tape, vars, layer.norm1, x)?;
            let h = self.attention(tape, vars, layer.attn, h, h)?;
            x = tape.add(x, h)?;
            let h = self.norm(tape, vars, layer.norm2, x)?;
            let h = self.ffn(tape, vars, layer.ffn, h)?;
            x = tape.add(x, h)?;
        }
        Ok(x)
    }

    /// Runs the learnable queries through the decoder with `memory` as keys/values.
    pub fn decode(&self, tape: &mut Tape<S>, vars: &[Var], memory: Var) -> Result<Var> {
        let mut q = vars[self.slots.queries];
        for layer in &self.slots.decoder {
            let h = self.norm(tape, vars, layer.norm1, q)?;
            let h = self.attention(tape, vars, layer.self_attn, h, h)?;
            q = tape.add(q, h)?;
            let h = self.norm(tape, vars, layer.norm2, q)?;
            let h = self.attention(tape, vars, layer.cross_attn, h, memory)?;
            q = tape.add(q, h)?;
            let h = self.norm(tape, vars, layer.norm3, q)?;
            let h = self.ffn(tape, vars, layer.ffn, h)?;
            q = tape.add(q, h)?;
        }
        Ok(q)
    }

    /// Both FFN heads before normalization: `(N × C, N × 2d)`.
    pub fn head_outputs(&self, tape: &mut Tape<S>, vars: &[Var], decoded: Var) -> Result<(Var, Var)> {
        let visual = self.ffn(tape, vars, self.slots.visual_head, decoded)?;
        let temporal = self.ffn(tape, vars, self.slots.temporal_head, decoded)?;
        Ok((visual, temporal))
    }

    pub fn project(&self, tape: &mut Tape<S>, vars: &[Var], decoded: Var) -> Result<PredictionVars> {
        let d = self.config.model_dim;
        let (visual, temporal) = self.head_outputs(tape, vars, decoded)?;
        let visual = tape.l2_normalize_rows(visual)?;
        let start = tape.slice_cols(temporal, 0, d)?;
        let end = tape.slice_cols(temporal, d, d)?;
        Ok(PredictionVars {
            visual,
            te_start: tape.l2_normalize_rows(start)?,
            te_end: tape.l2_normalize_rows(end)?,
        })
    }

    pub fn forward_on(&self, tape: &mut Tape<S>, vars: &[Var], features: &Tensor<S>) -> Result<PredictionVars> {
        let tokens = self.tokenize(tape, vars, features)?;
        let memory = self.encode(tape, vars, tokens)?;
        let decoded = self.decode(tape, vars, memory)?;
        self.project(tape, vars, decoded)
    }

    /// Inference on frozen parameters.
    pub fn predict(&self, features: &Tensor<S>) -> Result<MomentPrediction<S>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let out = self.forward_on(&mut tape, &vars, features)?;
        let pred = out.read(&tape);
        if !(pred.visual.is_finite() && pred.te_start.is_finite() && pred.te_end.is_finite()) {
            return Err(Error::NonFinite("prediction contains NaN or Inf".into()));
        }
        Ok(pred)
    }
}
