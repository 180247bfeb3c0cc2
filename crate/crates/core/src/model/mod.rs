//! Post-norm transformer with an optional stack sublayer per layer, five
//! positional-encoding variants and masked or autoregressive output heads.

mod checkpoint;
mod params;
pub mod position;
mod vocab;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use params::ParamStore;
pub use position::PeKind;
pub use vocab::{Vocabulary, BOS, EOS, MASK, PAD, SPECIALS};

use crate::attention::{multi_head_self_attention, AttentionMask, AttentionParams, MultiHeadConfig, PositionBias};
use crate::error::{Error, Result};
use crate::numerics::{NumericsError, Real, Tape, Tensor, Var};
use crate::stack::{stack_sublayer, StackParams};
use params::{Init, Initializer};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Bidirectional masked language modeling.
    #[default]
    Mlm,
    /// Future-masked autoregressive language modeling.
    Alm,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Mlm => "mlm",
            Mode::Alm => "alm",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlm" => Ok(Mode::Mlm),
            "alm" => Ok(Mode::Alm),
            _ => Err(Error::Config(format!("unknown mode {s:?} (mlm|alm)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub pe: PeKind,
    pub stack: bool,
    pub mode: Mode,
}

impl ModelConfig {
    /// Five layers of width 64 with eight heads.
    pub fn paper() -> Self {
        Self {
            layers: 5,
            d_model: 64,
            heads: 8,
            ffn_dim: 256,
            pe: PeKind::None,
            stack: true,
            mode: Mode::Mlm,
        }
    }

    /// Two layers of width 32 with four heads.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            heads: 4,
            ffn_dim: 128,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("layers, d_model and ffn_dim must be positive".into()));
        }
        let cfg = MultiHeadConfig::new(self.d_model, self.heads)?;
        if self.pe == PeKind::Rotary && cfg.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary encoding needs an even head width, got {}",
                cfg.head_dim()
            )));
        }
        if self.pe == PeKind::Sincos || self.pe == PeKind::Relative {
            if self.d_model % 2 != 0 {
                return Err(Error::Config("sinusoidal encodings need an even d_model".into()));
            }
        }
        Ok(())
    }

    pub fn attention(&self) -> MultiHeadConfig {
        MultiHeadConfig {
            d_model: self.d_model,
            heads: self.heads,
        }
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("pe", self.pe.to_string()),
            ("stack", on_off(self.stack).to_string()),
            ("mode", self.mode.to_string()),
        ]
    }

    /// Applies one `key=value` setting; returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "layers" => self.layers = parse_num(key, value)?,
            "d_model" => self.d_model = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "ffn_dim" => self.ffn_dim = parse_num(key, value)?,
            "pe" => self.pe = value.parse()?,
            "stack" => self.stack = parse_switch(key, value)?,
            "mode" => self.mode = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub(crate) fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

pub(crate) fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {value:?}"))),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct RelativeParams {
    pub w_r: Var,
    pub u: Var,
    pub v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ln1: NormParams,
    pub ffn: FfnParams,
    pub ln2: NormParams,
    pub stack: Option<StackParams>,
    pub relative: Option<RelativeParams>,
}

pub struct LayerOutput {
    pub output: Var,
    /// Output of the feed-forward sublayer, the stack sublayer's input.
    pub ffn_output: Var,
    pub attention: Vec<Var>,
    pub alphas: Option<Var>,
    pub actions: Option<Var>,
}

/// `relu(H·W1 + b1)·W2 + b2`.
pub fn feed_forward<F: Real>(tape: &mut Tape<F>, h: Var, p: &FfnParams) -> Result<Var> {
    let inner = tape.matmul(h, p.w1)?;
    let inner = tape.add_row(inner, p.b1)?;
    let inner = tape.relu(inner);
    let out = tape.matmul(inner, p.w2)?;
    Ok(tape.add_row(out, p.b2)?)
}

/// `H_M = LN(MHA(H) + H)`, `H_F = LN(FFN(H_M) + H_M)`, then the stack
/// sublayer `S(H_F) + H_F` when present.
pub fn transformer_layer<F: Real>(
    tape: &mut Tape<F>,
    h: Var,
    p: &LayerParams,
    heads: &MultiHeadConfig,
    mask: Option<&AttentionMask>,
    position: &PositionBias<F>,
) -> Result<LayerOutput> {
    let attn = multi_head_self_attention(tape, h, &p.attn, heads, mask, position)?;
    let res = tape.add(attn.output, h)?;
    let hm = tape.layer_norm(res, p.ln1.gain, p.ln1.bias, LN_EPS)?;
    let ff = feed_forward(tape, hm, &p.ffn)?;
    let res = tape.add(ff, hm)?;
    let hf = tape.layer_norm(res, p.ln2.gain, p.ln2.bias, LN_EPS)?;
    match &p.stack {
        Some(sp) => {
            let s = stack_sublayer(tape, hf, sp)?;
            Ok(LayerOutput {
                output: s.output,
                ffn_output: hf,
                attention: attn.weights,
                alphas: Some(s.alphas),
                actions: Some(s.actions),
            })
        }
        None => Ok(LayerOutput {
            output: hf,
            ffn_output: hf,
            attention: attn.weights,
            alphas: None,
            actions: None,
        }),
    }
}

/// Embedding lookup plus the absolute sinusoid table when `pe` is sincos.
pub fn embed<F: Real>(tape: &mut Tape<F>, table: Var, tokens: &[usize], pe: PeKind) -> Result<Var> {
    let h = tape.gather_rows(table, tokens)?;
    if pe != PeKind::Sincos {
        return Ok(h);
    }
    let (t, d) = tape.value(h).dims2("embed")?;
    let table = Tensor::from_f64(&[t, d], &position::sincos_table(t, d))?;
    Ok(tape.add_const(h, &table)?)
}

#[derive(Clone, Debug)]
struct LayerLayout {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln1: (usize, usize),
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2: (usize, usize),
    stack: Option<(usize, usize)>,
    relative: Option<(usize, usize, usize)>,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    layers: Vec<LayerLayout>,
    out_w: usize,
    out_b: usize,
}

impl Layout {
    fn build(cfg: &ModelConfig, vocab: usize, classes: usize, init: &mut Initializer) -> (Self, ParamStore) {
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let mut store = ParamStore::default();
        let mut add = |name: String, shape: &[usize], how: Init| store.push(name, init.draw(shape, how));
        let affine = |fan_in| Init::Uniform { fan_in };

        let embed = add("embed".into(), &[vocab, d], Init::Normal { std: 0.02 });
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = |s: &str| format!("layer{l}.{s}");
                LayerLayout {
                    wq: add(p("attn.wq"), &[d, d], affine(d)),
                    wk: add(p("attn.wk"), &[d, d], affine(d)),
                    wv: add(p("attn.wv"), &[d, d], affine(d)),
                    wo: add(p("attn.wo"), &[d, d], affine(d)),
                    relative: (cfg.pe == PeKind::Relative).then(|| {
                        (
                            add(p("rel.w_r"), &[d, d], affine(d)),
                            add(p("rel.u"), &[d], Init::Zeros),
                            add(p("rel.v"), &[d], Init::Zeros),
                        )
                    }),
                    ln1: (add(p("ln1.gain"), &[d], Init::Ones), add(p("ln1.bias"), &[d], Init::Zeros)),
                    w1: add(p("ffn.w1"), &[d, f], affine(d)),
                    b1: add(p("ffn.b1"), &[f], Init::Zeros),
                    w2: add(p("ffn.w2"), &[f, d], affine(f)),
                    b2: add(p("ffn.b2"), &[d], Init::Zeros),
                    ln2: (add(p("ln2.gain"), &[d], Init::Ones), add(p("ln2.bias"), &[d], Init::Zeros)),
                    stack: cfg
                        .stack
                        .then(|| (add(p("stack.w_a"), &[d, 3], affine(d)), add(p("stack.b_a"), &[3], Init::Zeros))),
                }
            })
            .collect();
        let out_w = add("out.w".into(), &[d, classes], affine(d));
        let out_b = add("out.b".into(), &[classes], Init::Zeros);
        (
            Self {
                embed,
                layers,
                out_w,
                out_b,
            },
            store,
        )
    }
}

/// Per-layer tensors recorded by a forward pass.
pub struct LayerTrace {
    pub attention: Vec<Var>,
    pub ffn_output: Var,
    pub output: Var,
    pub alphas: Option<Var>,
    pub actions: Option<Var>,
}

pub struct ForwardTrace {
    pub embedding: Var,
    pub layers: Vec<LayerTrace>,
    /// Final hidden states, `T×D`.
    pub hidden: Var,
    /// `T×K` logits over the output classes, one row per position.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    outputs: Vec<usize>,
    store: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let outputs = vocab.output_ids(config.mode);
        let (layout, store) = Layout::build(&config, vocab.len(), outputs.len(), &mut Initializer::new(seed));
        Ok(Self {
            config,
            vocab,
            outputs,
            store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Vocabulary id of each output class.
    pub fn output_ids(&self) -> &[usize] {
        &self.outputs
    }

    /// Output class of a vocabulary id, if the head covers it.
    pub fn class_of(&self, id: usize) -> Option<usize> {
        self.outputs.iter().position(|&o| o == id)
    }

    pub fn bind<F: Real>(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.store.bind(tape)
    }

    /// Parameters of layer `l` as bound on a tape.
    pub fn layer_params(&self, vars: &[Var], l: usize) -> LayerParams {
        let ll = &self.layout.layers[l];
        LayerParams {
            attn: AttentionParams {
                wq: vars[ll.wq],
                wk: vars[ll.wk],
                wv: vars[ll.wv],
                wo: vars[ll.wo],
            },
            ln1: NormParams {
                gain: vars[ll.ln1.0],
                bias: vars[ll.ln1.1],
            },
            ffn: FfnParams {
                w1: vars[ll.w1],
                b1: vars[ll.b1],
                w2: vars[ll.w2],
                b2: vars[ll.b2],
            },
            ln2: NormParams {
                gain: vars[ll.ln2.0],
                bias: vars[ll.ln2.1],
            },
            stack: ll.stack.map(|(w_a, b_a)| StackParams {
                w_a: vars[w_a],
                b_a: vars[b_a],
            }),
            relative: ll.relative.map(|(w_r, u, v)| RelativeParams {
                w_r: vars[w_r],
                u: vars[u],
                v: vars[v],
            }),
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.first() != Some(&BOS) {
            return Err(Error::Task("sequence must start with [BOS]".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::UnknownToken(format!("id {bad}")));
        }
        Ok(())
    }

    /// Attention mask for the configured mode: none for masked modeling, the
    /// future mask (with the [BOS] self-loop) for autoregressive modeling.
    pub fn mask(&self, t: usize) -> Option<AttentionMask> {
        match self.config.mode {
            Mode::Mlm => None,
            Mode::Alm => Some(AttentionMask::future_with_bos(t)),
        }
    }

    fn position_bias<F: Real>(&self, tape: &mut Tape<F>, t: usize, layer: &LayerParams) -> Result<PositionBias<F>> {
        let d = self.config.d_model;
        let heads = self.config.heads;
        Ok(match self.config.pe {
            PeKind::None | PeKind::Sincos => PositionBias::None,
            PeKind::Rotary => {
                let (cos, sin) = position::rotary_tables(t, d / heads);
                PositionBias::Rotary {
                    cos: cos.into_iter().map(F::c).collect(),
                    sin: sin.into_iter().map(F::c).collect(),
                }
            }
            PeKind::Alibi => PositionBias::Additive(
                position::alibi_slopes(heads)
                    .into_iter()
                    .map(|s| Tensor::from_f64(&[t, t], &position::alibi_bias(t, s)))
                    .collect::<std::result::Result<_, NumericsError>>()?,
            ),
            PeKind::Relative => {
                let rel = layer.relative.ok_or_else(|| Error::Config("missing relative parameters".into()))?;
                let table = tape.constant(Tensor::from_f64(&[2 * t - 1, d], &position::relative_table(t, d))?);
                PositionBias::Relative {
                    rel_keys: tape.matmul(table, rel.w_r)?,
                    u: rel.u,
                    v: rel.v,
                }
            }
        })
    }

    /// Runs the full model over `tokens` (which must start with [BOS]).
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, vars: &[Var], tokens: &[usize]) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let t = tokens.len();
        let heads = self.config.attention();
        let mask = self.mask(t);
        let embedding = embed(tape, vars[self.layout.embed], tokens, self.config.pe)?;
        let mut h = embedding;
        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let p = self.layer_params(vars, l);
            let position = self.position_bias(tape, t, &p)?;
            let out = transformer_layer(tape, h, &p, &heads, mask.as_ref(), &position)?;
            h = out.output;
            layers.push(LayerTrace {
                attention: out.attention,
                ffn_output: out.ffn_output,
                output: out.output,
                alphas: out.alphas,
                actions: out.actions,
            });
        }
        let logits = tape.matmul(h, vars[self.layout.out_w])?;
        let logits = tape.add_row(logits, vars[self.layout.out_b])?;
        Ok(ForwardTrace {
            embedding,
            layers,
            hidden: h,
            logits,
        })
    }

    /// Logits over the output classes for the `N` real positions of a
    /// masked sequence `[BOS]·w̃`, as an `N×K` tensor.
    pub fn mlm_logits<F: Real>(&self, tape: &mut Tape<F>, vars: &[Var], tokens: &[usize]) -> Result<Var> {
        if self.config.mode != Mode::Mlm {
            return Err(Error::Config("mlm_logits needs an mlm model".into()));
        }
        if !tokens.contains(&MASK) {
            return Err(Error::Task("masked input contains no [MASK]".into()));
        }
        let trace = self.forward(tape, vars, tokens)?;
        let rows: Vec<usize> = (1..tokens.len()).collect();
        Ok(tape.gather_rows(trace.logits, &rows)?)
    }

    /// Next-token logits `[K]` after the prefix `[BOS]·w`.
    pub fn alm_logits<F: Real>(&self, tape: &mut Tape<F>, vars: &[Var], prefix: &[usize]) -> Result<Var> {
        if self.config.mode != Mode::Alm {
            return Err(Error::Config("alm_logits needs an alm model".into()));
        }
        let trace = self.forward(tape, vars, prefix)?;
        Ok(tape.gather_rows(trace.logits, &[prefix.len() - 1])?)
    }

    /// Replaces the parameters, keeping config and vocabulary. Names and
    /// shapes must match exactly.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        if store.names() != self.store.names() {
            return Err(Error::Checkpoint("parameter names do not match the model".into()));
        }
        for ((name, a), b) in store.names().iter().zip(store.tensors()).zip(self.store.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        self.store = store;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
