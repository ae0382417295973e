//! Pre-norm sequence models whose blocks differ only in their sequence mixer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    self, AttentionMask, AttentionParams, FfnParams, LinformerParams, NormParams, ShareMode,
    SsmParams,
};
use crate::numcore::{Rng, Tape, Tensor, Var};
use crate::scan::Direction;
use crate::tasks::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixerKind {
    Attention,
    Linformer,
    Ssm,
    BidirectionalSsm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum HeadKind {
    /// Linear layer after mean pooling over time.
    Classify { classes: usize },
    /// Per-position projection to the vocabulary.
    LanguageModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinformerSpec {
    pub rank: usize,
    pub sharing: ShareMode,
}

/// Architecture description. Serialized as canonical JSON inside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab: usize,
    /// Longest supported sequence (positional table rows, Linformer N_max).
    pub max_len: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub blocks: Vec<MixerKind>,
    pub head: HeadKind,
    #[serde(default)]
    pub causal: bool,
    #[serde(default)]
    pub linformer: Option<LinformerSpec>,
    /// SSM state dimension; 0 when no block uses an SSM mixer.
    #[serde(default)]
    pub ssm_state: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.vocab == 0 || self.max_len == 0 || self.width == 0 || self.ffn_hidden == 0 {
            return bad("vocab, max_len, width and ffn_hidden must be positive".into());
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if let HeadKind::Classify { classes: 0 } = self.head {
            return bad("classification head needs at least one class".into());
        }
        let uses = |k: MixerKind| self.blocks.contains(&k);
        if uses(MixerKind::Linformer) {
            match self.linformer {
                None => return bad("linformer blocks need a linformer spec".into()),
                Some(l) if l.rank == 0 || l.rank > self.max_len => {
                    return bad(format!("linformer rank {} must be in 1..={}", l.rank, self.max_len))
                }
                _ => {}
            }
            if self.causal {
                return Err(Error::Unsupported("causal Linformer attention".into()));
            }
        }
        if (uses(MixerKind::Ssm) || uses(MixerKind::BidirectionalSsm)) && self.ssm_state == 0 {
            return bad("ssm blocks need ssm_state > 0".into());
        }
        if self.causal && uses(MixerKind::BidirectionalSsm) {
            return bad("bidirectional mixers cannot be causal".into());
        }
        Ok(())
    }

    pub fn to_canonical(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn out_dim(&self) -> usize {
        match self.head {
            HeadKind::Classify { classes } => classes,
            HeadKind::LanguageModel => self.vocab,
        }
    }

    /// Names of the Linformer projections used by `block`: `(E, F)`.
    pub fn linformer_names(&self, block: usize) -> (String, String) {
        match self.linformer.map(|l| l.sharing) {
            Some(ShareMode::Layer) => ("linformer.proj_ef".into(), "linformer.proj_ef".into()),
            Some(ShareMode::Kv) => {
                let n = format!("blocks.{block}.linformer.proj_ef");
                (n.clone(), n)
            }
            _ => (
                format!("blocks.{block}.linformer.proj_e"),
                format!("blocks.{block}.linformer.proj_f"),
            ),
        }
    }

    /// Every parameter name with its shape, in canonical order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let d = self.width;
        let mut m = BTreeMap::new();
        m.insert("embed.tok".into(), vec![self.vocab, d]);
        m.insert("embed.pos".into(), vec![self.max_len, d]);
        for (i, kind) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            for norm in ["norm1", "norm2"] {
                m.insert(format!("{p}.{norm}.gain"), vec![d]);
                m.insert(format!("{p}.{norm}.bias"), vec![d]);
            }
            m.insert(format!("{p}.ffn.w1"), vec![d, self.ffn_hidden]);
            m.insert(format!("{p}.ffn.b1"), vec![self.ffn_hidden]);
            m.insert(format!("{p}.ffn.w2"), vec![self.ffn_hidden, d]);
            m.insert(format!("{p}.ffn.b2"), vec![d]);
            match kind {
                MixerKind::Attention | MixerKind::Linformer => {
                    for w in ["wq", "wk", "wv", "wo"] {
                        m.insert(format!("{p}.attn.{w}"), vec![d, d]);
                    }
                    for b in ["bq", "bk", "bv", "bo"] {
                        m.insert(format!("{p}.attn.{b}"), vec![d]);
                    }
                    if *kind == MixerKind::Linformer {
                        let rank = self.linformer.map_or(0, |l| l.rank);
                        let (e, f) = self.linformer_names(i);
                        m.insert(e, vec![rank, self.max_len]);
                        m.insert(f, vec![rank, self.max_len]);
                    }
                }
                MixerKind::Ssm => insert_ssm(&mut m, &format!("{p}.ssm"), d, self.ssm_state),
                MixerKind::BidirectionalSsm => {
                    insert_ssm(&mut m, &format!("{p}.ssm_fwd"), d, self.ssm_state);
                    insert_ssm(&mut m, &format!("{p}.ssm_bwd"), d, self.ssm_state);
                }
            }
        }
        m.insert("final_norm.gain".into(), vec![d]);
        m.insert("final_norm.bias".into(), vec![d]);
        m.insert("head.w".into(), vec![d, self.out_dim()]);
        m.insert("head.b".into(), vec![self.out_dim()]);
        m
    }
}

fn insert_ssm(m: &mut BTreeMap<String, Vec<usize>>, p: &str, d: usize, s: usize) {
    for w in ["in_w", "dt_w", "out_w"] {
        m.insert(format!("{p}.{w}"), vec![d, d]);
    }
    for b in ["in_b", "dt_b", "out_b"] {
        m.insert(format!("{p}.{b}"), vec![d]);
    }
    for x in ["a_log", "b", "c"] {
        m.insert(format!("{p}.{x}"), vec![d, s]);
    }
}

/// True for parameters that belong to a sequence mixer.
pub fn is_mixer_param(name: &str) -> bool {
    name.starts_with("linformer.")
        || [".attn.", ".linformer.", ".ssm.", ".ssm_fwd.", ".ssm_bwd."]
            .iter()
            .any(|tag| name.contains(tag))
}

pub fn is_attention_param(name: &str) -> bool {
    name.contains(".attn.")
}

/// Parameters of a freshly initialized SSM mixer.
pub mod ssm_init {
    /// Initial step size after the softplus.
    pub const DELTA_INIT: f64 = 0.1;
    pub const B_STD: f64 = 1.0;
    pub const C_STD: f64 = 0.1;
    pub const DT_W_STD: f64 = 0.01;

    /// Bias that makes `softplus(bias) == DELTA_INIT`.
    pub fn dt_bias() -> f64 {
        DELTA_INIT.exp_m1().ln()
    }
}

/// Architecture plus a named parameter table.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: BTreeMap<String, Tensor>,
}

/// Hidden states captured after each block's feed-forward residual, plus logits.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub layers: Vec<Tensor>,
    pub logits: Tensor,
}

/// Tape handles produced by [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub trace: Vec<Var>,
    pub params: BTreeMap<String, Var>,
}

impl Model {
    /// Random initialization.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed, 0x6d6f_6465_6c00);
        let mut params = BTreeMap::new();
        for (name, shape) in spec.param_shapes() {
            let t = init_param(&name, &shape, &mut rng);
            params.insert(name, t);
        }
        Ok(Self { spec, params })
    }

    /// Assemble from an explicit table; every expected name must be present
    /// with the expected shape and nothing else.
    pub fn from_params(spec: ModelSpec, params: BTreeMap<String, Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        for (name, shape) in &shapes {
            match params.get(name) {
                None => return Err(Error::Invalid(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::shape(
                        "parameter",
                        format!("{name}: expected {shape:?}, got {:?}", t.shape()),
                    ))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !shapes.contains_key(*k)) {
            return Err(Error::Invalid(format!("unexpected parameter {extra}")));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// E and F as seen by `block`. Shared modes return the same array.
    pub fn linformer_projections(&self, block: usize) -> Option<(&Tensor, &Tensor)> {
        if self.spec.blocks.get(block) != Some(&MixerKind::Linformer) {
            return None;
        }
        let (e, f) = self.spec.linformer_names(block);
        Some((self.params.get(&e)?, self.params.get(&f)?))
    }

    /// Bitwise parameter equality.
    pub fn bit_eq(&self, other: &Model) -> bool {
        self.spec == other.spec
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    /// Load every parameter onto `tape` (trainable on a recording tape).
    pub fn load_params(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t.clone())))
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<ForwardOutput> {
        let params = self.load_params(tape);
        self.forward_with(tape, batch, params)
    }

    /// Forward pass using parameter variables already on the tape.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        params: BTreeMap<String, Var>,
    ) -> Result<ForwardOutput> {
        let spec = &self.spec;
        let (b, n, d) = (batch.batch, batch.seq_len, spec.width);
        if n > spec.max_len {
            return Err(Error::Invalid(format!(
                "sequence length {n} exceeds max_len {}",
                spec.max_len
            )));
        }
        if batch.tokens.len() != b * n || batch.lengths.len() != b {
            return Err(Error::shape("forward", "batch tokens/lengths do not match dimensions"));
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t >= spec.vocab) {
            return Err(Error::Invalid(format!("token {t} outside vocabulary {}", spec.vocab)));
        }
        let p = |name: &str| -> Var { params[name] };

        let tok = tape.embedding(p("embed.tok"), &batch.tokens)?;
        let tok = tape.reshape(tok, &[b, n, d])?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.embedding(p("embed.pos"), &positions)?;
        let mut x = tape.add(tok, pos)?;

        let mask = AttentionMask {
            causal: spec.causal,
            lengths: Some(&batch.lengths),
        };
        let mut trace = Vec::with_capacity(spec.blocks.len());
        for (i, kind) in spec.blocks.iter().enumerate() {
            let pre = format!("blocks.{i}");
            let norm1 = norm_params(&params, &format!("{pre}.norm1"));
            let h = layers::layernorm(tape, x, &norm1)?;
            let mixed = match kind {
                MixerKind::Attention => {
                    let ap = attn_params(&params, &pre, spec.heads);
                    layers::standard_attention(tape, h, &ap, &mask)?
                }
                MixerKind::Linformer => {
                    let (e, f) = spec.linformer_names(i);
                    let lp = LinformerParams {
                        attn: attn_params(&params, &pre, spec.heads),
                        e: params[&e],
                        f: params[&f],
                    };
                    layers::linformer_attention(tape, h, &lp, &mask)?
                }
                MixerKind::Ssm => {
                    let sp = ssm_params(&params, &format!("{pre}.ssm"));
                    layers::ssm_mixer(tape, h, &sp, Direction::Forward)?
                }
                MixerKind::BidirectionalSsm => {
                    let fwd = ssm_params(&params, &format!("{pre}.ssm_fwd"));
                    let bwd = ssm_params(&params, &format!("{pre}.ssm_bwd"));
                    layers::bidirectional_mixer(tape, h, &fwd, &bwd)?
                }
            };
            x = tape.add(x, mixed)?;
            let norm2 = norm_params(&params, &format!("{pre}.norm2"));
            let h = layers::layernorm(tape, x, &norm2)?;
            let ffn = FfnParams {
                w1: p(&format!("{pre}.ffn.w1")),
                b1: p(&format!("{pre}.ffn.b1")),
                w2: p(&format!("{pre}.ffn.w2")),
                b2: p(&format!("{pre}.ffn.b2")),
            };
            let f = layers::feed_forward(tape, h, &ffn)?;
            x = tape.add(x, f)?;
            trace.push(x);
        }

        let final_norm = norm_params(&params, "final_norm");
        let xf = layers::layernorm(tape, x, &final_norm)?;
        let logits = match spec.head {
            HeadKind::Classify { .. } => {
                let pooled = tape.mean_time(xf, &batch.lengths)?;
                layers::linear(tape, pooled, p("head.w"), p("head.b"))?
            }
            HeadKind::LanguageModel => layers::linear(tape, xf, p("head.w"), p("head.b"))?,
        };
        Ok(ForwardOutput {
            logits,
            trace,
            params,
        })
    }

    /// Gradient-free forward returning owned hidden states and logits.
    pub fn trace(&self, batch: &Batch) -> Result<HiddenTrace> {
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, batch)?;
        Ok(HiddenTrace {
            layers: out.trace.iter().map(|v| tape.value(*v).clone()).collect(),
            logits: tape.value(out.logits).clone(),
        })
    }

    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        Ok(self.trace(batch)?.logits)
    }

    /// Layer-norm parameters applied to the hidden state leaving `block`:
    /// the next block's first norm, or the final norm after the last block.
    pub fn next_norm_names(&self, block: usize) -> (String, String) {
        if block + 1 < self.spec.blocks.len() {
            (
                format!("blocks.{}.norm1.gain", block + 1),
                format!("blocks.{}.norm1.bias", block + 1),
            )
        } else {
            ("final_norm.gain".into(), "final_norm.bias".into())
        }
    }
}

fn norm_params(params: &BTreeMap<String, Var>, prefix: &str) -> NormParams {
    NormParams {
        gain: params[&format!("{prefix}.gain")],
        bias: params[&format!("{prefix}.bias")],
    }
}

fn attn_params(params: &BTreeMap<String, Var>, pre: &str, heads: usize) -> AttentionParams {
    let g = |n: &str| params[&format!("{pre}.attn.{n}")];
    AttentionParams {
        wq: g("wq"),
        bq: g("bq"),
        wk: g("wk"),
        bk: g("bk"),
        wv: g("wv"),
        bv: g("bv"),
        wo: g("wo"),
        bo: g("bo"),
        heads,
    }
}

fn ssm_params(params: &BTreeMap<String, Var>, pre: &str) -> SsmParams {
    let g = |n: &str| params[&format!("{pre}.{n}")];
    SsmParams {
        in_w: g("in_w"),
        in_b: g("in_b"),
        dt_w: g("dt_w"),
        dt_b: g("dt_b"),
        a_log: g("a_log"),
        b: g("b"),
        c: g("c"),
        out_w: g("out_w"),
        out_b: g("out_b"),
    }
}

/// Initial value for a parameter, chosen by its name.
pub(crate) fn init_param(name: &str, shape: &[usize], rng: &mut Rng) -> Tensor {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "gain" => Tensor::ones(shape),
        "tok" | "pos" => Tensor::randn(shape, 1.0, rng),
        "proj_e" | "proj_f" | "proj_ef" => Tensor::randn(shape, 1.0, rng),
        "a_log" => {
            // A = diag(-1, -2, ..., -S) per channel
            let s = shape[1];
            let data = (0..shape[0] * s).map(|i| ((i % s + 1) as f64).ln()).collect();
            Tensor::new(shape, data).expect("shape")
        }
        "dt_b" => Tensor::full(shape, ssm_init::dt_bias()),
        "dt_w" => Tensor::randn(shape, ssm_init::DT_W_STD, rng),
        "b" if shape.len() == 2 => Tensor::randn(shape, ssm_init::B_STD, rng),
        "c" => Tensor::randn(shape, ssm_init::C_STD, rng),
        _ if shape.len() == 2 => Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), rng),
        _ => Tensor::zeros(shape),
    }
}
