//! Sequence mixers and feed-forward blocks built on the tape.
//!
//! All mixers take and return `[B, N, D]` activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Var};
use crate::scan::Direction;

/// Query/key/value/output projections of one multi-head attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub heads: usize,
}

/// How Linformer's E and F projections are shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShareMode {
    /// Separate E and F in every block.
    None,
    /// E = F within each block.
    Kv,
    /// One E = F array for all blocks.
    Layer,
}

/// Attention projections plus the `[k, N_max]` length projections E and F.
///
/// Under [`ShareMode::Kv`] or [`ShareMode::Layer`], `e` and `f` are the same variable.
#[derive(Debug, Clone, Copy)]
pub struct LinformerParams {
    pub attn: AttentionParams,
    pub e: Var,
    pub f: Var,
}

/// Selective state-space mixer with expand factor 1.
#[derive(Debug, Clone, Copy)]
pub struct SsmParams {
    pub in_w: Var,
    pub in_b: Var,
    pub dt_w: Var,
    pub dt_b: Var,
    /// `A = -exp(a_log)`, shape `[D, S]`.
    pub a_log: Var,
    pub b: Var,
    pub c: Var,
    pub out_w: Var,
    pub out_b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gain: Var,
    pub bias: Var,
}

/// Attention masking options.
#[derive(Debug, Clone, Default)]
pub struct AttentionMask<'a> {
    pub causal: bool,
    /// Valid length per batch row; keys past it are masked.
    pub lengths: Option<&'a [usize]>,
}

impl AttentionMask<'_> {
    fn build(&self, batch: usize, heads: usize, n: usize) -> Option<Vec<bool>> {
        let padded = self.lengths.is_some_and(|l| l.iter().any(|&x| x < n));
        if !self.causal && !padded {
            return None;
        }
        let mut m = Vec::with_capacity(batch * heads * n * n);
        for b in 0..batch {
            let len = self.lengths.map_or(n, |l| l[b]);
            for _ in 0..heads {
                for i in 0..n {
                    for j in 0..n {
                        m.push((self.causal && j > i) || j >= len);
                    }
                }
            }
        }
        Some(m)
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

fn dims3(tape: &Tape, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [b, n, d] => Ok((b, n, d)),
        ref s => Err(Error::shape(op, format!("expected [B, N, D], got {s:?}"))),
    }
}

pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

pub fn layernorm(tape: &mut Tape, x: Var, p: &NormParams) -> Result<Var> {
    tape.layernorm(x, p.gain, p.bias, LAYERNORM_EPS)
}

pub fn feed_forward(tape: &mut Tape, x: Var, p: &FfnParams) -> Result<Var> {
    let h = linear(tape, x, p.w1, p.b1)?;
    let h = tape.gelu(h)?;
    linear(tape, h, p.w2, p.b2)
}

/// `[B, N, D] -> [B, H, N, D/H]`
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let (b, n, d) = dims3(tape, x, "split_heads")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("attention", format!("width {d} not divisible by {heads} heads")));
    }
    let r = tape.reshape(x, &[b, n, heads, d / heads])?;
    tape.permute_0213(r)
}

fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute_0213(x)?;
    tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

fn qkv(tape: &mut Tape, x: Var, p: &AttentionParams) -> Result<(Var, Var, Var)> {
    let q = linear(tape, x, p.wq, p.bq)?;
    let k = linear(tape, x, p.wk, p.bk)?;
    let v = linear(tape, x, p.wv, p.bv)?;
    Ok((
        split_heads(tape, q, p.heads)?,
        split_heads(tape, k, p.heads)?,
        split_heads(tape, v, p.heads)?,
    ))
}

/// Multi-head `softmax(QKᵀ/√d) V`, heads concatenated and output-projected.
pub fn standard_attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionParams,
    mask: &AttentionMask,
) -> Result<Var> {
    let (b, n, d) = dims3(tape, x, "attention")?;
    let (q, k, v) = qkv(tape, x, p)?;
    let head_dim = d / p.heads;
    let kt = tape.transpose_last2(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
    if let Some(m) = mask.build(b, p.heads, n) {
        scores = tape.mask_scores(scores, m)?;
    }
    let weights = tape.softmax(scores)?;
    let ctx = tape.matmul(weights, v)?;
    let merged = merge_heads(tape, ctx)?;
    linear(tape, merged, p.wo, p.bo)
}

/// Low-rank attention `softmax(Q (E K)ᵀ/√d) (F V)` per head.
///
/// For sequences shorter than `N_max` the projections are truncated to their
/// first `N` columns. Causal masking and padded batches are not supported.
pub fn linformer_attention(
    tape: &mut Tape,
    x: Var,
    p: &LinformerParams,
    mask: &AttentionMask,
) -> Result<Var> {
    let (_, n, d) = dims3(tape, x, "linformer")?;
    if mask.causal {
        return Err(Error::Unsupported("causal Linformer attention".into()));
    }
    if mask.lengths.is_some_and(|l| l.iter().any(|&len| len < n)) {
        return Err(Error::Unsupported("padded batches in Linformer attention".into()));
    }
    let n_max = tape.shape(p.e)[1];
    if n > n_max {
        return Err(Error::Invalid(format!(
            "sequence length {n} exceeds Linformer N_max {n_max}"
        )));
    }
    let (q, k, v) = qkv(tape, x, &p.attn)?;
    let head_dim = d / p.attn.heads;
    let e = tape.slice_cols(p.e, n)?;
    let f = if p.f == p.e { e } else { tape.slice_cols(p.f, n)? };
    let ek = tape.matmul(e, k)?;
    let fv = tape.matmul(f, v)?;
    let ekt = tape.transpose_last2(ek)?;
    let scores = tape.matmul(q, ekt)?;
    let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
    let weights = tape.softmax(scores)?;
    let ctx = tape.matmul(weights, fv)?;
    let merged = merge_heads(tape, ctx)?;
    linear(tape, merged, p.attn.wo, p.attn.bo)
}

/// Input projection, selective scan, output projection.
///
/// `Δ = softplus(x W_dt + b_dt)` depends on the input. The backward direction
/// runs the whole mixer on the time-reversed input and reverses its output.
pub fn ssm_mixer(tape: &mut Tape, x: Var, p: &SsmParams, direction: Direction) -> Result<Var> {
    dims3(tape, x, "ssm")?;
    let x = match direction {
        Direction::Forward => x,
        Direction::Backward => tape.reverse_time(x)?,
    };
    let u = linear(tape, x, p.in_w, p.in_b)?;
    let dt = linear(tape, x, p.dt_w, p.dt_b)?;
    let delta = tape.softplus(dt)?;
    let y = tape.ssm_scan(u, delta, p.a_log, p.b, p.c)?;
    let out = linear(tape, y, p.out_w, p.out_b)?;
    match direction {
        Direction::Forward => Ok(out),
        Direction::Backward => tape.reverse_time(out),
    }
}

/// Sum of a forward mixer and a time-inverted backward mixer.
pub fn bidirectional_mixer(tape: &mut Tape, x: Var, fwd: &SsmParams, bwd: &SsmParams) -> Result<Var> {
    let wf = tape.shape(fwd.in_w).to_vec();
    let wb = tape.shape(bwd.in_w).to_vec();
    if wf != wb || tape.shape(fwd.a_log) != tape.shape(bwd.a_log) {
        return Err(Error::shape(
            "bidirectional_mixer",
            format!("forward {wf:?} vs backward {wb:?}"),
        ));
    }
    let yf = ssm_mixer(tape, x, fwd, Direction::Forward)?;
    let yb = ssm_mixer(tape, x, bwd, Direction::Backward)?;
    tape.add(yf, yb)
}
