//! Cross-entropy, output distillation and layerwise distillation losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LAYERNORM_EPS;
use crate::numcore::tape::{logsumexp, softmax_row};
use crate::numcore::{Tape, Tensor, Var};

/// Loss weights `α_CE`, `α_KD`, `α_LD`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub kd: f64,
    pub ld: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            kd: 0.0,
            ld: 15.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_ce", self.ce), ("alpha_kd", self.kd), ("alpha_ld", self.ld)] {
            if !(a.is_finite() && a >= 0.0) {
                return Err(Error::Invalid(format!("{name} must be finite and >= 0, got {a}")));
            }
        }
        Ok(())
    }
}

/// How the output distillation term applies the temperature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdForm {
    /// `KL(softmax(t/β) ‖ softmax(s/β))`.
    #[default]
    SoftmaxTemperature,
    /// `(1/β) · KL(softmax(t) ‖ softmax(s))`: probabilities divided by β.
    Literal,
}

/// `α_CE·ce + α_KD·kd + α_LD·ld`
pub fn loss_total(ce: f64, kd: f64, ld: f64, w: &LossWeights) -> f64 {
    w.ce * ce + w.kd * kd + w.ld * ld
}

fn rows_of(tape: &Tape, logits: Var) -> (usize, usize) {
    let c = tape.value(logits).last_dim();
    (tape.value(logits).len() / c, c)
}

fn row_mask(rows: usize, mask: Option<&[bool]>) -> Result<Option<Vec<f64>>> {
    match mask {
        None => Ok(None),
        Some(m) if m.len() != rows => Err(Error::shape(
            "loss mask",
            format!("{} mask entries for {rows} rows", m.len()),
        )),
        Some(m) if m.iter().all(|&v| v) => Ok(None),
        Some(m) => Ok(Some(m.iter().map(|&v| f64::from(u8::from(v))).collect())),
    }
}

/// Mean over rows of `-log softmax(logits)[label]`.
///
/// `logits` is `[R, C]` or `[B, N, V]` (flattened to rows). `mask` drops rows,
/// e.g. padded language-model positions.
pub fn loss_ce(tape: &mut Tape, logits: Var, labels: &[usize], mask: Option<&[bool]>) -> Result<Var> {
    let (rows, c) = rows_of(tape, logits);
    if labels.len() != rows {
        return Err(Error::shape("loss_ce", format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Invalid(format!("label {bad} outside {c} classes")));
    }
    let flat = tape.reshape(logits, &[rows, c])?;
    let ls = tape.log_softmax(flat)?;
    let mut picked = tape.pick(ls, labels)?;
    let mut count = rows;
    if let Some(m) = row_mask(rows, mask)? {
        count = m.iter().filter(|&&v| v > 0.0).count();
        let mv = tape.constant(Tensor::new(&[rows], m)?);
        picked = tape.mul(picked, mv)?;
    }
    if count == 0 {
        return Err(Error::Invalid("loss_ce over zero valid rows".into()));
    }
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / count as f64)
}

/// Output distillation, averaged over (valid) rows. See [`KdForm`].
pub fn loss_kd(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    beta: f64,
    form: KdForm,
    mask: Option<&[bool]>,
) -> Result<Var> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Invalid(format!("temperature must be > 0, got {beta}")));
    }
    if tape.shape(student_logits) != teacher_logits.shape() {
        return Err(Error::shape(
            "loss_kd",
            format!(
                "student {:?} vs teacher {:?}",
                tape.shape(student_logits),
                teacher_logits.shape()
            ),
        ));
    }
    let (rows, c) = rows_of(tape, student_logits);
    let inv_t = match form {
        KdForm::SoftmaxTemperature => 1.0 / beta,
        KdForm::Literal => 1.0,
    };
    // teacher probabilities and log-probabilities, computed exactly as log_softmax does
    let mut scaled = teacher_logits.clone();
    scaled.data_mut().iter_mut().for_each(|x| *x *= inv_t);
    let mut p = scaled.data().to_vec();
    let mut logp = scaled.data().to_vec();
    for (prow, lrow) in p.chunks_mut(c).zip(logp.chunks_mut(c)) {
        softmax_row(prow);
        let lse = logsumexp(lrow);
        lrow.iter_mut().for_each(|x| *x -= lse);
    }
    let mut count = rows;
    if let Some(m) = row_mask(rows, mask)? {
        count = m.iter().filter(|&&v| v > 0.0).count();
        for (prow, &keep) in p.chunks_mut(c).zip(&m) {
            prow.iter_mut().for_each(|x| *x *= keep);
        }
    }
    if count == 0 {
        return Err(Error::Invalid("loss_kd over zero valid rows".into()));
    }
    // Σ p log p, with 0 log 0 = 0
    let neg_entropy: f64 = p
        .iter()
        .zip(&logp)
        .map(|(&pi, &li)| if pi > 0.0 { pi * li } else { 0.0 })
        .sum();

    let flat = tape.reshape(student_logits, &[rows, c])?;
    let z = if inv_t == 1.0 { flat } else { tape.scale(flat, inv_t)? };
    let ls = tape.log_softmax(z)?;
    let pv = tape.constant(Tensor::new(&[rows, c], p)?);
    let cross = tape.mul(ls, pv)?;
    let cross = tape.sum(cross)?;
    let inv_n = 1.0 / count as f64;
    let cross = tape.scale(cross, -inv_n)?;
    let ent = tape.constant(Tensor::scalar(neg_entropy * inv_n));
    let kl = tape.add(cross, ent)?;
    match form {
        KdForm::SoftmaxTemperature => Ok(kl),
        KdForm::Literal => tape.scale(kl, 1.0 / beta),
    }
}

/// Gain and bias of the norm applied to one layer's hidden states before the MSE.
pub type LdNorm = (Tensor, Tensor);

/// Mean squared difference over every valid hidden vector of every layer.
///
/// Traces are `[B, N, D]` per layer. With `norms`, both traces first pass
/// through layer normalization with the given affine parameters (one pair per
/// layer). Positions at or past `lengths[b]` are excluded.
pub fn loss_ld(
    tape: &mut Tape,
    student: &[Var],
    teacher: &[Tensor],
    norms: Option<&[LdNorm]>,
    lengths: &[usize],
) -> Result<Var> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::shape(
            "loss_ld",
            format!("{} student layers vs {} teacher layers", student.len(), teacher.len()),
        ));
    }
    if let Some(n) = norms {
        if n.len() != student.len() {
            return Err(Error::shape("loss_ld", "one norm per layer required"));
        }
    }
    let shape = teacher[0].shape().to_vec();
    let [b, n, d] = shape[..] else {
        return Err(Error::shape("loss_ld", format!("expected [B, N, D], got {shape:?}")));
    };
    if lengths.len() != b || lengths.iter().any(|&l| l > n) {
        return Err(Error::shape("loss_ld", format!("lengths {lengths:?} for [{b}, {n}, {d}]")));
    }
    let valid: usize = lengths.iter().sum();
    if valid == 0 {
        return Err(Error::Invalid("loss_ld over zero valid positions".into()));
    }
    let mask = (valid < b * n).then(|| {
        let mut m = Vec::with_capacity(b * n * d);
        for &len in lengths {
            for t in 0..n {
                m.extend(std::iter::repeat(f64::from(u8::from(t < len))).take(d));
            }
        }
        m
    });
    let mask = match mask {
        Some(m) => Some(tape.constant(Tensor::new(&shape, m)?)),
        None => None,
    };
    let mut total: Option<Var> = None;
    for (l, (&s, t)) in student.iter().zip(teacher).enumerate() {
        if tape.shape(s) != t.shape() || t.shape() != shape.as_slice() {
            return Err(Error::shape(
                "loss_ld",
                format!("layer {l}: student {:?} vs teacher {:?}", tape.shape(s), t.shape()),
            ));
        }
        let tv = tape.constant(t.clone());
        let (s, tv) = match norms {
            Some(norms) => {
                let (g, bias) = &norms[l];
                let g = tape.constant(g.clone());
                let bias = tape.constant(bias.clone());
                (
                    tape.layernorm(s, g, bias, LAYERNORM_EPS)?,
                    tape.layernorm(tv, g, bias, LAYERNORM_EPS)?,
                )
            }
            None => (s, tv),
        };
        let diff = tape.sub(s, tv)?;
        let mut sq = tape.mul(diff, diff)?;
        if let Some(m) = mask {
            sq = tape.mul(sq, m)?;
        }
        let part = tape.sum(sq)?;
        total = Some(match total {
            None => part,
            Some(acc) => tape.add(acc, part)?,
        });
    }
    let denom = (student.len() * valid * d) as f64;
    tape.scale(total.expect("non-empty"), 1.0 / denom)
}
