use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{HiddenTrace, Model};
use crate::numcore::Rng;
use crate::tasks::{Batch, Dataset};

/// Mean cosine distance to the source model, one point per checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftCurve {
    /// `(checkpoint step, mean distance)` in increasing step order.
    pub points: Vec<(usize, f64)>,
}

impl ShiftCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "mean_cosine_distance"])?;
        for (s, d) in &self.points {
            w.write_record([s.to_string(), format!("{d:.17e}")])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `1 - cos(a, b)`. Two zero vectors are at distance 0; a zero vector and a
/// nonzero one are at distance 1.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    match (aa == 0.0, bb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        // sqrt(aa * aa) == aa exactly, so identical vectors give exactly 0
        _ => (1.0 - ab / (aa * bb).sqrt()).clamp(0.0, 2.0),
    }
}

/// Mean distance over every (sample, valid position, layer) hidden vector.
pub fn mean_cosine_distance(a: &HiddenTrace, b: &HiddenTrace, lengths: &[usize]) -> Result<f64> {
    if a.layers.len() != b.layers.len() {
        return Err(Error::shape("hidden_shift", format!("{} vs {} layers", a.layers.len(), b.layers.len())));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        if la.shape() != lb.shape() || la.ndim() != 3 || la.shape()[0] != lengths.len() {
            return Err(Error::shape("hidden_shift", format!("{:?} vs {:?}", la.shape(), lb.shape())));
        }
        let (n, d) = (la.shape()[1], la.shape()[2]);
        for (bi, &len) in lengths.iter().enumerate() {
            for t in 0..len.min(n) {
                let off = (bi * n + t) * d;
                total += cosine_distance(&la.data()[off..off + d], &lb.data()[off..off + d]);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Invalid("no hidden vectors to compare".into()));
    }
    Ok(total / count as f64)
}

/// `samples` distinct examples of `data` chosen by `seed`.
pub fn probe_batch(data: &Dataset, samples: usize, seed: u64) -> Result<Batch> {
    if samples == 0 || samples > data.len() {
        return Err(Error::Invalid(format!("need 1..={} probe samples, got {samples}", data.len())));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    Rng::new(seed, 0x7072_6f62_65).shuffle(&mut idx);
    idx.truncate(samples);
    Ok(data.batch(&idx))
}

/// Shift of each checkpoint away from `source` on a fixed probe batch.
pub fn hidden_shift(source: &Model, checkpoints: &[(usize, &Model)], probe: &Batch) -> Result<ShiftCurve> {
    let base = source.trace(probe)?;
    let mut ordered: Vec<&(usize, &Model)> = checkpoints.iter().collect();
    ordered.sort_by_key(|c| c.0);
    let mut points = Vec::with_capacity(ordered.len());
    for (step, m) in ordered {
        if m.spec().blocks.len() != source.spec().blocks.len() || m.spec().width != source.spec().width {
            return Err(Error::shape("hidden_shift", format!("checkpoint at step {step} differs structurally")));
        }
        let tr = m.trace(probe)?;
        points.push((*step, mean_cosine_distance(&base, &tr, &probe.lengths)?));
    }
    Ok(ShiftCurve { points })
}
