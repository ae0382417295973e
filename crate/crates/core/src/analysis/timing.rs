use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numcore::Rng;
use crate::tasks::Batch;

/// Something whose forward pass can be timed at a given sequence length.
pub trait Timeable {
    fn label(&self) -> String;

    /// Untimed setup before the runs at length `n`.
    fn prepare(&mut self, _n: usize) -> Result<()> {
        Ok(())
    }

    fn run(&mut self, n: usize) -> Result<()>;
}

/// Times `Model::logits` on a random batch.
pub struct ModelRunner {
    pub label: String,
    pub model: Model,
    pub batch_size: usize,
    pub seed: u64,
    batch: Option<Batch>,
}

impl ModelRunner {
    pub fn new(label: impl Into<String>, model: Model, batch_size: usize, seed: u64) -> Self {
        Self {
            label: label.into(),
            model,
            batch_size,
            seed,
            batch: None,
        }
    }
}

impl Timeable for ModelRunner {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn prepare(&mut self, n: usize) -> Result<()> {
        if n > self.model.spec().max_len {
            return Err(Error::Invalid(format!(
                "{}: length {n} exceeds max_len {}",
                self.label,
                self.model.spec().max_len
            )));
        }
        let mut rng = Rng::new(self.seed, n as u64);
        let vocab = self.model.spec().vocab as u64;
        let tokens = (0..self.batch_size * n).map(|_| rng.below(vocab) as usize).collect();
        let labels = vec![0; self.batch_size];
        self.batch = Some(Batch::from_tokens(tokens, labels, self.batch_size, n)?);
        Ok(())
    }

    fn run(&mut self, n: usize) -> Result<()> {
        let batch = match &self.batch {
            Some(b) if b.seq_len == n => b,
            _ => return Err(Error::Invalid("prepare was not called for this length".into())),
        };
        std::hint::black_box(self.model.logits(batch)?);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub label: String,
    pub length: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
    /// Least-squares slope of log(time) against log(length), per label.
    pub slopes: Vec<(String, f64)>,
}

impl TimingReport {
    pub fn slope(&self, label: &str) -> Option<f64> {
        self.slopes.iter().find(|s| s.0 == label).map(|s| s.1)
    }

    /// Mean time at the largest length over the mean at the next largest.
    pub fn top_ratio(&self, label: &str) -> Option<f64> {
        let mut rows: Vec<&TimingRow> = self.rows.iter().filter(|r| r.label == label).collect();
        rows.sort_by_key(|r| r.length);
        match rows.as_slice() {
            [.., a, b] => Some(b.mean_seconds / a.mean_seconds),
            _ => None,
        }
    }

    pub fn series(&self, label: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.label == label)
            .map(|r| (r.length as f64, r.mean_seconds))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["label", "length", "mean_seconds", "std_seconds", "runs", "slope"])?;
        for r in &self.rows {
            let slope = self.slope(&r.label).map(|s| format!("{s:.6}")).unwrap_or_default();
            w.write_record([
                r.label.clone(),
                r.length.to_string(),
                format!("{:.9e}", r.mean_seconds),
                format!("{:.9e}", r.std_seconds),
                r.runs.to_string(),
                slope,
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Wall-clock forward timing. Each (model, length) gets one discarded warmup
/// run followed by `runs` timed ones (at least 3).
pub fn timing_bench(models: &mut [Box<dyn Timeable>], lengths: &[usize], runs: usize) -> Result<TimingReport> {
    let mut distinct = lengths.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 4 || distinct[0] == 0 {
        return Err(Error::Invalid("timing needs at least 4 distinct positive lengths".into()));
    }
    let runs = runs.max(3);
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for m in models.iter_mut() {
        let label = m.label();
        for &n in &distinct {
            m.prepare(n)?;
            m.run(n)?;
            let times: Vec<f64> = (0..runs)
                .map(|_| {
                    let t0 = Instant::now();
                    m.run(n).map(|_| t0.elapsed().as_secs_f64())
                })
                .collect::<Result<_>>()?;
            let mean = times.iter().sum::<f64>() / runs as f64;
            let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
            rows.push(TimingRow {
                label: label.clone(),
                length: n,
                mean_seconds: mean,
                std_seconds: var.sqrt(),
                runs,
            });
        }
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.label == label)
            .map(|r| (r.length as f64, r.mean_seconds.max(1e-12)))
            .collect();
        slopes.push((label, fit_loglog_slope(&pts)));
    }
    Ok(TimingReport { rows, slopes })
}
