use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tasks::Batch;

/// Checkpoints of one model variant, in training order.
#[derive(Debug, Clone)]
pub struct TrajectorySet<'a> {
    pub name: String,
    pub checkpoints: Vec<(usize, &'a Model)>,
}

/// 2-D coordinates of every checkpoint on the top two principal axes of the
/// pooled hidden states.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryProjection {
    /// `(variant, [(step, [x, y])])` in input order.
    pub variants: Vec<(String, Vec<(usize, [f64; 2])>)>,
    /// Share of total variance carried by each axis.
    pub explained_variance: [f64; 2],
    /// Numerical rank of the centered pooled matrix. Axes beyond it have zero
    /// variance and all points get coordinate 0 on them.
    pub rank: usize,
}

impl TrajectoryProjection {
    pub fn final_point(&self, variant: &str) -> Option<[f64; 2]> {
        self.variants
            .iter()
            .find(|v| v.0 == variant)
            .and_then(|v| v.1.last())
            .map(|p| p.1)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "step", "pc1", "pc2"])?;
        for (name, pts) in &self.variants {
            for (s, [x, y]) in pts {
                w.write_record([name.clone(), s.to_string(), format!("{x:.17e}"), format!("{y:.17e}")])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Flattened hidden states of all layers at the valid positions of `probe`.
pub fn checkpoint_features(model: &Model, probe: &Batch) -> Result<Vec<f64>> {
    let trace = model.trace(probe)?;
    let mut out = Vec::new();
    for layer in &trace.layers {
        let (n, d) = (layer.shape()[1], layer.shape()[2]);
        for (b, &len) in probe.lengths.iter().enumerate() {
            out.extend_from_slice(&layer.data()[b * n * d..(b * n + len) * d]);
        }
    }
    Ok(out)
}

/// Eigen-decomposition of a symmetric `n×n` row-major matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in descending order and the matching
/// eigenvectors as columns of a row-major matrix.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
        if off <= 1e-30 * diag || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let vals = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (c, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs[r * n + c] = v[r * n + src];
        }
    }
    (vals, vecs)
}

/// PCA of pre-computed feature vectors, one per checkpoint.
pub fn project(variants: &[(String, Vec<(usize, Vec<f64>)>)]) -> Result<TrajectoryProjection> {
    let rows: Vec<&Vec<f64>> = variants.iter().flat_map(|v| v.1.iter().map(|c| &c.1)).collect();
    let m = rows.len();
    if m < 2 {
        return Err(Error::Degenerate(format!("need at least 2 checkpoints, got {m}")));
    }
    let d = rows[0].len();
    if d == 0 {
        return Err(Error::Degenerate("checkpoints produced no hidden features".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::shape("trajectory_projection", format!("feature length {} vs {d}", r.len())));
    }
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (m, x) in mean.iter_mut().zip(r.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|x| *x /= m as f64);
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, mu)| x - mu).collect())
        .collect();

    // Gram matrix X Xᵀ shares its nonzero spectrum with the covariance.
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let g: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            gram[i * m + j] = g;
            gram[j * m + i] = g;
        }
    }
    let (vals, vecs) = jacobi_eigen(&gram, m);
    let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    let tol = 1e-12 * total;
    let rank = vals.iter().filter(|&&v| v > tol && v > 0.0).count();

    let mut coords = vec![[0.0; 2]; m];
    let mut explained = [0.0; 2];
    for k in 0..2.min(rank) {
        let lambda = vals[k];
        let col: Vec<f64> = (0..m).map(|i| vecs[i * m + k]).collect();
        // feature-space axis u = Xᵀv / |Xᵀv|; points are X u so equal rows coincide
        let mut axis = vec![0.0; d];
        for (row, &c) in centered.iter().zip(&col) {
            for (a, x) in axis.iter_mut().zip(row) {
                *a += x * c;
            }
        }
        let norm = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
        let thresh = 1e-9 * norm / (d as f64).sqrt();
        // sign: first clearly nonzero loading is positive
        let sign = axis.iter().find(|a| a.abs() > thresh).map_or(1.0, |a| a.signum());
        axis.iter_mut().for_each(|a| *a *= sign / norm);
        for (row, c) in centered.iter().zip(coords.iter_mut()) {
            c[k] = row.iter().zip(&axis).map(|(x, a)| x * a).sum();
        }
        explained[k] = lambda / total;
    }

    let mut it = coords.into_iter();
    let variants = variants
        .iter()
        .map(|(name, cps)| {
            let pts = cps.iter().map(|(s, _)| (*s, it.next().unwrap())).collect();
            (name.clone(), pts)
        })
        .collect();
    Ok(TrajectoryProjection {
        variants,
        explained_variance: explained,
        rank,
    })
}

/// Hidden-state trajectories of several variants on a shared probe batch.
pub fn trajectory_projection(sets: &[TrajectorySet], probe: &Batch) -> Result<TrajectoryProjection> {
    let mut feats = Vec::with_capacity(sets.len());
    for set in sets {
        let cps = set
            .checkpoints
            .iter()
            .map(|(s, m)| Ok((*s, checkpoint_features(m, probe)?)))
            .collect::<Result<Vec<_>>>()?;
        feats.push((set.name.clone(), cps));
    }
    project(&feats)
}
