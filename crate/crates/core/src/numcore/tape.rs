//! Dynamic reverse-mode differentiation tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a node
//! holding its output value and enough information to run its backward rule.
//! A tape created with [`Tape::no_grad`] records values only.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::fmath;
use crate::numcore::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::numcore::tensor::Tensor;
use crate::scan;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// One gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor>;
}

#[derive(Debug, Clone, Copy)]
enum MatmulLayout {
    /// `b` is 2-D; `a`'s batch axes fold into rows.
    Flat { rows: usize, k: usize, n: usize },
    /// `a` is 2-D and shared across the batches of `b`.
    SharedLeft { batches: usize, m: usize, k: usize, n: usize },
    Batched { batches: usize, m: usize, k: usize, n: usize },
}

enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    MatMul { a: Var, b: Var, layout: MatmulLayout },
    TransposeLast2 { a: Var },
    Permute0213 { a: Var },
    Reshape { a: Var },
    ReverseTime { a: Var },
    SliceCols { a: Var, keep: usize },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    Softplus { a: Var },
    Embedding { table: Var, indices: Vec<usize> },
    MaskScores { a: Var, masked: Vec<bool> },
    MeanTime { a: Var, lengths: Vec<usize> },
    Pick { a: Var, idx: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    SsmScan { u: Var, delta: Var, a_log: Var, b: Var, c: Var },
    Custom { inputs: Vec<Var>, op: Arc<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Value substituted for masked attention scores.
pub const MASKED_SCORE: f64 = -1e30;

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
        }
    }

    /// A tape that records values but no backward information.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericFault { op: name });
        }
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- elementwise -------------------------------------------------

    /// `a + b`, where `b`'s shape must equal a suffix of `a`'s shape (bias-style
    /// broadcast). Arguments are swapped if only the reverse holds.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (a, b) = if is_suffix(&sb, &sa) {
            (a, b)
        } else if is_suffix(&sa, &sb) {
            (b, a)
        } else {
            return Err(Error::shape("add", format!("{sa:?} + {sb:?}")));
        };
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_exact_mut(bv.len()) {
            add_into(chunk, bv);
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("add", out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale { a, s }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push("gelu", out, Op::Gelu { a }, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.push("softplus", out, Op::Softplus { a }, &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ----- linear algebra ----------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// Supported layouts: `[.., m, k] x [k, n]`, `[m, k] x [.., k, n]`, and
    /// equal batch axes on both sides.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (layout, out_shape, data) = if sb.len() == 2 {
            let rows = av.len() / k;
            let mut out = vec![0.0; rows * n];
            gemm_nn(rows, k, n, av, bv, &mut out);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            (MatmulLayout::Flat { rows, k, n }, shape, out)
        } else if sa.len() == 2 {
            let batches = bv.len() / (k * n);
            let mut out = vec![0.0; batches * m * n];
            for bi in 0..batches {
                gemm_nn(
                    m,
                    k,
                    n,
                    av,
                    &bv[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
            let mut shape = sb[..sb.len() - 2].to_vec();
            shape.extend([m, n]);
            (MatmulLayout::SharedLeft { batches, m, k, n }, shape, out)
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(err());
            }
            let batches = av.len() / (m * k);
            let mut out = vec![0.0; batches * m * n];
            for bi in 0..batches {
                gemm_nn(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
            let mut shape = sa[..sa.len() - 2].to_vec();
            shape.extend([m, n]);
            (MatmulLayout::Batched { batches, m, k, n }, shape, out)
        };
        let out = Tensor::from_parts(out_shape, data);
        self.push("matmul", out, Op::MatMul { a, b, layout }, &[a, b])
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_batched(self.value(a).data(), r, c);
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        self.push(
            "transpose",
            Tensor::from_parts(shape, out),
            Op::TransposeLast2 { a },
            &[a],
        )
    }

    /// `[A, B, C, D] -> [A, C, B, D]`; used to split and merge attention heads.
    pub fn permute_0213(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("permute_0213", format!("{s:?}")));
        }
        let out = permute_0213(self.value(a).data(), s[0], s[1], s[2], s[3]);
        self.push(
            "permute_0213",
            Tensor::from_parts(vec![s[0], s[2], s[1], s[3]], out),
            Op::Permute0213 { a },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape { a }, &[a])
    }

    /// Reverse axis 1 of a `[B, N, ...]` tensor.
    pub fn reverse_time(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("reverse_time", format!("{s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let out = reverse_time(self.value(a).data(), s[0], s[1], inner);
        self.push(
            "reverse_time",
            Tensor::from_parts(s, out),
            Op::ReverseTime { a },
            &[a],
        )
    }

    /// Keep the first `keep` columns of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, keep: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || keep == 0 || keep > s[1] {
            return Err(Error::shape("slice_cols", format!("{s:?} keep {keep}")));
        }
        if keep == s[1] {
            return Ok(a);
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(s[0] * keep);
        for r in 0..s[0] {
            out.extend_from_slice(&src[r * s[1]..r * s[1] + keep]);
        }
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![s[0], keep], out),
            Op::SliceCols { a, keep },
            &[a],
        )
    }

    // ----- normalization -----------------------------------------------

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let c = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_row(row);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        self.push("softmax", out, Op::Softmax { a }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let c = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), out);
        self.push("log_softmax", out, Op::LogSoftmax { a }, &[a])
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Invalid(format!("layernorm eps must be > 0, got {eps}")));
        }
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "width {d}, gain {:?}, bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            "layernorm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    // ----- indexing ----------------------------------------------------

    /// Gather rows of a `[V, D]` table; output is `[indices.len(), D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding", format!("table {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Invalid(format!("embedding index {bad} >= {v}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_parts(vec![indices.len(), d], out);
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    /// Replace entries where `masked` is true with [`MASKED_SCORE`].
    pub fn mask_scores(&mut self, a: Var, masked: Vec<bool>) -> Result<Var> {
        let v = self.value(a);
        if masked.len() != v.len() {
            return Err(Error::shape(
                "mask_scores",
                format!("mask {} vs {}", masked.len(), v.len()),
            ));
        }
        let data = v
            .data()
            .iter()
            .zip(&masked)
            .map(|(&x, &m)| if m { MASKED_SCORE } else { x })
            .collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("mask_scores", out, Op::MaskScores { a, masked }, &[a])
    }

    /// Mean over axis 1 of `[B, N, D]`, counting only the first `lengths[b]` steps.
    pub fn mean_time(&mut self, a: Var, lengths: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || lengths.len() != s[0] {
            return Err(Error::shape("mean_time", format!("{s:?}, {} lengths", lengths.len())));
        }
        let (bsz, n, d) = (s[0], s[1], s[2]);
        if lengths.iter().any(|&l| l == 0 || l > n) {
            return Err(Error::Invalid(format!("mean_time lengths {lengths:?} for N={n}")));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; bsz * d];
        for b in 0..bsz {
            let acc = &mut out[b * d..(b + 1) * d];
            for t in 0..lengths[b] {
                let row = &src[(b * n + t) * d..(b * n + t + 1) * d];
                for j in 0..d {
                    acc[j] += row[j];
                }
            }
            let inv = 1.0 / lengths[b] as f64;
            acc.iter_mut().for_each(|x| *x *= inv);
        }
        self.push(
            "mean_time",
            Tensor::from_parts(vec![bsz, d], out),
            Op::MeanTime {
                a,
                lengths: lengths.to_vec(),
            },
            &[a],
        )
    }

    /// `out[r] = a[r, idx[r]]` for a `[R, C]` tensor.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || idx.len() != s[0] {
            return Err(Error::shape("pick", format!("{s:?} with {} indices", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[1]) {
            return Err(Error::Invalid(format!("class index {bad} >= {}", s[1])));
        }
        let src = self.value(a).data();
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| src[r * s[1] + c]).collect();
        self.push(
            "pick",
            Tensor::from_parts(vec![s[0]], out),
            Op::Pick {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push("mean", out, Op::Mean { a }, &[a])
    }

    // ----- fused sequence ops ------------------------------------------

    /// Selective diagonal state-space scan (zero-order hold), forward in time.
    ///
    /// `u`, `delta`: `[B, N, D]`; `a_log`, `b`, `c`: `[D, S]`. The state matrix
    /// is `A = -exp(a_log)`.
    pub fn ssm_scan(&mut self, u: Var, delta: Var, a_log: Var, b: Var, c: Var) -> Result<Var> {
        let dims = scan::SsmDims::infer(
            self.shape(u),
            self.shape(delta),
            self.shape(a_log),
            self.shape(b),
            self.shape(c),
        )?;
        let y = scan::ssm_forward(
            &dims,
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a_log).data(),
            self.value(b).data(),
            self.value(c).data(),
        );
        let out = Tensor::from_parts(self.shape(u).to_vec(), y);
        self.push(
            "ssm_scan",
            out,
            Op::SsmScan {
                u,
                delta,
                a_log,
                b,
                c,
            },
            &[u, delta, a_log, b, c],
        )
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&vals)?;
        let name = op.name();
        self.push(
            name,
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    // ----- backward ----------------------------------------------------

    /// Backpropagate from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.recording {
            return Err(Error::Invalid("backward on a no-grad tape".into()));
        }
        let mut g: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if self.grads.len() < self.nodes.len() {
                    self.grads.resize_with(self.nodes.len(), || None);
                }
                match &mut self.grads[i] {
                    Some(t) => t
                        .data_mut()
                        .iter_mut()
                        .zip(&gout)
                        .for_each(|(a, b)| *a += b),
                    slot => *slot = Some(Tensor::from_parts(node.value.shape().to_vec(), gout)),
                }
                continue;
            }
            self.backward_node(i, &gout, &mut g);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gout: &[f64], g: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = g[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc(*a, &mut |ga| add_into(ga, gout));
                let blen = nodes[b.0].value.len();
                acc(*b, &mut |gb| {
                    for chunk in gout.chunks_exact(blen) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |ga| add_into(ga, gout));
                acc(*b, &mut |gb| gb.iter_mut().zip(gout).for_each(|(x, y)| *x -= y));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += gout[j] * bv[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] += gout[j] * av[j];
                    }
                });
            }
            Op::Scale { a, s } => acc(*a, &mut |ga| {
                ga.iter_mut().zip(gout).for_each(|(x, y)| *x += y * s)
            }),
            Op::MatMul { a, b, layout } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                match *layout {
                    MatmulLayout::Flat { rows, k, n } => {
                        acc(*a, &mut |ga| gemm_nt(rows, n, k, gout, bv, ga));
                        acc(*b, &mut |gb| gemm_tn(k, rows, n, av, gout, gb));
                    }
                    MatmulLayout::SharedLeft { batches, m, k, n } => {
                        acc(*a, &mut |ga| {
                            for bi in 0..batches {
                                gemm_nt(m, n, k, &gout[bi * m * n..], &bv[bi * k * n..], ga);
                            }
                        });
                        acc(*b, &mut |gb| {
                            for bi in 0..batches {
                                gemm_tn(
                                    k,
                                    m,
                                    n,
                                    av,
                                    &gout[bi * m * n..(bi + 1) * m * n],
                                    &mut gb[bi * k * n..(bi + 1) * k * n],
                                );
                            }
                        });
                    }
                    MatmulLayout::Batched { batches, m, k, n } => {
                        acc(*a, &mut |ga| {
                            for bi in 0..batches {
                                gemm_nt(
                                    m,
                                    n,
                                    k,
                                    &gout[bi * m * n..(bi + 1) * m * n],
                                    &bv[bi * k * n..(bi + 1) * k * n],
                                    &mut ga[bi * m * k..(bi + 1) * m * k],
                                );
                            }
                        });
                        acc(*b, &mut |gb| {
                            for bi in 0..batches {
                                gemm_tn(
                                    k,
                                    m,
                                    n,
                                    &av[bi * m * k..(bi + 1) * m * k],
                                    &gout[bi * m * n..(bi + 1) * m * n],
                                    &mut gb[bi * k * n..(bi + 1) * k * n],
                                );
                            }
                        });
                    }
                }
            }
            Op::TransposeLast2 { a } => {
                let s = out.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_batched(gout, r, c);
                acc(*a, &mut |ga| add_into(ga, &back));
            }
            Op::Permute0213 { a } => {
                let s = out.shape();
                let back = permute_0213(gout, s[0], s[1], s[2], s[3]);
                acc(*a, &mut |ga| add_into(ga, &back));
            }
            Op::Reshape { a } => acc(*a, &mut |ga| add_into(ga, gout)),
            Op::ReverseTime { a } => {
                let s = out.shape();
                let inner: usize = s[2..].iter().product();
                let back = reverse_time(gout, s[0], s[1], inner);
                acc(*a, &mut |ga| add_into(ga, &back));
            }
            Op::SliceCols { a, keep } => {
                let cols = nodes[a.0].value.shape()[1];
                acc(*a, &mut |ga| {
                    for (r, chunk) in gout.chunks(*keep).enumerate() {
                        add_into(&mut ga[r * cols..r * cols + keep], chunk);
                    }
                });
            }
            Op::Softmax { a } => {
                let c = out.last_dim();
                let y = out.data();
                acc(*a, &mut |ga| {
                    for r in 0..y.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &gout[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let c = out.last_dim();
                let y = out.data();
                acc(*a, &mut |ga| {
                    for r in 0..y.len() / c {
                        let gr = &gout[r * c..(r + 1) * c];
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            ga[r * c + j] += gr[j] - fmath::exp(y[r * c + j]) * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let gv = nodes[gain.0].value.data();
                let rows = rstd.len();
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let gr = &gout[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_g = 0.0;
                        let mut mean_gh = 0.0;
                        for j in 0..d {
                            let gh = gr[j] * gv[j];
                            mean_g += gh;
                            mean_gh += gh * hr[j];
                        }
                        mean_g /= d as f64;
                        mean_gh /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (gr[j] * gv[j] - mean_g - hr[j] * mean_gh);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += gout[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for r in 0..rows {
                        add_into(gb, &gout[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Gelu { a } => {
                let x = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += gout[j] * gelu_grad(x[j]);
                    }
                });
            }
            Op::Softplus { a } => {
                let x = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += gout[j] * sigmoid(x[j]);
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let d = out.last_dim();
                acc(*table, &mut |gt| {
                    for (r, &ix) in indices.iter().enumerate() {
                        add_into(&mut gt[ix * d..(ix + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::MaskScores { a, masked } => acc(*a, &mut |ga| {
                for j in 0..ga.len() {
                    if !masked[j] {
                        ga[j] += gout[j];
                    }
                }
            }),
            Op::MeanTime { a, lengths } => {
                let s = nodes[a.0].value.shape();
                let (n, d) = (s[1], s[2]);
                acc(*a, &mut |ga| {
                    for (b, &len) in lengths.iter().enumerate() {
                        let inv = 1.0 / len as f64;
                        for t in 0..len {
                            let row = &mut ga[(b * n + t) * d..(b * n + t + 1) * d];
                            for j in 0..d {
                                row[j] += gout[b * d + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::Pick { a, idx } => {
                let c = nodes[a.0].value.shape()[1];
                acc(*a, &mut |ga| {
                    for (r, &k) in idx.iter().enumerate() {
                        ga[r * c + k] += gout[r];
                    }
                });
            }
            Op::Sum { a } => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += gout[0])),
            Op::Mean { a } => {
                let s = gout[0] / nodes[a.0].value.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::SsmScan {
                u,
                delta,
                a_log,
                b,
                c,
            } => {
                let dims = scan::SsmDims::infer(
                    nodes[u.0].value.shape(),
                    nodes[delta.0].value.shape(),
                    nodes[a_log.0].value.shape(),
                    nodes[b.0].value.shape(),
                    nodes[c.0].value.shape(),
                )
                .expect("shapes validated in forward");
                let grads = scan::ssm_backward(
                    &dims,
                    nodes[u.0].value.data(),
                    nodes[delta.0].value.data(),
                    nodes[a_log.0].value.data(),
                    nodes[b.0].value.data(),
                    nodes[c.0].value.data(),
                    gout,
                );
                acc(*u, &mut |x| add_into(x, &grads.u));
                acc(*delta, &mut |x| add_into(x, &grads.delta));
                acc(*a_log, &mut |x| add_into(x, &grads.a_log));
                acc(*b, &mut |x| add_into(x, &grads.b));
                acc(*c, &mut |x| add_into(x, &grads.c));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let gt = Tensor::from_parts(out.shape().to_vec(), gout.to_vec());
                let grads = op.backward(&vals, out, &gt);
                for (v, gr) in inputs.iter().zip(grads) {
                    acc(*v, &mut |x| add_into(x, gr.data()));
                }
            }
        }
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn transpose_batched(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

fn permute_0213(x: &[f64], a: usize, b: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

fn reverse_time(x: &[f64], b: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for t in 0..n {
            let src = (bi * n + t) * inner;
            let dst = (bi * n + (n - 1 - t)) * inner;
            out[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
        }
    }
    out
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    row.iter_mut().for_each(|x| *x = fmath::exp(*x - max));
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= total);
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| fmath::exp(x - max)).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fmath::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = fmath::tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
