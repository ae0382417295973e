//! Deterministic desk-scale datasets.
//!
//! * `majority`: binary sequences over two content tokens; the label is the
//!   more frequent token. Order-insensitive.
//! * `first-last-match`: label is 1 iff the first token equals the last;
//!   interior tokens are uniform noise. Needs long-range mixing.
//! * `char-lm`: next-character prediction over windows of an ASCII text file.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Majority,
    FirstLastMatch,
    CharLm,
}

impl TaskKind {
    fn code(self) -> u8 {
        match self {
            TaskKind::Majority => 1,
            TaskKind::FirstLastMatch => 2,
            TaskKind::CharLm => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(TaskKind::Majority),
            2 => Some(TaskKind::FirstLastMatch),
            3 => Some(TaskKind::CharLm),
            _ => None,
        }
    }

    pub fn is_classification(self) -> bool {
        !matches!(self, TaskKind::CharLm)
    }
}

/// Vocabulary of the character-level task: 7-bit ASCII.
pub const ASCII_VOCAB: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_train")]
    pub train: usize,
    #[serde(default = "default_eval")]
    pub val: usize,
    #[serde(default = "default_eval")]
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
    /// Source text for `char-lm`.
    #[serde(default)]
    pub text_path: Option<PathBuf>,
}

fn default_vocab() -> usize {
    8
}
fn default_seq_len() -> usize {
    128
}
fn default_train() -> usize {
    2000
}
fn default_eval() -> usize {
    500
}

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab: usize, seq_len: usize, sizes: [usize; 3], seed: u64) -> Self {
        Self {
            kind,
            vocab,
            seq_len,
            train: sizes[0],
            val: sizes[1],
            test: sizes[2],
            seed,
            text_path: None,
        }
    }

    /// Output classes of the task head (vocabulary size for `char-lm`).
    pub fn classes(&self) -> usize {
        match self.kind {
            TaskKind::Majority | TaskKind::FirstLastMatch => 2,
            TaskKind::CharLm => ASCII_VOCAB,
        }
    }

    pub fn model_vocab(&self) -> usize {
        match self.kind {
            TaskKind::CharLm => ASCII_VOCAB,
            _ => self.vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::Invalid("seq_len must be at least 2".into()));
        }
        match self.kind {
            TaskKind::Majority | TaskKind::FirstLastMatch if self.vocab < 2 => {
                Err(Error::Invalid("vocab must be at least 2".into()))
            }
            TaskKind::CharLm if self.text_path.is_none() => {
                Err(Error::Invalid("char-lm requires text_path".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

/// One split of a task: `n` sequences of length `seq_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub tokens: Vec<u32>,
    /// One label per sequence (classification) or per position (`char-lm`).
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    fn labels_per_example(&self) -> usize {
        if self.kind.is_classification() {
            1
        } else {
            self.seq_len
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let n = self.seq_len;
        let lpe = self.labels_per_example();
        let mut tokens = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len() * lpe);
        for &i in indices {
            tokens.extend(self.sequence(i).iter().map(|&t| t as usize));
            labels.extend(self.labels[i * lpe..(i + 1) * lpe].iter().map(|&t| t as usize));
        }
        Batch {
            tokens,
            labels,
            lengths: vec![n; indices.len()],
            batch: indices.len(),
            seq_len: n,
        }
    }

    /// First `count` examples in order.
    pub fn head(&self, count: usize) -> Batch {
        let idx: Vec<usize> = (0..count.min(self.len())).collect();
        self.batch(&idx)
    }

    /// Fraction of classification labels equal to 1.
    pub fn positive_rate(&self) -> f64 {
        self.labels.iter().filter(|&&l| l == 1).count() as f64 / self.labels.len() as f64
    }
}

/// Token indices, targets and valid lengths for a batch of sequences.
///
/// Padding, when present, occupies trailing positions only.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub lengths: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn from_tokens(tokens: Vec<usize>, labels: Vec<usize>, batch: usize, seq_len: usize) -> Result<Self> {
        if tokens.len() != batch * seq_len {
            return Err(Error::shape(
                "batch",
                format!("{} tokens for {batch}x{seq_len}", tokens.len()),
            ));
        }
        Ok(Self {
            tokens,
            labels,
            lengths: vec![seq_len; batch],
            batch,
            seq_len,
        })
    }

    pub fn has_padding(&self) -> bool {
        self.lengths.iter().any(|&l| l < self.seq_len)
    }

    /// Row-major `[batch, seq_len]` validity mask.
    pub fn valid_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.batch * self.seq_len);
        for &len in &self.lengths {
            m.extend((0..self.seq_len).map(|t| t < len));
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Majority label of a binary content sequence (ties go to token 0).
pub fn majority_label(seq: &[u32]) -> u32 {
    let ones = seq.iter().filter(|&&t| t == 1).count();
    u32::from(ones * 2 > seq.len())
}

pub fn first_last_label(seq: &[u32]) -> u32 {
    u32::from(seq.first() == seq.last())
}

pub fn generate(spec: &TaskSpec) -> Result<Splits> {
    spec.validate()?;
    match spec.kind {
        TaskKind::Majority | TaskKind::FirstLastMatch => Ok(Splits {
            spec: spec.clone(),
            train: synthetic(spec, Split::Train, spec.train),
            val: synthetic(spec, Split::Val, spec.val),
            test: synthetic(spec, Split::Test, spec.test),
        }),
        TaskKind::CharLm => char_lm(spec),
    }
}

fn synthetic(spec: &TaskSpec, split: Split, count: usize) -> Dataset {
    let n = spec.seq_len;
    let v = spec.vocab as u64;
    let mut rng = Rng::new(spec.seed, split.stream() + 16 * u64::from(spec.kind.code()));
    let mut tokens = Vec::with_capacity(count * n);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        // alternate the target label so every split is exactly balanced
        let want = (i % 2) as u32;
        match spec.kind {
            TaskKind::Majority => {
                // strict majority of `want`, remaining positions the other token
                let lo = n / 2 + 1;
                let k = lo + rng.below((n - lo + 1) as u64) as usize;
                let mut seq: Vec<u32> = (0..n).map(|t| if t < k { want } else { 1 - want }).collect();
                rng.shuffle(&mut seq);
                debug_assert_eq!(majority_label(&seq), want);
                tokens.extend_from_slice(&seq);
            }
            TaskKind::FirstLastMatch => {
                let first = rng.below(v) as u32;
                tokens.push(first);
                for _ in 1..n - 1 {
                    tokens.push(rng.below(v) as u32);
                }
                let last = if want == 1 {
                    first
                } else {
                    // uniform over the other v-1 tokens
                    let r = rng.below(v - 1) as u32;
                    if r >= first {
                        r + 1
                    } else {
                        r
                    }
                };
                tokens.push(last);
            }
            TaskKind::CharLm => unreachable!(),
        }
        labels.push(want);
    }
    Dataset {
        kind: spec.kind,
        vocab: spec.vocab,
        seq_len: n,
        classes: spec.classes(),
        tokens,
        labels,
    }
}

fn char_lm(spec: &TaskSpec) -> Result<Splits> {
    let path = spec.text_path.as_ref().expect("validated");
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    if let Some(pos) = text.iter().position(|b| !b.is_ascii()) {
        return Err(Error::Invalid(format!(
            "{} is not ASCII (byte {pos})",
            path.display()
        )));
    }
    let total = text.len();
    let cut1 = total * 8 / 10;
    let cut2 = total * 9 / 10;
    let regions = [(0, cut1, spec.train), (cut1, cut2, spec.val), (cut2, total, spec.test)];
    let mut out = Vec::with_capacity(3);
    for (start, end, cap) in regions {
        out.push(windows(&text[start..end], spec, cap));
    }
    let mut it = out.into_iter();
    let (train, val, test) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Invalid(format!(
            "{} too short for seq_len {}",
            path.display(),
            spec.seq_len
        )));
    }
    Ok(Splits {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

/// Non-overlapping windows of `seq_len + 1` bytes; `cap = 0` keeps all.
fn windows(text: &[u8], spec: &TaskSpec, cap: usize) -> Dataset {
    let n = spec.seq_len;
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut start = 0;
    while start + n < text.len() && (cap == 0 || tokens.len() / n < cap) {
        tokens.extend(text[start..start + n].iter().map(|&b| u32::from(b)));
        labels.extend(text[start + 1..start + n + 1].iter().map(|&b| u32::from(b)));
        start += n;
    }
    Dataset {
        kind: TaskKind::CharLm,
        vocab: ASCII_VOCAB,
        seq_len: n,
        classes: ASCII_VOCAB,
        tokens,
        labels,
    }
}

/// Infinite shuffled stream over a dataset, addressable by step.
///
/// Step `i` (1-based) takes positions `(i-1)*B .. i*B` of the concatenation of
/// per-epoch permutations, so any step's batch is a pure function of
/// `(seed, i)` and training can resume mid-run.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    cached: Option<(usize, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::Invalid("sampler needs n > 0 and batch_size > 0".into()));
        }
        Ok(Self {
            n,
            batch_size,
            seed,
            cached: None,
        })
    }

    fn permutation(&mut self, epoch: usize) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            Rng::new(self.seed, 1_000 + epoch as u64).shuffle(&mut perm);
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().unwrap().1
    }

    pub fn indices(&mut self, step: usize) -> Vec<usize> {
        assert!(step >= 1, "steps are 1-based");
        let start = (step - 1) * self.batch_size;
        (start..start + self.batch_size)
            .map(|p| {
                let n = self.n;
                self.permutation(p / n)[p % n]
            })
            .collect()
    }
}

// ----- evaluation ---------------------------------------------------------

/// Split-level metrics. `accuracy` for classification, `perplexity` for
/// `char-lm`; `loss` is the mean negative log-likelihood in both cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub perplexity: Option<f64>,
    pub count: usize,
}

impl Metrics {
    /// The headline number: accuracy, or perplexity for language modeling.
    pub fn primary(&self) -> f64 {
        self.accuracy.or(self.perplexity).unwrap_or(self.loss)
    }
}

/// Deterministic evaluation over the whole split, `batch_size` sequences at a time.
/// Ties in the argmax go to the lowest class index.
pub fn evaluate(model: &crate::model::Model, data: &Dataset, batch_size: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let bs = batch_size.max(1);
    let (mut nll, mut correct, mut rows) = (0.0, 0usize, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(bs) {
        let batch = data.batch(chunk);
        let logits = model.logits(&batch)?;
        let c = logits.last_dim();
        for (row, &label) in logits.data().chunks(c).zip(&batch.labels) {
            let lse = crate::numcore::tape::logsumexp(row);
            nll += lse - row[label];
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            correct += usize::from(arg == label);
            rows += 1;
        }
    }
    let loss = nll / rows as f64;
    let classify = data.kind.is_classification();
    Ok(Metrics {
        loss,
        accuracy: classify.then(|| correct as f64 / rows as f64),
        perplexity: (!classify).then(|| loss.exp()),
        count: data.len(),
    })
}

// ----- binary cache -------------------------------------------------------

const DATA_MAGIC: &[u8; 8] = b"CALDDATA";
const DATA_VERSION: u32 = 1;

/// Write all splits to one little-endian file.
///
/// Layout: magic, version u32, kind u8, vocab u32, seq_len u32, classes u32,
/// sizes 3×u32, seed u64; then for train/val/test: tokens (u32) followed by
/// labels (u32).
pub fn save_splits(splits: &Splits, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATA_MAGIC);
    buf.extend_from_slice(&DATA_VERSION.to_le_bytes());
    buf.push(splits.spec.kind.code());
    let t = &splits.train;
    buf.extend_from_slice(&(t.vocab as u32).to_le_bytes());
    buf.extend_from_slice(&(t.seq_len as u32).to_le_bytes());
    buf.extend_from_slice(&(t.classes as u32).to_le_bytes());
    for d in [&splits.train, &splits.val, &splits.test] {
        buf.extend_from_slice(&(d.len() as u32).to_le_bytes());
    }
    buf.extend_from_slice(&splits.spec.seed.to_le_bytes());
    for d in [&splits.train, &splits.val, &splits.test] {
        for v in d.tokens.iter().chain(&d.labels) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a file written by [`save_splits`]. The returned spec carries the
/// stored kind, sizes and seed.
pub fn load_splits(path: &Path) -> Result<Splits> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::CorruptDataset {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if buf.len() < 45 || &buf[..8] != DATA_MAGIC {
        return Err(bad("bad magic or short header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    if u32_at(8) != DATA_VERSION {
        return Err(bad("unknown version"));
    }
    let kind = TaskKind::from_code(buf[12]).ok_or_else(|| bad("unknown task kind"))?;
    let vocab = u32_at(13) as usize;
    let seq_len = u32_at(17) as usize;
    let classes = u32_at(21) as usize;
    let sizes = [u32_at(25) as usize, u32_at(29) as usize, u32_at(33) as usize];
    let seed = u64::from_le_bytes(buf[37..45].try_into().unwrap());
    if seq_len == 0 {
        return Err(bad("zero seq_len"));
    }
    let lpe = if kind.is_classification() { 1 } else { seq_len };
    let need: usize = sizes.iter().map(|n| n * (seq_len + lpe) * 4).sum();
    if buf.len() != 45 + need {
        return Err(bad("body length does not match header"));
    }
    let mut off = 45;
    let mut read = |count: usize| {
        let v: Vec<u32> = (0..count).map(|i| u32_at(off + 4 * i)).collect();
        off += 4 * count;
        v
    };
    let mut ds = Vec::with_capacity(3);
    for n in sizes {
        let tokens = read(n * seq_len);
        let labels = read(n * lpe);
        ds.push(Dataset {
            kind,
            vocab,
            seq_len,
            classes,
            tokens,
            labels,
        });
    }
    let test = ds.pop().unwrap();
    let val = ds.pop().unwrap();
    let train = ds.pop().unwrap();
    let spec = TaskSpec {
        kind,
        vocab,
        seq_len,
        train: sizes[0],
        val: sizes[1],
        test: sizes[2],
        seed,
        text_path: None,
    };
    Ok(Splits {
        spec,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_degenerate() {
        assert_eq!(majority_label(&[0; 9]), 0);
        assert_eq!(majority_label(&[1; 9]), 1);
    }

    #[test]
    fn first_last_forced_match() {
        assert_eq!(first_last_label(&[3, 1, 2, 3]), 1);
        assert_eq!(first_last_label(&[3, 1, 2, 4]), 0);
    }

    #[test]
    fn generated_labels_agree_with_definitions() {
        for kind in [TaskKind::Majority, TaskKind::FirstLastMatch] {
            let spec = TaskSpec::new(kind, 5, 16, [200, 50, 50], 9);
            let s = generate(&spec).unwrap();
            for d in [&s.train, &s.val, &s.test] {
                for i in 0..d.len() {
                    let want = match kind {
                        TaskKind::Majority => majority_label(d.sequence(i)),
                        _ => first_last_label(d.sequence(i)),
                    };
                    assert_eq!(d.labels[i], want);
                    assert!(d.sequence(i).iter().all(|&t| (t as usize) < spec.vocab));
                }
            }
        }
    }

    #[test]
    fn first_last_balance_10k() {
        let spec = TaskSpec::new(TaskKind::FirstLastMatch, 8, 32, [10_000, 10, 10], 4);
        let s = generate(&spec).unwrap();
        let rate = s.train.positive_rate();
        assert!((rate - 0.5).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn splits_use_distinct_streams() {
        let spec = TaskSpec::new(TaskKind::FirstLastMatch, 8, 32, [50, 50, 50], 4);
        let s = generate(&spec).unwrap();
        assert_ne!(s.train.tokens, s.val.tokens);
        assert_ne!(s.val.tokens, s.test.tokens);
    }

    #[test]
    fn deterministic_generation() {
        let spec = TaskSpec::new(TaskKind::Majority, 2, 33, [64, 8, 8], 77);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn char_lm_windows_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        fs::write(&p, "abcdefghij".repeat(20)).unwrap();
        let mut spec = TaskSpec::new(TaskKind::CharLm, 0, 8, [0, 0, 0], 0);
        spec.text_path = Some(p.clone());
        let s = generate(&spec).unwrap();
        assert_eq!(s.train.sequence(0), b"abcdefgh".map(u32::from));
        assert_eq!(&s.train.labels[..8], b"bcdefghi".map(u32::from));

        fs::write(&p, "caf\u{e9} au lait".repeat(10)).unwrap();
        assert!(generate(&spec).is_err());
        spec.text_path = Some(dir.path().join("missing.txt"));
        assert!(matches!(generate(&spec), Err(Error::Io { .. })));
    }

    #[test]
    fn sampler_is_step_addressable() {
        let mut a = BatchSampler::new(10, 4, 3).unwrap();
        let seq: Vec<Vec<usize>> = (1..=6).map(|i| a.indices(i)).collect();
        let mut b = BatchSampler::new(10, 4, 3).unwrap();
        assert_eq!(b.indices(5), seq[4]);
        assert_eq!(b.indices(2), seq[1]);
        // first epoch covers each example once
        let mut first: Vec<usize> = seq[0].iter().chain(&seq[1]).copied().collect();
        first.extend(&seq[2][..2]);
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn cache_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let spec = TaskSpec::new(TaskKind::FirstLastMatch, 6, 12, [20, 6, 4], 1);
        let s = generate(&spec).unwrap();
        save_splits(&s, &p).unwrap();
        let back = load_splits(&p).unwrap();
        assert_eq!(back.train, s.train);
        assert_eq!(back.test, s.test);
        assert_eq!(back.spec.seed, 1);

        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_splits(&p), Err(Error::CorruptDataset { .. })));
    }

    fn zero_depth(vocab: usize, len: usize, head: crate::model::HeadKind) -> crate::model::Model {
        let spec = crate::model::ModelSpec {
            vocab,
            max_len: len,
            width: 4,
            heads: 1,
            ffn_hidden: 4,
            blocks: vec![],
            head,
            causal: false,
            linformer: None,
            ssm_state: 0,
        };
        crate::model::Model::init(spec, 0).unwrap()
    }

    fn zero(m: &mut crate::model::Model, name: &str) {
        m.param_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    }

    #[test]
    fn constant_predictor_scores_the_split_balance() {
        let spec = TaskSpec::new(TaskKind::FirstLastMatch, 6, 10, [40, 40, 2], 9);
        let s = generate(&spec).unwrap();
        let mut m = zero_depth(6, 10, crate::model::HeadKind::Classify { classes: 2 });
        zero(&mut m, "head.w");
        m.param_mut("head.b").unwrap().data_mut().copy_from_slice(&[1.0, 0.0]);
        let r = evaluate(&m, &s.val, 7).unwrap();
        assert_eq!(r.accuracy, Some(1.0 - s.val.positive_rate()));
        assert_eq!(r.accuracy, Some(0.5));
    }

    #[test]
    fn counting_model_solves_majority() {
        let spec = TaskSpec::new(TaskKind::Majority, 2, 9, [30, 2, 2], 4);
        let s = generate(&spec).unwrap();
        let mut m = zero_depth(2, 9, crate::model::HeadKind::Classify { classes: 2 });
        for name in ["embed.tok", "embed.pos", "head.w", "head.b"] {
            zero(&mut m, name);
        }
        // token 0 -> +e0, token 1 -> -e0; class 0 reads +dim0
        let tok = m.param_mut("embed.tok").unwrap().data_mut();
        tok[0] = 1.0;
        tok[4] = -1.0;
        let w = m.param_mut("head.w").unwrap().data_mut();
        w[0] = 1.0;
        w[1] = -1.0;
        let r = evaluate(&m, &s.train, 8).unwrap();
        assert_eq!(r.accuracy, Some(1.0));
    }

    #[test]
    fn uniform_lm_perplexity_is_vocab() {
        let mut m = zero_depth(5, 4, crate::model::HeadKind::LanguageModel);
        zero(&mut m, "head.w");
        zero(&mut m, "head.b");
        let data = Dataset {
            kind: TaskKind::CharLm,
            vocab: 5,
            seq_len: 4,
            classes: 5,
            tokens: vec![0, 1, 2, 3, 4, 4, 3, 2],
            labels: vec![1, 2, 3, 4, 3, 2, 1, 0],
        };
        let r = evaluate(&m, &data, 1).unwrap();
        assert!((r.perplexity.unwrap() - 5.0).abs() < 1e-12);
        assert!(r.accuracy.is_none());
    }
}
