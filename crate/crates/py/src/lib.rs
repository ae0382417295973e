//! Python bindings. Structured inputs (specs, plans, configs) cross the
//! boundary as JSON strings; tensors as `(shape, flat list)` pairs.

use std::path::PathBuf;

use cald_core::analysis;
use cald_core::convert::{self, ConversionPlan};
use cald_core::distill::{self, DistillConfig, GuidanceMode, KdForm, TaskData};
use cald_core::persist::{self, WaypointStore};
use cald_core::tasks::{self, Batch, Dataset, TaskSpec};
use cald_core::{Error, Model, ModelSpec, Tape, Tensor};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Shape { .. } | Error::Invalid(_) | Error::Unsupported(_) | Error::Degenerate(_) | Error::Json(_) => {
            PyValueError::new_err(msg)
        }
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::NumericFault { .. } | Error::TrainingFault { .. } => PyArithmeticError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn from_json<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py_json(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

type Flat = (Vec<usize>, Vec<f64>);

fn flat(t: &Tensor) -> Flat {
    (t.shape().to_vec(), t.data().to_vec())
}

fn batch_of(tokens: Vec<Vec<usize>>) -> PyResult<Batch> {
    let n = tokens.first().map_or(0, Vec::len);
    if n == 0 || tokens.iter().any(|s| s.len() != n) {
        return Err(PyValueError::new_err("tokens must be a non-empty list of equal-length sequences"));
    }
    let b = tokens.len();
    Batch::from_tokens(tokens.concat(), vec![0; b], b, n).map_err(err)
}

/// A sequence model: attention, Linformer or SSM blocks with a task head.
#[pyclass(name = "Model", module = "cald", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Random initialization from a JSON model spec.
    #[staticmethod]
    fn init(spec: &str, seed: u64) -> PyResult<Self> {
        let spec: ModelSpec = from_json(spec)?;
        Ok(Self {
            inner: Model::init(spec, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: persist::load_model(&path).map_err(err)?,
        })
    }

    #[pyo3(signature = (path, step = 0))]
    fn save(&self, path: PathBuf, step: usize) -> PyResult<()> {
        persist::save_checkpoint(&self.inner, step, &path).map_err(err)
    }

    /// Canonical JSON spec.
    #[getter]
    fn spec(&self) -> String {
        self.inner.spec().to_canonical()
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params().keys().cloned().collect()
    }

    fn param(&self, name: &str) -> PyResult<Flat> {
        self.inner
            .param(name)
            .map(flat)
            .ok_or_else(|| PyIndexError::new_err(format!("no parameter {name}")))
    }

    /// Logits for a batch of token sequences.
    fn logits(&self, tokens: Vec<Vec<usize>>) -> PyResult<Flat> {
        Ok(flat(&self.inner.logits(&batch_of(tokens)?).map_err(err)?))
    }

    /// Hidden states after each block, `[batch, length, width]` per layer.
    fn hidden_states(&self, tokens: Vec<Vec<usize>>) -> PyResult<Vec<Flat>> {
        let tr = self.inner.trace(&batch_of(tokens)?).map_err(err)?;
        Ok(tr.layers.iter().map(flat).collect())
    }

    fn bit_eq(&self, other: &PyModel) -> bool {
        self.inner.bit_eq(&other.inner)
    }

    fn __repr__(&self) -> String {
        let s = self.inner.spec();
        format!(
            "Model(blocks={:?}, width={}, params={})",
            s.blocks,
            s.width,
            self.inner.num_params()
        )
    }
}

/// One split of a generated task.
#[pyclass(name = "Dataset", module = "cald", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn sequence(&self, i: usize) -> PyResult<Vec<u32>> {
        if i >= self.inner.len() {
            return Err(PyIndexError::new_err(i));
        }
        Ok(self.inner.sequence(i).to_vec())
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.inner.labels.clone()
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.seq_len
    }

    fn __repr__(&self) -> String {
        format!("Dataset({:?}, n={}, seq_len={})", self.inner.kind, self.inner.len(), self.inner.seq_len)
    }
}

/// Generate `(train, val, test)` from a JSON task spec.
#[pyfunction]
fn generate_task(spec: &str) -> PyResult<(PyDataset, PyDataset, PyDataset)> {
    let spec: TaskSpec = from_json(spec)?;
    let s = tasks::generate(&spec).map_err(err)?;
    Ok((PyDataset { inner: s.train }, PyDataset { inner: s.val }, PyDataset { inner: s.test }))
}

/// Build a student from `teacher` with a JSON conversion plan.
#[pyfunction]
fn convert_model(teacher: &PyModel, plan: &str) -> PyResult<PyModel> {
    let plan: ConversionPlan = from_json(plan)?;
    Ok(PyModel {
        inner: convert::transfer_parameters(&teacher.inner, &plan).map_err(err)?,
    })
}

#[pyfunction]
fn describe_conversion(teacher: &PyModel, plan: &str) -> PyResult<String> {
    let plan: ConversionPlan = from_json(plan)?;
    Ok(convert::describe_conversion(&teacher.inner, &plan).map_err(err)?.to_string())
}

/// Train `student` per a JSON distillation config. `teacher` is the fine-tuned
/// teacher (target/hybrid) or the source teacher (trajectory); waypoint mode
/// reads `waypoints`, a store directory. Returns the student and step records.
#[pyfunction]
#[pyo3(signature = (student, train, config, teacher = None, waypoints = None, val = None))]
fn distill_model(
    py: Python<'_>,
    student: &PyModel,
    train: &PyDataset,
    config: &str,
    teacher: Option<&PyModel>,
    waypoints: Option<PathBuf>,
    val: Option<&PyDataset>,
) -> PyResult<(PyModel, Py<PyAny>)> {
    let cfg: DistillConfig = from_json(config)?;
    let mut data = TaskData::new(&train.inner);
    if let Some(v) = val {
        data = data.with_val(&v.inner);
    }
    let need_teacher = || {
        teacher
            .map(|t| t.inner.clone())
            .ok_or_else(|| PyValueError::new_err("this mode needs a teacher"))
    };
    let s = student.inner.clone();
    let (model, records) = match cfg.mode {
        GuidanceMode::Unguided => distill::train_unguided(s, data, &cfg),
        GuidanceMode::Target | GuidanceMode::Hybrid => distill::train_target_guided(s, &need_teacher()?, data, &cfg),
        GuidanceMode::Trajectory => distill::train_trajectory_guided(s, &need_teacher()?, data, &cfg).map(|r| (r.0, r.2)),
        GuidanceMode::Waypoint => {
            let dir = waypoints.ok_or_else(|| PyValueError::new_err("waypoint mode needs a store directory"))?;
            let store = WaypointStore::open(&dir).map_err(err)?;
            distill::train_waypoint_guided(s, Box::new(store), data, &cfg)
        }
    }
    .map_err(err)?;
    Ok((PyModel { inner: model }, to_py_json(py, &records)?))
}

/// Loss, accuracy and perplexity on a split.
#[pyfunction]
#[pyo3(signature = (model, data, batch_size = 64))]
fn evaluate(py: Python<'_>, model: &PyModel, data: &PyDataset, batch_size: usize) -> PyResult<Py<PyAny>> {
    let m = tasks::evaluate(&model.inner, &data.inner, batch_size).map_err(err)?;
    to_py_json(py, &m)
}

fn rows(x: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let c = x.first().map_or(0, Vec::len);
    let r = x.len();
    Tensor::new(&[r, c], x.concat()).map_err(err)
}

/// Mean cross-entropy of row logits against class labels.
#[pyfunction]
fn loss_ce(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    let mut tape = Tape::no_grad();
    let l = tape.constant(rows(logits)?);
    let v = distill::loss_ce(&mut tape, l, &labels, None).map_err(err)?;
    Ok(tape.value(v).item())
}

/// Distillation KL between teacher and student row logits at temperature `beta`.
#[pyfunction]
#[pyo3(signature = (student_logits, teacher_logits, beta = 2.0, form = "softmax-temperature"))]
fn loss_kd(student_logits: Vec<Vec<f64>>, teacher_logits: Vec<Vec<f64>>, beta: f64, form: &str) -> PyResult<f64> {
    let form: KdForm = from_json(&format!("\"{form}\""))?;
    let mut tape = Tape::no_grad();
    let s = tape.constant(rows(student_logits)?);
    let v = distill::loss_kd(&mut tape, s, &rows(teacher_logits)?, beta, form, None).map_err(err)?;
    Ok(tape.value(v).item())
}

/// Mean cosine distance of each checkpoint's hidden states from `source`.
#[pyfunction]
#[pyo3(signature = (source, checkpoints, probe, samples = 100, seed = 0))]
fn hidden_shift(
    source: &PyModel,
    checkpoints: Vec<(usize, PyModel)>,
    probe: &PyDataset,
    samples: usize,
    seed: u64,
) -> PyResult<Vec<(usize, f64)>> {
    let batch = analysis::probe_batch(&probe.inner, samples.min(probe.inner.len()), seed).map_err(err)?;
    let refs: Vec<(usize, &Model)> = checkpoints.iter().map(|(s, m)| (*s, &m.inner)).collect();
    Ok(analysis::hidden_shift(&source.inner, &refs, &batch).map_err(err)?.points)
}

/// Number of waypoints in a store directory.
#[pyfunction]
fn waypoint_count(dir: PathBuf) -> PyResult<usize> {
    Ok(WaypointStore::open(&dir).map_err(err)?.entries().len())
}

#[pymodule]
fn cald(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(generate_task, m)?)?;
    m.add_function(wrap_pyfunction!(convert_model, m)?)?;
    m.add_function(wrap_pyfunction!(describe_conversion, m)?)?;
    m.add_function(wrap_pyfunction!(distill_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(loss_ce, m)?)?;
    m.add_function(wrap_pyfunction!(loss_kd, m)?)?;
    m.add_function(wrap_pyfunction!(hidden_shift, m)?)?;
    m.add_function(wrap_pyfunction!(waypoint_count, m)?)?;
    Ok(())
}
