//! Unguided, target/hybrid, trajectory and waypoint training loops.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::losses::{loss_ce, loss_kd, loss_ld, KdForm, LdNorm, LossWeights};
use super::optim::{clip_grad_norm, AdamW, OptimConfig, Schedule};
use crate::error::{Error, Result};
use crate::model::{HeadKind, HiddenTrace, MixerKind, Model};
use crate::numcore::{Tape, Tensor, Var};
use crate::tasks::{evaluate, Batch, BatchSampler, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    #[default]
    Unguided,
    Target,
    Hybrid,
    Trajectory,
    Waypoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub mode: GuidanceMode,
    pub alpha_ce: f64,
    pub alpha_kd: f64,
    pub alpha_ld: f64,
    /// Temperature.
    pub beta: f64,
    pub kd_form: KdForm,
    /// Total student steps `T`.
    pub steps: usize,
    /// Teacher update interval `T_u` (trajectory mode).
    pub teacher_update_interval: usize,
    /// Waypoint switching interval `T_w` (waypoint mode).
    pub waypoint_interval: usize,
    /// Hybrid switch step `T_h`; defaults to `0.3·T`.
    pub hybrid_switch: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// Layer-normalize hidden states before the LD loss. Defaults to on when
    /// the student has an SSM block.
    pub normalize_ld: Option<bool>,
    pub optimizer: OptimConfig,
    /// Optimizer for the live teacher in trajectory mode.
    pub teacher_optimizer: OptimConfig,
    /// Evaluate on the validation split every this many steps (0: never).
    pub eval_every: usize,
    pub eval_batch_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            mode: GuidanceMode::Unguided,
            alpha_ce: w.ce,
            alpha_kd: w.kd,
            alpha_ld: w.ld,
            beta: 2.0,
            kd_form: KdForm::SoftmaxTemperature,
            steps: 1000,
            teacher_update_interval: 1,
            waypoint_interval: 100,
            hybrid_switch: None,
            batch_size: 8,
            seed: 0,
            normalize_ld: None,
            optimizer: OptimConfig::default(),
            teacher_optimizer: OptimConfig::default(),
            eval_every: 0,
            eval_batch_size: 64,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.raw_weights().validate()?;
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Invalid(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.teacher_update_interval == 0 || self.waypoint_interval == 0 {
            return Err(Error::Invalid("T_u and T_w must be >= 1".into()));
        }
        // T_h = T is allowed: it is the degenerate schedule that never switches.
        if self.hybrid_switch.is_some_and(|h| h > self.steps) {
            return Err(Error::Invalid("hybrid_switch must not exceed steps".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.teacher_optimizer.validate()
    }

    fn raw_weights(&self) -> LossWeights {
        LossWeights {
            ce: self.alpha_ce,
            kd: self.alpha_kd,
            ld: self.alpha_ld,
        }
    }

    /// Loss weights in effect; unguided training ignores `α_KD` and `α_LD`.
    pub fn weights(&self) -> LossWeights {
        match self.mode {
            GuidanceMode::Unguided => LossWeights {
                kd: 0.0,
                ld: 0.0,
                ..self.raw_weights()
            },
            _ => self.raw_weights(),
        }
    }

    pub fn hybrid_switch_step(&self) -> usize {
        self.hybrid_switch
            .unwrap_or_else(|| (0.3 * self.steps as f64).round() as usize)
    }
}

/// Which teacher a step distilled against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TeacherRef {
    None,
    Target,
    /// Co-trained teacher after `updates` optimizer steps.
    Live { updates: usize },
    /// 1-based waypoint index.
    Waypoint { index: usize },
}

impl TeacherRef {
    pub fn waypoint_index(self) -> Option<usize> {
        match self {
            TeacherRef::Waypoint { index } => Some(index),
            _ => None,
        }
    }
}

/// One optimizer step's losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub ce: f64,
    pub kd: f64,
    pub ld: f64,
    pub total: f64,
    pub lr: f64,
    pub teacher: TeacherRef,
    /// Live teacher's own CE on steps where it updated.
    pub teacher_ce: Option<f64>,
    pub eval: Option<f64>,
}

impl StepRecord {
    /// Step index and loss fields, bit for bit.
    pub fn loss_bits(&self) -> [u64; 6] {
        [
            self.step as u64,
            self.ce.to_bits(),
            self.kd.to_bits(),
            self.ld.to_bits(),
            self.total.to_bits(),
            self.lr.to_bits(),
        ]
    }
}

/// Ordered teacher checkpoints `W_1 … W_last`.
pub trait WaypointSource {
    fn count(&self) -> usize;
    /// Load the 1-based waypoint `index`.
    fn load(&self, index: usize) -> Result<Model>;
}

impl WaypointSource for Vec<Model> {
    fn count(&self) -> usize {
        self.len()
    }

    fn load(&self, index: usize) -> Result<Model> {
        index
            .checked_sub(1)
            .and_then(|i| self.get(i))
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("no waypoint {index}")))
    }
}

/// Waypoint in use at 1-based student step `i`.
pub fn waypoint_for_step(i: usize, interval: usize, count: usize) -> usize {
    ((i - 1) / interval + 1).min(count)
}

/// Live teacher state in trajectory mode.
#[derive(Debug, Clone)]
pub struct LiveTeacher {
    pub model: Model,
    pub optim: AdamW,
    pub updates: usize,
}

enum Guide {
    None,
    Target(Model),
    Live {
        teacher: LiveTeacher,
        schedule: Schedule,
    },
    Waypoint {
        source: Box<dyn WaypointSource>,
        current: Option<(usize, Model)>,
    },
}

/// Training data plus an optional validation split for scheduled evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TaskData<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
}

impl<'a> TaskData<'a> {
    pub fn new(train: &'a Dataset) -> Self {
        Self { train, val: None }
    }

    pub fn with_val(mut self, val: &'a Dataset) -> Self {
        self.val = Some(val);
        self
    }
}

/// Everything needed to continue a run bitwise.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub student: Model,
    pub optim: AdamW,
    pub teacher: Option<LiveTeacher>,
}

/// Called after each completed step.
pub trait StepObserver {
    fn on_step(&mut self, trainer: &Trainer, record: &StepRecord) -> Result<()>;
}

impl<F: FnMut(&Trainer, &StepRecord) -> Result<()>> StepObserver for F {
    fn on_step(&mut self, trainer: &Trainer, record: &StepRecord) -> Result<()> {
        self(trainer, record)
    }
}

/// Streams records as JSON lines.
pub struct JsonlWriter<W: Write>(pub W);

impl<W: Write> StepObserver for JsonlWriter<W> {
    fn on_step(&mut self, _: &Trainer, record: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.0, record)?;
        writeln!(self.0).and_then(|_| self.0.flush()).map_err(|e| Error::io("<log>", e))
    }
}

/// Holds a student, its optimizer, and the guidance state between steps.
pub struct Trainer {
    cfg: DistillConfig,
    student: Model,
    optim: AdamW,
    schedule: Schedule,
    guide: Guide,
    sampler: Option<BatchSampler>,
    step: usize,
}

fn gradients(tape: &Tape, params: &BTreeMap<String, Var>) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (name, &v) in params {
        if let Some(g) = tape.grad(v) {
            if !g.is_finite() {
                return Err(Error::NumericFault { op: "gradient" });
            }
            out.insert(name.clone(), g.clone());
        }
    }
    Ok(out)
}

fn apply_update(
    model: &mut Model,
    optim: &mut AdamW,
    mut grads: BTreeMap<String, Tensor>,
    lr: f64,
) -> Result<()> {
    if let Some(c) = optim.config.clip_norm {
        clip_grad_norm(&mut grads, c);
    }
    let mut params = model.params().clone();
    optim.step(&mut params, &grads, lr)?;
    if params.values().any(|t| !t.is_finite()) {
        return Err(Error::NumericFault { op: "optimizer" });
    }
    *model = Model::from_params(model.spec().clone(), params)?;
    Ok(())
}

/// Positions that carry a loss term: every row for classification, valid
/// positions for language modeling.
fn row_mask(model: &Model, batch: &Batch) -> Option<Vec<bool>> {
    match model.spec().head {
        HeadKind::Classify { .. } => None,
        HeadKind::LanguageModel => batch.has_padding().then(|| batch.valid_mask()),
    }
}

fn ld_norms(teacher: &Model) -> Result<Vec<LdNorm>> {
    (0..teacher.spec().blocks.len())
        .map(|i| {
            let (g, b) = teacher.next_norm_names(i);
            match (teacher.param(&g), teacher.param(&b)) {
                (Some(g), Some(b)) => Ok((g.clone(), b.clone())),
                _ => Err(Error::Invalid(format!("teacher lacks {g}/{b}"))),
            }
        })
        .collect()
}

impl Trainer {
    fn build(student: Model, guide: Guide, cfg: DistillConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.optimizer.schedule(cfg.steps);
        Ok(Self {
            optim: AdamW::new(cfg.optimizer),
            cfg,
            student,
            schedule,
            guide,
            sampler: None,
            step: 0,
        })
    }

    fn check_teacher(student: &Model, teacher: &Model) -> Result<()> {
        let (s, t) = (student.spec(), teacher.spec());
        if s.width != t.width || s.blocks.len() != t.blocks.len() || s.out_dim() != t.out_dim() {
            return Err(Error::shape(
                "teacher/student",
                format!(
                    "teacher width {} blocks {} outputs {} vs student {} {} {}",
                    t.width,
                    t.blocks.len(),
                    t.out_dim(),
                    s.width,
                    s.blocks.len(),
                    s.out_dim()
                ),
            ));
        }
        Ok(())
    }

    pub fn unguided(student: Model, mut cfg: DistillConfig) -> Result<Self> {
        cfg.mode = GuidanceMode::Unguided;
        Self::build(student, Guide::None, cfg)
    }

    /// Target-guided, or hybrid when `cfg.mode` is [`GuidanceMode::Hybrid`].
    pub fn target(student: Model, teacher: Model, mut cfg: DistillConfig) -> Result<Self> {
        Self::check_teacher(&student, &teacher)?;
        if cfg.mode != GuidanceMode::Hybrid {
            cfg.mode = GuidanceMode::Target;
        }
        Self::build(student, Guide::Target(teacher), cfg)
    }

    pub fn trajectory(student: Model, teacher_source: Model, mut cfg: DistillConfig) -> Result<Self> {
        Self::check_teacher(&student, &teacher_source)?;
        cfg.mode = GuidanceMode::Trajectory;
        let schedule = cfg
            .teacher_optimizer
            .schedule(cfg.steps / cfg.teacher_update_interval);
        let teacher = LiveTeacher {
            optim: AdamW::new(cfg.teacher_optimizer),
            model: teacher_source,
            updates: 0,
        };
        Self::build(student, Guide::Live { teacher, schedule }, cfg)
    }

    pub fn waypoint(student: Model, source: Box<dyn WaypointSource>, mut cfg: DistillConfig) -> Result<Self> {
        if source.count() == 0 {
            return Err(Error::Invalid("waypoint store is empty".into()));
        }
        Self::check_teacher(&student, &source.load(1)?)?;
        cfg.mode = GuidanceMode::Waypoint;
        Self::build(
            student,
            Guide::Waypoint {
                source,
                current: None,
            },
            cfg,
        )
    }

    /// Continue from a saved state. The guide must match the one used originally.
    pub fn resume(mut self, state: TrainState) -> Result<Self> {
        if state.step > self.cfg.steps {
            return Err(Error::Invalid(format!(
                "state at step {} beyond configured {} steps",
                state.step, self.cfg.steps
            )));
        }
        if state.student.spec() != self.student.spec() {
            return Err(Error::Invalid("resumed student has a different architecture".into()));
        }
        match (&mut self.guide, state.teacher) {
            (Guide::Live { teacher, .. }, Some(t)) => *teacher = t,
            (Guide::Live { .. }, None) => {
                return Err(Error::Invalid("trajectory resume needs the live teacher".into()))
            }
            (_, Some(_)) => return Err(Error::Invalid("unexpected live teacher in state".into())),
            _ => {}
        }
        self.step = state.step;
        self.student = state.student;
        self.optim = state.optim;
        Ok(self)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            student: self.student.clone(),
            optim: self.optim.clone(),
            teacher: match &self.guide {
                Guide::Live { teacher, .. } => Some(teacher.clone()),
                _ => None,
            },
        }
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn student(&self) -> &Model {
        &self.student
    }

    /// Completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optim
    }

    /// Teacher currently used for guidance (live or fixed).
    pub fn teacher(&self) -> Option<&Model> {
        match &self.guide {
            Guide::None => None,
            Guide::Target(t) => Some(t),
            Guide::Live { teacher, .. } => Some(&teacher.model),
            Guide::Waypoint { current, .. } => current.as_ref().map(|c| &c.1),
        }
    }

    pub fn into_student(self) -> Model {
        self.student
    }

    /// Teacher outputs for step `i`, advancing the live teacher when due.
    fn teacher_pass(&mut self, i: usize, batch: &Batch) -> Result<(Option<(HiddenTrace, Vec<LdNorm>)>, TeacherRef, Option<f64>)> {
        let cfg = &self.cfg;
        let need_norms = cfg.normalize_ld.unwrap_or_else(|| {
            self.student
                .spec()
                .blocks
                .iter()
                .any(|b| matches!(b, MixerKind::Ssm | MixerKind::BidirectionalSsm))
        });
        let norms = |t: &Model| -> Result<Vec<LdNorm>> {
            if need_norms {
                ld_norms(t)
            } else {
                Ok(vec![])
            }
        };
        match &mut self.guide {
            Guide::None => Ok((None, TeacherRef::None, None)),
            Guide::Target(t) => {
                if cfg.mode == GuidanceMode::Hybrid && i > cfg.hybrid_switch_step() {
                    return Ok((None, TeacherRef::None, None));
                }
                Ok((Some((t.trace(batch)?, norms(t)?)), TeacherRef::Target, None))
            }
            Guide::Waypoint { source, current } => {
                let want = waypoint_for_step(i, cfg.waypoint_interval, source.count());
                if current.as_ref().map(|c| c.0) != Some(want) {
                    *current = Some((want, source.load(want)?));
                }
                let t = &current.as_ref().expect("loaded").1;
                Ok((
                    Some((t.trace(batch)?, norms(t)?)),
                    TeacherRef::Waypoint { index: want },
                    None,
                ))
            }
            Guide::Live { teacher, schedule } => {
                let n = norms(&teacher.model)?;
                if i % cfg.teacher_update_interval != 0 {
                    let r = TeacherRef::Live {
                        updates: teacher.updates,
                    };
                    return Ok((Some((teacher.model.trace(batch)?, n)), r, None));
                }
                // teacher CE step; the student distills against the pre-update outputs
                let mut tape = Tape::new();
                let out = teacher.model.forward(&mut tape, batch)?;
                let mask = row_mask(&teacher.model, batch);
                let ce = loss_ce(&mut tape, out.logits, &batch.labels, mask.as_deref())?;
                let trace = HiddenTrace {
                    layers: out.trace.iter().map(|v| tape.value(*v).clone()).collect(),
                    logits: tape.value(out.logits).clone(),
                };
                let r = TeacherRef::Live {
                    updates: teacher.updates,
                };
                let ce_value = tape.value(ce).item();
                tape.backward(ce)?;
                let grads = gradients(&tape, &out.params)?;
                let lr = schedule.lr(teacher.updates);
                apply_update(&mut teacher.model, &mut teacher.optim, grads, lr)?;
                teacher.updates += 1;
                Ok((Some((trace, n)), r, Some(ce_value)))
            }
        }
    }

    fn try_step(&mut self, data: TaskData) -> Result<StepRecord> {
        let i = self.step + 1;
        let bs = self.cfg.batch_size;
        let sampler = match &mut self.sampler {
            Some(s) => s,
            slot => slot.insert(BatchSampler::new(data.train.len(), bs, self.cfg.seed)?),
        };
        let batch = data.train.batch(&sampler.indices(i));

        // Work on a copy of the live teacher so a fault leaves the run untouched.
        let guide_backup = match &self.guide {
            Guide::Live { teacher, .. } => Some(teacher.clone()),
            _ => None,
        };
        let result = self.student_step(i, &batch);
        if result.is_err() {
            if let (Some(b), Guide::Live { teacher, .. }) = (guide_backup, &mut self.guide) {
                *teacher = b;
            }
        }
        let mut rec = result?;
        self.step = i;
        if self.cfg.eval_every > 0 && (i % self.cfg.eval_every == 0 || i == self.cfg.steps) {
            if let Some(val) = data.val {
                rec.eval = Some(evaluate(&self.student, val, self.cfg.eval_batch_size)?.primary());
            }
        }
        Ok(rec)
    }

    fn student_step(&mut self, i: usize, batch: &Batch) -> Result<StepRecord> {
        let (teacher_out, teacher_ref, teacher_ce) = self.teacher_pass(i, batch)?;
        let w = self.cfg.weights();
        let mut tape = Tape::new();
        let out = self.student.forward(&mut tape, batch)?;
        let mask = row_mask(&self.student, batch);
        let ce = loss_ce(&mut tape, out.logits, &batch.labels, mask.as_deref())?;
        let mut total = tape.scale(ce, w.ce)?;
        let (mut kd_v, mut ld_v) = (0.0, 0.0);
        if let Some((t, norms)) = &teacher_out {
            let kd = loss_kd(
                &mut tape,
                out.logits,
                &t.logits,
                self.cfg.beta,
                self.cfg.kd_form,
                mask.as_deref(),
            )?;
            kd_v = tape.value(kd).item();
            if w.kd != 0.0 {
                let term = tape.scale(kd, w.kd)?;
                total = tape.add(total, term)?;
            }
            if !out.trace.is_empty() {
                let norms = (!norms.is_empty()).then_some(norms.as_slice());
                let ld = loss_ld(&mut tape, &out.trace, &t.layers, norms, &batch.lengths)?;
                ld_v = tape.value(ld).item();
                if w.ld != 0.0 {
                    let term = tape.scale(ld, w.ld)?;
                    total = tape.add(total, term)?;
                }
            }
        }
        let rec = StepRecord {
            step: i,
            ce: tape.value(ce).item(),
            kd: kd_v,
            ld: ld_v,
            total: tape.value(total).item(),
            lr: self.schedule.lr(i - 1),
            teacher: teacher_ref,
            teacher_ce,
            eval: None,
        };
        tape.backward(total)?;
        let grads = gradients(&tape, &out.params)?;
        apply_update(&mut self.student, &mut self.optim, grads, rec.lr)?;
        Ok(rec)
    }

    /// Take one step. Failures are reported with the step index and leave
    /// the trainer at the last completed step.
    pub fn step_once(&mut self, data: TaskData) -> Result<StepRecord> {
        let i = self.step + 1;
        self.try_step(data).map_err(|e| Error::TrainingFault {
            step: i,
            source: Box::new(e),
        })
    }

    /// Step until `T`, reporting each record to `observer`.
    pub fn run(&mut self, data: TaskData, observer: &mut dyn StepObserver) -> Result<Vec<StepRecord>> {
        let mut records = Vec::with_capacity(self.cfg.steps - self.step);
        while !self.is_done() {
            let rec = self.step_once(data)?;
            observer.on_step(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Observer that ignores every record.
pub struct NoObserver;

impl StepObserver for NoObserver {
    fn on_step(&mut self, _: &Trainer, _: &StepRecord) -> Result<()> {
        Ok(())
    }
}

/// Fine-tune with `ℒ_CE` only.
pub fn train_unguided(student: Model, data: TaskData, cfg: &DistillConfig) -> Result<(Model, Vec<StepRecord>)> {
    let mut t = Trainer::unguided(student, cfg.clone())?;
    let recs = t.run(data, &mut NoObserver)?;
    Ok((t.into_student(), recs))
}

/// Distill against a fixed fine-tuned teacher (hybrid when `cfg.mode` says so).
pub fn train_target_guided(
    student: Model,
    teacher_target: &Model,
    data: TaskData,
    cfg: &DistillConfig,
) -> Result<(Model, Vec<StepRecord>)> {
    let mut t = Trainer::target(student, teacher_target.clone(), cfg.clone())?;
    let recs = t.run(data, &mut NoObserver)?;
    Ok((t.into_student(), recs))
}

/// Distill against a teacher that is fine-tuned alongside the student.
/// Returns the student, the final teacher, and the records.
pub fn train_trajectory_guided(
    student: Model,
    teacher_source: &Model,
    data: TaskData,
    cfg: &DistillConfig,
) -> Result<(Model, Model, Vec<StepRecord>)> {
    let mut t = Trainer::trajectory(student, teacher_source.clone(), cfg.clone())?;
    let recs = t.run(data, &mut NoObserver)?;
    let teacher = t.teacher().expect("live teacher").clone();
    Ok((t.into_student(), teacher, recs))
}

/// Distill against stored teacher checkpoints, switching every `T_w` steps.
pub fn train_waypoint_guided(
    student: Model,
    waypoints: Box<dyn WaypointSource>,
    data: TaskData,
    cfg: &DistillConfig,
) -> Result<(Model, Vec<StepRecord>)> {
    let mut t = Trainer::waypoint(student, waypoints, cfg.clone())?;
    let recs = t.run(data, &mut NoObserver)?;
    Ok((t.into_student(), recs))
}
