use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, LineWriter, Write};
use std::path::{Path, PathBuf};

use cald_core::analysis::plot::{Chart, Scale};
use cald_core::analysis::{self, ModelRunner, Timeable, TrajectorySet};
use cald_core::convert::{describe_conversion, transfer_parameters};
use cald_core::distill::{
    GuidanceMode, JsonlWriter, StepObserver, StepRecord, TaskData, TrainState, Trainer,
};
use cald_core::persist::{
    self, file_sha256, load_checkpoint, load_model, save_checkpoint, save_train_state,
    CheckpointEvery, WaypointRecorder, WaypointStore,
};
use cald_core::tasks::{self, evaluate, Dataset, Metrics, Splits};
use cald_core::{MixerKind, Model, ModelSpec};
use serde_json::json;

use crate::config::{RunConfig, TeacherStage};
use crate::error::CliError;

type Res<T> = Result<T, CliError>;

/// Fixed file layout of a run directory.
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn data(&self) -> PathBuf {
        self.out.join("data.bin")
    }
    pub fn teacher(&self, file: &str) -> PathBuf {
        self.out.join("teacher").join(file)
    }
    pub fn student_init(&self) -> PathBuf {
        self.out.join("student").join("init.ckpt")
    }
    pub fn distill(&self, run: &str) -> PathBuf {
        self.out.join("distill").join(run)
    }
    pub fn analysis(&self, file: &str) -> PathBuf {
        self.out.join("analysis").join(file)
    }
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub layout: Layout,
    pub quiet: bool,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn need(path: &Path, hint: &str) -> Res<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::Missing {
            path: path.to_path_buf(),
            reason: format!("not found; {hint}"),
        })
    }
}

fn mkdirs(dir: &Path) -> Res<()> {
    fs::create_dir_all(dir).map_err(|e| cald_core::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    if let Some(d) = path.parent() {
        mkdirs(d)?;
    }
    fs::write(path, text).map_err(|e| cald_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Res<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn remove_dir(dir: &Path) -> Res<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| cald_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn echo_config(ctx: &Ctx, command: &str) -> Res<()> {
    write_text(&ctx.layout.out.join(format!("{command}.config.toml")), &ctx.cfg.to_toml())
}

fn load_data(ctx: &Ctx) -> Res<Splits> {
    let p = need(&ctx.layout.data(), "run gen-data first")?;
    let splits = tasks::load_splits(&p)?;
    let (t, s) = (&splits.train, &ctx.cfg.task);
    if t.seq_len != s.seq_len || t.vocab != s.model_vocab() || t.kind != s.kind {
        return Err(CliError::Config(format!(
            "{} holds {:?} data with seq_len {} and vocab {}, config asks for {:?} / {} / {}",
            p.display(),
            t.kind,
            t.seq_len,
            t.vocab,
            s.kind,
            s.seq_len,
            s.model_vocab()
        )));
    }
    Ok(splits)
}

fn load_artifact(path: &Path, hint: &str) -> Res<Model> {
    Ok(load_model(&need(path, hint)?)?)
}

// ----- training driver -------------------------------------------------------

struct Progress {
    every: usize,
    total: usize,
    label: String,
}

impl StepObserver for Progress {
    fn on_step(&mut self, _: &Trainer, r: &StepRecord) -> cald_core::Result<()> {
        if r.step % self.every == 0 || r.step == self.total {
            let eval = r.eval.map(|e| format!(" eval={e:.4}")).unwrap_or_default();
            eprintln!(
                "[{}] step {}/{} ce={:.5} kd={:.5} ld={:.5} total={:.5} lr={:.3e}{eval}",
                self.label, r.step, self.total, r.ce, r.kd, r.ld, r.total, r.lr
            );
        }
        Ok(())
    }
}

/// Saves `checkpoints/step-NNNNNN.ckpt` every `every` steps and at the end.
struct Snapshots {
    dir: PathBuf,
    every: usize,
}

impl Snapshots {
    fn path(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step-{step:06}.ckpt"))
    }
}

impl StepObserver for Snapshots {
    fn on_step(&mut self, t: &Trainer, r: &StepRecord) -> cald_core::Result<()> {
        if r.step % self.every == 0 || t.is_done() {
            save_checkpoint(t.student(), r.step, &self.path(r.step))?;
        }
        Ok(())
    }
}

struct All(Vec<Box<dyn StepObserver>>);

impl StepObserver for All {
    fn on_step(&mut self, t: &Trainer, r: &StepRecord) -> cald_core::Result<()> {
        self.0.iter_mut().try_for_each(|o| o.on_step(t, r))
    }
}

/// Keep only log lines for steps up to `step`, so a resumed run appends
/// exactly what an uninterrupted one would have written.
fn truncate_log(path: &Path, step: usize) -> Res<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = File::open(path).map_err(|e| cald_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| cald_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let rec: StepRecord = serde_json::from_str(&line)?;
        if rec.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_text(path, &kept)
}

struct RunDir {
    dir: PathBuf,
    label: String,
    resume: bool,
}

/// Run `trainer` to completion with logging, snapshots and resumable state.
fn drive(
    ctx: &Ctx,
    mut trainer: Trainer,
    data: TaskData,
    run: &RunDir,
    teacher_optim: bool,
    extra: Option<Box<dyn StepObserver>>,
) -> Res<(Model, Vec<StepRecord>)> {
    let state_dir = run.dir.join("state");
    let log_path = run.dir.join("log.jsonl");
    let snaps = Snapshots {
        dir: run.dir.join("checkpoints"),
        every: ctx.cfg.io.checkpoint_every,
    };
    let resumed = run.resume && persist::train_state_paths(&state_dir).0.exists();
    if resumed {
        let cfg = trainer.config().clone();
        let state: TrainState = persist::load_train_state(
            &state_dir,
            cfg.optimizer,
            teacher_optim.then_some(cfg.teacher_optimizer),
        )?;
        ctx.say(format!("[{}] resuming from step {}", run.label, state.step));
        truncate_log(&log_path, state.step)?;
        trainer = trainer.resume(state)?;
    } else {
        remove_dir(&run.dir.join("checkpoints"))?;
        remove_dir(&state_dir)?;
        mkdirs(&run.dir)?;
        let _ = fs::remove_file(&log_path);
        if snaps.every > 0 {
            save_checkpoint(trainer.student(), 0, &snaps.path(0))?;
        }
    }
    let log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| cald_core::Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
    let total = trainer.config().steps;
    let mut obs: Vec<Box<dyn StepObserver>> = vec![Box::new(JsonlWriter(LineWriter::new(log)))];
    if let Some(e) = extra {
        obs.push(e);
    }
    if snaps.every > 0 {
        obs.push(Box::new(CheckpointEvery {
            dir: state_dir.clone(),
            every: snaps.every,
        }));
        obs.push(Box::new(snaps));
    }
    if !ctx.quiet {
        let every = match ctx.cfg.io.log_every {
            0 => (total / 10).max(1),
            n => n,
        };
        obs.push(Box::new(Progress {
            every,
            total,
            label: run.label.clone(),
        }));
    }
    let mut all = All(obs);
    match trainer.run(data, &mut all) {
        Ok(records) => Ok((trainer.into_student(), records)),
        Err(e) => {
            if e.is_numeric_fault() {
                // leave a resumable state at the last good step
                save_train_state(&trainer.state(), &state_dir)?;
                ctx.say(format!(
                    "[{}] aborted; state at step {} saved to {}",
                    run.label,
                    trainer.step(),
                    state_dir.display()
                ));
            }
            Err(e.into())
        }
    }
}

fn eval_split<'a>(ctx: &Ctx, splits: &'a Splits) -> &'a Dataset {
    splits.get(ctx.cfg.io.eval_split)
}

fn report_metrics(ctx: &Ctx, name: &str, m: &Metrics) {
    let head = match (m.accuracy, m.perplexity) {
        (Some(a), _) => format!("accuracy {a:.4}"),
        (_, Some(p)) => format!("perplexity {p:.4}"),
        _ => String::new(),
    };
    ctx.say(format!("{name}: loss {:.5} {head} (n={})", m.loss, m.count));
}

// ----- commands --------------------------------------------------------------

pub fn gen_data(ctx: &Ctx) -> Res<()> {
    let splits = tasks::generate(&ctx.cfg.task)?;
    mkdirs(&ctx.layout.out)?;
    tasks::save_splits(&splits, &ctx.layout.data())?;
    let summary = json!({
        "kind": splits.spec.kind,
        "seq_len": splits.train.seq_len,
        "vocab": splits.train.vocab,
        "train": splits.train.len(),
        "val": splits.val.len(),
        "test": splits.test.len(),
        "train_positive_rate": splits.spec.kind.is_classification().then(|| splits.train.positive_rate()),
        "sha256": file_sha256(&ctx.layout.data())?,
    });
    write_json(&ctx.layout.out.join("data.json"), &summary)?;
    ctx.say(format!("wrote {}", ctx.layout.data().display()));
    Ok(())
}

pub fn train_teacher(ctx: &Ctx, resume: bool) -> Res<()> {
    let splits = load_data(ctx)?;
    let source = Model::init(ctx.cfg.teacher_spec(), ctx.cfg.model.seed)?;
    save_checkpoint(&source, 0, &ctx.layout.teacher("source.ckpt"))?;
    let wdir = ctx.layout.teacher("waypoints");
    if !resume {
        remove_dir(&wdir)?;
    }
    let interval = ctx.cfg.io.waypoint_interval.unwrap_or(ctx.cfg.distill.waypoint_interval);
    let recorder = WaypointRecorder {
        store: WaypointStore::create(&wdir, interval)?,
    };
    let trainer = Trainer::unguided(source, ctx.cfg.teacher.clone())?;
    let data = TaskData::new(&splits.train).with_val(&splits.val);
    let run = RunDir {
        dir: ctx.layout.out.join("teacher"),
        label: "teacher".into(),
        resume,
    };
    let (target, _) = drive(ctx, trainer, data, &run, false, Some(Box::new(recorder)))?;
    save_checkpoint(&target, ctx.cfg.teacher.steps, &ctx.layout.teacher("target.ckpt"))?;
    let m = evaluate(&target, eval_split(ctx, &splits), ctx.cfg.teacher.eval_batch_size)?;
    write_json(&ctx.layout.teacher("metrics.json"), &m)?;
    report_metrics(ctx, "teacher", &m);
    Ok(())
}

pub fn convert(ctx: &Ctx) -> Res<()> {
    let hint = "run train-teacher first";
    let teacher = match ctx.cfg.conversion.from {
        TeacherStage::Source => load_artifact(&ctx.layout.teacher("source.ckpt"), hint)?,
        TeacherStage::Target => load_artifact(&ctx.layout.teacher("target.ckpt"), hint)?,
    };
    let plan = ctx.cfg.conversion.plan(teacher.spec().blocks.len());
    let report = describe_conversion(&teacher, &plan).map_err(|e| CliError::Config(e.to_string()))?;
    let student = transfer_parameters(&teacher, &plan).map_err(|e| CliError::Config(e.to_string()))?;
    save_checkpoint(&student, 0, &ctx.layout.student_init())?;
    let text = format!(
        "teacher parameters: {}\nstudent parameters: {}\n{report}",
        teacher.num_params(),
        student.num_params()
    );
    write_text(&ctx.layout.out.join("student").join("conversion.txt"), &text)?;
    ctx.say(text.trim_end());
    Ok(())
}

fn mode_name(mode: GuidanceMode) -> String {
    serde_json::to_value(mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{mode:?}").to_lowercase())
}

pub fn run_name(cfg: &RunConfig) -> String {
    cfg.io.run_name.clone().unwrap_or_else(|| mode_name(cfg.distill.mode))
}

pub fn distill(ctx: &Ctx, resume: bool) -> Res<()> {
    let splits = load_data(ctx)?;
    let student = load_artifact(&ctx.layout.student_init(), "run convert first")?;
    let cfg = ctx.cfg.distill.clone();
    let hint = "run train-teacher first";
    let trainer = match cfg.mode {
        GuidanceMode::Unguided => Trainer::unguided(student, cfg.clone())?,
        GuidanceMode::Target | GuidanceMode::Hybrid => {
            let t = load_artifact(&ctx.layout.teacher("target.ckpt"), hint)?;
            Trainer::target(student, t, cfg.clone())?
        }
        GuidanceMode::Trajectory => {
            let t = load_artifact(&ctx.layout.teacher("source.ckpt"), hint)?;
            Trainer::trajectory(student, t, cfg.clone())?
        }
        GuidanceMode::Waypoint => {
            let dir = need(&ctx.layout.teacher("waypoints").join(persist::MANIFEST), hint)?;
            let store = WaypointStore::open(dir.parent().unwrap())?;
            store.verify()?;
            Trainer::waypoint(student, Box::new(store), cfg.clone())?
        }
    };
    let name = run_name(&ctx.cfg);
    let run = RunDir {
        dir: ctx.layout.distill(&name),
        label: name.clone(),
        resume,
    };
    let data = TaskData::new(&splits.train).with_val(&splits.val);
    let live = cfg.mode == GuidanceMode::Trajectory;
    let (student, _) = drive(ctx, trainer, data, &run, live, None)?;
    save_checkpoint(&student, cfg.steps, &run.dir.join("student.ckpt"))?;
    let m = evaluate(&student, eval_split(ctx, &splits), cfg.eval_batch_size)?;
    write_json(&run.dir.join("metrics.json"), &m)?;
    report_metrics(ctx, &name, &m);
    Ok(())
}

fn distill_runs(ctx: &Ctx) -> Vec<(String, PathBuf)> {
    let root = ctx.layout.out.join("distill");
    let mut runs: Vec<(String, PathBuf)> = fs::read_dir(&root)
        .into_iter()
        .flatten()
        .flatten()
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .filter(|(n, _)| ctx.cfg.analysis.variants.is_empty() || ctx.cfg.analysis.variants.contains(n))
        .collect();
    runs.sort();
    runs
}

pub fn eval(ctx: &Ctx, models: &[PathBuf]) -> Res<()> {
    let splits = load_data(ctx)?;
    let mut targets: Vec<(String, PathBuf)> = models
        .iter()
        .map(|p| (p.display().to_string(), p.clone()))
        .collect();
    if targets.is_empty() {
        for (n, p) in [
            ("teacher-source", ctx.layout.teacher("source.ckpt")),
            ("teacher-target", ctx.layout.teacher("target.ckpt")),
            ("student-init", ctx.layout.student_init()),
        ] {
            if p.exists() {
                targets.push((n.into(), p));
            }
        }
        for (n, dir) in distill_runs(ctx) {
            let p = dir.join("student.ckpt");
            if p.exists() {
                targets.push((format!("distill/{n}"), p));
            }
        }
        if targets.is_empty() {
            return Err(CliError::Missing {
                path: ctx.layout.out.clone(),
                reason: "no checkpoints to evaluate".into(),
            });
        }
    }
    let mut results = BTreeMap::new();
    for (name, path) in targets {
        let m = evaluate(&load_artifact(&path, "pass an existing checkpoint")?, eval_split(ctx, &splits), ctx.cfg.distill.eval_batch_size)?;
        report_metrics(ctx, &name, &m);
        results.insert(name, m);
    }
    write_json(&ctx.layout.out.join("eval.json"), &results)?;
    println!("{}", serde_json::to_string(&results)?);
    Ok(())
}

/// Teacher fine-tuning trajectory: the source at step 0 then every waypoint.
fn teacher_checkpoints(ctx: &Ctx) -> Res<(Model, Vec<(usize, Model)>)> {
    let hint = "run train-teacher first";
    let source = load_artifact(&ctx.layout.teacher("source.ckpt"), hint)?;
    let dir = need(&ctx.layout.teacher("waypoints").join(persist::MANIFEST), hint)?;
    let store = WaypointStore::open(dir.parent().unwrap())?;
    store.verify()?;
    let mut cps = vec![(0, source.clone())];
    for e in store.entries() {
        cps.push((e.teacher_step, load_model(&store.dir().join(&e.file))?));
    }
    Ok((source, cps))
}

pub fn analyze_shift(ctx: &Ctx) -> Res<()> {
    let splits = load_data(ctx)?;
    let (source, cps) = teacher_checkpoints(ctx)?;
    let n = ctx.cfg.analysis.probe_samples.min(splits.val.len());
    let probe = analysis::probe_batch(&splits.val, n, ctx.cfg.analysis.probe_seed)?;
    let refs: Vec<(usize, &Model)> = cps.iter().map(|(s, m)| (*s, m)).collect();
    let curve = analysis::hidden_shift(&source, &refs, &probe)?;
    mkdirs(&ctx.layout.out.join("analysis"))?;
    curve.write_csv(&ctx.layout.analysis("shift.csv"))?;
    write_json(&ctx.layout.analysis("shift.json"), &curve)?;
    Chart {
        title: "Hidden-state shift during teacher fine-tuning".into(),
        x_label: "teacher step".into(),
        y_label: "mean cosine distance".into(),
        series: vec![(
            "teacher".into(),
            curve.points.iter().map(|&(s, d)| (s as f64, d)).collect(),
        )],
        ..Default::default()
    }
    .write(&ctx.layout.analysis("shift.svg"))?;
    for (s, d) in &curve.points {
        ctx.say(format!("step {s}: {d:.6}"));
    }
    Ok(())
}

fn run_checkpoints(dir: &Path) -> Res<Vec<(usize, Model)>> {
    let snap = dir.join("checkpoints");
    let mut files: Vec<PathBuf> = fs::read_dir(&snap)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    files.sort();
    if files.is_empty() {
        let fin = need(&dir.join("student.ckpt"), "run distill first")?;
        files.push(fin);
    }
    files
        .iter()
        .map(|p| {
            let c = load_checkpoint(p)?;
            Ok((c.step, c.model))
        })
        .collect()
}

pub fn analyze_trajectory(ctx: &Ctx) -> Res<()> {
    let splits = load_data(ctx)?;
    let (_, teacher) = teacher_checkpoints(ctx)?;
    let mut variants = vec![("teacher".to_string(), teacher)];
    for (name, dir) in distill_runs(ctx) {
        variants.push((name, run_checkpoints(&dir)?));
    }
    let n = ctx.cfg.analysis.trajectory_samples.min(splits.val.len());
    let probe = analysis::probe_batch(&splits.val, n, ctx.cfg.analysis.probe_seed)?;
    let sets: Vec<TrajectorySet> = variants
        .iter()
        .map(|(name, cps)| TrajectorySet {
            name: name.clone(),
            checkpoints: cps.iter().map(|(s, m)| (*s, m)).collect(),
        })
        .collect();
    let proj = analysis::trajectory_projection(&sets, &probe)?;
    mkdirs(&ctx.layout.out.join("analysis"))?;
    proj.write_csv(&ctx.layout.analysis("trajectory.csv"))?;
    write_json(&ctx.layout.analysis("trajectory.json"), &proj)?;
    Chart {
        title: "Hidden-state trajectories (PCA)".into(),
        x_label: format!("PC1 ({:.1}%)", 100.0 * proj.explained_variance[0]),
        y_label: format!("PC2 ({:.1}%)", 100.0 * proj.explained_variance[1]),
        series: proj
            .variants
            .iter()
            .map(|(n, pts)| (n.clone(), pts.iter().map(|p| (p.1[0], p.1[1])).collect()))
            .collect(),
        ..Default::default()
    }
    .write(&ctx.layout.analysis("trajectory.svg"))?;
    if let Some(t) = proj.final_point("teacher") {
        for (name, _) in proj.variants.iter().skip(1) {
            let p = proj.final_point(name).unwrap();
            ctx.say(format!(
                "{name}: final point distance to teacher {:.6}",
                ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt()
            ));
        }
    }
    Ok(())
}

pub fn bench(ctx: &Ctx) -> Res<()> {
    let a = &ctx.cfg.analysis;
    let max_len = *a.bench_lengths.iter().max().unwrap();
    let spec = |kind: MixerKind| ModelSpec {
        vocab: 8,
        max_len,
        width: a.bench_width,
        heads: a.bench_heads,
        ffn_hidden: a.bench_ffn_hidden,
        blocks: vec![kind; a.bench_blocks],
        head: cald_core::HeadKind::Classify { classes: 2 },
        causal: false,
        linformer: (kind == MixerKind::Linformer).then_some(cald_core::model::LinformerSpec {
            rank: a.bench_linformer_rank,
            sharing: cald_core::layers::ShareMode::None,
        }),
        ssm_state: if kind == MixerKind::Ssm { a.bench_ssm_state } else { 0 },
    };
    let mut kinds = vec![("attention", MixerKind::Attention), ("ssm", MixerKind::Ssm)];
    if a.bench_linformer_rank > 0 {
        kinds.insert(1, ("linformer", MixerKind::Linformer));
    }
    let mut models: Vec<Box<dyn Timeable>> = Vec::new();
    for (label, kind) in kinds {
        let m = Model::init(spec(kind), ctx.cfg.model.seed).map_err(|e| CliError::Config(e.to_string()))?;
        models.push(Box::new(ModelRunner::new(label, m, a.bench_batch, ctx.cfg.model.seed)));
    }
    let report = analysis::timing_bench(&mut models, &a.bench_lengths, a.bench_runs)?;
    mkdirs(&ctx.layout.out.join("analysis"))?;
    report.write_csv(&ctx.layout.analysis("bench.csv"))?;
    write_json(&ctx.layout.analysis("bench.json"), &report)?;
    let labels: Vec<String> = report.slopes.iter().map(|s| s.0.clone()).collect();
    Chart {
        title: "Forward time vs sequence length".into(),
        x_label: "sequence length".into(),
        y_label: "seconds".into(),
        x_scale: Scale::Log,
        y_scale: Scale::Log,
        series: labels.iter().map(|l| (l.clone(), report.series(l))).collect(),
        ..Default::default()
    }
    .write(&ctx.layout.analysis("bench.svg"))?;
    for (l, s) in &report.slopes {
        ctx.say(format!(
            "{l}: log-log slope {s:.3}, top doubling ratio {:.3}",
            report.top_ratio(l).unwrap_or(f64::NAN)
        ));
    }
    Ok(())
}

pub fn inspect_ckpt(path: &Path) -> Res<()> {
    let c = load_checkpoint(&need(path, "pass an existing checkpoint")?)?;
    let tensors: Vec<_> = c
        .model
        .params()
        .iter()
        .chain(c.extras.iter())
        .map(|(n, t)| json!({"name": n, "shape": t.shape()}))
        .collect();
    let out = json!({
        "path": path,
        "step": c.step,
        "spec": c.model.spec(),
        "parameters": c.model.num_params(),
        "tensors": tensors,
        "sha256": file_sha256(path)?,
    });
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
