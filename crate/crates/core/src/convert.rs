//! Model surgery: build a student from a teacher by keeping every
//! non-attention parameter and installing fresh linear-complexity mixers.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_param, LinformerSpec, MixerKind, Model, ModelSpec};
use crate::numcore::Rng;

/// Target mixer per block plus the settings of any new mixers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConversionPlan {
    pub mixers: Vec<MixerKind>,
    #[serde(default)]
    pub linformer: Option<LinformerSpec>,
    #[serde(default)]
    pub ssm_state: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ConversionPlan {
    /// Keep every block's current mixer.
    pub fn identity(spec: &ModelSpec) -> Self {
        Self {
            mixers: spec.blocks.clone(),
            linformer: spec.linformer,
            ssm_state: spec.ssm_state,
            seed: 0,
        }
    }

    /// Same mixer kind in all `blocks` blocks.
    pub fn uniform(kind: MixerKind, blocks: usize) -> Self {
        Self {
            mixers: vec![kind; blocks],
            linformer: None,
            ssm_state: 0,
            seed: 0,
        }
    }

    pub fn with_linformer(mut self, spec: LinformerSpec) -> Self {
        self.linformer = Some(spec);
        self
    }

    pub fn with_ssm_state(mut self, n: usize) -> Self {
        self.ssm_state = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn student_spec(&self, teacher: &ModelSpec) -> Result<ModelSpec> {
        if self.mixers.len() != teacher.blocks.len() {
            return Err(Error::shape(
                "conversion plan",
                format!(
                    "plan covers {} blocks, teacher has {}",
                    self.mixers.len(),
                    teacher.blocks.len()
                ),
            ));
        }
        let mut spec = teacher.clone();
        spec.blocks = self.mixers.clone();
        if self.mixers.contains(&MixerKind::Linformer) {
            spec.linformer = self.linformer.or(teacher.linformer);
        } else {
            spec.linformer = None;
        }
        let wants_ssm = self
            .mixers
            .iter()
            .any(|m| matches!(m, MixerKind::Ssm | MixerKind::BidirectionalSsm));
        spec.ssm_state = if wants_ssm { self.ssm_state } else { 0 };
        spec.validate()?;
        Ok(spec)
    }
}

/// Stable 64-bit FNV-1a, used to give each new parameter its own RNG stream.
fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Copy every teacher parameter the student also has (same name and shape);
/// draw the rest from the plan's seed.
///
/// Linformer blocks keep the teacher's Q/K/V/output projections and add E, F
/// drawn from N(0, 1). SSM blocks start from fresh mixers with
/// `A = diag(-1, ..., -n)` and an initial step size near 0.1.
pub fn transfer_parameters(teacher: &Model, plan: &ConversionPlan) -> Result<Model> {
    let spec = plan.student_spec(teacher.spec())?;
    let mut params = BTreeMap::new();
    for (name, shape) in spec.param_shapes() {
        let t = match teacher.param(&name) {
            Some(t) if t.shape() == shape.as_slice() => t.clone(),
            _ => {
                let mut rng = Rng::new(plan.seed, name_stream(&name));
                init_param(&name, &shape, &mut rng)
            }
        };
        params.insert(name, t);
    }
    Model::from_params(spec, params)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

/// What a conversion keeps, drops and creates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConversionReport {
    pub transferred: Vec<ParamGroup>,
    pub discarded: Vec<ParamGroup>,
    pub new: Vec<ParamGroup>,
}

impl ConversionReport {
    pub fn count(groups: &[ParamGroup]) -> usize {
        groups.iter().map(|g| g.count).sum()
    }
}

pub fn describe_conversion(teacher: &Model, plan: &ConversionPlan) -> Result<ConversionReport> {
    let spec = plan.student_spec(teacher.spec())?;
    let student = spec.param_shapes();
    let group = |name: &str, shape: &[usize]| ParamGroup {
        name: name.to_string(),
        shape: shape.to_vec(),
        count: shape.iter().product(),
    };
    let mut report = ConversionReport {
        transferred: vec![],
        discarded: vec![],
        new: vec![],
    };
    for (name, shape) in &student {
        match teacher.param(name) {
            Some(t) if t.shape() == shape.as_slice() => report.transferred.push(group(name, shape)),
            _ => report.new.push(group(name, shape)),
        }
    }
    for (name, t) in teacher.params() {
        if student.get(name).map(Vec::as_slice) != Some(t.shape()) {
            report.discarded.push(group(name, t.shape()));
        }
    }
    Ok(report)
}

impl fmt::Display for ConversionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (title, groups) in [
            ("transferred", &self.transferred),
            ("discarded", &self.discarded),
            ("new", &self.new),
        ] {
            writeln!(
                f,
                "{title}: {} arrays, {} values",
                groups.len(),
                Self::count(groups)
            )?;
            for g in groups.iter() {
                writeln!(f, "  {:<40} {:>12} {:?}", g.name, g.count, g.shape)?;
            }
        }
        Ok(())
    }
}
