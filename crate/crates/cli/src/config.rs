//! Run configuration: one TOML file with a section per pipeline stage.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected.

use std::path::Path;

use cald_core::convert::ConversionPlan;
use cald_core::distill::DistillConfig;
use cald_core::layers::ShareMode;
use cald_core::model::LinformerSpec;
use cald_core::tasks::{Split, TaskKind, TaskSpec};
use cald_core::{HeadKind, MixerKind, ModelSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces every other seed in the file.
    pub seed: Option<u64>,
    pub task: TaskSpec,
    pub model: ModelConfig,
    /// Plain fine-tuning of the teacher (mode and loss weights are ignored).
    pub teacher: DistillConfig,
    pub conversion: ConversionConfig,
    pub distill: DistillConfig,
    pub io: IoConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            task: TaskSpec::new(TaskKind::FirstLastMatch, 8, 128, [2000, 500, 500], 0),
            model: ModelConfig::default(),
            teacher: DistillConfig::default(),
            conversion: ConversionConfig::default(),
            distill: DistillConfig::default(),
            io: IoConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// Teacher architecture. The head and vocabulary follow from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub blocks: usize,
    /// Defaults to the task's sequence length.
    pub max_len: Option<usize>,
    /// Defaults to causal for language modeling only.
    pub causal: Option<bool>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            ffn_hidden: 128,
            blocks: 2,
            max_len: None,
            causal: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherStage {
    /// The teacher before fine-tuning.
    Source,
    /// The fine-tuned teacher.
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConversionConfig {
    /// Which teacher the student is built from.
    pub from: TeacherStage,
    /// Mixer for every block, unless `mixers` lists one per block.
    pub mixer: MixerKind,
    pub mixers: Option<Vec<MixerKind>>,
    pub linformer_rank: usize,
    pub sharing: ShareMode,
    pub ssm_state: usize,
    pub seed: u64,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self {
            from: TeacherStage::Target,
            mixer: MixerKind::Linformer,
            mixers: None,
            linformer_rank: 8,
            sharing: ShareMode::None,
            ssm_state: 16,
            seed: 0,
        }
    }
}

impl ConversionConfig {
    pub fn plan(&self, blocks: usize) -> ConversionPlan {
        let mixers = self.mixers.clone().unwrap_or_else(|| vec![self.mixer; blocks]);
        ConversionPlan {
            mixers,
            linformer: Some(LinformerSpec {
                rank: self.linformer_rank,
                sharing: self.sharing,
            }),
            ssm_state: self.ssm_state,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Save a checkpoint and resumable state every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Teacher waypoint interval; defaults to `distill.waypoint_interval`.
    pub waypoint_interval: Option<usize>,
    /// Subdirectory of `distill/` for this run; defaults to the mode name.
    pub run_name: Option<String>,
    pub eval_split: Split,
    /// Progress line every this many steps (0: ten per run).
    pub log_every: usize,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            checkpoint_every: 0,
            waypoint_interval: None,
            run_name: None,
            eval_split: Split::Val,
            log_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub probe_samples: usize,
    pub trajectory_samples: usize,
    pub probe_seed: u64,
    /// Distillation runs to include in trajectory plots (empty: all).
    pub variants: Vec<String>,
    pub bench_lengths: Vec<usize>,
    pub bench_runs: usize,
    pub bench_width: usize,
    pub bench_heads: usize,
    pub bench_ffn_hidden: usize,
    pub bench_blocks: usize,
    pub bench_batch: usize,
    /// Linformer rank in the benchmark (0: leave Linformer out).
    pub bench_linformer_rank: usize,
    pub bench_ssm_state: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            probe_samples: 100,
            trajectory_samples: 20,
            probe_seed: 0,
            variants: vec![],
            bench_lengths: vec![256, 512, 1024, 2048],
            bench_runs: 3,
            bench_width: 32,
            bench_heads: 2,
            bench_ffn_hidden: 64,
            bench_blocks: 1,
            bench_batch: 1,
            bench_linformer_rank: 64,
            bench_ssm_state: 16,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let text = match path {
            None => String::new(),
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Missing {
                path: p.to_path_buf(),
                reason: e.to_string(),
            })?,
        };
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Apply the global seed and derived defaults, then validate.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self, CliError> {
        if seed_override.is_some() {
            self.seed = seed_override;
        }
        if let Some(s) = self.seed {
            self.task.seed = s;
            self.model.seed = s;
            self.teacher.seed = s;
            self.conversion.seed = s;
            self.distill.seed = s;
        }
        let lm = self.task.kind == TaskKind::CharLm;
        self.model.causal.get_or_insert(lm);
        self.model.max_len.get_or_insert(self.task.seq_len);
        self.io.waypoint_interval.get_or_insert(self.distill.waypoint_interval);

        // gradient clipping to 1 by default for SSM students
        let plan = self.conversion.plan(self.model.blocks);
        let ssm = plan
            .mixers
            .iter()
            .any(|m| matches!(m, MixerKind::Ssm | MixerKind::BidirectionalSsm));
        if ssm && self.distill.optimizer.clip_norm.is_none() {
            self.distill.optimizer.clip_norm = Some(1.0);
        }

        let bad = |e: cald_core::Error| CliError::Config(e.to_string());
        self.task.validate().map_err(bad)?;
        self.teacher_spec().validate().map_err(bad)?;
        self.teacher.validate().map_err(bad)?;
        self.distill.validate().map_err(bad)?;
        if plan.mixers.len() != self.model.blocks {
            return Err(CliError::Config(format!(
                "conversion lists {} mixers for {} blocks",
                plan.mixers.len(),
                self.model.blocks
            )));
        }
        if self.io.waypoint_interval == Some(0) {
            return Err(CliError::Config("io.waypoint_interval must be >= 1".into()));
        }
        if self.analysis.bench_runs < 3 || self.analysis.bench_lengths.len() < 4 {
            return Err(CliError::Config("bench needs runs >= 3 and at least 4 lengths".into()));
        }
        Ok(self)
    }

    pub fn teacher_spec(&self) -> ModelSpec {
        let head = match self.task.kind {
            TaskKind::CharLm => HeadKind::LanguageModel,
            _ => HeadKind::Classify {
                classes: self.task.classes(),
            },
        };
        ModelSpec {
            vocab: self.task.model_vocab(),
            max_len: self.model.max_len.unwrap_or(self.task.seq_len),
            width: self.model.width,
            heads: self.model.heads,
            ffn_hidden: self.model.ffn_hidden,
            blocks: vec![MixerKind::Attention; self.model.blocks],
            head,
            causal: self.model.causal.unwrap_or(false),
            linformer: None,
            ssm_state: 0,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_valid() {
        let c = RunConfig::parse("").unwrap().resolve(None).unwrap();
        assert_eq!(c.model.max_len, Some(128));
        assert_eq!(c.io.waypoint_interval, Some(100));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::parse("[model]\nwidht = 3\n"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("bogus = 1\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let c = RunConfig::parse("seed = 4\n").unwrap().resolve(Some(9)).unwrap();
        assert_eq!(
            [c.task.seed, c.model.seed, c.teacher.seed, c.conversion.seed, c.distill.seed],
            [9; 5]
        );
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::parse("[distill]\nmode = \"waypoint\"\nalpha_ld = 3.0\n[distill.optimizer]\nschedule = \"cosine\"\n")
            .unwrap()
            .resolve(None)
            .unwrap();
        let back = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn ssm_students_clip_by_default() {
        let c = RunConfig::parse("[conversion]\nmixer = \"ssm\"\n").unwrap().resolve(None).unwrap();
        assert_eq!(c.distill.optimizer.clip_norm, Some(1.0));
    }
}
