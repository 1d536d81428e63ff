//! Run configuration: the single JSON document every CLI command consumes.
//!
//! A `RunConfig` bundles the encoder shapes, MoPE settings, prompt flags,
//! dataset recipe, and trainer hyperparameters, plus an output directory.
//! Unknown keys are rejected so a typo never silently falls back to a
//! default. `SweepSpec` extends a base config with one swept axis.

use crate::data::SyntheticConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, MopeSettings, PromptFlags};
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// main-modality encoder (frozen)
    pub encoder: EncoderConfig,
    /// complementary-modality encoder (frozen)
    pub complementary: EncoderConfig,
    pub mope: MopeSettings,
    pub prompts: PromptFlags,
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    /// l′ vanilla prompts per complementary layer
    pub comp_prompt_len: usize,
    /// replace MoPE with one learnable dynamic prompt (degeneracy model)
    pub single_dynamic: bool,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fusion = FusionConfig::default();
        RunConfig {
            encoder: fusion.main,
            complementary: fusion.complementary,
            mope: fusion.mope,
            prompts: fusion.prompts,
            data: SyntheticConfig::default(),
            train: TrainConfig::default(),
            comp_prompt_len: fusion.comp_prompt_len,
            single_dynamic: false,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Assemble the model config implied by this run config.
    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            main: self.encoder.clone(),
            complementary: self.complementary.clone(),
            num_classes: self.data.num_classes,
            comp_prompt_len: self.comp_prompt_len,
            prompts: self.prompts,
            mope: self.mope.clone(),
            single_dynamic: self.single_dynamic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.fusion_config().validate()?;
        if self.encoder.vocab != Some(self.data.vocab) {
            return Err(Error::Config(format!(
                "encoder vocab {:?} must equal data vocab {}",
                self.encoder.vocab, self.data.vocab
            )));
        }
        if self.encoder.seq_len != self.data.seq_len {
            return Err(Error::Config(format!(
                "encoder seq_len {} must equal data seq_len {}",
                self.encoder.seq_len, self.data.seq_len
            )));
        }
        if self.complementary.vocab.is_some() {
            return Err(Error::Config(
                "complementary encoder consumes raw feature vectors; vocab must be null".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!(
                "{}: line {}, column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
        std::fs::write(path, text + "\n")
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// scale the number of experts k
    Experts,
    /// scale a single prompt's length to the same parameter count
    Length,
    /// scale the number of training shots
    Shots,
}

/// Per-layer tunable prompt count of a full MoPE model with k experts of
/// length l: k·l expert rows + l static rows + 1 mapped row.
pub fn matched_prompt_count(experts: usize, prompt_len: usize) -> usize {
    (experts + 1) * prompt_len + 1
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: RunConfig,
}

/// One concrete training run inside a sweep.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub axis_value: usize,
    pub seed: u64,
    /// per-layer tunable prompt count this point is matched against
    pub matched_prompts: usize,
    pub config: RunConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep needs values and seeds".into()));
        }
        if self.values.iter().any(|&v| v == 0) {
            return Err(Error::Config("sweep values must be positive".into()));
        }
        self.base.validate()
    }

    pub fn load(path: &Path) -> Result<SweepSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let spec: SweepSpec = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!(
                "{}: line {}, column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        spec.validate()?;
        Ok(spec)
    }

    /// Expand the spec into concrete runs, one per (value, seed).
    pub fn runs(&self) -> Vec<SweepRun> {
        let mut out = Vec::new();
        for &value in &self.values {
            for &seed in &self.seeds {
                let mut cfg = self.base.clone();
                cfg.train.seed = seed;
                let matched = match self.axis {
                    SweepAxis::Experts => {
                        cfg.mope.experts = value;
                        matched_prompt_count(value, cfg.mope.prompt_len)
                    }
                    SweepAxis::Length => {
                        // a single static prompt grown to the same per-layer
                        // parameter count as a k-expert MoPE point
                        let len = matched_prompt_count(value, cfg.mope.prompt_len);
                        cfg.prompts = PromptFlags {
                            static_prompt: true,
                            dynamic_prompt: false,
                            mapped_prompt: false,
                        };
                        cfg.mope.prompt_len = len;
                        len
                    }
                    SweepAxis::Shots => {
                        cfg.data.train_size = value;
                        matched_prompt_count(cfg.mope.experts, cfg.mope.prompt_len)
                    }
                };
                out.push(SweepRun {
                    axis_value: value,
                    seed,
                    matched_prompts: matched,
                    config: cfg,
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"learning_rate": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
    }

    #[test]
    fn nested_unknown_key_rejected() {
        let err =
            serde_json::from_str::<RunConfig>(r#"{"mope": {"n_experts": 4}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"));
    }

    #[test]
    fn defaults_match_published_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.mope.experts, 16);
        assert_eq!(cfg.mope.prompt_len, 6);
        assert_eq!(cfg.mope.tau, 0.1);
        assert_eq!(cfg.mope.gamma, 0.1);
        assert_eq!(cfg.mope.d_c, 8);
        assert_eq!(cfg.mope.d_i, 2);
        assert_eq!(cfg.comp_prompt_len, 4);
        assert_eq!(cfg.train.imp_weight, 0.01);
    }

    #[test]
    fn validate_ties_data_to_encoder() {
        let mut cfg = RunConfig::default();
        cfg.data.seq_len = cfg.encoder.seq_len + 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.encoder.vocab = Some(cfg.data.vocab + 1);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn expert_sweep_counts_runs() {
        let spec = SweepSpec {
            axis: SweepAxis::Experts,
            values: vec![2, 4, 8],
            seeds: vec![0, 1, 2],
            base: RunConfig::default(),
        };
        let runs = spec.runs();
        assert_eq!(runs.len(), 9);
        assert_eq!(runs[0].config.mope.experts, 2);
        assert_eq!(runs[0].matched_prompts, matched_prompt_count(2, 6));
    }

    #[test]
    fn length_sweep_matches_expert_parameter_counts() {
        let base = RunConfig::default();
        let expert_spec = SweepSpec {
            axis: SweepAxis::Experts,
            values: vec![2, 4, 8],
            seeds: vec![0],
            base: base.clone(),
        };
        let length_spec = SweepSpec {
            axis: SweepAxis::Length,
            values: vec![2, 4, 8],
            seeds: vec![0],
            base,
        };
        for (e, l) in expert_spec.runs().iter().zip(length_spec.runs().iter()) {
            assert_eq!(e.matched_prompts, l.matched_prompts);
            assert_eq!(l.config.mope.prompt_len, l.matched_prompts);
            assert!(!l.config.prompts.dynamic_prompt);
            assert!(!l.config.prompts.mapped_prompt);
        }
        // the paper's worked example: k = 2, l = 6 gives 19 prompts per layer
        assert_eq!(matched_prompt_count(2, 6), 19);
    }

    #[test]
    fn shots_sweep_sets_train_size() {
        let spec = SweepSpec {
            axis: SweepAxis::Shots,
            values: vec![64, 256],
            seeds: vec![0],
            base: RunConfig::default(),
        };
        let runs = spec.runs();
        assert_eq!(runs[0].config.data.train_size, 64);
        assert_eq!(runs[1].config.data.train_size, 256);
    }
}
