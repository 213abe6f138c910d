//! The one structured config controlling every pipeline constant.
//!
//! Two presets: `default` mirrors the published hyperparameters, `tiny` is
//! the desk-scale preset every acceptance test runs. A config file carries
//! this struct (TOML/JSON); CLI flags override file values; `resolved()`
//! re-derives the cross-field invariants after any edits.

use serde::{Deserialize, Serialize};

use crate::acoustic::AcousticConfig;
use crate::corpus::mel::MelConfig;
use crate::corpus::toy::ToySpec;
use crate::error::{Error, Result};
use crate::extractor::ExtractorConfig;
use crate::predictor::PredictorConfig;
use crate::training::schedule::TrainingSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preset: String,
    pub seed: u64,
    /// Context radius L: the window holds 2L+1 sentences.
    pub context_radius: usize,
    /// Fraction of chapters held out for evaluation.
    pub eval_fraction: f64,
    /// External embedder command; None uses the deterministic fallback.
    pub embedder_command: Option<Vec<String>>,
    pub mel: MelConfig,
    pub toy: ToySpec,
    pub extractor: ExtractorConfig,
    pub predictor: PredictorConfig,
    pub acoustic: AcousticConfig,
    pub schedule: TrainingSchedule,
}

impl PipelineConfig {
    pub fn default_preset() -> Self {
        PipelineConfig {
            preset: "default".into(),
            seed: 1,
            context_radius: 2,
            eval_fraction: 0.25,
            embedder_command: None,
            mel: MelConfig::default(),
            toy: ToySpec::default(),
            extractor: ExtractorConfig::default_preset(),
            predictor: PredictorConfig::default_preset(),
            acoustic: AcousticConfig::default_preset(),
            schedule: TrainingSchedule::default_preset(),
        }
        .resolved()
    }

    pub fn tiny_preset() -> Self {
        PipelineConfig {
            preset: "tiny".into(),
            seed: 1,
            context_radius: 2,
            eval_fraction: 0.25,
            embedder_command: None,
            mel: MelConfig::default(),
            toy: ToySpec::default(),
            extractor: ExtractorConfig::tiny_preset(),
            predictor: PredictorConfig::tiny_preset(),
            acoustic: AcousticConfig::tiny_preset(),
            schedule: TrainingSchedule::tiny_preset(),
        }
        .resolved()
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default_preset()),
            "tiny" => Ok(Self::tiny_preset()),
            other => Err(Error::invalid(format!(
                "unknown preset '{other}' (expected 'default' or 'tiny')"
            ))),
        }
    }

    /// Re-derives fields that must agree across sections: the toy corpus
    /// uses the pipeline mel config, the style width flows from the
    /// extractor into the predictor and acoustic model, and the root seed
    /// feeds the schedule.
    pub fn resolved(mut self) -> Self {
        self.toy.mel = self.mel.clone();
        self.acoustic.n_mels = self.mel.n_mels;
        self.acoustic.d_style = self.extractor.d_style;
        self.predictor.d_style = self.extractor.d_style;
        self.schedule.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.schedule.validate()?;
        if self.acoustic.d_style != self.extractor.d_style
            || self.predictor.d_style != self.extractor.d_style
        {
            return Err(Error::invalid(
                "d_style must agree across extractor, predictor and acoustic sections",
            ));
        }
        if self.acoustic.n_mels != self.mel.n_mels {
            return Err(Error::invalid("acoustic n_mels must match the mel config"));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::invalid("eval_fraction must be in [0, 1)"));
        }
        if !self.acoustic.d_model.is_multiple_of(self.acoustic.n_heads) {
            return Err(Error::invalid("d_model must be divisible by n_heads"));
        }
        if !self
            .extractor
            .d_style
            .is_multiple_of(self.extractor.n_heads)
        {
            return Err(Error::invalid("d_style must be divisible by token heads"));
        }
        Ok(())
    }
}
