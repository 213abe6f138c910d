//! Three-step training: level-wise extractor+acoustic training with
//! freezing, extractor-to-predictor knowledge distillation, and joint
//! fine-tuning at a lower learning rate.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod schedule;
pub mod stages;

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::{load_train_state, save_train_state, Checkpoint, TrainState};
pub use config::PipelineConfig;
pub use schedule::{lr_at, TrainingSchedule};
pub use stages::{
    distillation_loss, precompute_distill_cache, split_corpus, stage1_train, stage2_distill,
    stage3_finetune, ExtractedTargets, MetricsRecord, StageSpec,
};

use std::collections::HashMap;

use crate::acoustic::{AcousticModel, AcousticOutput, PhonemeSequence, VarianceTargets};
use crate::corpus::align::{average_by_duration, subword_frame_boundaries};
use crate::corpus::data::{ContextWindow, Utterance};
use crate::error::{Error, Result};
use crate::extractor::MultiScaleExtractor;
use crate::nn::{FreezeMask, ParamGraph, ParamStore};
use crate::num::Scalar;
use crate::predictor::{combine_predicted, MultiScalePredictor, SemanticEmbedder};
use crate::tensor::Tensor;

/// The three learned components plus the phoneme inventory they share.
pub struct Models {
    pub extractor: MultiScaleExtractor,
    pub predictor: MultiScalePredictor,
    pub acoustic: AcousticModel,
    pub inventory: Vec<String>,
    index: HashMap<String, usize>,
}

impl Models {
    pub fn from_config(cfg: &PipelineConfig, inventory: Vec<String>) -> Self {
        let index = inventory
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Models {
            extractor: MultiScaleExtractor::new(&cfg.extractor, &cfg.mel),
            predictor: MultiScalePredictor::new(&cfg.predictor),
            acoustic: AcousticModel::new(&cfg.acoustic, inventory.len()),
            inventory,
            index,
        }
    }

    /// Fresh parameter store for all components, seeded per component.
    pub fn init_store<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.extractor.init(&mut store, seed);
        self.predictor.init(&mut store, seed);
        self.acoustic.init(&mut store, seed);
        store
    }

    pub fn phoneme_sequence<T: Scalar>(&self, utt: &Utterance<T>) -> Result<PhonemeSequence> {
        let ids = utt
            .phonemes
            .iter()
            .map(|p| {
                self.index
                    .get(p)
                    .copied()
                    .ok_or_else(|| Error::contract(format!("phoneme '{p}' not in inventory")))
            })
            .collect::<Result<Vec<usize>>>()?;
        Ok(PhonemeSequence {
            ids,
            subword_of: utt.alignment.subword_of_phoneme(),
        })
    }

    pub fn variance_targets<T: Scalar>(&self, utt: &Utterance<T>) -> Result<VarianceTargets<T>> {
        let durations = utt.alignment.phoneme_durations.clone();
        let pitch = average_by_duration(&utt.pitch, &durations)?;
        let energy = average_by_duration(&utt.energy, &durations)?;
        Ok(VarianceTargets {
            durations,
            pitch,
            energy,
        })
    }
}

/// Which side provides the multi-scale style at synthesis time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleSource {
    Extractor,
    Predictor,
}

#[derive(Debug, Clone, Copy)]
pub struct SynthesisOptions {
    pub style: StyleSource,
    /// Teacher-forced runs use ground-truth durations/pitch/energy.
    pub teacher_forced: bool,
}

/// Inference-only synthesis of one window's current utterance. All
/// parameters are frozen; no gradient graph is built.
pub fn synthesize_window<T: Scalar>(
    models: &Models,
    store: &ParamStore<T>,
    window: &ContextWindow<'_, T>,
    embedder: &dyn SemanticEmbedder<T>,
    opts: &SynthesisOptions,
) -> Result<AcousticOutput<T>> {
    let g = ParamGraph::with_freeze(store, FreezeMask::all());
    let current = window.current();
    let boundaries = subword_frame_boundaries(&current.alignment);

    let styles: Vec<Tensor<T>> = match opts.style {
        StyleSource::Extractor => {
            models
                .extractor
                .extract_multiscale(&g, window, &boundaries)?
                .combined
        }
        StyleSource::Predictor => {
            let (pred, _, _) =
                models
                    .predictor
                    .predict_window(&g, embedder, &window.subword_texts())?;
            combine_predicted(&pred)
        }
    };

    let seq = models.phoneme_sequence(current)?;
    let targets = if opts.teacher_forced {
        Some(models.variance_targets(current)?)
    } else {
        None
    };
    models.acoustic.forward(&g, &seq, &styles, targets.as_ref())
}
