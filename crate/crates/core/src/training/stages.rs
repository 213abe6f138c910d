//! The stage runners and their shared step loop.
//!
//! One generic loop drives all three stages; a [`StageSpec`] decides what
//! is frozen and how the per-item loss is built. Batches are sampled by a
//! stateless per-step RNG derived from (seed, stage, phase, step), so a
//! resumed run draws exactly the batches the uninterrupted run would have.

use indexmap::IndexMap;
use ndarray::{Array2, ArrayD};
use rand::Rng;
use serde::Serialize;

use crate::corpus::align::subword_frame_boundaries;
use crate::corpus::data::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::extractor::StyleLevel;
use crate::nn::{FreezeMask, ParamGraph, ParamStore};
use crate::num::Scalar;
use crate::predictor::{combine_predicted, PredictedStyles, SemanticEmbedder};
use crate::rng::indexed_rng;
use crate::tensor::Tensor;
use crate::training::adam::{clip_global_norm, Adam};
use crate::training::schedule::{lr_at, TrainingSchedule};
use crate::training::{Models, StyleSource, SynthesisOptions};

/// Extractor outputs used as distillation targets (plain arrays; the
/// extractor is frozen wherever these are consumed).
#[derive(Debug, Clone)]
pub struct ExtractedTargets<T: Scalar> {
    pub global: Array2<T>,
    pub sentence: Array2<T>,
    pub subword: Vec<Array2<T>>,
}

/// Sum of per-level MSEs between extracted and predicted styles; the
/// subword level contributes the mean over subwords.
pub fn distillation_loss<T: Scalar>(
    targets: &ExtractedTargets<T>,
    predicted: &PredictedStyles<T>,
) -> Result<Tensor<T>> {
    if targets.subword.len() != predicted.subword.len() {
        return Err(Error::contract(format!(
            "distillation: {} extracted vs {} predicted subword styles",
            targets.subword.len(),
            predicted.subword.len()
        )));
    }
    if targets.subword.is_empty() {
        return Err(Error::contract("distillation: empty subword sequence"));
    }
    let mut loss = predicted
        .global
        .mse_loss(&targets.global.clone().into_dyn())
        .add(
            &predicted
                .sentence
                .mse_loss(&targets.sentence.clone().into_dyn()),
        );
    let inv_n = T::of(1.0 / targets.subword.len() as f64);
    for (p, t) in predicted.subword.iter().zip(&targets.subword) {
        loss = loss.add(&p.mse_loss(&t.clone().into_dyn()).scale(inv_n));
    }
    Ok(loss)
}

/// Runs the frozen extractor on one window and detaches the style values.
pub fn extract_targets<T: Scalar>(
    models: &Models,
    store: &ParamStore<T>,
    window: &crate::corpus::data::ContextWindow<'_, T>,
) -> Result<ExtractedTargets<T>> {
    let g = ParamGraph::with_freeze(store, FreezeMask::all());
    let boundaries = subword_frame_boundaries(&window.current().alignment);
    let styles = models
        .extractor
        .extract_multiscale(&g, window, &boundaries)?;
    Ok(ExtractedTargets {
        global: styles.s_global.value2(),
        sentence: styles.s_sentence.value2(),
        subword: styles.s_subword.iter().map(|s| s.value2()).collect(),
    })
}

/// Precomputes distillation targets for every utterance of a split.
pub fn precompute_distill_cache<T: Scalar>(
    models: &Models,
    store: &ParamStore<T>,
    split: &Corpus<T>,
    radius: usize,
) -> Result<Vec<ExtractedTargets<T>>> {
    (0..split.len())
        .map(|i| extract_targets(models, store, &split.window(i, radius)?))
        .collect()
}

/// What one stage (or stage-1 phase) trains and how its loss is built.
pub enum StageSpec<'a, T: Scalar> {
    /// Stage 1, one level phase: that level + the acoustic model train.
    ExtractorPhase(StyleLevel),
    /// Stage 2: predictor only, on the distillation loss. Optional
    /// precomputed targets (bit-identical to on-the-fly extraction).
    Distill(Option<&'a [ExtractedTargets<T>]>),
    /// Stage 3: acoustic + predictor on acoustic losses (predictor styles)
    /// plus distillation against the frozen extractor.
    FineTune,
}

impl<'a, T: Scalar> StageSpec<'a, T> {
    pub fn stage_id(&self) -> u8 {
        match self {
            StageSpec::ExtractorPhase(_) => 1,
            StageSpec::Distill(_) => 2,
            StageSpec::FineTune => 3,
        }
    }

    fn phase_id(&self) -> u8 {
        match self {
            StageSpec::ExtractorPhase(StyleLevel::Global) => 0,
            StageSpec::ExtractorPhase(StyleLevel::Sentence) => 1,
            StageSpec::ExtractorPhase(StyleLevel::Subword) => 2,
            _ => 0,
        }
    }

    pub fn phase_name(&self) -> Option<String> {
        match self {
            StageSpec::ExtractorPhase(level) => Some(level.name().to_string()),
            _ => None,
        }
    }

    /// Frozen parameter groups for this stage/phase.
    pub fn freeze(&self) -> FreezeMask {
        match self {
            StageSpec::ExtractorPhase(level) => {
                let mut frozen: Vec<&str> = vec!["predictor."];
                let others: Vec<&'static str> = [
                    StyleLevel::Global,
                    StyleLevel::Sentence,
                    StyleLevel::Subword,
                ]
                .iter()
                .filter(|l| **l != *level)
                .map(|l| match l {
                    StyleLevel::Global => "extractor.global.",
                    StyleLevel::Sentence => "extractor.sentence.",
                    StyleLevel::Subword => "extractor.subword.",
                })
                .collect();
                frozen.extend(others);
                FreezeMask::freeze(&frozen)
            }
            StageSpec::Distill(_) => FreezeMask::freeze(&["extractor.", "acoustic."]),
            StageSpec::FineTune => FreezeMask::freeze(&["extractor."]),
        }
    }

    fn lr_multiplier(&self, schedule: &TrainingSchedule) -> f64 {
        match self {
            StageSpec::FineTune => schedule.stage3_lr_scale,
            _ => 1.0,
        }
    }
}

/// Deterministic batch for one step, uniform with replacement.
pub fn batch_indices(
    seed: u64,
    stage: u8,
    phase: u8,
    step: usize,
    n: usize,
    batch_size: usize,
) -> Vec<usize> {
    let tag = ((stage as u64) << 56) | ((phase as u64) << 48) | step as u64;
    let mut rng = indexed_rng(seed, "batch", tag);
    (0..batch_size).map(|_| rng.gen_range(0..n)).collect()
}

/// One metrics-log line: `{step, stage, loss components, lr}`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub stage: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mel_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pitch_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distill: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

#[derive(Default)]
struct LossParts {
    mel_l1: f64,
    duration_mse: f64,
    pitch_mse: f64,
    energy_mse: f64,
    distill: f64,
    total: f64,
    has_acoustic: bool,
    has_distill: bool,
}

#[allow(clippy::too_many_arguments)]
fn item_loss<T: Scalar>(
    models: &Models,
    g: &ParamGraph<'_, T>,
    split: &Corpus<T>,
    index: usize,
    radius: usize,
    embedder: &dyn SemanticEmbedder<T>,
    spec: &StageSpec<'_, T>,
    parts: &mut LossParts,
) -> Result<Tensor<T>> {
    let window = split.window(index, radius)?;
    let current = window.current();
    let boundaries = subword_frame_boundaries(&current.alignment);

    let acoustic_path =
        |g: &ParamGraph<'_, T>, styles: &[Tensor<T>], parts: &mut LossParts| -> Result<Tensor<T>> {
            let seq = models.phoneme_sequence(current)?;
            let targets = models.variance_targets(current)?;
            let out = models.acoustic.forward(g, &seq, styles, Some(&targets))?;
            let losses = crate::acoustic::acoustic_losses(&out, &current.mel.frames, &targets)?;
            parts.mel_l1 += losses.mel_l1.item().as_f64();
            parts.duration_mse += losses.duration_mse.item().as_f64();
            parts.pitch_mse += losses.pitch_mse.item().as_f64();
            parts.energy_mse += losses.energy_mse.item().as_f64();
            parts.has_acoustic = true;
            Ok(losses.total())
        };

    match spec {
        StageSpec::ExtractorPhase(_) => {
            let styles = models
                .extractor
                .extract_multiscale(g, &window, &boundaries)?;
            acoustic_path(g, &styles.combined, parts)
        }
        StageSpec::Distill(cache) => {
            let targets = match cache {
                Some(c) => c[index].clone(),
                None => {
                    // The extractor is frozen in this spec, so extracting
                    // through the same graph yields constants.
                    let styles = models
                        .extractor
                        .extract_multiscale(g, &window, &boundaries)?;
                    ExtractedTargets {
                        global: styles.s_global.value2(),
                        sentence: styles.s_sentence.value2(),
                        subword: styles.s_subword.iter().map(|s| s.value2()).collect(),
                    }
                }
            };
            let (pred, _, _) =
                models
                    .predictor
                    .predict_window(g, embedder, &window.subword_texts())?;
            let loss = distillation_loss(&targets, &pred)?;
            parts.distill += loss.item().as_f64();
            parts.has_distill = true;
            Ok(loss)
        }
        StageSpec::FineTune => {
            let (pred, _, _) =
                models
                    .predictor
                    .predict_window(g, embedder, &window.subword_texts())?;
            let styles = combine_predicted(&pred);
            let acoustic_total = acoustic_path(g, &styles, parts)?;
            let extracted = models
                .extractor
                .extract_multiscale(g, &window, &boundaries)?;
            let targets = ExtractedTargets {
                global: extracted.s_global.value2(),
                sentence: extracted.s_sentence.value2(),
                subword: extracted.s_subword.iter().map(|s| s.value2()).collect(),
            };
            let distill = distillation_loss(&targets, &pred)?;
            parts.distill += distill.item().as_f64();
            parts.has_distill = true;
            Ok(acoustic_total.add(&distill))
        }
    }
}

/// Runs steps `from_step+1 ..= to_step` of one stage/phase. `from_step`
/// continues a checkpointed run; the caller owns Adam so its state can be
/// persisted between calls.
#[allow(clippy::too_many_arguments)]
pub fn run_stage_steps<T: Scalar>(
    models: &Models,
    store: &mut ParamStore<T>,
    optimizer: &mut Adam<T>,
    split: &Corpus<T>,
    embedder: &dyn SemanticEmbedder<T>,
    schedule: &TrainingSchedule,
    radius: usize,
    spec: &StageSpec<'_, T>,
    from_step: usize,
    to_step: usize,
    metrics: &mut Vec<MetricsRecord>,
) -> Result<()> {
    if split.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    for step in (from_step + 1)..=to_step {
        let lr = spec.lr_multiplier(schedule) * lr_at(step, schedule)?;
        let batch = batch_indices(
            schedule.seed,
            spec.stage_id(),
            spec.phase_id(),
            step,
            split.len(),
            schedule.batch_size,
        );

        let mut grad_sum: IndexMap<String, ArrayD<T>> = IndexMap::new();
        let mut parts = LossParts::default();
        for &i in &batch {
            let g = ParamGraph::with_freeze(store, spec.freeze());
            let total = item_loss(models, &g, split, i, radius, embedder, spec, &mut parts)?;
            let value = total.item().as_f64();
            if !value.is_finite() {
                // NaN policy: abort with batch ids and a parameter-norm
                // report for post-mortem.
                let norms: Vec<String> = store
                    .norm_report()
                    .into_iter()
                    .map(|(g, n)| format!("{g}={n:.4e}"))
                    .collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss at stage {} step {step} (batch {batch:?}); \
                     parameter norms: {}",
                    spec.stage_id(),
                    norms.join(", ")
                )));
            }
            parts.total += value;
            total.backward();
            for (name, grad) in g.grads() {
                match grad_sum.get_mut(&name) {
                    Some(acc) => *acc = &*acc + &grad,
                    None => {
                        grad_sum.insert(name, grad);
                    }
                }
            }
        }

        let inv = T::of(1.0 / batch.len() as f64);
        for g in grad_sum.values_mut() {
            g.mapv_inplace(|v| v * inv);
        }
        clip_global_norm(&mut grad_sum, schedule.grad_clip);
        optimizer.step(store, &grad_sum, lr);

        let n = batch.len() as f64;
        metrics.push(MetricsRecord {
            step,
            stage: spec.stage_id(),
            phase: spec.phase_name(),
            mel_l1: parts.has_acoustic.then_some(parts.mel_l1 / n),
            duration_mse: parts.has_acoustic.then_some(parts.duration_mse / n),
            pitch_mse: parts.has_acoustic.then_some(parts.pitch_mse / n),
            energy_mse: parts.has_acoustic.then_some(parts.energy_mse / n),
            distill: parts.has_distill.then_some(parts.distill / n),
            total: parts.total / n,
            lr,
        });
    }
    Ok(())
}

/// Stage 1: the three extractor levels train sequentially (global,
/// sentence, subword), each with a fresh optimizer and warm-up, the other
/// levels frozen, the acoustic model training throughout.
pub fn stage1_train<T: Scalar>(
    models: &Models,
    store: &mut ParamStore<T>,
    split: &Corpus<T>,
    embedder: &dyn SemanticEmbedder<T>,
    schedule: &TrainingSchedule,
    radius: usize,
    metrics: &mut Vec<MetricsRecord>,
) -> Result<()> {
    for level in [
        StyleLevel::Global,
        StyleLevel::Sentence,
        StyleLevel::Subword,
    ] {
        let mut adam = Adam::new(
            schedule.adam_beta1,
            schedule.adam_beta2,
            schedule.adam_epsilon,
        );
        run_stage_steps(
            models,
            store,
            &mut adam,
            split,
            embedder,
            schedule,
            radius,
            &StageSpec::ExtractorPhase(level),
            0,
            schedule.stage1_steps_per_level,
            metrics,
        )?;
    }
    Ok(())
}

/// Stage 2: knowledge distillation into the predictor; extractor and
/// acoustic model frozen.
#[allow(clippy::too_many_arguments)]
pub fn stage2_distill<T: Scalar>(
    models: &Models,
    store: &mut ParamStore<T>,
    split: &Corpus<T>,
    embedder: &dyn SemanticEmbedder<T>,
    schedule: &TrainingSchedule,
    radius: usize,
    use_cache: bool,
    metrics: &mut Vec<MetricsRecord>,
) -> Result<()> {
    let cache = if use_cache {
        Some(precompute_distill_cache(models, store, split, radius)?)
    } else {
        None
    };
    let mut adam = Adam::new(
        schedule.adam_beta1,
        schedule.adam_beta2,
        schedule.adam_epsilon,
    );
    run_stage_steps(
        models,
        store,
        &mut adam,
        split,
        embedder,
        schedule,
        radius,
        &StageSpec::Distill(cache.as_deref()),
        0,
        schedule.stage2_steps,
        metrics,
    )
}

/// Stage 3: joint fine-tune of acoustic + predictor at a lower learning
/// rate; the mel path conditions on predictor styles while the frozen
/// extractor keeps supplying distillation targets. Returns the mean
/// teacher-forced, predictor-conditioned mel L1 over the split before and
/// after.
pub fn stage3_finetune<T: Scalar>(
    models: &Models,
    store: &mut ParamStore<T>,
    split: &Corpus<T>,
    embedder: &dyn SemanticEmbedder<T>,
    schedule: &TrainingSchedule,
    radius: usize,
    metrics: &mut Vec<MetricsRecord>,
) -> Result<(f64, f64)> {
    let before = mean_mel_l1(models, store, split, embedder, radius)?;
    let mut adam = Adam::new(
        schedule.adam_beta1,
        schedule.adam_beta2,
        schedule.adam_epsilon,
    );
    run_stage_steps(
        models,
        store,
        &mut adam,
        split,
        embedder,
        schedule,
        radius,
        &StageSpec::FineTune,
        0,
        schedule.stage3_steps,
        metrics,
    )?;
    let after = mean_mel_l1(models, store, split, embedder, radius)?;
    Ok((before, after))
}

/// Mean teacher-forced mel L1 over a split with predictor-conditioned
/// styles (the stage-3 progress measure).
pub fn mean_mel_l1<T: Scalar>(
    models: &Models,
    store: &ParamStore<T>,
    split: &Corpus<T>,
    embedder: &dyn SemanticEmbedder<T>,
    radius: usize,
) -> Result<f64> {
    let opts = SynthesisOptions {
        style: StyleSource::Predictor,
        teacher_forced: true,
    };
    let mut acc = 0.0;
    for i in 0..split.len() {
        let window = split.window(i, radius)?;
        let out = crate::training::synthesize_window(models, store, &window, embedder, &opts)?;
        let target = window.current().mel.frames.clone().into_dyn();
        acc += out.mel.l1_loss(&target).item().as_f64();
    }
    Ok(acc / split.len() as f64)
}

/// Splits a corpus on chapter boundaries: the last `eval_fraction` of
/// chapters become the eval split, so no context window mixes the two.
pub fn split_corpus<T: Scalar>(
    corpus: &Corpus<T>,
    chapter_size: usize,
    eval_fraction: f64,
) -> (Corpus<T>, Corpus<T>) {
    let chapter = chapter_size.max(1);
    let n_chapters = corpus.len().div_ceil(chapter);
    let eval_chapters = if eval_fraction > 0.0 && n_chapters > 1 {
        ((n_chapters as f64 * eval_fraction).floor() as usize).clamp(1, n_chapters - 1)
    } else {
        0
    };
    let cut = (n_chapters - eval_chapters) * chapter;
    let cut = cut.min(corpus.len());
    let train: Vec<Utterance<T>> = corpus.utterances[..cut].to_vec();
    let eval: Vec<Utterance<T>> = corpus.utterances[cut..].to_vec();
    (
        Corpus::new(train, corpus.mel_config.clone()),
        Corpus::new(eval, corpus.mel_config.clone()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toy::{generate_toy_corpus, ToySpec};
    use crate::predictor::HashEmbedder;
    use crate::training::PipelineConfig;

    fn mk_targets(v: f64, n_sub: usize, d: usize) -> ExtractedTargets<f64> {
        ExtractedTargets {
            global: Array2::from_elem((1, d), v),
            sentence: Array2::from_elem((1, d), v),
            subword: (0..n_sub).map(|_| Array2::from_elem((1, d), v)).collect(),
        }
    }

    fn mk_pred(v: f64, n_sub: usize, d: usize) -> PredictedStyles<f64> {
        PredictedStyles {
            global: Tensor::constant(Array2::from_elem((1, d), v).into_dyn()),
            sentence: Tensor::constant(Array2::from_elem((1, d), v).into_dyn()),
            subword: (0..n_sub)
                .map(|_| Tensor::constant(Array2::from_elem((1, d), v).into_dyn()))
                .collect(),
        }
    }

    #[test]
    fn distillation_loss_zero_when_equal() {
        let t = mk_targets(0.4, 3, 8);
        let p = mk_pred(0.4, 3, 8);
        assert_eq!(distillation_loss(&t, &p).unwrap().item(), 0.0);
    }

    #[test]
    fn distillation_unit_offset_contributes_one_over_d() {
        // S_g offset by 1 in a single coordinate of width D: the global MSE
        // term is 1/D.
        let d = 8;
        let t = mk_targets(0.0, 2, d);
        let mut g = Array2::<f64>::zeros((1, d));
        g[(0, 3)] = 1.0;
        let p = PredictedStyles {
            global: Tensor::constant(g.into_dyn()),
            sentence: Tensor::constant(Array2::zeros((1, d)).into_dyn()),
            subword: vec![
                Tensor::constant(Array2::zeros((1, d)).into_dyn()),
                Tensor::constant(Array2::zeros((1, d)).into_dyn()),
            ],
        };
        let loss = distillation_loss(&t, &p).unwrap().item();
        assert!((loss - 1.0 / d as f64).abs() < 1e-12);
    }

    #[test]
    fn distillation_is_invariant_to_subword_permutation() {
        let d = 4;
        let t = ExtractedTargets {
            global: Array2::zeros((1, d)),
            sentence: Array2::zeros((1, d)),
            subword: vec![
                Array2::from_elem((1, d), 0.5),
                Array2::from_elem((1, d), -1.0),
            ],
        };
        let p_sub = [
            Tensor::constant(Array2::from_elem((1, d), 0.25).into_dyn()),
            Tensor::constant(Array2::from_elem((1, d), -0.75).into_dyn()),
        ];
        let p1 = PredictedStyles {
            global: Tensor::constant(Array2::zeros((1, d)).into_dyn()),
            sentence: Tensor::constant(Array2::zeros((1, d)).into_dyn()),
            subword: vec![p_sub[0].clone(), p_sub[1].clone()],
        };
        // Permute BOTH sides.
        let t2 = ExtractedTargets {
            global: t.global.clone(),
            sentence: t.sentence.clone(),
            subword: vec![t.subword[1].clone(), t.subword[0].clone()],
        };
        let p2 = PredictedStyles {
            global: Tensor::constant(Array2::zeros((1, d)).into_dyn()),
            sentence: Tensor::constant(Array2::zeros((1, d)).into_dyn()),
            subword: vec![p_sub[1].clone(), p_sub[0].clone()],
        };
        let a: f64 = distillation_loss(&t, &p1).unwrap().item();
        let b = distillation_loss(&t2, &p2).unwrap().item();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn distillation_rejects_arity_mismatch() {
        let t = mk_targets(0.0, 2, 4);
        let p = mk_pred(0.0, 3, 4);
        assert!(matches!(distillation_loss(&t, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_indices_are_deterministic_and_stage_separated() {
        let a = batch_indices(7, 1, 0, 13, 24, 4);
        let b = batch_indices(7, 1, 0, 13, 24, 4);
        assert_eq!(a, b);
        let c = batch_indices(7, 2, 0, 13, 24, 4);
        assert_ne!(a, c);
        let d = batch_indices(7, 1, 1, 13, 24, 4);
        assert_ne!(a, d);
        assert!(a.iter().all(|&i| i < 24));
    }

    #[test]
    fn split_corpus_cuts_on_chapters() {
        let spec = ToySpec::default();
        let utts = generate_toy_corpus::<f32>(3, 32, &spec).unwrap();
        let corpus = Corpus::new(utts, spec.mel.clone());
        let (train, eval) = split_corpus(&corpus, 8, 0.25);
        assert_eq!(train.len(), 24);
        assert_eq!(eval.len(), 8);
        // Chapter boundary: eval starts at a multiple of the chapter size.
        assert_eq!(eval.utterances[0].id, "utt0024");

        let (train, eval) = split_corpus(&corpus, 8, 0.0);
        assert_eq!(train.len(), 32);
        assert_eq!(eval.len(), 0);
    }

    /// Micro end-to-end: a few training steps per stage on a micro config,
    /// checking the loop runs, losses are finite, and freezing holds.
    #[test]
    fn micro_three_stage_loop_runs_and_freezes() {
        let mut cfg = PipelineConfig::tiny_preset();
        cfg.extractor.d_style = 8;
        cfg.extractor.conv_channels = vec![2];
        cfg.extractor.n_tokens = 2;
        cfg.extractor.n_heads = 1;
        cfg.predictor.hce_input = 8;
        cfg.predictor.gru_hidden = 4;
        cfg.predictor.attn_qk = 4;
        cfg.acoustic.d_model = 8;
        cfg.acoustic.encoder_layers = 1;
        cfg.acoustic.decoder_layers = 1;
        cfg.acoustic.ffn_hidden = 8;
        cfg.acoustic.ffn_kernel = 3;
        cfg.acoustic.var_filter = 4;
        cfg.schedule.stage1_steps_per_level = 2;
        cfg.schedule.stage2_steps = 2;
        cfg.schedule.stage3_steps = 2;
        cfg.schedule.batch_size = 2;
        cfg.schedule.warmup_steps = 2;
        let cfg = cfg.resolved();
        cfg.validate().unwrap();

        let utts = generate_toy_corpus::<f32>(cfg.seed, 6, &cfg.toy).unwrap();
        let corpus = Corpus::new(utts, cfg.mel.clone());
        let models = Models::from_config(&cfg, corpus.phoneme_inventory());
        let mut store = models.init_store::<f32>(cfg.seed);
        let embedder = HashEmbedder::new(cfg.seed, cfg.predictor.d_sem);
        let mut metrics = Vec::new();

        let pred_before = store.bits_snapshot(&["predictor."]);
        stage1_train(
            &models,
            &mut store,
            &corpus,
            &embedder,
            &cfg.schedule,
            cfg.context_radius,
            &mut metrics,
        )
        .unwrap();
        // Predictor untouched by stage 1.
        assert_eq!(pred_before, store.bits_snapshot(&["predictor."]));

        let frozen_before = store.bits_snapshot(&["extractor.", "acoustic."]);
        stage2_distill(
            &models,
            &mut store,
            &corpus,
            &embedder,
            &cfg.schedule,
            cfg.context_radius,
            false,
            &mut metrics,
        )
        .unwrap();
        assert_eq!(
            frozen_before,
            store.bits_snapshot(&["extractor.", "acoustic."])
        );

        let ex_before = store.bits_snapshot(&["extractor."]);
        let (before, after) = stage3_finetune(
            &models,
            &mut store,
            &corpus,
            &embedder,
            &cfg.schedule,
            cfg.context_radius,
            &mut metrics,
        )
        .unwrap();
        assert_eq!(ex_before, store.bits_snapshot(&["extractor."]));
        assert!(before.is_finite() && after.is_finite());
        assert_eq!(metrics.len(), 3 * 2 + 2 + 2);
        assert!(metrics.iter().all(|m| m.total.is_finite()));

        // Stage-3 effective lr is stage3_lr_scale x lr_at(step).
        for m in metrics.iter().filter(|m| m.stage == 3) {
            let expected = cfg.schedule.stage3_lr_scale * lr_at(m.step, &cfg.schedule).unwrap();
            assert_eq!(m.lr.to_bits(), expected.to_bits());
        }
        // Stages 1-2 use the unscaled curve.
        for m in metrics.iter().filter(|m| m.stage < 3) {
            let expected = lr_at(m.step, &cfg.schedule).unwrap();
            assert_eq!(m.lr.to_bits(), expected.to_bits());
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let mut cfg = PipelineConfig::tiny_preset();
        cfg.extractor.conv_channels = vec![2];
        cfg.extractor.d_style = 8;
        cfg.extractor.n_tokens = 2;
        cfg.extractor.n_heads = 1;
        cfg.predictor.hce_input = 8;
        cfg.predictor.gru_hidden = 4;
        cfg.predictor.attn_qk = 4;
        cfg.acoustic.d_model = 8;
        cfg.acoustic.encoder_layers = 1;
        cfg.acoustic.decoder_layers = 1;
        cfg.acoustic.ffn_hidden = 8;
        cfg.acoustic.ffn_kernel = 3;
        cfg.acoustic.var_filter = 4;
        cfg.schedule.batch_size = 2;
        let cfg = cfg.resolved();

        let utts = generate_toy_corpus::<f32>(4, 4, &cfg.toy).unwrap();
        let corpus = Corpus::new(utts, cfg.mel.clone());
        let models = Models::from_config(&cfg, corpus.phoneme_inventory());
        let mut store = models.init_store::<f32>(cfg.seed);
        // Poison one acoustic parameter: the loss goes non-finite and the
        // step must abort with batch ids + norm report.
        store
            .get_mut("acoustic.mel_out.weight")
            .unwrap()
            .fill(f32::NAN);
        let embedder = HashEmbedder::new(cfg.seed, cfg.predictor.d_sem);
        let mut adam = Adam::new(0.9, 0.98, 1e-9);
        let mut metrics = Vec::new();
        let err = run_stage_steps(
            &models,
            &mut store,
            &mut adam,
            &corpus,
            &embedder,
            &cfg.schedule,
            cfg.context_radius,
            &StageSpec::ExtractorPhase(StyleLevel::Global),
            0,
            1,
            &mut metrics,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(
            msg.contains("batch"),
            "diagnostics must carry batch ids: {msg}"
        );
        assert!(
            msg.contains("parameter norms"),
            "diagnostics must carry the norm report: {msg}"
        );
    }

    #[test]
    fn cached_and_live_distillation_match_bit_exactly() {
        let mut cfg = PipelineConfig::tiny_preset();
        cfg.extractor.conv_channels = vec![2];
        cfg.extractor.d_style = 8;
        cfg.extractor.n_tokens = 2;
        cfg.extractor.n_heads = 1;
        cfg.predictor.hce_input = 8;
        cfg.predictor.gru_hidden = 4;
        cfg.predictor.attn_qk = 4;
        cfg.schedule.stage2_steps = 3;
        cfg.schedule.batch_size = 2;
        let cfg = cfg.resolved();

        let utts = generate_toy_corpus::<f32>(5, 5, &cfg.toy).unwrap();
        let corpus = Corpus::new(utts, cfg.mel.clone());
        let models = Models::from_config(&cfg, corpus.phoneme_inventory());
        let store0 = models.init_store::<f32>(cfg.seed);
        let embedder = HashEmbedder::new(cfg.seed, cfg.predictor.d_sem);

        let mut store_a = store0.clone();
        let mut metrics_a = Vec::new();
        stage2_distill(
            &models,
            &mut store_a,
            &corpus,
            &embedder,
            &cfg.schedule,
            cfg.context_radius,
            false,
            &mut metrics_a,
        )
        .unwrap();

        let mut store_b = store0.clone();
        let mut metrics_b = Vec::new();
        stage2_distill(
            &models,
            &mut store_b,
            &corpus,
            &embedder,
            &cfg.schedule,
            cfg.context_radius,
            true,
            &mut metrics_b,
        )
        .unwrap();

        // Loss sequences and resulting parameters are bit-identical.
        for (a, b) in metrics_a.iter().zip(&metrics_b) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
        assert_eq!(store_a.bits_snapshot(&[]), store_b.bits_snapshot(&[]));
    }
}
