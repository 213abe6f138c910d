//! `mstts train --stage N`: runs one training stage with periodic
//! checkpoints, append-only metrics, and bit-exact resume.

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use mstts_core::corpus::data::Corpus;
use mstts_core::error::{Error, Result};
use mstts_core::extractor::StyleLevel;
use mstts_core::predictor::SemanticEmbedder;
use mstts_core::training::stages::{run_stage_steps, MetricsRecord, StageSpec};
use mstts_core::training::{
    load_train_state, save_train_state, split_corpus, Adam, Models, TrainState,
};

use crate::common::RunContext;

pub fn run(
    ctx: &RunContext,
    stage: u8,
    resume: bool,
    halt_after: Option<usize>,
) -> Result<ExitCode> {
    if !(1..=3).contains(&stage) {
        return Err(Error::invalid(format!(
            "--stage must be 1, 2 or 3 (got {stage})"
        )));
    }
    ctx.write_snapshot("train")?;

    let corpus = ctx.load_corpus()?;
    let (train_split, _) = split_corpus(
        &corpus,
        ctx.config.toy.chapter_size,
        ctx.config.eval_fraction,
    );
    let inventory = corpus.phoneme_inventory();
    let models = Models::from_config(&ctx.config, inventory.clone());
    let embedder = ctx.embedder();

    let schedule = &ctx.config.schedule;
    let ckpt_path = ctx.checkpoint_path(stage);
    let schedule_json =
        serde_json::to_string(schedule).map_err(|e| Error::format(e.to_string()))?;
    let config_json =
        serde_json::to_string(&ctx.config).map_err(|e| Error::format(e.to_string()))?;

    // Starting state: resumed from this stage's checkpoint, carried over
    // from the previous stage, or freshly initialized (stage 1 only).
    let mut state: TrainState<f32> = if resume && ckpt_path.exists() {
        let state = load_train_state(
            &ckpt_path,
            schedule.adam_beta1,
            schedule.adam_beta2,
            schedule.adam_epsilon,
        )?;
        if state.stage != stage {
            return Err(Error::contract(format!(
                "{} holds stage {} state, not stage {stage}",
                ckpt_path.display(),
                state.stage
            )));
        }
        if state.complete {
            println!("stage {stage} already complete at {}", ckpt_path.display());
            return Ok(ExitCode::SUCCESS);
        }
        state
    } else {
        let store = match stage {
            1 => models.init_store::<f32>(ctx.config.seed),
            _ => {
                let prev = ctx.checkpoint_path(stage - 1);
                if !prev.exists() {
                    return Err(Error::missing(format!(
                        "stage {stage} needs the stage-{} checkpoint at {}; \
                         run `mstts train --stage {}` first",
                        stage - 1,
                        prev.display(),
                        stage - 1
                    )));
                }
                let prev_state = load_train_state::<f32>(
                    &prev,
                    schedule.adam_beta1,
                    schedule.adam_beta2,
                    schedule.adam_epsilon,
                )?;
                if !prev_state.complete {
                    return Err(Error::missing(format!(
                        "stage-{} checkpoint at {} is incomplete; finish it first",
                        stage - 1,
                        prev.display()
                    )));
                }
                prev_state.store
            }
        };
        // Fresh metrics log for a fresh stage run.
        let _ = std::fs::remove_file(ctx.metrics_path(stage));
        TrainState {
            store,
            adam: None,
            stage,
            phase: 0,
            steps_done: 0,
            complete: false,
            schedule_json: schedule_json.clone(),
            config_json: config_json.clone(),
            inventory: inventory.clone(),
        }
    };

    let metrics_path = ctx.metrics_path(stage);
    let mut budget = halt_after;
    let complete = match stage {
        1 => run_stage1(
            ctx,
            &models,
            &mut state,
            &train_split,
            embedder.as_ref(),
            &ckpt_path,
            &metrics_path,
            &mut budget,
        )?,
        2 => run_single_phase(
            ctx,
            &models,
            &mut state,
            &train_split,
            embedder.as_ref(),
            &StageSpec::Distill(None),
            schedule.stage2_steps,
            &ckpt_path,
            &metrics_path,
            &mut budget,
        )?,
        _ => run_single_phase(
            ctx,
            &models,
            &mut state,
            &train_split,
            embedder.as_ref(),
            &StageSpec::FineTune,
            schedule.stage3_steps,
            &ckpt_path,
            &metrics_path,
            &mut budget,
        )?,
    };

    if complete {
        println!(
            "stage {stage} complete; checkpoint at {}",
            ckpt_path.display()
        );
    } else {
        println!("stage {stage} halted after the step budget; resume with --resume");
    }
    Ok(ExitCode::SUCCESS)
}

/// Stage 1 phases in order; `state.phase` indexes into this.
const STAGE1_LEVELS: [StyleLevel; 3] = [
    StyleLevel::Global,
    StyleLevel::Sentence,
    StyleLevel::Subword,
];

#[allow(clippy::too_many_arguments)]
fn run_stage1(
    ctx: &RunContext,
    models: &Models,
    state: &mut TrainState<f32>,
    split: &Corpus<f32>,
    embedder: &dyn SemanticEmbedder<f32>,
    ckpt_path: &Path,
    metrics_path: &Path,
    budget: &mut Option<usize>,
) -> Result<bool> {
    let schedule = &ctx.config.schedule;
    let total = schedule.stage1_steps_per_level;
    while state.phase < STAGE1_LEVELS.len() {
        let spec = StageSpec::ExtractorPhase(STAGE1_LEVELS[state.phase]);
        let done = drive_phase(
            ctx,
            models,
            state,
            split,
            embedder,
            &spec,
            total,
            ckpt_path,
            metrics_path,
            budget,
            state.phase + 1 == STAGE1_LEVELS.len(),
        )?;
        if !done {
            return Ok(false);
        }
        if state.phase + 1 < STAGE1_LEVELS.len() {
            state.phase += 1;
            state.steps_done = 0;
            state.adam = None;
        } else {
            return Ok(true);
        }
    }
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
fn run_single_phase(
    ctx: &RunContext,
    models: &Models,
    state: &mut TrainState<f32>,
    split: &Corpus<f32>,
    embedder: &dyn SemanticEmbedder<f32>,
    spec: &StageSpec<'_, f32>,
    total: usize,
    ckpt_path: &Path,
    metrics_path: &Path,
    budget: &mut Option<usize>,
) -> Result<bool> {
    drive_phase(
        ctx,
        models,
        state,
        split,
        embedder,
        spec,
        total,
        ckpt_path,
        metrics_path,
        budget,
        true,
    )
}

/// Runs one phase in `save_every`-sized chunks, persisting the checkpoint
/// and appending metrics after each chunk. Returns false when the step
/// budget ran out before the phase finished.
#[allow(clippy::too_many_arguments)]
fn drive_phase(
    ctx: &RunContext,
    models: &Models,
    state: &mut TrainState<f32>,
    split: &Corpus<f32>,
    embedder: &dyn SemanticEmbedder<f32>,
    spec: &StageSpec<'_, f32>,
    total: usize,
    ckpt_path: &Path,
    metrics_path: &Path,
    budget: &mut Option<usize>,
    is_last_phase: bool,
) -> Result<bool> {
    let schedule = &ctx.config.schedule;
    let mut adam = state.adam.take().unwrap_or_else(|| {
        Adam::new(
            schedule.adam_beta1,
            schedule.adam_beta2,
            schedule.adam_epsilon,
        )
    });

    while state.steps_done < total {
        if matches!(budget, Some(0)) {
            state.adam = Some(adam);
            return Ok(false);
        }
        let mut to = (state.steps_done + schedule.save_every).min(total);
        if let Some(b) = budget {
            to = to.min(state.steps_done + *b);
        }
        let mut records: Vec<MetricsRecord> = Vec::new();
        run_stage_steps(
            models,
            &mut state.store,
            &mut adam,
            split,
            embedder,
            schedule,
            ctx.config.context_radius,
            spec,
            state.steps_done,
            to,
            &mut records,
        )?;
        append_metrics(metrics_path, &records)?;
        if let Some(b) = budget {
            *b -= to - state.steps_done;
        }
        state.steps_done = to;
        state.complete = is_last_phase && state.steps_done == total;
        state.adam = Some(adam);
        save_train_state(ckpt_path, state)?;
        adam = state.adam.take().unwrap();
    }
    state.adam = Some(adam);
    if state.complete {
        save_train_state(ckpt_path, state)?;
    }
    Ok(true)
}

fn append_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format(e.to_string()))?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
    }
    Ok(())
}
