//! `mstts evaluate`: objective metrics over a chapter split, written as a
//! machine-readable report plus an aligned table.

use std::path::Path;
use std::process::ExitCode;

use mstts_core::error::{Error, Result};
use mstts_core::eval::{evaluate_corpus, EvalMode};
use mstts_core::training::{load_train_state, split_corpus, Models};

use crate::common::RunContext;

pub fn run(
    ctx: &RunContext,
    ground_truth: bool,
    checkpoint: Option<&Path>,
    split_name: &str,
) -> Result<ExitCode> {
    ctx.write_snapshot("evaluate")?;
    let corpus = ctx.load_corpus()?;
    let (train_split, eval_split) = split_corpus(
        &corpus,
        ctx.config.toy.chapter_size,
        ctx.config.eval_fraction,
    );
    let split = match split_name {
        "eval" => eval_split,
        "train" => train_split,
        other => {
            return Err(Error::invalid(format!(
                "--split must be 'eval' or 'train' (got '{other}')"
            )))
        }
    };
    if split.is_empty() {
        return Err(Error::contract(format!(
            "requested split '{split_name}' is empty"
        )));
    }

    let schedule = &ctx.config.schedule;
    let (models, store) = if ground_truth {
        // Ground-truth-vs-itself needs no trained parameters.
        let models = Models::from_config(&ctx.config, corpus.phoneme_inventory());
        let store = models.init_store::<f32>(ctx.config.seed);
        (models, store)
    } else {
        let ckpt_path = checkpoint
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| ctx.checkpoint_path(3));
        let state = load_train_state::<f32>(
            &ckpt_path,
            schedule.adam_beta1,
            schedule.adam_beta2,
            schedule.adam_epsilon,
        )?;
        let models = Models::from_config(&ctx.config, state.inventory.clone());
        (models, state.store)
    };

    let embedder = ctx.embedder();
    let mode = if ground_truth {
        EvalMode::GroundTruth
    } else {
        EvalMode::Model
    };
    let report = evaluate_corpus(
        &models,
        &store,
        &split,
        ctx.config.context_radius,
        embedder.as_ref(),
        mode,
    )?;

    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::format(e.to_string()))?;
    let report_path = ctx.work_dir.join("eval-report.json");
    std::fs::write(&report_path, &json)?;
    print!("{}", report.table());
    println!("report written to {}", report_path.display());

    if report.is_complete() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "partial report: {} utterance(s) failed evaluation",
            report.failures.len()
        );
        Ok(ExitCode::from(6))
    }
}
