//! `mstts synthesize`: predictor-conditioned mel synthesis for a slice of
//! the manifest.

use std::path::Path;
use std::process::ExitCode;

use mstts_core::acoustic::{PlaceholderVocoder, Vocoder};
use mstts_core::corpus::io;
use mstts_core::error::{Error, Result};
use mstts_core::training::{
    load_train_state, synthesize_window, Models, StyleSource, SynthesisOptions,
};

use crate::common::RunContext;

pub fn run(
    ctx: &RunContext,
    ids: Option<&str>,
    checkpoint: Option<&Path>,
    wav: bool,
) -> Result<ExitCode> {
    ctx.write_snapshot("synthesize")?;
    let schedule = &ctx.config.schedule;
    let ckpt_path = checkpoint
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| ctx.checkpoint_path(3));
    let state = load_train_state::<f32>(
        &ckpt_path,
        schedule.adam_beta1,
        schedule.adam_beta2,
        schedule.adam_epsilon,
    )?;

    let corpus = ctx.load_corpus()?;
    let requested: Vec<String> = match ids {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => corpus.utterances.iter().map(|u| u.id.clone()).collect(),
    };

    // The checkpoint's inventory sizes the phoneme embedding.
    let models = Models::from_config(&ctx.config, state.inventory.clone());
    let embedder = ctx.embedder();
    let out_dir = ctx.work_dir.join("synth");
    std::fs::create_dir_all(&out_dir)?;

    let opts = SynthesisOptions {
        style: StyleSource::Predictor,
        teacher_forced: false,
    };
    let vocoder = PlaceholderVocoder::default();
    let mut written = 0usize;
    for id in &requested {
        let index = corpus
            .utterances
            .iter()
            .position(|u| &u.id == id)
            .ok_or_else(|| Error::missing(format!("utterance id '{id}' not in the manifest")))?;
        let window = corpus.window(index, ctx.config.context_radius)?;
        let out = synthesize_window(&models, &state.store, &window, embedder.as_ref(), &opts)?;
        let mel = out.mel.value2();
        io::write_matrix_blob(&out_dir.join(format!("{id}.mel.bin")), &mel)?;
        if wav {
            let samples = vocoder.synthesize(&mel, &ctx.config.mel);
            io::write_audio(
                &out_dir.join(format!("{id}.wav")),
                &samples,
                ctx.config.mel.sample_rate,
            )?;
        }
        written += 1;
    }
    println!(
        "synthesized {written} utterances into {}",
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}
