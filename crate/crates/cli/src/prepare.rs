//! `mstts prepare`: feature extraction into the cache, from a manifest of
//! real audio or from the synthetic toy corpus.

use std::path::Path;
use std::process::ExitCode;

use mstts_core::corpus::io::{self, AlignmentFile, ManifestEntry};
use mstts_core::corpus::mel::{compute_mel, energy_from_mel};
use mstts_core::corpus::pitch::{AutocorrelationPitch, PitchEstimator};
use mstts_core::corpus::toy::{generate_toy_corpus, toy_waveform};
use mstts_core::error::{Error, Result};

use crate::common::{tokenize, RunContext};

pub fn run(ctx: &RunContext, manifest: Option<&Path>, toy: Option<usize>) -> Result<ExitCode> {
    ctx.write_snapshot("prepare")?;
    match (manifest, toy) {
        (_, Some(n)) => prepare_toy(ctx, n),
        (Some(path), None) => prepare_manifest(ctx, path),
        (None, None) => Err(Error::invalid(
            "prepare needs either --manifest PATH or --toy N",
        )),
    }
}

fn prepare_toy(ctx: &RunContext, n: usize) -> Result<ExitCode> {
    let cfg = &ctx.config;
    let utterances = generate_toy_corpus::<f32>(cfg.seed, n, &cfg.toy)?;

    let audio_dir = ctx.work_dir.join("audio");
    let align_dir = ctx.work_dir.join("align");
    let cache_dir = ctx.cache_dir();
    std::fs::create_dir_all(&audio_dir)?;
    std::fs::create_dir_all(&align_dir)?;
    std::fs::create_dir_all(&cache_dir)?;

    let mut entries = Vec::with_capacity(n);
    let mut total_frames = 0usize;
    for (i, utt) in utterances.iter().enumerate() {
        let wav = toy_waveform::<f32>(cfg.seed, i, &cfg.toy)?;
        let audio_path = audio_dir.join(format!("{}.f32", utt.id));
        io::write_audio(&audio_path, &wav, cfg.mel.sample_rate)?;

        let align_path = align_dir.join(format!("{}.json", utt.id));
        io::write_alignment_file(
            &align_path,
            &AlignmentFile::from_parts(&utt.phonemes, &utt.alignment),
        )?;

        write_features(&cache_dir, utt)?;
        total_frames += utt.n_frames();
        entries.push(ManifestEntry {
            id: utt.id.clone(),
            text: utt.text.clone(),
            audio_path: format!("audio/{}.f32", utt.id),
            alignment_path: format!("align/{}.json", utt.id),
            order_index: i as u64,
        });
    }
    io::write_manifest(&ctx.manifest_path(), &entries)?;
    println!(
        "prepared {} toy utterances, {} total frames, cache at {}",
        n,
        total_frames,
        cache_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn prepare_manifest(ctx: &RunContext, manifest_path: &Path) -> Result<ExitCode> {
    let entries = io::read_manifest(manifest_path)?;
    if entries.is_empty() {
        return Err(Error::invalid(format!(
            "manifest {} lists no utterances",
            manifest_path.display()
        )));
    }
    let cache_dir = ctx.cache_dir();
    std::fs::create_dir_all(&cache_dir)?;
    let estimator = AutocorrelationPitch::default();

    let mut ok = 0usize;
    let mut total_frames = 0usize;
    let mut failed: Vec<(String, String)> = Vec::new();
    for entry in &entries {
        match prepare_one(ctx, entry, &estimator, &cache_dir) {
            Ok(frames) => {
                ok += 1;
                total_frames += frames;
            }
            Err(e) => failed.push((entry.id.clone(), e.to_string())),
        }
    }
    // The work-dir manifest mirrors the input so later commands resolve
    // the same files.
    io::write_manifest(&ctx.manifest_path(), &entries)?;
    println!(
        "prepared {ok} of {} utterances, {total_frames} total frames, cache at {}",
        entries.len(),
        cache_dir.display()
    );
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for (id, err) in &failed {
            eprintln!("utterance {id}: {err}");
        }
        Ok(ExitCode::from(4))
    }
}

fn prepare_one(
    ctx: &RunContext,
    entry: &ManifestEntry,
    estimator: &AutocorrelationPitch,
    cache_dir: &Path,
) -> Result<usize> {
    let cfg = &ctx.config;
    let (wav, sr) = io::read_audio::<f32>(&ctx.resolve(&entry.audio_path))?;
    if let Some(sr) = sr {
        if sr != cfg.mel.sample_rate {
            return Err(Error::invalid(format!(
                "audio is {sr} Hz but the config expects {} Hz",
                cfg.mel.sample_rate
            )));
        }
    }
    let alignment_file = io::read_alignment_file(&ctx.resolve(&entry.alignment_path))?;
    let alignment = alignment_file.to_alignment_map();

    let mel = compute_mel(&wav, &cfg.mel)?;
    let energy = energy_from_mel(&mel);
    let pitch = estimator.estimate(&wav, &cfg.mel);

    let utt = mstts_core::corpus::data::Utterance {
        id: entry.id.clone(),
        text: entry.text.clone(),
        subwords: tokenize(&entry.text),
        phonemes: alignment_file.phonemes.clone(),
        mel,
        alignment,
        pitch,
        energy,
    };
    utt.validate()?;
    write_features(cache_dir, &utt)?;
    Ok(utt.n_frames())
}

fn write_features(cache_dir: &Path, utt: &mstts_core::corpus::data::Utterance<f32>) -> Result<()> {
    let (mel_path, pitch_path, energy_path) = io::cache_paths(cache_dir, &utt.id);
    io::write_matrix_blob(&mel_path, &utt.mel.frames)?;
    io::write_feature_blob(&pitch_path, &[utt.pitch.len()], &utt.pitch)?;
    io::write_feature_blob(&energy_path, &[utt.energy.len()], &utt.energy)?;
    Ok(())
}
