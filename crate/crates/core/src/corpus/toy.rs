//! Deterministic synthetic corpus for desk-scale runs and tests.
//!
//! Each utterance is a mixture of tones: vowel phonemes carry a harmonic
//! stack at a per-sentence F0 contour (written out as the ground-truth
//! pitch track), consonants are low-amplitude noise with pitch 0. Durations
//! are drawn per phoneme, and the waveform length is chosen so that mel
//! extraction reproduces exactly sum(durations) frames. Same seed, same
//! bytes.

use rand::Rng;

use crate::corpus::align::AlignmentMap;
use crate::corpus::data::Utterance;
use crate::corpus::mel::{compute_mel, energy_from_mel, MelConfig};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::rng::indexed_rng;

/// Size parameters of the generated corpus.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToySpec {
    /// Subword tokens per utterance.
    pub subwords_per_utterance: usize,
    /// Inclusive range of frames per phoneme.
    pub min_frames_per_phoneme: usize,
    pub max_frames_per_phoneme: usize,
    /// Utterances per chapter; train/eval splits cut on chapter boundaries.
    pub chapter_size: usize,
    /// Base F0 around which sentence-level offsets move.
    pub base_pitch_hz: f64,
    pub mel: MelConfig,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            subwords_per_utterance: 3,
            min_frames_per_phoneme: 2,
            max_frames_per_phoneme: 5,
            chapter_size: 8,
            base_pitch_hz: 150.0,
            mel: MelConfig::default(),
        }
    }
}

impl ToySpec {
    pub fn chapter_of(&self, index: usize) -> usize {
        index / self.chapter_size.max(1)
    }

    fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        if self.subwords_per_utterance == 0 {
            return Err(Error::invalid("subwords_per_utterance must be at least 1"));
        }
        if self.min_frames_per_phoneme == 0
            || self.min_frames_per_phoneme > self.max_frames_per_phoneme
        {
            return Err(Error::invalid("invalid frames-per-phoneme range"));
        }
        Ok(())
    }
}

/// Tiny fixed vocabulary; a token's characters are its phonemes, so the
/// subword-to-phoneme alignment falls out of the spelling.
const VOCAB: &[&str] = &[
    "a", "ba", "de", "i", "ki", "mo", "o", "ru", "sa", "u", "vi", "ne",
];

fn is_vowel(p: &str) -> bool {
    matches!(p, "a" | "e" | "i" | "o" | "u")
}

/// Pseudo-formant per phoneme symbol: a stable tone in the 500-2000 Hz band.
fn formant_hz(p: &str) -> f64 {
    let b = p.as_bytes()[0] as u64;
    500.0 + (crate::rng::splitmix64(b) % 1500) as f64
}

/// Everything drawn for one utterance, all in f64 so every consumer sees
/// the identical waveform regardless of the corpus scalar type.
struct ToyDraw {
    subwords: Vec<String>,
    phonemes: Vec<String>,
    spans: Vec<(usize, usize)>,
    durations: Vec<usize>,
    per_frame_f0: Vec<f64>,
    waveform: Vec<f64>,
}

fn draw_utterance(seed: u64, index: usize, spec: &ToySpec) -> ToyDraw {
    let mut rng = indexed_rng(seed, "toy-utterance", index as u64);
    let sr = spec.mel.sample_rate as f64;
    let hop = spec.mel.hop_size;

    let mut subwords = Vec::with_capacity(spec.subwords_per_utterance);
    let mut phonemes: Vec<String> = Vec::new();
    let mut spans = Vec::with_capacity(spec.subwords_per_utterance);
    for _ in 0..spec.subwords_per_utterance {
        let tok = VOCAB[rng.gen_range(0..VOCAB.len())];
        let first = phonemes.len();
        for ch in tok.chars() {
            phonemes.push(ch.to_string());
        }
        spans.push((first, phonemes.len() - 1));
        subwords.push(tok.to_string());
    }
    let durations: Vec<usize> = (0..phonemes.len())
        .map(|_| rng.gen_range(spec.min_frames_per_phoneme..=spec.max_frames_per_phoneme))
        .collect();
    let total_frames: usize = durations.iter().sum();

    // Sentence-level pitch offset plus a gentle per-phoneme contour.
    let chapter = spec.chapter_of(index);
    let sentence_offset = 25.0 * ((index as f64) * 0.7).sin() + 8.0 * (chapter as f64 % 3.0);
    let mut per_frame_f0 = Vec::with_capacity(total_frames);
    let mut phoneme_of_frame = Vec::with_capacity(total_frames);
    for (p_idx, (p, &d)) in phonemes.iter().zip(&durations).enumerate() {
        let voiced = is_vowel(p);
        let contour = 12.0 * (p_idx as f64 * 0.9).sin();
        for _ in 0..d {
            per_frame_f0.push(if voiced {
                spec.base_pitch_hz + sentence_offset + contour
            } else {
                0.0
            });
            phoneme_of_frame.push(p_idx);
        }
    }

    // Waveform length chosen so frame_count(n) == total_frames.
    let n_samples = ((total_frames.saturating_sub(1)) * hop + hop / 2)
        .max(hop / 2)
        .max(1);
    let mut waveform = vec![0.0f64; n_samples];
    let mut phase = 0.0f64;
    let mut phase2 = 0.0f64;
    for (s, out) in waveform.iter_mut().enumerate() {
        let t = (s / hop).min(total_frames - 1);
        let f0 = per_frame_f0[t];
        if f0 > 0.0 {
            let p = &phonemes[phoneme_of_frame[t]];
            phase += 2.0 * std::f64::consts::PI * f0 / sr;
            phase2 += 2.0 * std::f64::consts::PI * formant_hz(p) / sr;
            *out = 0.45 * phase.sin() + 0.2 * (2.0 * phase).sin() + 0.12 * phase2.sin();
        } else {
            *out = 0.08 * rng.gen_range(-1.0..1.0);
        }
    }

    ToyDraw {
        subwords,
        phonemes,
        spans,
        durations,
        per_frame_f0,
        waveform,
    }
}

/// Generates `n_utterances` utterances, bit-identical for equal inputs.
pub fn generate_toy_corpus<T: Scalar>(
    seed: u64,
    n_utterances: usize,
    spec: &ToySpec,
) -> Result<Vec<Utterance<T>>> {
    if n_utterances == 0 {
        return Err(Error::invalid("n_utterances must be at least 1"));
    }
    spec.validate()?;
    (0..n_utterances)
        .map(|i| generate_utterance(seed, i, spec))
        .collect()
}

fn generate_utterance<T: Scalar>(seed: u64, index: usize, spec: &ToySpec) -> Result<Utterance<T>> {
    let draw = draw_utterance(seed, index, spec);
    let total_frames: usize = draw.durations.iter().sum();

    let wav_t: Vec<T> = draw.waveform.iter().map(|&v| T::of(v)).collect();
    let mel = compute_mel(&wav_t, &spec.mel)?;
    if mel.n_frames() != total_frames {
        return Err(Error::contract(format!(
            "toy generator produced {} mel frames for {} duration frames",
            mel.n_frames(),
            total_frames
        )));
    }
    let energy = energy_from_mel(&mel);
    let pitch: Vec<T> = draw.per_frame_f0.iter().map(|&v| T::of(v)).collect();

    let utt = Utterance {
        id: format!("utt{index:04}"),
        text: draw.subwords.join(" "),
        subwords: draw.subwords,
        phonemes: draw.phonemes,
        mel,
        alignment: AlignmentMap {
            phoneme_durations: draw.durations,
            subword_to_phoneme: draw.spans,
        },
        pitch,
        energy,
    };
    utt.validate()?;
    Ok(utt)
}

/// The synthetic waveform for an utterance (used when `prepare --toy`
/// writes audio files for the manifest).
pub fn toy_waveform<T: Scalar>(seed: u64, index: usize, spec: &ToySpec) -> Result<Vec<T>> {
    spec.validate()?;
    let draw = draw_utterance(seed, index, spec);
    Ok(draw.waveform.iter().map(|&v| T::of(v)).collect())
}
