//! Utterances, the padded context window, and the assembled corpus.

use crate::corpus::align::AlignmentMap;
use crate::corpus::mel::{energy_from_mel, MelConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::num::Scalar;

/// One sentence with its text, phonetic and acoustic material.
#[derive(Debug, Clone)]
pub struct Utterance<T: Scalar> {
    pub id: String,
    pub text: String,
    pub subwords: Vec<String>,
    pub phonemes: Vec<String>,
    pub mel: MelSpectrogram<T>,
    pub alignment: AlignmentMap,
    /// Per-frame F0 in Hz; 0 marks unvoiced frames.
    pub pitch: Vec<T>,
    pub energy: Vec<T>,
}

impl<T: Scalar> Utterance<T> {
    pub fn n_frames(&self) -> usize {
        self.mel.n_frames()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.n_frames();
        if self.pitch.len() != t || self.energy.len() != t {
            return Err(Error::contract(format!(
                "utterance {}: pitch/energy lengths ({}, {}) do not match {t} mel frames",
                self.id,
                self.pitch.len(),
                self.energy.len()
            )));
        }
        if self.phonemes.len() != self.alignment.n_phonemes() {
            return Err(Error::contract(format!(
                "utterance {}: {} phoneme symbols vs {} durations",
                self.id,
                self.phonemes.len(),
                self.alignment.n_phonemes()
            )));
        }
        if self.subwords.len() != self.alignment.n_subwords() {
            return Err(Error::contract(format!(
                "utterance {}: {} subword tokens vs {} alignment spans",
                self.id,
                self.subwords.len(),
                self.alignment.n_subwords()
            )));
        }
        self.alignment
            .validate(Some(t))
            .map_err(|e| Error::contract(format!("utterance {}: {e}", self.id)))?;
        if self.mel.frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "utterance {}: non-finite mel entries",
                self.id
            )));
        }
        Ok(())
    }
}

/// The canonical padding utterance used beyond corpus edges: one log-floor
/// mel frame, empty text, a single pad subword over a single silence
/// phoneme.
pub fn pad_utterance<T: Scalar>(config: &MelConfig) -> Utterance<T> {
    let mel = MelSpectrogram::floor_frame(config);
    let energy = energy_from_mel(&mel);
    Utterance {
        id: "<pad>".to_string(),
        text: String::new(),
        subwords: vec!["<pad>".to_string()],
        phonemes: vec!["<sil>".to_string()],
        mel,
        alignment: AlignmentMap {
            phoneme_durations: vec![1],
            subword_to_phoneme: vec![(0, 0)],
        },
        pitch: vec![T::zero()],
        energy,
    }
}

/// 2L+1 utterances around a current sentence, in corpus order, with
/// out-of-range neighbors replaced by the padding utterance.
pub struct ContextWindow<'a, T: Scalar> {
    pub items: Vec<&'a Utterance<T>>,
    pub radius: usize,
}

impl<'a, T: Scalar> ContextWindow<'a, T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn current(&self) -> &'a Utterance<T> {
        self.items[self.radius]
    }

    /// Token sequences of all 2L+1 sentences, for the semantic embedder.
    pub fn subword_texts(&self) -> Vec<Vec<String>> {
        self.items.iter().map(|u| u.subwords.clone()).collect()
    }
}

/// Builds the 2L+1 window around `index`.
pub fn build_context_window<'a, T: Scalar>(
    corpus: &'a [Utterance<T>],
    pad: &'a Utterance<T>,
    index: usize,
    radius: usize,
) -> Result<ContextWindow<'a, T>> {
    if index >= corpus.len() {
        return Err(Error::contract(format!(
            "window index {index} out of range for corpus of {}",
            corpus.len()
        )));
    }
    let mut items = Vec::with_capacity(2 * radius + 1);
    for offset in -(radius as isize)..=(radius as isize) {
        let pos = index as isize + offset;
        if pos < 0 || pos as usize >= corpus.len() {
            items.push(pad);
        } else {
            items.push(&corpus[pos as usize]);
        }
    }
    Ok(ContextWindow { items, radius })
}

/// An ordered utterance list plus its padding utterance.
pub struct Corpus<T: Scalar> {
    pub utterances: Vec<Utterance<T>>,
    pub pad: Utterance<T>,
    pub mel_config: MelConfig,
}

impl<T: Scalar> Corpus<T> {
    pub fn new(utterances: Vec<Utterance<T>>, mel_config: MelConfig) -> Self {
        let pad = pad_utterance(&mel_config);
        Corpus {
            utterances,
            pad,
            mel_config,
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn window(&self, index: usize, radius: usize) -> Result<ContextWindow<'_, T>> {
        build_context_window(&self.utterances, &self.pad, index, radius)
    }

    pub fn validate(&self) -> Result<()> {
        for u in &self.utterances {
            u.validate()?;
        }
        Ok(())
    }

    /// Distinct phoneme symbols in sorted order (plus the pad silence),
    /// giving a deterministic id inventory.
    pub fn phoneme_inventory(&self) -> Vec<String> {
        let mut set: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        set.insert("<sil>".to_string());
        for u in &self.utterances {
            for p in &u.phonemes {
                set.insert(p.clone());
            }
        }
        set.into_iter().collect()
    }
}
