//! Data model and feature pipeline: mel extraction, alignments, context
//! windows, the deterministic toy corpus, and the on-disk formats
//! (manifest, alignment files, feature cache blobs).

pub mod align;
pub mod data;
pub mod io;
pub mod mel;
pub mod pitch;
pub mod toy;

pub use align::{average_by_duration, subword_frame_boundaries, AlignmentMap};
pub use data::{build_context_window, pad_utterance, ContextWindow, Corpus, Utterance};
pub use io::{AlignmentFile, ManifestEntry};
pub use mel::{compute_mel, energy_from_mel, MelConfig, MelSpectrogram};
pub use pitch::{AutocorrelationPitch, PitchEstimator};
pub use toy::{generate_toy_corpus, ToySpec};
