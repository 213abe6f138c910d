//! Semantic embedding of the sentence window.
//!
//! The embedder sees the full 2L+1 concatenation (so neighbor sentences can
//! influence every vector) and its output is re-split per sentence. Two
//! implementations: a deterministic hash embedder that all tests run on,
//! and a subprocess adapter speaking a small versioned JSON protocol so an
//! external pretrained-language-model server in any runtime can serve
//! embeddings.

use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::rng::hashed_vector;

/// Per-sentence sequences of per-subword vectors; sentence count is 2L+1.
#[derive(Debug, Clone)]
pub struct SemanticEmbeddingSeq<T: Scalar> {
    pub sentences: Vec<Array2<T>>,
}

impl<T: Scalar> SemanticEmbeddingSeq<T> {
    pub fn n_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sentences.is_empty() || self.sentences.len().is_multiple_of(2) {
            return Err(Error::contract(format!(
                "semantic window must hold an odd number of sentences, got {}",
                self.sentences.len()
            )));
        }
        let d = self.sentences[0].ncols();
        for s in &self.sentences {
            if s.nrows() == 0 {
                return Err(Error::contract(
                    "every sentence needs at least one subword embedding",
                ));
            }
            if s.ncols() != d {
                return Err(Error::contract("inconsistent embedding widths"));
            }
        }
        Ok(())
    }
}

/// Maps the 2L+1 token sequences to per-subword vectors.
pub trait SemanticEmbedder<T: Scalar> {
    fn d_sem(&self) -> usize;
    fn embed_window(&self, window_texts: &[Vec<String>]) -> Result<SemanticEmbeddingSeq<T>>;
}

/// Deterministic fallback embedder. A vector is the sum of three hashed
/// channels: the token identity, the token's position in the concatenated
/// window, and the concatenation's total length. The last two make the
/// embedding concatenation-aware without any external model.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub seed: u64,
    pub d_sem: usize,
}

impl HashEmbedder {
    pub fn new(seed: u64, d_sem: usize) -> Self {
        HashEmbedder { seed, d_sem }
    }

    /// The position + length channel alone (token contribution excluded);
    /// lets tests verify which channel carried a difference.
    pub fn positional_channel<T: Scalar>(&self, position: usize, total: usize) -> Vec<T> {
        let p: Vec<T> = hashed_vector(self.seed, &format!("pos:{position}"), self.d_sem);
        let n: Vec<T> = hashed_vector(self.seed, &format!("len:{total}"), self.d_sem);
        p.iter().zip(&n).map(|(&a, &b)| a + b).collect()
    }
}

impl<T: Scalar> SemanticEmbedder<T> for HashEmbedder {
    fn d_sem(&self) -> usize {
        self.d_sem
    }

    fn embed_window(&self, window_texts: &[Vec<String>]) -> Result<SemanticEmbeddingSeq<T>> {
        if window_texts.is_empty() {
            return Err(Error::contract("empty window"));
        }
        // Empty sentences contribute one designated pad token.
        let pad = vec!["<pad>".to_string()];
        let effective: Vec<&[String]> = window_texts
            .iter()
            .map(|s| {
                if s.is_empty() {
                    pad.as_slice()
                } else {
                    s.as_slice()
                }
            })
            .collect();
        let total: usize = effective.iter().map(|s| s.len()).sum();

        let mut sentences = Vec::with_capacity(effective.len());
        let mut position = 0usize;
        for tokens in &effective {
            let mut m = Array2::<T>::zeros((tokens.len(), self.d_sem));
            for (r, tok) in tokens.iter().enumerate() {
                let t: Vec<T> = hashed_vector(self.seed, &format!("tok:{tok}"), self.d_sem);
                let pc: Vec<T> = self.positional_channel(position, total);
                for (c, val) in m.row_mut(r).iter_mut().enumerate() {
                    *val = t[c] + pc[c];
                }
                position += 1;
            }
            sentences.push(m);
        }
        let seq = SemanticEmbeddingSeq { sentences };
        seq.validate()?;
        Ok(seq)
    }
}

/// Protocol version of the embedder plug-in boundary.
pub const EMBED_PROTOCOL_VERSION: u32 = 1;

/// One request line: the 2L+1 token sequences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub version: u32,
    pub sentences: Vec<Vec<String>>,
}

/// One response line: per-sentence, per-subword vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub version: u32,
    pub embeddings: Vec<Vec<Vec<f64>>>,
}

impl EmbedResponse {
    /// Checks the response against the request it answers.
    pub fn validate_against(&self, request: &EmbedRequest, d_sem: usize) -> Result<()> {
        if self.version != EMBED_PROTOCOL_VERSION {
            return Err(Error::External(format!(
                "embedder protocol version {} (expected {})",
                self.version, EMBED_PROTOCOL_VERSION
            )));
        }
        if self.embeddings.len() != request.sentences.len() {
            return Err(Error::External(format!(
                "embedder returned {} sentences for {} requested",
                self.embeddings.len(),
                request.sentences.len()
            )));
        }
        for (i, (sent, toks)) in self.embeddings.iter().zip(&request.sentences).enumerate() {
            let expected = toks.len().max(1);
            if sent.len() != expected {
                return Err(Error::External(format!(
                    "sentence {i}: {} vectors for {expected} tokens",
                    sent.len()
                )));
            }
            if sent.iter().any(|v| v.len() != d_sem) {
                return Err(Error::External(format!(
                    "sentence {i}: vector width differs from configured d_sem {d_sem}"
                )));
            }
        }
        Ok(())
    }
}

/// Adapter that shells out to an external embedding server: one JSON
/// request line on stdin, one JSON response line on stdout.
#[derive(Debug, Clone)]
pub struct SubprocessEmbedder {
    pub command: Vec<String>,
    pub d_sem: usize,
}

impl SubprocessEmbedder {
    pub fn new(command: Vec<String>, d_sem: usize) -> Self {
        SubprocessEmbedder { command, d_sem }
    }
}

impl<T: Scalar> SemanticEmbedder<T> for SubprocessEmbedder {
    fn d_sem(&self) -> usize {
        self.d_sem
    }

    fn embed_window(&self, window_texts: &[Vec<String>]) -> Result<SemanticEmbeddingSeq<T>> {
        if self.command.is_empty() {
            return Err(Error::External("embedder command is empty".into()));
        }
        let request = EmbedRequest {
            version: EMBED_PROTOCOL_VERSION,
            sentences: window_texts.to_vec(),
        };
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::External(format!("spawn {}: {e}", self.command[0])))?;
        {
            let stdin = child
                .stdin
                .as_mut()
                .ok_or_else(|| Error::External("embedder stdin unavailable".into()))?;
            let line = serde_json::to_string(&request)
                .map_err(|e| Error::External(format!("encode request: {e}")))?;
            stdin
                .write_all(line.as_bytes())
                .and_then(|_| stdin.write_all(b"\n"))
                .map_err(|e| Error::External(format!("write request: {e}")))?;
        }
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::External("embedder stdout unavailable".into()))?;
        let mut line = String::new();
        BufReader::new(stdout)
            .read_line(&mut line)
            .map_err(|e| Error::External(format!("read response: {e}")))?;
        let status = child
            .wait()
            .map_err(|e| Error::External(format!("wait: {e}")))?;
        if !status.success() {
            return Err(Error::External(format!("embedder exited with {status}")));
        }
        let response: EmbedResponse = serde_json::from_str(line.trim())
            .map_err(|e| Error::External(format!("decode response: {e}")))?;
        response.validate_against(&request, self.d_sem)?;

        let sentences = response
            .embeddings
            .iter()
            .map(|sent| {
                let rows = sent.len();
                let mut m = Array2::<T>::zeros((rows, self.d_sem));
                for (r, v) in sent.iter().enumerate() {
                    for (c, &x) in v.iter().enumerate() {
                        m[(r, c)] = T::of(x);
                    }
                }
                m
            })
            .collect();
        let seq = SemanticEmbeddingSeq { sentences };
        seq.validate()?;
        Ok(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn hash_embedder_is_deterministic() {
        let e = HashEmbedder::new(13, 8);
        let window = vec![toks(&["ba", "ki"]), toks(&["mo"]), toks(&["ba"])];
        let a: SemanticEmbeddingSeq<f32> = e.embed_window(&window).unwrap();
        let b: SemanticEmbeddingSeq<f32> = e.embed_window(&window).unwrap();
        for (x, y) in a.sentences.iter().zip(&b.sentences) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn arity_is_preserved_per_sentence() {
        let e = HashEmbedder::new(13, 8);
        let lens = [3usize, 2, 4, 1, 2];
        let window: Vec<Vec<String>> = lens
            .iter()
            .map(|&n| (0..n).map(|i| format!("w{i}")).collect())
            .collect();
        let seq: SemanticEmbeddingSeq<f64> = e.embed_window(&window).unwrap();
        assert_eq!(seq.n_sentences(), 5);
        for (s, &n) in seq.sentences.iter().zip(&lens) {
            assert_eq!(s.nrows(), n);
            assert_eq!(s.ncols(), 8);
        }
    }

    #[test]
    fn empty_sentence_gets_one_pad_embedding() {
        let e = HashEmbedder::new(13, 8);
        let window = vec![vec![], toks(&["ba"]), vec![]];
        let seq: SemanticEmbeddingSeq<f64> = e.embed_window(&window).unwrap();
        assert_eq!(seq.sentences[0].nrows(), 1);
        assert_eq!(seq.sentences[2].nrows(), 1);
    }

    #[test]
    fn future_sentence_edits_flow_only_through_positional_channel() {
        let e = HashEmbedder::new(21, 8);
        // Same past + current; future sentence changes length (3 -> 1).
        let w1 = vec![toks(&["a"]), toks(&["ba", "ki"]), toks(&["mo", "ru", "sa"])];
        let w2 = vec![toks(&["a"]), toks(&["ba", "ki"]), toks(&["de"])];
        let s1: SemanticEmbeddingSeq<f64> = e.embed_window(&w1).unwrap();
        let s2: SemanticEmbeddingSeq<f64> = e.embed_window(&w2).unwrap();

        // Current-sentence embeddings differ...
        let cur1 = &s1.sentences[1];
        let cur2 = &s2.sentences[1];
        assert_ne!(cur1, cur2);
        // ...and the difference per token equals the positional-channel
        // delta (total length 6 vs 4), identical across tokens: the token
        // channel cancelled.
        let total1 = 6usize;
        let total2 = 4usize;
        for r in 0..cur1.nrows() {
            let position = 1 + r; // past sentence holds position 0
            let pc1: Vec<f64> = e.positional_channel(position, total1);
            let pc2: Vec<f64> = e.positional_channel(position, total2);
            for c in 0..8 {
                let diff = cur1[(r, c)] - cur2[(r, c)];
                let expected = pc1[c] - pc2[c];
                assert!((diff - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn request_response_schema_round_trips() {
        let req = EmbedRequest {
            version: EMBED_PROTOCOL_VERSION,
            sentences: vec![toks(&["ba", "ki"]), toks(&["mo"])],
        };
        let json = serde_json::to_string(&req).unwrap();
        let back: EmbedRequest = serde_json::from_str(&json).unwrap();
        assert_eq!(back.sentences, req.sentences);

        let resp = EmbedResponse {
            version: EMBED_PROTOCOL_VERSION,
            embeddings: vec![vec![vec![0.0; 4], vec![1.0; 4]], vec![vec![0.5; 4]]],
        };
        resp.validate_against(&req, 4).unwrap();
        // Wrong width is rejected.
        assert!(resp.validate_against(&req, 5).is_err());
        // Wrong sentence count is rejected.
        let wrong = EmbedResponse {
            version: EMBED_PROTOCOL_VERSION,
            embeddings: vec![vec![vec![0.0; 4]]],
        };
        assert!(wrong.validate_against(&req, 4).is_err());
        // Wrong protocol version is rejected.
        let old = EmbedResponse {
            version: 99,
            embeddings: resp.embeddings.clone(),
        };
        assert!(old.validate_against(&req, 4).is_err());
    }

    #[test]
    fn subprocess_embedder_happy_path_via_shell() {
        // A canned one-line server: reads the request, prints a fixed valid
        // response for a 1-sentence, 2-token window at d_sem=3.
        let resp = r#"{"version":1,"embeddings":[[[0.1,0.2,0.3],[0.4,0.5,0.6]]]}"#;
        let cmd = vec![
            "sh".to_string(),
            "-c".to_string(),
            format!("read -r _line; printf '%s\\n' '{resp}'"),
        ];
        let e = SubprocessEmbedder::new(cmd, 3);
        let window = vec![toks(&["ba", "ki"])];
        let seq: SemanticEmbeddingSeq<f64> = e.embed_window(&window).unwrap();
        assert_eq!(seq.sentences.len(), 1);
        assert_eq!(seq.sentences[0].nrows(), 2);
        assert!((seq.sentences[0][(1, 2)] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn subprocess_embedder_failures_are_external_errors() {
        // Garbage output.
        let cmd = vec![
            "sh".to_string(),
            "-c".to_string(),
            "read -r _line; echo not-json".to_string(),
        ];
        let e = SubprocessEmbedder::new(cmd, 3);
        let err = <SubprocessEmbedder as SemanticEmbedder<f64>>::embed_window(&e, &[toks(&["ba"])])
            .unwrap_err();
        assert!(matches!(err, Error::External(_)));

        // Missing binary.
        let e = SubprocessEmbedder::new(vec!["definitely-not-a-binary-xyz".into()], 3);
        let err = <SubprocessEmbedder as SemanticEmbedder<f64>>::embed_window(&e, &[toks(&["ba"])])
            .unwrap_err();
        assert!(matches!(err, Error::External(_)));
    }
}
