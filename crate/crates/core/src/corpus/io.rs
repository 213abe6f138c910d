//! On-disk formats: JSON-lines manifest, per-utterance alignment files,
//! binary feature-cache blobs, audio loading, and the TextGrid converter.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::align::AlignmentMap;
use crate::error::{Error, Result};
use crate::num::Scalar;

/// One manifest line. `order_index` defines narrative order for context
/// windows; the manifest is sorted by it on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub text: String,
    pub audio_path: String,
    pub alignment_path: String,
    pub order_index: u64,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::missing(format!("manifest {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            Error::format(format!(
                "manifest {} line {}: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        entries.push(entry);
    }
    entries.sort_by_key(|e| e.order_index);
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e).map_err(|e| Error::format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Per-utterance alignment file. Subword spans are inclusive
/// [first, last] phoneme indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentFile {
    pub phonemes: Vec<String>,
    pub durations_frames: Vec<usize>,
    pub subword_spans: Vec<[usize; 2]>,
}

impl AlignmentFile {
    pub fn to_alignment_map(&self) -> AlignmentMap {
        AlignmentMap {
            phoneme_durations: self.durations_frames.clone(),
            subword_to_phoneme: self.subword_spans.iter().map(|s| (s[0], s[1])).collect(),
        }
    }

    pub fn from_parts(phonemes: &[String], alignment: &AlignmentMap) -> Self {
        AlignmentFile {
            phonemes: phonemes.to_vec(),
            durations_frames: alignment.phoneme_durations.clone(),
            subword_spans: alignment
                .subword_to_phoneme
                .iter()
                .map(|&(a, b)| [a, b])
                .collect(),
        }
    }
}

pub fn read_alignment_file(path: &Path) -> Result<AlignmentFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::missing(format!("alignment {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("alignment {}: {e}", path.display())))
}

pub fn write_alignment_file(path: &Path, file: &AlignmentFile) -> Result<()> {
    let text = serde_json::to_string_pretty(file).map_err(|e| Error::format(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

// ---- feature cache blobs ----

const BLOB_MAGIC: &[u8; 8] = b"MSTTSFEA";
const BLOB_VERSION: u8 = 1;

/// Writes a feature array blob: 8-byte magic, version byte, little-endian
/// dims header (u32 ndim then u32 per dim), then row-major 32-bit reals.
pub fn write_feature_blob<T: Scalar>(path: &Path, dims: &[usize], data: &[T]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(Error::contract(format!(
            "blob dims {:?} expect {expected} values, got {}",
            dims,
            data.len()
        )));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(BLOB_MAGIC)?;
    w.write_all(&[BLOB_VERSION])?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature blob back as (dims, values).
pub fn read_feature_blob<T: Scalar>(path: &Path) -> Result<(Vec<usize>, Vec<T>)> {
    let mut r = BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::missing(format!("feature blob {}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BLOB_MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut ver = [0u8; 1];
    r.read_exact(&mut ver)?;
    if ver[0] != BLOB_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported blob version {}",
            path.display(),
            ver[0]
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let ndim = u32::from_le_bytes(u32buf) as usize;
    if ndim == 0 || ndim > 4 {
        return Err(Error::format(format!(
            "{}: bad ndim {ndim}",
            path.display()
        )));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        r.read_exact(&mut u32buf)?;
        dims.push(u32::from_le_bytes(u32buf) as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf)?;
        data.push(T::of(f32::from_le_bytes(u32buf) as f64));
    }
    Ok((dims, data))
}

pub fn write_matrix_blob<T: Scalar>(path: &Path, m: &Array2<T>) -> Result<()> {
    let data: Vec<T> = m.iter().copied().collect();
    write_feature_blob(path, &[m.nrows(), m.ncols()], &data)
}

pub fn read_matrix_blob<T: Scalar>(path: &Path) -> Result<Array2<T>> {
    let (dims, data) = read_feature_blob::<T>(path)?;
    if dims.len() != 2 {
        return Err(Error::format(format!(
            "{}: expected a rank-2 blob, got dims {:?}",
            path.display(),
            dims
        )));
    }
    Array2::from_shape_vec((dims[0], dims[1]), data)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

// ---- audio ----

/// Loads mono audio: `.wav` (PCM16 / float32, averaging channels) or raw
/// little-endian `.f32` samples.
pub fn read_audio<T: Scalar>(path: &Path) -> Result<(Vec<T>, Option<u32>)> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "wav" => {
            let mut reader = hound::WavReader::open(path)
                .map_err(|e| Error::missing(format!("audio {}: {e}", path.display())))?;
            let spec = reader.spec();
            let channels = spec.channels as usize;
            let samples: Vec<f64> = match spec.sample_format {
                hound::SampleFormat::Int => {
                    let max = (1i64 << (spec.bits_per_sample - 1)) as f64;
                    reader
                        .samples::<i32>()
                        .map(|s| s.map(|v| v as f64 / max))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?
                }
                hound::SampleFormat::Float => reader
                    .samples::<f32>()
                    .map(|s| s.map(|v| v as f64))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::format(format!("{}: {e}", path.display())))?,
            };
            let mono: Vec<T> = samples
                .chunks(channels)
                .map(|c| T::of(c.iter().sum::<f64>() / channels as f64))
                .collect();
            Ok((mono, Some(spec.sample_rate)))
        }
        "f32" | "raw" => {
            let bytes = std::fs::read(path)
                .map_err(|e| Error::missing(format!("audio {}: {e}", path.display())))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::format(format!(
                    "{}: raw f32 file length not a multiple of 4",
                    path.display()
                )));
            }
            let samples = bytes
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            Ok((samples, None))
        }
        other => Err(Error::invalid(format!(
            "unsupported audio extension '{other}' for {}",
            path.display()
        ))),
    }
}

/// Writes mono audio. `.wav` gets PCM16; `.f32` raw little-endian floats.
pub fn write_audio<T: Scalar>(path: &Path, samples: &[T], sample_rate: u32) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "wav" => {
            let spec = hound::WavSpec {
                channels: 1,
                sample_rate,
                bits_per_sample: 16,
                sample_format: hound::SampleFormat::Int,
            };
            let mut writer = hound::WavWriter::create(path, spec)
                .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
            for s in samples {
                let v = (s.as_f64().clamp(-1.0, 1.0) * i16::MAX as f64) as i16;
                writer
                    .write_sample(v)
                    .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
            }
            writer
                .finalize()
                .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
            Ok(())
        }
        "f32" | "raw" => {
            let mut bytes = Vec::with_capacity(samples.len() * 4);
            for s in samples {
                bytes.extend_from_slice(&(s.as_f64() as f32).to_le_bytes());
            }
            std::fs::write(path, bytes)?;
            Ok(())
        }
        other => Err(Error::invalid(format!(
            "unsupported audio extension '{other}' for {}",
            path.display()
        ))),
    }
}

// ---- TextGrid converter ----

#[derive(Debug, Clone)]
pub struct TextGridInterval {
    pub xmin: f64,
    pub xmax: f64,
    pub text: String,
}

/// Minimal parser for Praat long-format TextGrids: extracts every interval
/// tier by name.
pub fn parse_textgrid(content: &str) -> Result<Vec<(String, Vec<TextGridInterval>)>> {
    fn quoted(line: &str) -> Option<String> {
        let start = line.find('"')?;
        let end = line.rfind('"')?;
        if end > start {
            Some(line[start + 1..end].to_string())
        } else {
            None
        }
    }
    fn number_after(line: &str, key: &str) -> Option<f64> {
        let idx = line.find(key)?;
        let rest = line[idx + key.len()..].trim_start_matches([' ', '=']);
        rest.trim().parse::<f64>().ok()
    }

    let mut tiers: Vec<(String, Vec<TextGridInterval>)> = Vec::new();
    let mut current: Option<(String, Vec<TextGridInterval>)> = None;
    let mut pending: Option<(Option<f64>, Option<f64>, Option<String>)> = None;

    fn flush(
        current: &mut Option<(String, Vec<TextGridInterval>)>,
        pending: &mut Option<(Option<f64>, Option<f64>, Option<String>)>,
    ) {
        if let (Some(cur), Some((Some(a), Some(b), Some(t)))) = (current.as_mut(), pending.take()) {
            cur.1.push(TextGridInterval {
                xmin: a,
                xmax: b,
                text: t,
            });
        }
    }

    for line in content.lines() {
        let l = line.trim();
        if l.starts_with("name") {
            if let Some(name) = quoted(l) {
                flush(&mut current, &mut pending);
                if let Some(t) = current.take() {
                    tiers.push(t);
                }
                current = Some((name, Vec::new()));
            }
            continue;
        }
        if l.starts_with("intervals [") {
            flush(&mut current, &mut pending);
            pending = Some((None, None, None));
            continue;
        }
        if let Some(p) = pending.as_mut() {
            if l.starts_with("xmin") {
                p.0 = number_after(l, "xmin");
            } else if l.starts_with("xmax") {
                p.1 = number_after(l, "xmax");
            } else if l.starts_with("text") {
                p.2 = quoted(l);
            }
        }
    }
    flush(&mut current, &mut pending);
    if let Some(t) = current.take() {
        tiers.push(t);
    }
    if tiers.is_empty() {
        return Err(Error::format("no interval tiers found in TextGrid"));
    }
    Ok(tiers)
}

/// Converts phone + word interval tiers into an [`AlignmentFile`]. Phone
/// boundaries are snapped to frame indices at `sample_rate / hop_size`
/// frames per second; a word's span covers the phones whose midpoints fall
/// inside it. Empty-text intervals become `<sil>` phonemes attached to the
/// nearest word span edge.
pub fn textgrid_to_alignment(
    content: &str,
    phone_tier: &str,
    word_tier: &str,
    sample_rate: u32,
    hop_size: usize,
) -> Result<AlignmentFile> {
    let tiers = parse_textgrid(content)?;
    let phones = &tiers
        .iter()
        .find(|(n, _)| n == phone_tier)
        .ok_or_else(|| Error::format(format!("TextGrid has no '{phone_tier}' tier")))?
        .1;
    let words = &tiers
        .iter()
        .find(|(n, _)| n == word_tier)
        .ok_or_else(|| Error::format(format!("TextGrid has no '{word_tier}' tier")))?
        .1;
    if phones.is_empty() || words.is_empty() {
        return Err(Error::format("empty phone or word tier"));
    }

    let fps = sample_rate as f64 / hop_size as f64;
    let frame_at = |t: f64| (t * fps).round() as i64;

    let mut phoneme_syms = Vec::with_capacity(phones.len());
    let mut durations = Vec::with_capacity(phones.len());
    for p in phones {
        let d = (frame_at(p.xmax) - frame_at(p.xmin)).max(0) as usize;
        phoneme_syms.push(if p.text.trim().is_empty() {
            "<sil>".to_string()
        } else {
            p.text.trim().to_string()
        });
        durations.push(d);
    }

    // Word index per phone by midpoint; silences outside any word join the
    // previous word (or the first).
    let word_spans: Vec<(f64, f64)> = words
        .iter()
        .filter(|w| !w.text.trim().is_empty())
        .map(|w| (w.xmin, w.xmax))
        .collect();
    if word_spans.is_empty() {
        return Err(Error::format("word tier has no labelled intervals"));
    }
    let mut word_of_phone = Vec::with_capacity(phones.len());
    for p in phones {
        let mid = 0.5 * (p.xmin + p.xmax);
        let mut w = 0usize;
        let mut found = false;
        for (i, &(a, b)) in word_spans.iter().enumerate() {
            if mid >= a && mid < b {
                w = i;
                found = true;
                break;
            }
        }
        if !found {
            w = word_of_phone.last().copied().unwrap_or(0);
        }
        word_of_phone.push(w);
    }
    // Force monotone non-decreasing word assignment.
    for i in 1..word_of_phone.len() {
        if word_of_phone[i] < word_of_phone[i - 1] {
            word_of_phone[i] = word_of_phone[i - 1];
        }
    }
    let mut spans: Vec<[usize; 2]> = Vec::new();
    for (i, &w) in word_of_phone.iter().enumerate() {
        if spans.len() <= w {
            while spans.len() <= w {
                let start = i;
                spans.push([start, start]);
            }
        } else {
            spans[w][1] = i;
        }
    }

    Ok(AlignmentFile {
        phonemes: phoneme_syms,
        durations_frames: durations,
        subword_spans: spans,
    })
}

/// Default cache file locations for an utterance id.
pub fn cache_paths(cache_dir: &Path, id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        cache_dir.join(format!("{id}.mel.bin")),
        cache_dir.join(format!("{id}.pitch.bin")),
        cache_dir.join(format!("{id}.energy.bin")),
    )
}
