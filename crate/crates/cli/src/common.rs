//! Shared CLI plumbing: config resolution, work-dir layout, corpus
//! loading from the feature cache, and embedder construction.

use std::path::{Path, PathBuf};

use mstts_core::corpus::data::{Corpus, Utterance};
use mstts_core::corpus::io::{self, ManifestEntry};
use mstts_core::corpus::mel::MelSpectrogram;
use mstts_core::error::{Error, Result};
use mstts_core::predictor::{HashEmbedder, SemanticEmbedder, SubprocessEmbedder};
use mstts_core::rng::derive_seed;
use mstts_core::training::PipelineConfig;

pub struct RunContext {
    pub config: PipelineConfig,
    pub work_dir: PathBuf,
}

impl RunContext {
    pub fn build(
        config_path: Option<&Path>,
        preset: &str,
        seed: Option<u64>,
        work_dir: &Path,
    ) -> Result<RunContext> {
        let mut config = match config_path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::missing(format!("config {}: {e}", path.display())))?;
                toml::from_str::<PipelineConfig>(&text)
                    .map_err(|e| Error::format(format!("config {}: {e}", path.display())))?
            }
            None => PipelineConfig::from_preset(preset)?,
        };
        if let Some(s) = seed {
            config.seed = s;
        }
        let config = config.resolved();
        config.validate()?;
        std::fs::create_dir_all(work_dir)?;
        Ok(RunContext {
            config,
            work_dir: work_dir.to_path_buf(),
        })
    }

    /// Writes the resolved config snapshot for this command; together with
    /// the manifest it is sufficient to replay the run.
    pub fn write_snapshot(&self, command: &str) -> Result<()> {
        let text = toml::to_string_pretty(&self.config)
            .map_err(|e| Error::format(format!("serialize config: {e}")))?;
        let path = self
            .work_dir
            .join(format!("resolved-config.{command}.toml"));
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.work_dir.join("manifest.jsonl")
    }

    /// Cache directory; `MSTTS_CACHE_DIR` relocates it (cache location is
    /// the only environment-controlled knob).
    pub fn cache_dir(&self) -> PathBuf {
        std::env::var_os("MSTTS_CACHE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| self.work_dir.join("cache"))
    }

    pub fn checkpoint_path(&self, stage: u8) -> PathBuf {
        self.work_dir.join(format!("stage{stage}.ckpt"))
    }

    pub fn metrics_path(&self, stage: u8) -> PathBuf {
        self.work_dir.join(format!("metrics-stage{stage}.jsonl"))
    }

    pub fn embedder(&self) -> Box<dyn SemanticEmbedder<f32>> {
        match &self.config.embedder_command {
            Some(cmd) => Box::new(SubprocessEmbedder::new(
                cmd.clone(),
                self.config.predictor.d_sem,
            )),
            None => Box::new(HashEmbedder::new(
                derive_seed(self.config.seed, "embedder"),
                self.config.predictor.d_sem,
            )),
        }
    }

    /// Loads the prepared corpus (manifest + alignment files + feature
    /// cache) back into memory.
    pub fn load_corpus(&self) -> Result<Corpus<f32>> {
        let manifest = io::read_manifest(&self.manifest_path())?;
        if manifest.is_empty() {
            return Err(Error::missing(format!(
                "manifest {} lists no utterances; run `mstts prepare` first",
                self.manifest_path().display()
            )));
        }
        let cache = self.cache_dir();
        let mut utterances = Vec::with_capacity(manifest.len());
        for entry in &manifest {
            utterances.push(self.load_utterance(entry, &cache)?);
        }
        let corpus = Corpus::new(utterances, self.config.mel.clone());
        corpus.validate()?;
        Ok(corpus)
    }

    fn load_utterance(&self, entry: &ManifestEntry, cache: &Path) -> Result<Utterance<f32>> {
        let alignment_path = self.resolve(&entry.alignment_path);
        let alignment_file = io::read_alignment_file(&alignment_path)?;
        let (mel_path, pitch_path, energy_path) = io::cache_paths(cache, &entry.id);
        let frames = io::read_matrix_blob::<f32>(&mel_path)?;
        let (pdims, pitch) = io::read_feature_blob::<f32>(&pitch_path)?;
        let (edims, energy) = io::read_feature_blob::<f32>(&energy_path)?;
        if pdims.len() != 1 || edims.len() != 1 {
            return Err(Error::format(format!(
                "{}: pitch/energy caches must be rank 1",
                entry.id
            )));
        }
        Ok(Utterance {
            id: entry.id.clone(),
            text: entry.text.clone(),
            subwords: tokenize(&entry.text),
            phonemes: alignment_file.phonemes.clone(),
            mel: MelSpectrogram {
                frames,
                config: self.config.mel.clone(),
            },
            alignment: alignment_file.to_alignment_map(),
            pitch,
            energy,
        })
    }

    /// Paths in manifests resolve relative to the work dir.
    pub fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.work_dir.join(path)
        }
    }
}

/// Whitespace tokenizer: one token per subword.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|s| s.to_string()).collect()
}
