//! Multi-scale style extractor.
//!
//! Three levels (global / sentence / subword), each a reference encoder
//! (strided conv stack + GRU summarizer) and a style-token attention layer.
//! The global level reads the concatenated 2L+1 window mels, the sentence
//! level the current mel, the subword level each subword's mel segment.
//! Residual embeddings decorrelate the levels before token attention:
//! R_g = E_g, R_s = E_s - E_g, R_w[i] = E_w[i] - E_s. The per-subword
//! multi-scale embedding is S_g + S_s + S_w[i].

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::corpus::data::ContextWindow;
use crate::corpus::mel::MelConfig;
use crate::error::{Error, Result};
use crate::nn::{xavier, Gru, ParamGraph, ParamStore, TokenAttention};
use crate::num::Scalar;
use crate::rng::component_rng;
use crate::tensor::Tensor;

/// Style level a vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StyleLevel {
    Global,
    Sentence,
    Subword,
}

impl StyleLevel {
    pub fn name(self) -> &'static str {
        match self {
            StyleLevel::Global => "global",
            StyleLevel::Sentence => "sentence",
            StyleLevel::Subword => "subword",
        }
    }
}

/// Extractor hyperparameters. `conv_channels` lists the output channels of
/// each 3x3 stride-2 layer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExtractorConfig {
    pub d_style: usize,
    pub conv_channels: Vec<usize>,
    pub n_tokens: usize,
    pub n_heads: usize,
    /// Cap on the concatenated window mel; the tail is truncated beyond it.
    pub max_context_frames: usize,
}

impl ExtractorConfig {
    /// Production-scale configuration.
    pub fn default_preset() -> Self {
        ExtractorConfig {
            d_style: 128,
            conv_channels: vec![32, 32, 64, 64, 128, 128],
            n_tokens: 10,
            n_heads: 4,
            max_context_frames: 4000,
        }
    }

    /// Desk-scale configuration used by tests.
    pub fn tiny_preset() -> Self {
        ExtractorConfig {
            d_style: 16,
            conv_channels: vec![8, 8],
            n_tokens: 4,
            n_heads: 1,
            max_context_frames: 512,
        }
    }

    /// Frequency width after the stride-2 stack.
    pub fn reduced_freq(&self, n_mels: usize) -> usize {
        let mut f = n_mels;
        for _ in &self.conv_channels {
            f = (f - 1) / 2 + 1;
        }
        f
    }
}

/// Strided conv stack + GRU summarizer mapping a variable-length mel
/// segment to a fixed-width embedding (the level's E vector).
pub struct ReferenceEncoder {
    pub name: String,
    pub conv_channels: Vec<usize>,
    pub n_mels: usize,
    pub d_style: usize,
    gru: Gru,
}

impl ReferenceEncoder {
    pub fn new(name: &str, config: &ExtractorConfig, n_mels: usize) -> Self {
        let last_ch = *config.conv_channels.last().expect("conv stack is empty");
        let gru_in = last_ch * config.reduced_freq(n_mels);
        ReferenceEncoder {
            name: name.to_string(),
            conv_channels: config.conv_channels.clone(),
            n_mels,
            d_style: config.d_style,
            gru: Gru::new(format!("{name}.gru"), gru_in, config.d_style),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut rand_chacha::ChaCha8Rng) {
        let mut in_ch = 1usize;
        for (i, &out_ch) in self.conv_channels.iter().enumerate() {
            store.insert(
                format!("{}.conv{i}.weight", self.name),
                xavier(rng, in_ch * 9, out_ch, &[in_ch * 9, out_ch]),
            );
            store.insert(
                format!("{}.conv{i}.bias", self.name),
                crate::nn::zeros::<T>(&[out_ch]),
            );
            in_ch = out_ch;
        }
        self.gru.init(store, rng);
    }

    /// Encodes a mel segment ([frames, n_mels] log-amplitudes) into a
    /// [1, d_style] embedding.
    pub fn encode<T: Scalar>(&self, g: &ParamGraph<T>, segment: &Array2<T>) -> Result<Tensor<T>> {
        if segment.nrows() == 0 {
            return Err(Error::contract(format!("{}: empty mel segment", self.name)));
        }
        if segment.ncols() != self.n_mels {
            return Err(Error::contract(format!(
                "{}: segment has {} mel bands, encoder expects {}",
                self.name,
                segment.ncols(),
                self.n_mels
            )));
        }
        let (t, m) = segment.dim();
        let mut x3 = ArrayD::<T>::zeros(IxDyn(&[1, t, m]));
        for i in 0..t {
            for j in 0..m {
                x3[[0, i, j]] = segment[(i, j)];
            }
        }
        let mut x = Tensor::constant(x3);
        for i in 0..self.conv_channels.len() {
            let w = g.param(&format!("{}.conv{i}.weight", self.name));
            let b = g.param(&format!("{}.conv{i}.bias", self.name));
            x = x.conv2d(&w, &b, (3, 3), (2, 2), (1, 1)).relu();
        }
        let seq = x.merge_channels();
        Ok(self.gru.final_state(g, &seq))
    }
}

/// (R_g, R_s, R_w sequence) for one window.
pub type Residuals<T> = (Tensor<T>, Tensor<T>, Vec<Tensor<T>>);

/// Residual style embeddings from the three reference embeddings:
/// R_g = E_g, R_s = E_s - E_g, R_w[i] = E_w[i] - E_s.
pub fn compute_residuals<T: Scalar>(
    e_g: &Tensor<T>,
    e_s: &Tensor<T>,
    e_w_seq: &[Tensor<T>],
) -> Result<Residuals<T>> {
    let d = e_g.shape()[1];
    if e_s.shape()[1] != d || e_w_seq.iter().any(|e| e.shape()[1] != d) {
        return Err(Error::contract("residuals: embedding width mismatch"));
    }
    if e_w_seq.is_empty() {
        return Err(Error::contract("residuals: empty subword embedding list"));
    }
    let r_g = e_g.clone();
    let r_s = e_s.sub(e_g);
    let r_w = e_w_seq.iter().map(|e| e.sub(e_s)).collect();
    Ok((r_g, r_s, r_w))
}

/// One level's extracted pieces, kept for tests and distillation targets.
pub struct MultiScaleStyles<T: Scalar> {
    pub e_global: Tensor<T>,
    pub e_sentence: Tensor<T>,
    pub e_subword: Vec<Tensor<T>>,
    pub s_global: Tensor<T>,
    pub s_sentence: Tensor<T>,
    pub s_subword: Vec<Tensor<T>>,
    /// Per-subword multi-scale embedding: S_g + S_s + S_w[i].
    pub combined: Vec<Tensor<T>>,
    /// Per-head token-attention weights per level, for introspection.
    pub attention: StyleAttentionWeights<T>,
}

pub struct StyleAttentionWeights<T: Scalar> {
    pub global: Vec<Array1<T>>,
    pub sentence: Vec<Array1<T>>,
    /// One entry per subword.
    pub subword: Vec<Vec<Array1<T>>>,
}

/// The full three-level extractor.
pub struct MultiScaleExtractor {
    pub config: ExtractorConfig,
    pub n_mels: usize,
    pub global_enc: ReferenceEncoder,
    pub sentence_enc: ReferenceEncoder,
    pub subword_enc: ReferenceEncoder,
    pub global_bank: TokenAttention,
    pub sentence_bank: TokenAttention,
    pub subword_bank: TokenAttention,
    mel_config: MelConfig,
}

impl MultiScaleExtractor {
    pub fn new(config: &ExtractorConfig, mel_config: &MelConfig) -> Self {
        let n_mels = mel_config.n_mels;
        let enc = |level: &str| {
            ReferenceEncoder::new(&format!("extractor.{level}.refenc"), config, n_mels)
        };
        let bank = |level: &str| {
            TokenAttention::new(
                format!("extractor.{level}.bank"),
                config.d_style,
                config.n_tokens,
                config.n_heads,
            )
        };
        MultiScaleExtractor {
            config: config.clone(),
            n_mels,
            global_enc: enc("global"),
            sentence_enc: enc("sentence"),
            subword_enc: enc("subword"),
            global_bank: bank("global"),
            sentence_bank: bank("sentence"),
            subword_bank: bank("subword"),
            mel_config: mel_config.clone(),
        }
    }

    /// Parameter-name prefix of one level, the freeze unit of stage-1
    /// training.
    pub fn level_prefix(level: StyleLevel) -> String {
        format!("extractor.{}.", level.name())
    }

    /// Initializes all three levels; parameter sets are disjoint, each
    /// level drawing from its own named stream.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        for (level, enc, bank) in [
            (StyleLevel::Global, &self.global_enc, &self.global_bank),
            (
                StyleLevel::Sentence,
                &self.sentence_enc,
                &self.sentence_bank,
            ),
            (StyleLevel::Subword, &self.subword_enc, &self.subword_bank),
        ] {
            let mut rng = component_rng(seed, &format!("extractor.{}", level.name()));
            enc.init(store, &mut rng);
            bank.init(store, &mut rng);
        }
    }

    fn encoder(&self, level: StyleLevel) -> &ReferenceEncoder {
        match level {
            StyleLevel::Global => &self.global_enc,
            StyleLevel::Sentence => &self.sentence_enc,
            StyleLevel::Subword => &self.subword_enc,
        }
    }

    fn bank(&self, level: StyleLevel) -> &TokenAttention {
        match level {
            StyleLevel::Global => &self.global_bank,
            StyleLevel::Sentence => &self.sentence_bank,
            StyleLevel::Subword => &self.subword_bank,
        }
    }

    /// Reference embedding of a mel segment at one level.
    pub fn encode_reference<T: Scalar>(
        &self,
        g: &ParamGraph<T>,
        level: StyleLevel,
        segment: &Array2<T>,
    ) -> Result<Tensor<T>> {
        self.encoder(level).encode(g, segment)
    }

    /// Style-token attention of a residual embedding at one level.
    pub fn style_token_attention<T: Scalar>(
        &self,
        g: &ParamGraph<T>,
        level: StyleLevel,
        residual: &Tensor<T>,
    ) -> (Tensor<T>, Vec<Array1<T>>) {
        self.bank(level).forward(g, residual)
    }

    /// Concatenation of the window's mels along time, truncated to
    /// `max_context_frames` (the tail is dropped).
    pub fn concat_window_mel<T: Scalar>(&self, window: &ContextWindow<'_, T>) -> Array2<T> {
        let total: usize = window.items.iter().map(|u| u.n_frames()).sum();
        let keep = total.min(self.config.max_context_frames);
        let mut out = Array2::<T>::zeros((keep, self.n_mels));
        let mut r = 0usize;
        'outer: for u in &window.items {
            for row in u.mel.frames.rows() {
                if r >= keep {
                    break 'outer;
                }
                out.row_mut(r).assign(&row);
                r += 1;
            }
        }
        out
    }

    /// A subword's mel segment; empty segments are replaced by one
    /// log-floor frame so encoders never see zero-length input.
    pub fn subword_segment<T: Scalar>(&self, mel: &Array2<T>, range: (usize, usize)) -> Array2<T> {
        let (start, end) = range;
        if end > start {
            mel.slice(ndarray::s![start..end, ..]).to_owned()
        } else {
            Array2::from_elem((1, self.n_mels), T::of(self.mel_config.log_floor))
        }
    }

    /// Full extraction for one window: per-level reference embeddings,
    /// residuals, token attention, and the per-subword sums.
    pub fn extract_multiscale<T: Scalar>(
        &self,
        g: &ParamGraph<T>,
        window: &ContextWindow<'_, T>,
        boundaries: &[(usize, usize)],
    ) -> Result<MultiScaleStyles<T>> {
        let current = window.current();
        if boundaries
            .iter()
            .any(|&(s, e)| e > current.n_frames() || s > e)
        {
            return Err(Error::contract(
                "subword boundaries inconsistent with current mel",
            ));
        }

        let concat = self.concat_window_mel(window);
        let e_global = self.global_enc.encode(g, &concat)?;
        let e_sentence = self.sentence_enc.encode(g, &current.mel.frames)?;
        let mut e_subword = Vec::with_capacity(boundaries.len());
        for &range in boundaries {
            let seg = self.subword_segment(&current.mel.frames, range);
            e_subword.push(self.subword_enc.encode(g, &seg)?);
        }

        let (r_g, r_s, r_w) = compute_residuals(&e_global, &e_sentence, &e_subword)?;

        let (s_global, w_g) = self.global_bank.forward(g, &r_g);
        let (s_sentence, w_s) = self.sentence_bank.forward(g, &r_s);
        let mut s_subword = Vec::with_capacity(r_w.len());
        let mut w_w = Vec::with_capacity(r_w.len());
        for r in &r_w {
            let (s, w) = self.subword_bank.forward(g, r);
            s_subword.push(s);
            w_w.push(w);
        }

        let combined = s_subword
            .iter()
            .map(|sw| s_global.add(&s_sentence).add(sw))
            .collect();

        Ok(MultiScaleStyles {
            e_global,
            e_sentence,
            e_subword,
            s_global,
            s_sentence,
            s_subword,
            combined,
            attention: StyleAttentionWeights {
                global: w_g,
                sentence: w_s,
                subword: w_w,
            },
        })
    }
}
