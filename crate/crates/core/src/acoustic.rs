//! FastSpeech2-lite acoustic backbone.
//!
//! Phoneme embedding + sinusoidal positions into a stack of feed-forward
//! transformer blocks; multi-scale style added to the encoder output at
//! phoneme level (replicated per subword); a variance adaptor predicting
//! log-duration, pitch and energy with quantized pitch/energy embeddings
//! fed back into the hiddens; length regulation; and a decoder stack with
//! a final linear mel projection.
//!
//! Teacher-forced runs use target durations/pitch/energy for embeddings
//! and length regulation; inference uses the model's own predictions with
//! durations rounded to non-negative integers.

use ndarray::{Array2, ArrayD};

use crate::error::{Error, Result};
use crate::nn::{positional_encoding, xavier, FftBlock, Linear, ParamGraph, ParamStore};
use crate::num::Scalar;
use crate::rng::component_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AcousticConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub ffn_kernel: usize,
    pub var_filter: usize,
    pub var_kernel: usize,
    /// Quantization bins for pitch/energy embeddings.
    pub n_bins: usize,
    pub pitch_min: f64,
    pub pitch_max: f64,
    pub energy_min: f64,
    pub energy_max: f64,
    pub d_style: usize,
    pub n_mels: usize,
}

impl AcousticConfig {
    pub fn default_preset() -> Self {
        AcousticConfig {
            d_model: 256,
            n_heads: 2,
            encoder_layers: 4,
            decoder_layers: 4,
            ffn_hidden: 1024,
            ffn_kernel: 9,
            var_filter: 256,
            var_kernel: 3,
            n_bins: 256,
            pitch_min: 0.0,
            pitch_max: 600.0,
            energy_min: 0.0,
            energy_max: 300.0,
            d_style: 128,
            n_mels: 80,
        }
    }

    pub fn tiny_preset() -> Self {
        AcousticConfig {
            d_model: 32,
            n_heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_hidden: 64,
            ffn_kernel: 9,
            var_filter: 16,
            var_kernel: 3,
            n_bins: 256,
            pitch_min: 0.0,
            pitch_max: 600.0,
            energy_min: 0.0,
            energy_max: 300.0,
            d_style: 16,
            n_mels: 80,
        }
    }
}

/// Phoneme ids plus the subword each phoneme belongs to.
#[derive(Debug, Clone)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
    pub subword_of: Vec<usize>,
}

impl PhonemeSequence {
    pub fn validate(&self, vocab: usize, n_subwords: usize) -> Result<()> {
        if self.ids.is_empty() || self.ids.len() != self.subword_of.len() {
            return Err(Error::contract("phoneme sequence arity mismatch"));
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::contract(format!(
                "phoneme id {bad} outside inventory of {vocab}"
            )));
        }
        let mut prev = 0usize;
        for &s in &self.subword_of {
            if s < prev || s >= n_subwords {
                return Err(Error::contract(
                    "subword_of must be non-decreasing and within range",
                ));
            }
            prev = s;
        }
        if prev + 1 != n_subwords || self.subword_of[0] != 0 {
            return Err(Error::contract("subword_of must cover every subword"));
        }
        Ok(())
    }
}

/// Ground-truth per-phoneme variance values for teacher forcing.
#[derive(Debug, Clone)]
pub struct VarianceTargets<T: Scalar> {
    pub durations: Vec<usize>,
    pub pitch: Vec<T>,
    pub energy: Vec<T>,
}

/// Synthesis result: predicted mel plus the per-phoneme variance
/// predictions (duration in log(frames+1) domain) and the durations the
/// length regulator actually used.
pub struct AcousticOutput<T: Scalar> {
    pub mel: Tensor<T>,
    pub dur_pred: Tensor<T>,
    pub pitch_pred: Tensor<T>,
    pub energy_pred: Tensor<T>,
    pub used_durations: Vec<usize>,
}

/// Two conv layers + layer norms + linear head, shared shape for the
/// duration, pitch and energy predictors.
struct VariancePredictor {
    name: String,
    d_model: usize,
    filter: usize,
    kernel: usize,
}

impl VariancePredictor {
    fn new(name: &str, cfg: &AcousticConfig) -> Self {
        VariancePredictor {
            name: name.to_string(),
            d_model: cfg.d_model,
            filter: cfg.var_filter,
            kernel: cfg.var_kernel,
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut rand_chacha::ChaCha8Rng) {
        store.insert(
            format!("{}.conv1.weight", self.name),
            xavier(
                rng,
                self.d_model * self.kernel,
                self.filter,
                &[self.d_model * self.kernel, self.filter],
            ),
        );
        store.insert(
            format!("{}.conv1.bias", self.name),
            crate::nn::zeros::<T>(&[self.filter]),
        );
        store.insert(
            format!("{}.ln1.gamma", self.name),
            crate::nn::ones::<T>(&[self.filter]),
        );
        store.insert(
            format!("{}.ln1.beta", self.name),
            crate::nn::zeros::<T>(&[self.filter]),
        );
        store.insert(
            format!("{}.conv2.weight", self.name),
            xavier(
                rng,
                self.filter * self.kernel,
                self.filter,
                &[self.filter * self.kernel, self.filter],
            ),
        );
        store.insert(
            format!("{}.conv2.bias", self.name),
            crate::nn::zeros::<T>(&[self.filter]),
        );
        store.insert(
            format!("{}.ln2.gamma", self.name),
            crate::nn::ones::<T>(&[self.filter]),
        );
        store.insert(
            format!("{}.ln2.beta", self.name),
            crate::nn::zeros::<T>(&[self.filter]),
        );
        store.insert(
            format!("{}.out.weight", self.name),
            xavier(rng, self.filter, 1, &[self.filter, 1]),
        );
        store.insert(
            format!("{}.out.bias", self.name),
            crate::nn::zeros::<T>(&[1]),
        );
    }

    fn forward<T: Scalar>(&self, g: &ParamGraph<T>, x: &Tensor<T>) -> Tensor<T> {
        let eps = T::of(1e-6);
        let h = x
            .conv1d(
                &g.param(&format!("{}.conv1.weight", self.name)),
                &g.param(&format!("{}.conv1.bias", self.name)),
                self.kernel,
            )
            .relu()
            .layer_norm(
                &g.param(&format!("{}.ln1.gamma", self.name)),
                &g.param(&format!("{}.ln1.beta", self.name)),
                eps,
            )
            .conv1d(
                &g.param(&format!("{}.conv2.weight", self.name)),
                &g.param(&format!("{}.conv2.bias", self.name)),
                self.kernel,
            )
            .relu()
            .layer_norm(
                &g.param(&format!("{}.ln2.gamma", self.name)),
                &g.param(&format!("{}.ln2.beta", self.name)),
                eps,
            );
        h.matmul(&g.param(&format!("{}.out.weight", self.name)))
            .add_bias(&g.param(&format!("{}.out.bias", self.name)))
    }
}

pub struct AcousticModel {
    pub config: AcousticConfig,
    pub vocab: usize,
    encoder: Vec<FftBlock>,
    decoder: Vec<FftBlock>,
    duration: VariancePredictor,
    pitch: VariancePredictor,
    energy: VariancePredictor,
    mel_out: Linear,
}

impl AcousticModel {
    pub fn new(config: &AcousticConfig, vocab: usize) -> Self {
        let block = |name: String| {
            FftBlock::new(
                &name,
                config.d_model,
                config.n_heads,
                config.ffn_hidden,
                config.ffn_kernel,
            )
        };
        AcousticModel {
            config: config.clone(),
            vocab,
            encoder: (0..config.encoder_layers)
                .map(|i| block(format!("acoustic.encoder.layer{i}")))
                .collect(),
            decoder: (0..config.decoder_layers)
                .map(|i| block(format!("acoustic.decoder.layer{i}")))
                .collect(),
            duration: VariancePredictor::new("acoustic.var.duration", config),
            pitch: VariancePredictor::new("acoustic.var.pitch", config),
            energy: VariancePredictor::new("acoustic.var.energy", config),
            mel_out: Linear::new("acoustic.mel_out", config.d_model, config.n_mels, true),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        let mut rng = component_rng(seed, "acoustic");
        store.insert(
            "acoustic.embed.weight",
            xavier(
                &mut rng,
                self.vocab,
                self.config.d_model,
                &[self.vocab, self.config.d_model],
            ),
        );
        for b in &self.encoder {
            b.init(store, &mut rng);
        }
        if self.config.d_style != self.config.d_model {
            store.insert(
                "acoustic.style_proj.weight",
                xavier(
                    &mut rng,
                    self.config.d_style,
                    self.config.d_model,
                    &[self.config.d_style, self.config.d_model],
                ),
            );
        }
        self.duration.init(store, &mut rng);
        self.pitch.init(store, &mut rng);
        self.energy.init(store, &mut rng);
        store.insert(
            "acoustic.var.pitch_embed",
            xavier(
                &mut rng,
                self.config.n_bins,
                self.config.d_model,
                &[self.config.n_bins, self.config.d_model],
            ),
        );
        store.insert(
            "acoustic.var.energy_embed",
            xavier(
                &mut rng,
                self.config.n_bins,
                self.config.d_model,
                &[self.config.n_bins, self.config.d_model],
            ),
        );
        for b in &self.decoder {
            b.init(store, &mut rng);
        }
        self.mel_out.init(store, &mut rng);
    }

    /// One hidden vector per phoneme: embedding + positional encoding
    /// through the encoder stack.
    pub fn encode_phonemes<T: Scalar>(
        &self,
        g: &ParamGraph<T>,
        phonemes: &PhonemeSequence,
        n_subwords: usize,
    ) -> Result<Tensor<T>> {
        phonemes.validate(self.vocab, n_subwords)?;
        let table = g.param("acoustic.embed.weight");
        let mut x = table.gather_rows(&phonemes.ids);
        let pe = positional_encoding::<T>(phonemes.ids.len(), self.config.d_model);
        x = x.add(&Tensor::constant(pe.into_dyn()));
        for b in &self.encoder {
            x = b.forward(g, &x);
        }
        Ok(x)
    }

    /// Adds the per-subword multi-scale style to each phoneme's hidden:
    /// out[p] = hidden[p] + project(style[subword_of[p]]). The projection
    /// is a single bias-free linear layer when widths differ.
    pub fn inject_style<T: Scalar>(
        &self,
        g: &ParamGraph<T>,
        hidden: &Tensor<T>,
        styles: &[Tensor<T>],
        subword_of: &[usize],
    ) -> Result<Tensor<T>> {
        if hidden.shape()[0] != subword_of.len() {
            return Err(Error::contract(format!(
                "inject_style: {} hiddens vs {} subword assignments",
                hidden.shape()[0],
                subword_of.len()
            )));
        }
        let n_subwords = styles.len();
        if subword_of.iter().any(|&s| s >= n_subwords) {
            return Err(Error::contract(
                "inject_style: subword index outside style sequence",
            ));
        }
        let per_phoneme: Vec<Tensor<T>> = subword_of.iter().map(|&s| styles[s].clone()).collect();
        let style_rows = Tensor::concat_rows(&per_phoneme);
        let projected = if self.config.d_style != self.config.d_model {
            style_rows.matmul(&g.param("acoustic.style_proj.weight"))
        } else {
            style_rows
        };
        Ok(hidden.add(&projected))
    }

    fn quantize(&self, v: f64, lo: f64, hi: f64) -> usize {
        let n = self.config.n_bins;
        if !v.is_finite() {
            return 0;
        }
        let x = ((v - lo) / (hi - lo) * n as f64).floor();
        (x.max(0.0) as usize).min(n - 1)
    }

    /// Variance adaptor: predicts per-phoneme log-duration, pitch, energy;
    /// embeds (target or predicted) pitch/energy back into the hiddens and
    /// length-regulates to frame rate.
    pub fn variance_adapt<T: Scalar>(
        &self,
        g: &ParamGraph<T>,
        hidden: &Tensor<T>,
        targets: Option<&VarianceTargets<T>>,
    ) -> Result<(Tensor<T>, AcousticVariance<T>)> {
        let n = hidden.shape()[0];
        if let Some(t) = targets {
            if t.durations.len() != n || t.pitch.len() != n || t.energy.len() != n {
                return Err(Error::contract("variance targets arity mismatch"));
            }
        }

        let dur_pred = self.duration.forward(g, hidden);
        let pitch_pred = self.pitch.forward(g, hidden);

        let pitch_values: Vec<f64> = match targets {
            Some(t) => t.pitch.iter().map(|v| v.as_f64()).collect(),
            None => pitch_pred
                .value2()
                .column(0)
                .iter()
                .map(|v| v.as_f64())
                .collect(),
        };
        let pitch_ids: Vec<usize> = pitch_values
            .iter()
            .map(|&v| self.quantize(v, self.config.pitch_min, self.config.pitch_max))
            .collect();
        let pitch_table = g.param("acoustic.var.pitch_embed");
        let h2 = hidden.add(&pitch_table.gather_rows(&pitch_ids));

        let energy_pred = self.energy.forward(g, &h2);
        let energy_values: Vec<f64> = match targets {
            Some(t) => t.energy.iter().map(|v| v.as_f64()).collect(),
            None => energy_pred
                .value2()
                .column(0)
                .iter()
                .map(|v| v.as_f64())
                .collect(),
        };
        let energy_ids: Vec<usize> = energy_values
            .iter()
            .map(|&v| self.quantize(v, self.config.energy_min, self.config.energy_max))
            .collect();
        let energy_table = g.param("acoustic.var.energy_embed");
        let h3 = h2.add(&energy_table.gather_rows(&energy_ids));

        let used_durations: Vec<usize> = match targets {
            Some(t) => t.durations.clone(),
            None => {
                let mut durs: Vec<usize> = dur_pred
                    .value2()
                    .column(0)
                    .iter()
                    .map(|v| {
                        let frames = v.as_f64().exp() - 1.0;
                        frames.round().max(0.0) as usize
                    })
                    .collect();
                // Minimum one frame per utterance: give it to the phoneme
                // with the largest predicted duration (first on ties).
                if durs.iter().sum::<usize>() == 0 {
                    let best = dur_pred
                        .value2()
                        .column(0)
                        .iter()
                        .enumerate()
                        .fold((0usize, f64::NEG_INFINITY), |acc, (i, v)| {
                            if v.as_f64() > acc.1 {
                                (i, v.as_f64())
                            } else {
                                acc
                            }
                        })
                        .0;
                    durs[best] = 1;
                }
                durs
            }
        };

        let expanded = h3.repeat_rows(&used_durations);
        Ok((
            expanded,
            AcousticVariance {
                dur_pred,
                pitch_pred,
                energy_pred,
                used_durations,
            },
        ))
    }

    /// Decodes expanded hiddens into mel frames.
    pub fn decode_mel<T: Scalar>(
        &self,
        g: &ParamGraph<T>,
        expanded: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let t = expanded.shape()[0];
        if t == 0 {
            return Err(Error::contract("decode_mel: empty expanded sequence"));
        }
        let pe = positional_encoding::<T>(t, self.config.d_model);
        let mut x = expanded.add(&Tensor::constant(pe.into_dyn()));
        for b in &self.decoder {
            x = b.forward(g, &x);
        }
        Ok(self.mel_out.forward(g, &x))
    }

    /// Full forward pass with style injection.
    pub fn forward<T: Scalar>(
        &self,
        g: &ParamGraph<T>,
        phonemes: &PhonemeSequence,
        styles: &[Tensor<T>],
        targets: Option<&VarianceTargets<T>>,
    ) -> Result<AcousticOutput<T>> {
        let hidden = self.encode_phonemes(g, phonemes, styles.len())?;
        let styled = self.inject_style(g, &hidden, styles, &phonemes.subword_of)?;
        let (expanded, var) = self.variance_adapt(g, &styled, targets)?;
        let mel = self.decode_mel(g, &expanded)?;
        Ok(AcousticOutput {
            mel,
            dur_pred: var.dur_pred,
            pitch_pred: var.pitch_pred,
            energy_pred: var.energy_pred,
            used_durations: var.used_durations,
        })
    }
}

/// Variance predictions plus the durations used for expansion.
pub struct AcousticVariance<T: Scalar> {
    pub dur_pred: Tensor<T>,
    pub pitch_pred: Tensor<T>,
    pub energy_pred: Tensor<T>,
    pub used_durations: Vec<usize>,
}

/// Acoustic training losses: L1 on mel, MSE on log-duration / pitch /
/// energy, each non-negative and zero at equality.
pub struct AcousticLosses<T: Scalar> {
    pub mel_l1: Tensor<T>,
    pub duration_mse: Tensor<T>,
    pub pitch_mse: Tensor<T>,
    pub energy_mse: Tensor<T>,
}

impl<T: Scalar> AcousticLosses<T> {
    pub fn total(&self) -> Tensor<T> {
        self.mel_l1
            .add(&self.duration_mse)
            .add(&self.pitch_mse)
            .add(&self.energy_mse)
    }
}

/// Computes the acoustic losses for a teacher-forced output.
pub fn acoustic_losses<T: Scalar>(
    output: &AcousticOutput<T>,
    mel_target: &Array2<T>,
    targets: &VarianceTargets<T>,
) -> Result<AcousticLosses<T>> {
    if output.mel.shape()[0] != mel_target.nrows() {
        return Err(Error::contract(format!(
            "mel prediction has {} frames, target {}",
            output.mel.shape()[0],
            mel_target.nrows()
        )));
    }
    let n = targets.durations.len();
    let log_dur: ArrayD<T> = Array2::from_shape_fn((n, 1), |(i, _)| {
        T::of((targets.durations[i] as f64 + 1.0).ln())
    })
    .into_dyn();
    let pitch: ArrayD<T> = Array2::from_shape_fn((n, 1), |(i, _)| targets.pitch[i]).into_dyn();
    let energy: ArrayD<T> = Array2::from_shape_fn((n, 1), |(i, _)| targets.energy[i]).into_dyn();

    Ok(AcousticLosses {
        mel_l1: output.mel.l1_loss(&mel_target.clone().into_dyn()),
        duration_mse: output.dur_pred.mse_loss(&log_dur),
        pitch_mse: output.pitch_pred.mse_loss(&pitch),
        energy_mse: output.energy_pred.mse_loss(&energy),
    })
}

/// Waveform generation behind an interface; the shipped implementation is
/// a placeholder (quality out of scope).
pub trait Vocoder<T: Scalar> {
    fn synthesize(&self, mel: &Array2<T>, config: &crate::corpus::MelConfig) -> Vec<T>;
}

/// Griffin-Lim-style placeholder: pseudo-inverts the mel filterbank,
/// iterates magnitude-consistent phase a few rounds, and overlap-adds.
pub struct PlaceholderVocoder {
    pub iterations: usize,
}

impl Default for PlaceholderVocoder {
    fn default() -> Self {
        PlaceholderVocoder { iterations: 4 }
    }
}

impl<T: Scalar> Vocoder<T> for PlaceholderVocoder {
    fn synthesize(&self, mel: &Array2<T>, config: &crate::corpus::MelConfig) -> Vec<T> {
        use rustfft::{num_complex::Complex, FftPlanner};
        let frame = config.frame_size;
        let hop = config.hop_size;
        let n_bins = frame / 2 + 1;
        let t_frames = mel.nrows();
        let fb = crate::corpus::mel::mel_filterbank(config);

        // Pseudo-inverse by transpose with per-bin normalization.
        let mut col_norm = vec![0.0f64; n_bins];
        for m in 0..config.n_mels {
            for k in 0..n_bins {
                col_norm[k] += fb[(m, k)];
            }
        }
        let mut mag = vec![vec![0.0f64; n_bins]; t_frames];
        for (t, row) in mel.rows().into_iter().enumerate() {
            for k in 0..n_bins {
                let mut acc = 0.0;
                for m in 0..config.n_mels {
                    acc += fb[(m, k)] * row[m].as_f64().exp();
                }
                mag[t][k] = acc / col_norm[k].max(1e-8);
            }
        }

        let window: Vec<f64> = (0..frame)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / frame as f64).cos())
            .collect();
        let n_samples = (t_frames.saturating_sub(1)) * hop + frame;
        let mut planner = FftPlanner::<f64>::new();
        let ifft = planner.plan_fft_inverse(frame);
        let fft = planner.plan_fft_forward(frame);

        // Zero phase start; a few Griffin-Lim rounds.
        let mut phases = vec![vec![0.0f64; n_bins]; t_frames];
        let mut wav = vec![0.0f64; n_samples];
        for it in 0..=self.iterations {
            // Synthesize from current magnitude+phase.
            wav.iter_mut().for_each(|v| *v = 0.0);
            let mut norm = vec![0.0f64; n_samples];
            let mut buf = vec![Complex::new(0.0, 0.0); frame];
            for t in 0..t_frames {
                for k in 0..frame {
                    let (m, p) = if k < n_bins {
                        (mag[t][k], phases[t][k])
                    } else {
                        (mag[t][frame - k], -phases[t][frame - k])
                    };
                    buf[k] = Complex::from_polar(m, p);
                }
                ifft.process(&mut buf);
                let start = t * hop;
                for i in 0..frame {
                    let v = buf[i].re / frame as f64 * window[i];
                    wav[start + i] += v;
                    norm[start + i] += window[i] * window[i];
                }
            }
            for i in 0..n_samples {
                if norm[i] > 1e-8 {
                    wav[i] /= norm[i];
                }
            }
            if it == self.iterations {
                break;
            }
            // Re-analyze for updated phases.
            for (t, phase_row) in phases.iter_mut().enumerate() {
                let start = t * hop;
                let mut buf: Vec<Complex<f64>> = (0..frame)
                    .map(|i| {
                        let s = wav.get(start + i).copied().unwrap_or(0.0);
                        Complex::new(s * window[i], 0.0)
                    })
                    .collect();
                fft.process(&mut buf);
                for k in 0..n_bins {
                    phase_row[k] = buf[k].arg();
                }
            }
        }

        let peak = wav.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-8);
        wav.iter().map(|&v| T::of(0.9 * v / peak)).collect()
    }
}
