//! Log-mel spectrogram extraction.
//!
//! Centered STFT framing with reflect padding: frame t covers the samples
//! around t * hop_size, and a waveform of N samples yields
//! T = floor(N / hop_size) + 1 frames. Triangular mel filters on the HTK
//! mel scale are applied to FFT magnitudes, then the log is floored at
//! `log_floor`.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::num::Scalar;

/// Mel extraction parameters. Defaults are the production feature config:
/// 24 kHz, frame 1200, hop 240, 80 mel bands.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub frame_size: usize,
    pub hop_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Floor applied to log-amplitudes; silence maps exactly to this value.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 24_000,
            frame_size: 1_200,
            hop_size: 240,
            n_mels: 80,
            fmin: 0.0,
            fmax: 12_000.0,
            log_floor: (1e-5f64).ln(),
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample_rate must be positive"));
        }
        if self.hop_size == 0 || self.hop_size > self.frame_size {
            return Err(Error::invalid(format!(
                "need 0 < hop_size <= frame_size, got hop {} frame {}",
                self.hop_size, self.frame_size
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::invalid("n_mels must be at least 1"));
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin) {
            return Err(Error::invalid("need 0 <= fmin < fmax"));
        }
        Ok(())
    }

    /// Frame count for a waveform of `n` samples under centered framing.
    pub fn frame_count(&self, n: usize) -> usize {
        n / self.hop_size + 1
    }
}

/// Log-amplitude mel frames plus the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram<T: Scalar> {
    pub frames: Array2<T>,
    pub config: MelConfig,
}

impl<T: Scalar> MelSpectrogram<T> {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }

    /// A single all-floor frame (canonical "silence" segment).
    pub fn floor_frame(config: &MelConfig) -> Self {
        MelSpectrogram {
            frames: Array2::from_elem((1, config.n_mels), T::of(config.log_floor)),
            config: config.clone(),
        }
    }
}

/// HTK mel scale.
fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies of the `n_mels` triangular filters.
pub fn mel_center_frequencies(config: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(config.fmin);
    let hi = hz_to_mel(config.fmax);
    (1..=config.n_mels)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect()
}

/// Triangular filterbank, n_mels x n_bins where n_bins = frame_size/2 + 1.
pub fn mel_filterbank(config: &MelConfig) -> Array2<f64> {
    let n_bins = config.frame_size / 2 + 1;
    let lo = hz_to_mel(config.fmin);
    let hi = hz_to_mel(config.fmax);
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bin_hz = config.sample_rate as f64 / config.frame_size as f64;

    let mut fb = Array2::<f64>::zeros((config.n_mels, n_bins));
    for m in 0..config.n_mels {
        let (f_lo, f_c, f_hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f <= f_lo || f >= f_hi {
                0.0
            } else if f <= f_c {
                (f - f_lo) / (f_c - f_lo)
            } else {
                (f_hi - f) / (f_hi - f_c)
            };
            fb[(m, k)] = w;
        }
    }
    fb
}

/// Reflect (bounce) index for out-of-range positions.
fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Extracts log-mel frames from a waveform.
pub fn compute_mel<T: Scalar>(waveform: &[T], config: &MelConfig) -> Result<MelSpectrogram<T>> {
    config.validate()?;
    if waveform.is_empty() {
        return Err(Error::invalid("empty waveform"));
    }
    if waveform.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("waveform contains non-finite samples"));
    }

    let n = waveform.len();
    let n_frames = config.frame_count(n);
    let frame = config.frame_size;
    let half = frame / 2;
    let n_bins = frame / 2 + 1;

    // Periodic Hann window.
    let window: Vec<f64> = (0..frame)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / frame as f64).cos())
        .collect();

    let fb = mel_filterbank(config);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(frame);

    let mut frames = Array2::<T>::zeros((n_frames, config.n_mels));
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); frame];
    for t in 0..n_frames {
        let center = (t * config.hop_size) as isize;
        for i in 0..frame {
            let src = center + i as isize - half as isize;
            let s = waveform[reflect_index(src, n)].as_f64();
            buf[i] = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for m in 0..config.n_mels {
            let mut amp = 0.0;
            for k in 0..n_bins {
                let w = fb[(m, k)];
                if w != 0.0 {
                    amp += w * buf[k].norm();
                }
            }
            frames[(t, m)] = T::of(amp.ln().max(config.log_floor));
        }
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
    }

    Ok(MelSpectrogram {
        frames,
        config: config.clone(),
    })
}

/// Per-frame energy: L2 norm of the linear-magnitude mel frame.
pub fn energy_from_mel<T: Scalar>(mel: &MelSpectrogram<T>) -> Vec<T> {
    mel.frames
        .rows()
        .into_iter()
        .map(|row| {
            let sq: f64 = row.iter().map(|v| v.as_f64().exp().powi(2)).sum();
            T::of(sq.sqrt())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> MelConfig {
        MelConfig::default()
    }

    #[test]
    fn frame_count_matches_centered_framing() {
        // 24000 samples at the default config -> floor(24000/240) + 1.
        let cfg = tiny_config();
        let wav = vec![0.1f32; 24_000];
        let mel = compute_mel(&wav, &cfg).unwrap();
        assert_eq!(mel.n_frames(), 101);
        assert_eq!(mel.n_mels(), 80);
    }

    #[test]
    fn silence_maps_to_log_floor() {
        let cfg = tiny_config();
        let wav = vec![0.0f32; 4_800];
        let mel = compute_mel(&wav, &cfg).unwrap();
        let floor = f32::of(cfg.log_floor);
        for v in mel.frames.iter() {
            assert_eq!(*v, floor);
        }
    }

    #[test]
    fn empty_and_non_finite_waveforms_are_rejected() {
        let cfg = tiny_config();
        assert!(matches!(
            compute_mel::<f32>(&[], &cfg),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            compute_mel(&[0.0f32, f32::NAN], &cfg),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_config();
        cfg.hop_size = cfg.frame_size + 1;
        assert!(compute_mel(&[0.0f32; 100], &cfg).is_err());
        let mut cfg = tiny_config();
        cfg.n_mels = 0;
        assert!(compute_mel(&[0.0f32; 100], &cfg).is_err());
    }

    #[test]
    fn compute_mel_is_deterministic() {
        let cfg = tiny_config();
        let wav: Vec<f32> = (0..9_600)
            .map(|i| (2.0 * std::f32::consts::PI * 220.0 * i as f32 / 24_000.0).sin())
            .collect();
        let a = compute_mel(&wav, &cfg).unwrap();
        let b = compute_mel(&wav, &cfg).unwrap();
        assert_eq!(a.frames, b.frames);
    }

    /// Naive DFT magnitudes of one centered frame; the independent route the
    /// sine-peak check below compares against.
    fn dft_frame_mel_argmax(wav: &[f64], cfg: &MelConfig, t: usize) -> usize {
        let frame = cfg.frame_size;
        let half = frame / 2;
        let n = wav.len();
        let window: Vec<f64> = (0..frame)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / frame as f64).cos())
            .collect();
        let mut samples = vec![0.0f64; frame];
        for i in 0..frame {
            let src = (t * cfg.hop_size) as isize + i as isize - half as isize;
            samples[i] = wav[reflect_index(src, n)] * window[i];
        }
        let n_bins = frame / 2 + 1;
        let mut mags = vec![0.0f64; n_bins];
        for (k, mag) in mags.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &s) in samples.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * k as f64 * i as f64 / frame as f64;
                re += s * ang.cos();
                im += s * ang.sin();
            }
            *mag = (re * re + im * im).sqrt();
        }
        let fb = mel_filterbank(cfg);
        let mut best = (0, f64::MIN);
        for m in 0..cfg.n_mels {
            let amp: f64 = (0..n_bins).map(|k| fb[(m, k)] * mags[k]).sum();
            if amp > best.1 {
                best = (m, amp);
            }
        }
        best.0
    }

    #[test]
    fn sine_peaks_in_nearest_mel_band() {
        let cfg = tiny_config();
        let freq = 440.0;
        let wav: Vec<f64> = (0..12_000)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 24_000.0).sin())
            .collect();
        let mel = compute_mel(&wav, &cfg).unwrap();

        // Band whose center frequency is nearest 440 Hz.
        let centers = mel_center_frequencies(&cfg);
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - freq).abs().partial_cmp(&(b.1 - freq).abs()).unwrap())
            .unwrap()
            .0;

        // Mid-waveform frame, away from edge padding.
        let t = mel.n_frames() / 2;
        let row = mel.frames.row(t);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;

        assert_eq!(argmax, nearest, "centers near 440: {:?}", &centers[10..16]);
        assert_eq!(argmax, dft_frame_mel_argmax(&wav, &cfg, t));
    }

    #[test]
    fn energy_of_floor_frames_is_tiny_but_positive() {
        let cfg = tiny_config();
        let mel = MelSpectrogram::<f32>::floor_frame(&cfg);
        let e = energy_from_mel(&mel);
        assert_eq!(e.len(), 1);
        assert!(e[0] > 0.0 && e[0] < 1e-3);
    }
}
