//! F0 estimation for real audio.
//!
//! The toy corpus writes its ground-truth pitch directly, so estimator
//! quality never gates tests; this autocorrelation estimator is the default
//! plug-in behind the interface for recorded material.

use crate::corpus::mel::MelConfig;
use crate::num::Scalar;

/// Per-frame F0 extraction aligned with mel framing (0 = unvoiced).
pub trait PitchEstimator<T: Scalar> {
    fn estimate(&self, waveform: &[T], config: &MelConfig) -> Vec<T>;
}

/// Normalized-autocorrelation peak picking within [fmin, fmax]; frames whose
/// peak falls below `voicing_threshold` (or whose energy is negligible) are
/// marked unvoiced.
#[derive(Debug, Clone)]
pub struct AutocorrelationPitch {
    pub fmin: f64,
    pub fmax: f64,
    pub voicing_threshold: f64,
}

impl Default for AutocorrelationPitch {
    fn default() -> Self {
        AutocorrelationPitch {
            fmin: 60.0,
            fmax: 500.0,
            voicing_threshold: 0.3,
        }
    }
}

impl<T: Scalar> PitchEstimator<T> for AutocorrelationPitch {
    fn estimate(&self, waveform: &[T], config: &MelConfig) -> Vec<T> {
        let n = waveform.len();
        if n == 0 {
            return Vec::new();
        }
        let sr = config.sample_rate as f64;
        let frame = config.frame_size;
        let half = frame / 2;
        let n_frames = config.frame_count(n);

        let lag_min = (sr / self.fmax).floor().max(2.0) as usize;
        let lag_max = ((sr / self.fmin).ceil() as usize).min(frame / 2);

        let mut out = Vec::with_capacity(n_frames);
        let mut buf = vec![0.0f64; frame];
        for t in 0..n_frames {
            let center = (t * config.hop_size) as isize;
            for (i, b) in buf.iter_mut().enumerate() {
                let src = center + i as isize - half as isize;
                *b = if src >= 0 && (src as usize) < n {
                    waveform[src as usize].as_f64()
                } else {
                    0.0
                };
            }
            let mean = buf.iter().sum::<f64>() / frame as f64;
            let e0: f64 = buf.iter().map(|v| (v - mean) * (v - mean)).sum();
            if e0 < 1e-8 || lag_min >= lag_max {
                out.push(T::zero());
                continue;
            }
            let mut best = (0usize, 0.0f64);
            for lag in lag_min..=lag_max {
                let mut acc = 0.0;
                for i in 0..frame - lag {
                    acc += (buf[i] - mean) * (buf[i + lag] - mean);
                }
                let r = acc / e0;
                if r > best.1 {
                    best = (lag, r);
                }
            }
            if best.1 >= self.voicing_threshold && best.0 > 0 {
                out.push(T::of(sr / best.0 as f64));
            } else {
                out.push(T::zero());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_a_pure_tone_within_a_semitone() {
        let cfg = MelConfig::default();
        let f0 = 180.0f64;
        let wav: Vec<f32> = (0..24_000)
            .map(|i| (2.0 * std::f64::consts::PI * f0 * i as f64 / 24_000.0).sin() as f32)
            .collect();
        let est = AutocorrelationPitch::default();
        let pitch = est.estimate(&wav, &cfg);
        assert_eq!(pitch.len(), cfg.frame_count(wav.len()));
        let mid = pitch[pitch.len() / 2] as f64;
        assert!(
            (mid / f0).abs().ln().abs() < 0.06,
            "estimated {mid} Hz for a {f0} Hz tone"
        );
    }

    #[test]
    fn silence_is_unvoiced() {
        let cfg = MelConfig::default();
        let wav = vec![0.0f32; 12_000];
        let est = AutocorrelationPitch::default();
        let pitch = est.estimate(&wav, &cfg);
        assert!(pitch.iter().all(|&p| p == 0.0));
    }
}
