//! Phoneme durations and subword-to-phoneme alignment.

use crate::error::{Error, Result};
use crate::num::Scalar;

/// Forced-alignment products for one utterance: per-phoneme frame counts
/// and, per subword, the inclusive range of phoneme indices it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMap {
    pub phoneme_durations: Vec<usize>,
    /// Inclusive (first, last) phoneme index per subword; contiguous,
    /// non-overlapping, jointly covering all phonemes.
    pub subword_to_phoneme: Vec<(usize, usize)>,
}

impl AlignmentMap {
    pub fn n_phonemes(&self) -> usize {
        self.phoneme_durations.len()
    }

    pub fn n_subwords(&self) -> usize {
        self.subword_to_phoneme.len()
    }

    pub fn total_frames(&self) -> usize {
        self.phoneme_durations.iter().sum()
    }

    /// Per-phoneme subword index (non-decreasing, onto 0..n_subwords).
    pub fn subword_of_phoneme(&self) -> Vec<usize> {
        let mut out = vec![0usize; self.n_phonemes()];
        for (s, &(lo, hi)) in self.subword_to_phoneme.iter().enumerate() {
            for item in out.iter_mut().take(hi + 1).skip(lo) {
                *item = s;
            }
        }
        out
    }

    pub fn validate(&self, expected_frames: Option<usize>) -> Result<()> {
        let n = self.n_phonemes();
        if n == 0 {
            return Err(Error::contract("alignment has no phonemes"));
        }
        if self.subword_to_phoneme.is_empty() {
            return Err(Error::contract("alignment has no subwords"));
        }
        let mut next = 0usize;
        for &(lo, hi) in &self.subword_to_phoneme {
            if lo != next || hi < lo || hi >= n {
                return Err(Error::contract(format!(
                    "subword spans must contiguously cover phonemes: span ({lo},{hi}) \
                     where {next} was expected next, {n} phonemes total"
                )));
            }
            next = hi + 1;
        }
        if next != n {
            return Err(Error::contract(format!(
                "subword spans cover {next} of {n} phonemes"
            )));
        }
        if let Some(t) = expected_frames {
            let total = self.total_frames();
            if total != t {
                return Err(Error::contract(format!(
                    "durations sum to {total} frames but mel has {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Averages per-frame values over each phoneme's frames. Zero-duration
/// phonemes yield 0.
pub fn average_by_duration<T: Scalar>(frame_values: &[T], durations: &[usize]) -> Result<Vec<T>> {
    let total: usize = durations.iter().sum();
    if total != frame_values.len() {
        return Err(Error::contract(format!(
            "durations sum to {total} but {} frame values given",
            frame_values.len()
        )));
    }
    let mut out = Vec::with_capacity(durations.len());
    let mut pos = 0usize;
    for &d in durations {
        if d == 0 {
            out.push(T::zero());
        } else {
            let sum = frame_values[pos..pos + d]
                .iter()
                .fold(T::zero(), |a, &v| a + v);
            out.push(sum / T::from_usize(d).unwrap());
            pos += d;
        }
    }
    Ok(out)
}

/// Half-open frame range [start, end) per subword; the ranges partition
/// [0, total_frames). A subword whose phonemes all have zero duration gets
/// an empty range (start == end).
pub fn subword_frame_boundaries(alignment: &AlignmentMap) -> Vec<(usize, usize)> {
    let mut prefix = Vec::with_capacity(alignment.n_phonemes() + 1);
    let mut acc = 0usize;
    prefix.push(0);
    for &d in &alignment.phoneme_durations {
        acc += d;
        prefix.push(acc);
    }
    alignment
        .subword_to_phoneme
        .iter()
        .map(|&(lo, hi)| (prefix[lo], prefix[hi + 1]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn average_by_duration_hand_cases() {
        let v = average_by_duration(&[1.0f64, 2.0, 3.0, 4.0], &[1, 3]).unwrap();
        assert_eq!(v, vec![1.0, 3.0]);
        let v = average_by_duration(&[5.0f64, 5.0], &[2]).unwrap();
        assert_eq!(v, vec![5.0]);
        // Zero-duration phonemes yield 0.
        let v = average_by_duration(&[7.0f64], &[1, 0]).unwrap();
        assert_eq!(v, vec![7.0, 0.0]);
    }

    #[test]
    fn average_by_duration_rejects_length_mismatch() {
        assert!(matches!(
            average_by_duration(&[1.0f64, 2.0], &[3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn boundaries_hand_case() {
        let a = AlignmentMap {
            phoneme_durations: vec![2, 3, 1],
            subword_to_phoneme: vec![(0, 1), (2, 2)],
        };
        a.validate(Some(6)).unwrap();
        assert_eq!(subword_frame_boundaries(&a), vec![(0, 5), (5, 6)]);
    }

    #[test]
    fn single_subword_covers_everything() {
        let a = AlignmentMap {
            phoneme_durations: vec![4, 1, 2],
            subword_to_phoneme: vec![(0, 2)],
        };
        assert_eq!(subword_frame_boundaries(&a), vec![(0, 7)]);
    }

    #[test]
    fn zero_duration_subword_gets_empty_range() {
        let a = AlignmentMap {
            phoneme_durations: vec![3, 0, 0, 2],
            subword_to_phoneme: vec![(0, 0), (1, 2), (3, 3)],
        };
        let b = subword_frame_boundaries(&a);
        assert_eq!(b, vec![(0, 3), (3, 3), (3, 5)]);
        assert_eq!(b[1].0, b[1].1);
    }

    #[test]
    fn validate_rejects_gaps_overlaps_and_bad_totals() {
        let gap = AlignmentMap {
            phoneme_durations: vec![1, 1, 1],
            subword_to_phoneme: vec![(0, 0), (2, 2)],
        };
        assert!(gap.validate(None).is_err());
        let overlap = AlignmentMap {
            phoneme_durations: vec![1, 1, 1],
            subword_to_phoneme: vec![(0, 1), (1, 2)],
        };
        assert!(overlap.validate(None).is_err());
        let short = AlignmentMap {
            phoneme_durations: vec![1, 1],
            subword_to_phoneme: vec![(0, 1)],
        };
        assert!(short.validate(Some(5)).is_err());
    }

    #[test]
    fn subword_of_phoneme_is_non_decreasing_and_onto() {
        let a = AlignmentMap {
            phoneme_durations: vec![1; 5],
            subword_to_phoneme: vec![(0, 1), (2, 2), (3, 4)],
        };
        assert_eq!(a.subword_of_phoneme(), vec![0, 0, 1, 2, 2]);
    }

    /// Random valid alignment: subword spans cut a random phoneme sequence.
    fn arb_alignment() -> impl Strategy<Value = AlignmentMap> {
        (1usize..8, proptest::collection::vec(0usize..5, 1..12)).prop_map(|(n_cuts, durations)| {
            let n = durations.len();
            let mut cuts: Vec<usize> = (1..n).collect();
            // Deterministic-ish subset: keep every k-th candidate cut.
            cuts.retain(|c| c % n_cuts.max(1) == 0);
            let mut spans = Vec::new();
            let mut lo = 0usize;
            for c in cuts {
                if c > lo {
                    spans.push((lo, c - 1));
                    lo = c;
                }
            }
            spans.push((lo, n - 1));
            AlignmentMap {
                phoneme_durations: durations,
                subword_to_phoneme: spans,
            }
        })
    }

    proptest! {
        #[test]
        fn boundaries_partition_the_frame_axis(a in arb_alignment()) {
            a.validate(None).unwrap();
            let b = subword_frame_boundaries(&a);
            let mut pos = 0usize;
            for &(s, e) in &b {
                prop_assert_eq!(s, pos);
                prop_assert!(e >= s);
                pos = e;
            }
            prop_assert_eq!(pos, a.total_frames());
        }

        #[test]
        fn averaging_constant_then_expanding_is_identity(
            a in arb_alignment(),
            c in -10.0f64..10.0,
        ) {
            let total = a.total_frames();
            prop_assume!(total > 0);
            let frames = vec![c; total];
            let avg = average_by_duration(&frames, &a.phoneme_durations).unwrap();
            let mut expanded = Vec::new();
            for (v, &d) in avg.iter().zip(&a.phoneme_durations) {
                expanded.extend(std::iter::repeat_n(*v, d));
            }
            for v in expanded {
                prop_assert!((v - c).abs() < 1e-12);
            }
        }
    }
}
