//! Objective evaluation: DTW alignment between predicted and ground-truth
//! mels, then F0 RMSE / energy RMSE along the path and duration MSE.
//!
//! DTW is computed once on the mel pair and reused for both framewise
//! metrics. F0 RMSE only compares path pairs where both frames are voiced;
//! a pair set that ends up empty reports the metric as absent rather
//! than 0.

use ndarray::Array2;
use serde::Serialize;

use crate::corpus::data::Corpus;
use crate::corpus::mel::{energy_from_mel, MelSpectrogram};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::predictor::SemanticEmbedder;
use crate::training::{synthesize_window, Models, StyleSource, SynthesisOptions};

/// Monotone alignment path over (predicted, reference) frame indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DtwPath {
    pub pairs: Vec<(usize, usize)>,
}

impl DtwPath {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks the path invariants for the given sequence dimensions.
    pub fn validate(&self, t_pred: usize, t_ref: usize) -> Result<()> {
        if self.pairs.first() != Some(&(0, 0)) {
            return Err(Error::contract("DTW path must start at (0, 0)"));
        }
        if self.pairs.last() != Some(&(t_pred - 1, t_ref - 1)) {
            return Err(Error::contract("DTW path must end at the final pair"));
        }
        for w in self.pairs.windows(2) {
            let (di, dj) = (
                w[1].0 as isize - w[0].0 as isize,
                w[1].1 as isize - w[0].1 as isize,
            );
            if !matches!((di, dj), (0, 1) | (1, 0) | (1, 1)) {
                return Err(Error::contract(format!(
                    "DTW step ({di},{dj}) outside {{(1,0),(0,1),(1,1)}}"
                )));
            }
        }
        Ok(())
    }
}

fn frame_distance<T: Scalar>(a: &Array2<T>, i: usize, b: &Array2<T>, j: usize) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.row(i).iter().zip(b.row(j).iter()) {
        let d = x.as_f64() - y.as_f64();
        acc += d * d;
    }
    acc.sqrt()
}

/// Minimal-cost monotone alignment under per-frame Euclidean distance.
/// Ties during backtracking prefer the diagonal, then reference-advance.
pub fn dtw_align<T: Scalar>(pred: &Array2<T>, reference: &Array2<T>) -> Result<DtwPath> {
    let (m, n) = (pred.nrows(), reference.nrows());
    if m == 0 || n == 0 {
        return Err(Error::invalid("DTW inputs must be non-empty"));
    }
    if pred.ncols() != reference.ncols() {
        return Err(Error::contract("DTW inputs must share the feature width"));
    }

    let mut cost = vec![vec![f64::INFINITY; n]; m];
    for i in 0..m {
        for j in 0..n {
            let d = frame_distance(pred, i, reference, j);
            let best_prev = if i == 0 && j == 0 {
                0.0
            } else {
                let mut best = f64::INFINITY;
                if i > 0 && j > 0 {
                    best = best.min(cost[i - 1][j - 1]);
                }
                if j > 0 {
                    best = best.min(cost[i][j - 1]);
                }
                if i > 0 {
                    best = best.min(cost[i - 1][j]);
                }
                best
            };
            cost[i][j] = d + best_prev;
        }
    }

    // Backtrack; predecessor preference encodes the forward tie-break
    // (diagonal first, then reference-advance (0,1), then (1,0)).
    let mut pairs = vec![(m - 1, n - 1)];
    let (mut i, mut j) = (m - 1, n - 1);
    while i > 0 || j > 0 {
        let (pi, pj) = if i > 0 && j > 0 {
            let diag = cost[i - 1][j - 1];
            let refa = cost[i][j - 1];
            let pred_a = cost[i - 1][j];
            if diag <= refa && diag <= pred_a {
                (i - 1, j - 1)
            } else if refa <= pred_a {
                (i, j - 1)
            } else {
                (i - 1, j)
            }
        } else if j > 0 {
            (i, j - 1)
        } else {
            (i - 1, j)
        };
        pairs.push((pi, pj));
        i = pi;
        j = pj;
    }
    pairs.reverse();
    Ok(DtwPath { pairs })
}

/// Accumulated distance of an alignment path.
pub fn path_cost<T: Scalar>(pred: &Array2<T>, reference: &Array2<T>, path: &DtwPath) -> f64 {
    path.pairs
        .iter()
        .map(|&(i, j)| frame_distance(pred, i, reference, j))
        .sum()
}

/// RMSE of two per-frame tracks along an alignment path.
pub fn warped_rmse<T: Scalar>(pred: &[T], reference: &[T], path: &DtwPath) -> f64 {
    let mut acc = 0.0;
    for &(i, j) in &path.pairs {
        let d = pred[i].as_f64() - reference[j].as_f64();
        acc += d * d;
    }
    (acc / path.pairs.len() as f64).sqrt()
}

/// F0 RMSE along the path over pairs where both frames are voiced
/// (nonzero). `None` when every pair was skipped: the metric is undefined,
/// not 0.
pub fn warped_rmse_voiced<T: Scalar>(pred: &[T], reference: &[T], path: &DtwPath) -> Option<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for &(i, j) in &path.pairs {
        let (a, b) = (pred[i].as_f64(), reference[j].as_f64());
        if a > 0.0 && b > 0.0 {
            let d = a - b;
            acc += d * d;
            count += 1;
        }
    }
    if count == 0 {
        None
    } else {
        Some((acc / count as f64).sqrt())
    }
}

/// Mean squared error between per-phoneme durations, in frames squared.
pub fn duration_mse(pred_durations: &[usize], ref_durations: &[usize]) -> Result<f64> {
    if pred_durations.len() != ref_durations.len() {
        return Err(Error::contract(format!(
            "duration_mse: {} predicted vs {} reference phonemes",
            pred_durations.len(),
            ref_durations.len()
        )));
    }
    if pred_durations.is_empty() {
        return Err(Error::contract("duration_mse: empty inputs"));
    }
    let acc: f64 = pred_durations
        .iter()
        .zip(ref_durations)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(acc / pred_durations.len() as f64)
}

/// Per-utterance metric row.
#[derive(Debug, Clone, Serialize)]
pub struct UtteranceEval {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f0_rmse: Option<f64>,
    pub energy_rmse: f64,
    pub duration_mse: f64,
}

/// Aggregated objective metrics plus the per-utterance breakdown.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Absent when no utterance had a voiced aligned pair.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f0_rmse: Option<f64>,
    pub energy_rmse: f64,
    pub duration_mse: f64,
    pub utterances: Vec<UtteranceEval>,
    /// (utterance id, error) for utterances excluded from the means.
    pub failures: Vec<(String, String)>,
}

impl EvalReport {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    /// Aligned human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>12} {:>12} {:>12}\n",
            "utterance", "f0_rmse", "energy_rmse", "duration_mse"
        ));
        for u in &self.utterances {
            out.push_str(&format!(
                "{:<12} {:>12} {:>12.6} {:>12.6}\n",
                u.id,
                u.f0_rmse
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_else(|| "absent".into()),
                u.energy_rmse,
                u.duration_mse
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>12} {:>12.6} {:>12.6}\n",
            "mean",
            self.f0_rmse
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "absent".into()),
            self.energy_rmse,
            self.duration_mse
        ));
        for (id, err) in &self.failures {
            out.push_str(&format!("failed      {id}: {err}\n"));
        }
        out
    }

    fn aggregate(utterances: Vec<UtteranceEval>, failures: Vec<(String, String)>) -> EvalReport {
        let f0: Vec<f64> = utterances.iter().filter_map(|u| u.f0_rmse).collect();
        let f0_rmse = if f0.is_empty() {
            None
        } else {
            Some(f0.iter().sum::<f64>() / f0.len() as f64)
        };
        let n = utterances.len().max(1) as f64;
        let energy_rmse = utterances.iter().map(|u| u.energy_rmse).sum::<f64>() / n;
        let duration = utterances.iter().map(|u| u.duration_mse).sum::<f64>() / n;
        EvalReport {
            f0_rmse,
            energy_rmse,
            duration_mse: duration,
            utterances,
            failures,
        }
    }
}

/// What the "prediction" side of the evaluation is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Synthesize with predictor-conditioned styles (inference durations).
    Model,
    /// Compare ground truth against itself (all metrics must be zero).
    GroundTruth,
}

/// Evaluates a split: synthesizes each utterance, aligns with DTW on mels,
/// and aggregates by mean. Per-utterance failures are recorded and
/// excluded from the means.
pub fn evaluate_corpus<T: Scalar>(
    models: &Models,
    store: &crate::nn::ParamStore<T>,
    split: &Corpus<T>,
    radius: usize,
    embedder: &dyn SemanticEmbedder<T>,
    mode: EvalMode,
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for index in 0..split.len() {
        match evaluate_one(models, store, split, index, radius, embedder, mode) {
            Ok(row) => rows.push(row),
            Err(e) => failures.push((split.utterances[index].id.clone(), e.to_string())),
        }
    }
    Ok(EvalReport::aggregate(rows, failures))
}

fn evaluate_one<T: Scalar>(
    models: &Models,
    store: &crate::nn::ParamStore<T>,
    split: &Corpus<T>,
    index: usize,
    radius: usize,
    embedder: &dyn SemanticEmbedder<T>,
    mode: EvalMode,
) -> Result<UtteranceEval> {
    let utt = &split.utterances[index];
    let gt_durations = &utt.alignment.phoneme_durations;

    let (pred_mel, pred_f0, pred_energy, pred_durations) = match mode {
        EvalMode::GroundTruth => (
            utt.mel.frames.clone(),
            utt.pitch.clone(),
            utt.energy.clone(),
            gt_durations.clone(),
        ),
        EvalMode::Model => {
            let window = split.window(index, radius)?;
            let out = synthesize_window(
                models,
                store,
                &window,
                embedder,
                &SynthesisOptions {
                    style: StyleSource::Predictor,
                    teacher_forced: false,
                },
            )?;
            let mel = out.mel.value2();
            // Model-side F0: the per-phoneme pitch predictions expanded by
            // the durations actually used (keeps evaluation vocoder-free).
            let pitch_ph = out.pitch_pred.value2();
            let mut f0 = Vec::with_capacity(mel.nrows());
            for (p, &d) in out.used_durations.iter().enumerate() {
                for _ in 0..d {
                    f0.push(pitch_ph[(p, 0)]);
                }
            }
            let energy = energy_from_mel(&MelSpectrogram {
                frames: mel.clone(),
                config: split.mel_config.clone(),
            });
            (mel, f0, energy, out.used_durations)
        }
    };

    let path = dtw_align(&pred_mel, &utt.mel.frames)?;
    path.validate(pred_mel.nrows(), utt.n_frames())?;
    let f0_rmse = warped_rmse_voiced(&pred_f0, &utt.pitch, &path);
    let energy_rmse = warped_rmse(&pred_energy, &utt.energy, &path);
    let duration = duration_mse(&pred_durations, gt_durations)?;
    Ok(UtteranceEval {
        id: utt.id.clone(),
        f0_rmse,
        energy_rmse,
        duration_mse: duration,
    })
}

/// Exhaustive enumeration of every monotone path, each costed with
/// [`path_cost`]'s accumulation order so comparisons against `dtw_align`
/// outputs are exact. Exponential; test-oracle only.
pub fn brute_force_dtw_cost<T: Scalar>(pred: &Array2<T>, reference: &Array2<T>) -> f64 {
    fn enumerate<T: Scalar>(
        pred: &Array2<T>,
        reference: &Array2<T>,
        path: &mut Vec<(usize, usize)>,
        best: &mut f64,
    ) {
        let &(i, j) = path.last().unwrap();
        if i == pred.nrows() - 1 && j == reference.nrows() - 1 {
            let cost = path_cost(
                pred,
                reference,
                &DtwPath {
                    pairs: path.clone(),
                },
            );
            if cost < *best {
                *best = cost;
            }
            return;
        }
        for (di, dj) in [(1usize, 1usize), (0, 1), (1, 0)] {
            let (ni, nj) = (i + di, j + dj);
            if ni < pred.nrows() && nj < reference.nrows() {
                path.push((ni, nj));
                enumerate(pred, reference, path, best);
                path.pop();
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut path = vec![(0usize, 0usize)];
    enumerate(pred, reference, &mut path, &mut best);
    best
}
