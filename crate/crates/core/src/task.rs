//! Synthetic classification tasks for the merging experiments.
//!
//! Three task families share one 16-dimensional input space but read
//! disjoint halves of it:
//!
//! * `TaskV` ("perception"): the label is the argmax over the four pairwise
//!   products `x[2j]*x[2j+1]` of coordinates 0..8. Inputs are resampled
//!   until the top two scores are separated by [`TASK_V_MARGIN`], and
//!   coordinates 8..16 are drawn from a narrow band (±[`TASK_V_SPILL`]) so
//!   perception batches carry only faint activity in the reasoning half.
//! * `TaskR` ("reasoning"): the label is the sign pattern of two sums of
//!   pairwise products of coordinates 8..16. Those coordinates are
//!   resampled until both sums clear [`TASK_R_MARGIN`]; coordinates 0..8
//!   stay full-range, so reasoning batches are noisy in the perception
//!   half.
//! * `Generic`: a smooth pretraining mixture labeled by a blend of linear
//!   pair sums over coordinates 0..8 and the reasoning scores, full-range
//!   everywhere, with no margin filtering.
//!
//! Labels are pure functions of the inputs, and sampling is a pure
//! function of `(kind, seed, step)`, so any batch can be regenerated
//! bit-for-bit from its coordinates alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::PortableRng;
use crate::tensor::Tensor;

/// Input dimensionality shared by every task.
pub const TASK_INPUT_DIM: usize = 16;
/// Number of classes shared by every task.
pub const TASK_CLASSES: usize = 4;
/// Minimum gap between the best and runner-up TaskV scores.
pub const TASK_V_MARGIN: f64 = 0.25;
/// Half-width of the uniform band for TaskV's reasoning-half coordinates.
pub const TASK_V_SPILL: f64 = 0.25;
/// Minimum magnitude of both TaskR sums.
pub const TASK_R_MARGIN: f64 = 0.35;

/// Task family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "taskV")]
    TaskV,
    #[serde(rename = "taskR")]
    TaskR,
    #[serde(rename = "generic")]
    Generic,
}

/// A deterministic task: a kind plus the seed that fixes its sample stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seed: u64,
}

/// A sampled batch. `labels` is `None` for calibration (label-free) use.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Option<Vec<usize>>,
}

/// TaskV scores: the four pairwise products over coordinates 0..8.
pub fn scores_v(x: &[f32]) -> [f64; 4] {
    let mut s = [0.0; 4];
    for j in 0..4 {
        s[j] = (x[2 * j] as f64) * (x[2 * j + 1] as f64);
    }
    s
}

/// TaskR scores. With `a = x8*x9 + x10*x11` and `b = x12*x13 + x14*x15`,
/// the four scores are `[a+b, -a+b, a-b, -a-b]`, so the argmax recovers
/// the sign pattern of `(a, b)`.
pub fn scores_r(x: &[f32]) -> [f64; 4] {
    let a = (x[8] as f64) * (x[9] as f64) + (x[10] as f64) * (x[11] as f64);
    let b = (x[12] as f64) * (x[13] as f64) + (x[14] as f64) * (x[15] as f64);
    [a + b, -a + b, a - b, -a - b]
}

/// Linear pair sums over coordinates 0..8, used only by the generic blend.
pub fn scores_generic_linear(x: &[f32]) -> [f64; 4] {
    let mut s = [0.0; 4];
    for j in 0..4 {
        s[j] = x[2 * j] as f64 + x[2 * j + 1] as f64;
    }
    s
}

/// Index of the strictly largest entry (first winner on exact ties).
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// The two TaskR sums `(a, b)` recovered from the score vector.
fn task_r_sums(x: &[f32]) -> (f64, f64) {
    let s = scores_r(x);
    (0.5 * (s[0] + s[2]), 0.5 * (s[0] - s[2]))
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        SyntheticTask { kind, seed }
    }

    /// Label for a fully sampled input row, independent of the sampler.
    pub fn label_for(&self, x: &[f32]) -> usize {
        match self.kind {
            TaskKind::TaskV => argmax(&scores_v(x)),
            TaskKind::TaskR => {
                let (a, b) = task_r_sums(x);
                (a <= 0.0) as usize + 2 * ((b <= 0.0) as usize)
            }
            TaskKind::Generic => {
                let lin = scores_generic_linear(x);
                let r = scores_r(x);
                let mut blend = [0.0; 4];
                for j in 0..4 {
                    blend[j] = 0.5 * lin[j] + 0.5 * r[j];
                }
                argmax(&blend)
            }
        }
    }

    /// Deterministic labeled batch for training step `step`.
    ///
    /// The stream is keyed by `(seed, step)` so distinct steps draw
    /// independent batches while reruns reproduce the same bits.
    pub fn stream_batch(&self, step: u64, n: usize) -> Result<Batch> {
        if n == 0 {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        let mut rng = PortableRng::derive(self.seed, step);
        let mut data = vec![0.0f32; n * TASK_INPUT_DIM];
        let mut labels = vec![0usize; n];
        for (i, row) in data.chunks_mut(TASK_INPUT_DIM).enumerate() {
            match self.kind {
                TaskKind::TaskV => {
                    loop {
                        for v in row[..8].iter_mut() {
                            *v = rng.uniform(-1.0, 1.0) as f32;
                        }
                        let s = scores_v(row);
                        let best = argmax(&s);
                        let mut second = f64::NEG_INFINITY;
                        for (j, &v) in s.iter().enumerate() {
                            if j != best && v > second {
                                second = v;
                            }
                        }
                        if s[best] - second >= TASK_V_MARGIN {
                            labels[i] = best;
                            break;
                        }
                    }
                    for v in row[8..].iter_mut() {
                        *v = rng.uniform(-TASK_V_SPILL, TASK_V_SPILL) as f32;
                    }
                }
                TaskKind::TaskR => {
                    for v in row[..8].iter_mut() {
                        *v = rng.uniform(-1.0, 1.0) as f32;
                    }
                    loop {
                        for v in row[8..].iter_mut() {
                            *v = rng.uniform(-1.0, 1.0) as f32;
                        }
                        let (a, b) = task_r_sums(row);
                        if a.abs() >= TASK_R_MARGIN && b.abs() >= TASK_R_MARGIN {
                            labels[i] = (a <= 0.0) as usize + 2 * ((b <= 0.0) as usize);
                            break;
                        }
                    }
                }
                TaskKind::Generic => {
                    for v in row.iter_mut() {
                        *v = rng.uniform(-1.0, 1.0) as f32;
                    }
                    labels[i] = self.label_for(row);
                }
            }
        }
        Ok(Batch {
            inputs: Tensor::from_vec(&[n, TASK_INPUT_DIM], data)?,
            labels: Some(labels),
        })
    }

    /// Same input stream as [`stream_batch`](Self::stream_batch) but with
    /// labels dropped, for calibration use.
    pub fn stream_unlabeled(&self, step: u64, n: usize) -> Result<Batch> {
        let mut batch = self.stream_batch(step, n)?;
        batch.labels = None;
        Ok(batch)
    }
}

/// Fraction of batch rows whose forward argmax matches the label.
pub fn accuracy(params: &ModelParams, batch: &Batch) -> Result<f64> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::Domain("accuracy needs a labeled batch".into()))?;
    let probs = params.forward(&batch.inputs)?;
    let n = probs.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "label count {} does not match batch rows {}",
            labels.len(),
            n
        )));
    }
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let mut best = 0;
        for j in 1..probs.cols() {
            if probs.at(i, j) > probs.at(i, best) {
                best = j;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_v_labels_depend_only_on_first_half() {
        let task = SyntheticTask::new(TaskKind::TaskV, 7);
        let batch = task.stream_batch(0, 64).unwrap();
        let labels = batch.labels.as_ref().unwrap();
        for (i, row) in batch.inputs.data().chunks(TASK_INPUT_DIM).enumerate() {
            let mut scrambled = row.to_vec();
            for (k, v) in scrambled[8..].iter_mut().enumerate() {
                *v = (k as f32) * 0.11 - 0.4;
            }
            assert_eq!(task.label_for(&scrambled), labels[i]);
        }
    }

    #[test]
    fn task_r_labels_depend_only_on_second_half() {
        let task = SyntheticTask::new(TaskKind::TaskR, 9);
        let batch = task.stream_batch(3, 64).unwrap();
        let labels = batch.labels.as_ref().unwrap();
        for (i, row) in batch.inputs.data().chunks(TASK_INPUT_DIM).enumerate() {
            let mut scrambled = row.to_vec();
            for (k, v) in scrambled[..8].iter_mut().enumerate() {
                *v = (k as f32) * 0.13 - 0.5;
            }
            assert_eq!(task.label_for(&scrambled), labels[i]);
        }
    }

    #[test]
    fn task_v_margin_and_spill_hold_for_sampled_rows() {
        let task = SyntheticTask::new(TaskKind::TaskV, 21);
        let batch = task.stream_batch(5, 128).unwrap();
        for row in batch.inputs.data().chunks(TASK_INPUT_DIM) {
            let s = scores_v(row);
            let best = argmax(&s);
            let mut second = f64::NEG_INFINITY;
            for (j, &v) in s.iter().enumerate() {
                if j != best && v > second {
                    second = v;
                }
            }
            assert!(s[best] - second >= TASK_V_MARGIN);
            for &v in &row[8..] {
                assert!((v as f64).abs() <= TASK_V_SPILL);
            }
        }
    }

    #[test]
    fn task_r_margin_holds_for_sampled_rows() {
        let task = SyntheticTask::new(TaskKind::TaskR, 22);
        let batch = task.stream_batch(5, 128).unwrap();
        for row in batch.inputs.data().chunks(TASK_INPUT_DIM) {
            let s = scores_r(row);
            let (a, b) = (0.5 * (s[0] + s[2]), 0.5 * (s[0] - s[2]));
            assert!(a.abs() >= TASK_R_MARGIN && b.abs() >= TASK_R_MARGIN);
        }
    }

    #[test]
    fn identical_kind_seed_step_yield_identical_batches() {
        for kind in [TaskKind::TaskV, TaskKind::TaskR, TaskKind::Generic] {
            let a = SyntheticTask::new(kind, 5).stream_batch(2, 32).unwrap();
            let b = SyntheticTask::new(kind, 5).stream_batch(2, 32).unwrap();
            assert!(a.inputs.bitwise_eq(&b.inputs));
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn distinct_steps_yield_distinct_batches() {
        let task = SyntheticTask::new(TaskKind::Generic, 5);
        let a = task.stream_batch(0, 32).unwrap();
        let b = task.stream_batch(1, 32).unwrap();
        assert!(!a.inputs.bitwise_eq(&b.inputs));
    }

    #[test]
    fn unlabeled_stream_matches_labeled_inputs() {
        let task = SyntheticTask::new(TaskKind::TaskV, 5);
        let a = task.stream_batch(4, 16).unwrap();
        let b = task.stream_unlabeled(4, 16).unwrap();
        assert!(a.inputs.bitwise_eq(&b.inputs));
        assert!(b.labels.is_none());
    }

    #[test]
    fn label_distribution_covers_all_classes() {
        for kind in [TaskKind::TaskV, TaskKind::TaskR, TaskKind::Generic] {
            let task = SyntheticTask::new(kind, 77);
            let batch = task.stream_batch(0, 256).unwrap();
            let mut counts = [0usize; TASK_CLASSES];
            for &y in batch.labels.as_ref().unwrap() {
                counts[y] += 1;
            }
            for (c, &k) in counts.iter().enumerate() {
                assert!(k > 10, "class {c} underrepresented for {kind:?}: {counts:?}");
            }
        }
    }

    #[test]
    fn zero_batch_size_is_rejected() {
        let task = SyntheticTask::new(TaskKind::TaskV, 1);
        assert!(task.stream_batch(0, 0).is_err());
    }
}
