//! Test-time task identification and task-/class-incremental prediction.
//!
//! Every finalized task's parameters score the input; the task whose
//! prediction has the lowest softmax entropy wins (ties go to the lowest task
//! index), and the class is read off that task's head and mapped back to a
//! global label through the task's class list.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::backbones::forward;
use crate::eft::FeatureMap;
use crate::error::{EftError, Result};
use crate::registry::Registry;

/// Confidence of one task's prediction on one input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: usize,
    /// Softmax entropy in nats.
    pub entropy: f64,
    pub max_prob: f64,
}

/// `−Σ p log p` of `softmax(logits)`, evaluated with a max shift.
pub fn softmax_entropy(logits: ArrayView1<f64>) -> f64 {
    let m = logits.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let shifted: Vec<f64> = logits.iter().map(|v| v - m).collect();
    let z: f64 = shifted.iter().map(|s| s.exp()).sum();
    let log_z = z.ln();
    // p_j = exp(s_j − log Z), so −Σ p log p = log Z − Σ p s.
    let expected: f64 = shifted.iter().map(|s| (s - log_z).exp() * s).sum();
    (log_z - expected).max(0.0)
}

/// Largest softmax probability.
pub fn max_prob(logits: ArrayView1<f64>) -> f64 {
    let m = logits.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    1.0 / logits.iter().map(|v| (v - m).exp()).sum::<f64>()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the minimum-entropy score, lowest index on ties.
pub fn select_task(scores: &[TaskScore]) -> Option<usize> {
    let mut best: Option<&TaskScore> = None;
    for s in scores {
        if best.is_none_or(|b| s.entropy < b.entropy) {
            best = Some(s);
        }
    }
    best.map(|s| s.task_id)
}

/// Logits of a batch under every finalized task.
#[derive(Debug, Clone)]
pub struct TaskLogits {
    pub task_ids: Vec<usize>,
    /// One `[B, classes_t]` matrix per entry of `task_ids`.
    pub logits: Vec<Array2<f64>>,
    /// Class list of each task (local label → global label).
    pub classes: Vec<Vec<usize>>,
    /// Number of forward passes performed (one per task).
    pub forward_passes: usize,
}

impl TaskLogits {
    /// Forwards `x` once under each finalized `(θ, τ_t)`.
    pub fn compute(x: &FeatureMap, registry: &Registry) -> Result<Self> {
        let mut out = TaskLogits {
            task_ids: Vec::new(),
            logits: Vec::new(),
            classes: Vec::new(),
            forward_passes: 0,
        };
        for task in registry.finalized_tasks() {
            out.logits
                .push(forward(x, &registry.arch, registry.global(), task, &registry.spec)?);
            out.task_ids.push(task.task_id);
            out.classes.push(task.classes.clone());
            out.forward_passes += 1;
        }
        if out.task_ids.is_empty() {
            return Err(EftError::NoFinalizedTasks);
        }
        Ok(out)
    }

    pub fn batch_size(&self) -> usize {
        self.logits.first().map_or(0, |l| l.nrows())
    }

    fn position(&self, t: usize) -> Result<usize> {
        self.task_ids
            .iter()
            .position(|&id| id == t)
            .ok_or(EftError::UnknownTask(t))
    }

    /// Per-sample scores of every task.
    pub fn scores(&self, sample: usize) -> Vec<TaskScore> {
        self.task_ids
            .iter()
            .zip(&self.logits)
            .map(|(&task_id, l)| {
                let row = l.index_axis(Axis(0), sample);
                TaskScore {
                    task_id,
                    entropy: softmax_entropy(row),
                    max_prob: max_prob(row),
                }
            })
            .collect()
    }

    /// Predicted task id per sample.
    pub fn predict_tasks(&self) -> Vec<usize> {
        (0..self.batch_size())
            .map(|n| select_task(&self.scores(n)).expect("non-empty"))
            .collect()
    }

    /// Global labels predicted with the task given.
    pub fn til(&self, t: usize) -> Result<Vec<usize>> {
        let i = self.position(t)?;
        Ok(self.logits[i]
            .rows()
            .into_iter()
            .map(|row| self.classes[i][argmax(row)])
            .collect())
    }

    /// Global labels predicted under the inferred task.
    pub fn cil(&self) -> Vec<usize> {
        self.predict_tasks()
            .into_iter()
            .enumerate()
            .map(|(n, t)| {
                let i = self.position(t).expect("predicted task exists");
                self.classes[i][argmax(self.logits[i].row(n))]
            })
            .collect()
    }
}

pub fn predict_task(x: &FeatureMap, registry: &Registry) -> Result<Vec<usize>> {
    Ok(TaskLogits::compute(x, registry)?.predict_tasks())
}

pub fn cil_predict(x: &FeatureMap, registry: &Registry) -> Result<Vec<usize>> {
    Ok(TaskLogits::compute(x, registry)?.cil())
}

pub fn til_predict(x: &FeatureMap, registry: &Registry, t: usize) -> Result<Vec<usize>> {
    let task = registry.task(t)?;
    let logits = forward(x, &registry.arch, registry.global(), task, &registry.spec)?;
    Ok(logits.rows().into_iter().map(|row| task.classes[argmax(row)]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_entropy_is_log_c() {
        let e = softmax_entropy(ndarray::Array1::<f64>::zeros(10).view());
        assert!((e - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_logit_has_zero_entropy() {
        let e = softmax_entropy(array![1e6, 0.0, 0.0].view());
        assert!(e.abs() < 1e-12);
        assert!((max_prob(array![1e6, 0.0].view()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lowest_task() {
        let s = |task_id, entropy| TaskScore { task_id, entropy, max_prob: 0.5 };
        assert_eq!(select_task(&[s(1, 0.3), s(2, 0.3), s(3, 0.5)]), Some(1));
        assert_eq!(select_task(&[s(1, 0.3), s(2, 0.1)]), Some(2));
        assert_eq!(select_task(&[]), None);
        assert_eq!(argmax(array![1.0, 3.0, 3.0].view()), 1);
    }

    #[test]
    fn local_argmax_maps_through_class_list() {
        let tl = TaskLogits {
            task_ids: vec![1, 2],
            logits: vec![array![[0.0, 5.0], [0.0, 0.1]], array![[1.0, 1.0, 1.0], [9.0, 0.0, 0.0]]],
            classes: vec![vec![7, 3], vec![0, 1, 2]],
            forward_passes: 2,
        };
        assert_eq!(tl.til(1).unwrap(), vec![3, 3]);
        assert_eq!(tl.predict_tasks(), vec![1, 2]);
        assert_eq!(tl.cil(), vec![3, 0]);
        assert!(matches!(tl.til(9), Err(EftError::UnknownTask(9))));
    }
}
