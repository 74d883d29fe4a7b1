//! Incremental-accuracy bookkeeping: top-1 accuracy over all seen classes
//! after each stage, the final accuracy, and the stage average.

use serde::{Deserialize, Serialize};

use crate::datagen::StageDataset;
use crate::engine::{classify, IncrementalState, PrototypeStore};
use crate::error::{DrlError, Result};
use crate::ipa::composite_forward;

/// Arithmetic mean in a fixed left-to-right order. Errors on empty input.
pub fn average_accuracy(a: &[f64]) -> Result<f64> {
    if a.is_empty() {
        return Err(DrlError::Config("average of an empty sequence".into()));
    }
    let mut sum = 0.0;
    for &v in a {
        sum += v;
    }
    Ok(sum / a.len() as f64)
}

/// Top-1 accuracy over the union of the given test sets, via the prototype
/// classifier. Returns `(correct, total)`.
pub fn accuracy_after_stage(
    state: &IncrementalState,
    store: &PrototypeStore,
    test_sets: &[&StageDataset],
) -> Result<(usize, usize)> {
    if !store.complete_through(state.stage_index()) {
        return Err(DrlError::Protocol(
            "prototype store incomplete for the current stage".into(),
        ));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for set in test_sets {
        for sample in &set.test {
            let features = composite_forward(&sample.image, state)?;
            let (pred, _) = classify(&features.concatenated, store)?;
            if pred == sample.label {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(DrlError::Config("no test samples".into()));
    }
    Ok((correct, total))
}

/// Per-stage accuracies in percent plus their derived aggregates. The
/// constructor is the only way to build one, so `a_bar` is always the exact
/// mean of `per_stage` and `a_t` the exact last entry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsTable {
    pub per_stage: Vec<f64>,
    /// `(correct, total)` behind each entry.
    pub counts: Vec<(usize, usize)>,
    pub a_bar: f64,
    pub a_t: f64,
}

impl MetricsTable {
    pub fn from_counts(counts: Vec<(usize, usize)>) -> Result<Self> {
        if counts.is_empty() {
            return Err(DrlError::Config("metrics need at least one stage".into()));
        }
        let per_stage: Vec<f64> = counts
            .iter()
            .map(|&(c, t)| 100.0 * c as f64 / t as f64)
            .collect();
        let a_bar = average_accuracy(&per_stage)?;
        let a_t = *per_stage.last().expect("nonempty");
        Ok(MetricsTable {
            per_stage,
            counts,
            a_bar,
            a_t,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_basic_cases() {
        assert_eq!(average_accuracy(&[100.0, 50.0]).unwrap(), 75.0);
        assert_eq!(average_accuracy(&[62.5, 62.5, 62.5]).unwrap(), 62.5);
        let single = average_accuracy(&[81.25]).unwrap();
        assert_eq!(single, 81.25);
        assert!(average_accuracy(&[]).is_err());
    }

    #[test]
    fn table_invariants_hold_by_construction() {
        let t = MetricsTable::from_counts(vec![(40, 40), (30, 40), (20, 40)]).unwrap();
        assert_eq!(t.per_stage, vec![100.0, 75.0, 50.0]);
        assert_eq!(t.a_t, 50.0);
        assert_eq!(t.a_bar, average_accuracy(&t.per_stage).unwrap());
    }

    #[test]
    fn single_stage_a_t_equals_a_bar() {
        let t = MetricsTable::from_counts(vec![(7, 8)]).unwrap();
        assert_eq!(t.a_t, t.a_bar);
    }
}
