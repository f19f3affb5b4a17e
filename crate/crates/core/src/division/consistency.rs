use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PcsrError, Result};

/// Cumulative per-image histogram of predicted pseudo-labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyTracker {
    n_classes: usize,
    histograms: Vec<BTreeMap<usize, u32>>,
    epochs_recorded: u32,
}

impl ConsistencyTracker {
    pub fn new(n_images: usize, n_classes: usize) -> Self {
        ConsistencyTracker {
            n_classes,
            histograms: vec![BTreeMap::new(); n_images],
            epochs_recorded: 0,
        }
    }

    pub fn epochs_recorded(&self) -> u32 {
        self.epochs_recorded
    }

    pub fn histogram(&self, image: usize) -> &BTreeMap<usize, u32> {
        &self.histograms[image]
    }

    /// Records one epoch of predictions: `labels[j]` is the class predicted for `images[j]`.
    /// Nothing is recorded if any label is out of range.
    pub fn record_predictions(&mut self, images: &[usize], labels: &[usize]) -> Result<()> {
        if images.len() != labels.len() {
            return Err(PcsrError::Logic("one label per recorded image expected".into()));
        }
        if let Some(&i) = images.iter().find(|&&i| i >= self.histograms.len()) {
            return Err(PcsrError::Logic(format!("image {i} outside the tracker")));
        }
        if let Some(&c) = labels.iter().find(|&&c| c >= self.n_classes) {
            return Err(PcsrError::Logic(format!(
                "pseudo-label {c} outside [0, {})",
                self.n_classes
            )));
        }
        for (&i, &c) in images.iter().zip(labels) {
            *self.histograms[i].entry(c).or_insert(0) += 1;
        }
        self.epochs_recorded += 1;
        Ok(())
    }

    /// Count of the most frequent class minus that of the runner-up; 0 for an
    /// image never recorded.
    pub fn pcs(&self, image: usize) -> u32 {
        pcs_of(self.histograms[image].values().copied())
    }
}

pub(crate) fn pcs_of(counts: impl IntoIterator<Item = u32>) -> u32 {
    let (mut first, mut second) = (0, 0);
    for c in counts {
        if c > first {
            second = first;
            first = c;
        } else if c > second {
            second = c;
        }
    }
    first - second
}

/// Splits `noisy` into refinable (`PCS ≥ tau`) and ambiguous images, keeping order.
pub fn partition_noisy(
    noisy: &[usize],
    tracker: &ConsistencyTracker,
    tau: f64,
) -> (Vec<usize>, Vec<usize>) {
    noisy
        .iter()
        .partition(|&&i| tracker.pcs(i) as f64 >= tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_counts(counts: &[(usize, u32)]) -> ConsistencyTracker {
        let mut t = ConsistencyTracker::new(1, 8);
        for &(class, n) in counts {
            for _ in 0..n {
                t.record_predictions(&[0], &[class]).unwrap();
            }
        }
        t
    }

    #[test]
    fn score_examples() {
        assert_eq!(with_counts(&[(2, 10)]).pcs(0), 10);
        assert_eq!(with_counts(&[(0, 5), (1, 5)]).pcs(0), 0);
        assert_eq!(with_counts(&[(0, 7), (1, 2), (2, 1)]).pcs(0), 5);
        assert_eq!(ConsistencyTracker::new(3, 4).pcs(2), 0);
    }

    #[test]
    fn histogram_examples() {
        let t = with_counts(&[(3, 10)]);
        assert_eq!(t.histogram(0).iter().collect::<Vec<_>>(), vec![(&3, &10)]);
        let mut t = ConsistencyTracker::new(1, 4);
        for c in [1, 2, 1, 2] {
            t.record_predictions(&[0], &[c]).unwrap();
        }
        assert_eq!(t.histogram(0).get(&1), Some(&2));
        assert_eq!(t.histogram(0).get(&2), Some(&2));
        assert_eq!(t.epochs_recorded(), 4);
    }

    #[test]
    fn out_of_range_label_is_atomic() {
        let mut t = ConsistencyTracker::new(2, 3);
        let err = t.record_predictions(&[0, 1], &[1, 3]).unwrap_err();
        assert!(matches!(err, PcsrError::Logic(_)));
        assert!(t.histogram(0).is_empty());
        assert_eq!(t.epochs_recorded(), 0);
    }

    #[test]
    fn partition_examples() {
        let mut t = ConsistencyTracker::new(3, 4);
        // PCS = 5, 0, 3
        let rounds: [[usize; 3]; 6] = [
            [0, 0, 1],
            [0, 1, 1],
            [0, 0, 1],
            [0, 1, 1],
            [0, 2, 0],
            [1, 3, 2],
        ];
        for r in rounds {
            t.record_predictions(&[0, 1, 2], &r).unwrap();
        }
        assert_eq!((t.pcs(0), t.pcs(1), t.pcs(2)), (4, 0, 3));
        t.record_predictions(&[0, 1, 2], &[0, 2, 3]).unwrap();
        assert_eq!((t.pcs(0), t.pcs(1), t.pcs(2)), (5, 0, 3));
        let (r, a) = partition_noisy(&[0, 1, 2], &t, 3.0);
        assert_eq!((r, a), (vec![0, 2], vec![1]));
        let (r, a) = partition_noisy(&[0, 1, 2], &t, 0.0);
        assert_eq!((r.len(), a.len()), (3, 0));
        let (r, _) = partition_noisy(&[0, 1, 2], &t, t.epochs_recorded() as f64 + 0.5);
        assert!(r.is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pcs_bounded_by_epochs(stream in proptest::collection::vec(0usize..6, 0..40)) {
                let mut t = ConsistencyTracker::new(1, 6);
                for &c in &stream {
                    t.record_predictions(&[0], &[c]).unwrap();
                }
                prop_assert!(t.pcs(0) <= t.epochs_recorded());
            }

            #[test]
            fn pcs_invariant_under_relabeling(
                stream in proptest::collection::vec(0usize..6, 1..40),
                shift in 0usize..6,
            ) {
                let mut a = ConsistencyTracker::new(1, 6);
                let mut b = ConsistencyTracker::new(1, 6);
                for &c in &stream {
                    a.record_predictions(&[0], &[c]).unwrap();
                    b.record_predictions(&[0], &[(c * 5 + shift) % 6]).unwrap();
                }
                prop_assert_eq!(a.pcs(0), b.pcs(0));
            }

            #[test]
            fn partition_covers_noisy(pcs_streams in proptest::collection::vec(proptest::collection::vec(0usize..3, 5), 1..30), tau in 0.0f64..6.0) {
                let n = pcs_streams.len();
                let mut t = ConsistencyTracker::new(n, 3);
                for epoch in 0..5 {
                    let labels: Vec<usize> = pcs_streams.iter().map(|s| s[epoch]).collect();
                    t.record_predictions(&(0..n).collect::<Vec<_>>(), &labels).unwrap();
                }
                let noisy: Vec<usize> = (0..n).step_by(2).collect();
                let (r, a) = partition_noisy(&noisy, &t, tau);
                prop_assert_eq!(r.len() + a.len(), noisy.len());
                prop_assert!(r.iter().all(|&i| t.pcs(i) as f64 >= tau));
                prop_assert!(a.iter().all(|&i| (t.pcs(i) as f64) < tau));
            }
        }
    }
}
