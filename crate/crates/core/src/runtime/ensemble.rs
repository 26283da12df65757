//! Majority voting and the live-model accounting used to check that
//! ensemble members are materialized one at a time.

use std::ops::Deref;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::gan::ModelParams;

/// Per-item vote counts over `num_classes` labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoteTally {
    num_classes: usize,
    counts: Vec<u32>,
    voters: usize,
}

impl VoteTally {
    pub fn new(items: usize, num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; items * num_classes],
            voters: 0,
        }
    }

    pub fn items(&self) -> usize {
        self.counts.len() / self.num_classes.max(1)
    }

    pub fn voters(&self) -> usize {
        self.voters
    }

    pub fn add(&mut self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.items() {
            return Err(Error::shape("vote", format!("{} labels for {} items", labels.len(), self.items())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Contract(format!("vote for class {bad} of {}", self.num_classes)));
        }
        for (i, &l) in labels.iter().enumerate() {
            self.counts[i * self.num_classes + l] += 1;
        }
        self.voters += 1;
        Ok(())
    }

    /// Most frequent label per item; ties go to the lowest class id.
    pub fn winners(&self) -> Vec<usize> {
        self.counts
            .chunks(self.num_classes)
            .map(|row| {
                let mut best = 0;
                for (c, &n) in row.iter().enumerate() {
                    if n > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

pub fn majority_vote(lists: &[Vec<usize>]) -> Result<Vec<usize>> {
    let Some(first) = lists.first() else {
        return Err(Error::Contract("majority vote over zero models".into()));
    };
    let classes = lists.iter().flatten().max().map_or(1, |m| m + 1);
    let mut tally = VoteTally::new(first.len(), classes);
    for l in lists {
        tally.add(l)?;
    }
    Ok(tally.winners())
}

/// Counts models currently materialized and the peak count.
#[derive(Debug, Default)]
pub struct ModelCounter {
    live: AtomicUsize,
    peak: AtomicUsize,
    total: AtomicUsize,
}

impl ModelCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hold(&self, params: ModelParams) -> LiveModel<'_> {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.total.fetch_add(1, Ordering::SeqCst);
        LiveModel { params, counter: self }
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn total(&self) -> usize {
        self.total.load(Ordering::SeqCst)
    }
}

/// A decoded ensemble member; dropping it releases its slot in the counter.
pub struct LiveModel<'c> {
    params: ModelParams,
    counter: &'c ModelCounter,
}

impl LiveModel<'_> {
    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }
}

impl Deref for LiveModel<'_> {
    type Target = ModelParams;

    fn deref(&self) -> &ModelParams {
        &self.params
    }
}

impl Drop for LiveModel<'_> {
    fn drop(&mut self) {
        self.counter.live.fetch_sub(1, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vote_examples() {
        assert_eq!(majority_vote(&[vec![0], vec![0], vec![1]]).unwrap(), vec![0]);
        assert_eq!(majority_vote(&[vec![1], vec![0]]).unwrap(), vec![0]);
        assert_eq!(majority_vote(&[vec![3, 1, 2]]).unwrap(), vec![3, 1, 2]);
        assert!(majority_vote(&[]).is_err());
    }
}
