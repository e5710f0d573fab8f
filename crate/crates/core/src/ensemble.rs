//! The PT ladder state: one sample per level plus replica identities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One state per level `m = 0..=M`, with `replica_ids` a permutation of
/// `0..=M` tracking which replica currently occupies which level. Swaps
/// exchange both states and ids so round trips can be counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaEnsemble<S> {
    pub states: Vec<S>,
    pub replica_ids: Vec<usize>,
    pub iteration: u64,
}

impl<S> ReplicaEnsemble<S> {
    pub fn new(states: Vec<S>) -> Self {
        let n = states.len();
        ReplicaEnsemble {
            states,
            replica_ids: (0..n).collect(),
            iteration: 0,
        }
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// Swap the contents of two levels (states and replica ids).
    pub fn swap_levels(&mut self, a: usize, b: usize) {
        self.states.swap(a, b);
        self.replica_ids.swap(a, b);
    }

    /// Check that `replica_ids` is still a permutation of `0..len`.
    pub fn check_permutation(&self) -> Result<()> {
        let n = self.replica_ids.len();
        if n != self.states.len() {
            return Err(Error::ShapeMismatch(
                "replica ids and states length differ".into(),
            ));
        }
        let mut seen = vec![false; n];
        for &id in &self.replica_ids {
            if id >= n || seen[id] {
                return Err(Error::ShapeMismatch(format!(
                    "replica ids are not a permutation: duplicate or out-of-range {id}"
                )));
            }
            seen[id] = true;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swap_preserves_permutation() {
        let mut e = ReplicaEnsemble::new(vec![0.0, 1.0, 2.0]);
        e.swap_levels(0, 2);
        e.check_permutation().unwrap();
        assert_eq!(e.replica_ids, vec![2, 1, 0]);
        assert_eq!(e.states, vec![2.0, 1.0, 0.0]);
    }

    #[test]
    fn corrupted_ids_detected() {
        let mut e = ReplicaEnsemble::new(vec![0.0, 1.0]);
        e.replica_ids[1] = 0;
        assert!(e.check_permutation().is_err());
    }
}
