//! Path segments: the object a Radon-Nikodym estimate is evaluated on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which proposal generated the segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

/// An ordered sequence of states with timestamps over `[t, t']`.
///
/// Times are stored strictly increasing regardless of direction;
/// `states[0]` always sits at the earliest time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSegment<S> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
    pub direction: Direction,
}

impl<S> PathSegment<S> {
    pub fn new(times: Vec<f64>, states: Vec<S>, direction: Direction) -> Result<Self> {
        if times.len() != states.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} times vs {} states",
                times.len(),
                states.len()
            )));
        }
        if times.is_empty() {
            return Err(Error::ShapeMismatch("empty path".into()));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::ShapeMismatch(
                    "path times must be strictly increasing".into(),
                ));
            }
        }
        Ok(PathSegment {
            times,
            states,
            direction,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State at the earliest time `t`.
    pub fn first(&self) -> &S {
        &self.states[0]
    }

    /// State at the latest time `t'`.
    pub fn last(&self) -> &S {
        self.states.last().unwrap()
    }

    /// Number of sub-steps (kernel factors) on the segment.
    pub fn num_steps(&self) -> usize {
        self.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_lengths_and_unordered_times() {
        assert!(PathSegment::new(vec![0.0, 1.0], vec![1.0], Direction::Forward).is_err());
        assert!(
            PathSegment::new(vec![1.0, 0.5], vec![1.0, 2.0], Direction::Backward).is_err()
        );
        let p = PathSegment::new(vec![0.5, 1.0], vec![7.0, 8.0], Direction::Backward).unwrap();
        assert_eq!(*p.first(), 7.0);
        assert_eq!(*p.last(), 8.0);
        assert_eq!(p.num_steps(), 1);
    }
}
