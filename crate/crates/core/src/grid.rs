//! Discretised annealing schedules.
//!
//! A [`TimeGrid`] holds the full fine grid of diffusion times plus the level
//! structure on top of it: every `substeps`-th grid point at or above the
//! truncation index is a ladder level. Grid points below the truncation index
//! are the completion schedule, integrated without communication after each
//! iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    /// Full fine grid, strictly increasing. `times[0]` is the data end.
    times: Vec<f64>,
    /// Sub-steps per level segment (the paper's K).
    substeps: usize,
    /// Index of the truncation time; levels occupy `times[trunc_index..]`.
    trunc_index: usize,
}

/// EDM power-law time grid: `[t_max^(1/rho) + (i/n)(t_min^(1/rho) - t_max^(1/rho))]^rho`.
///
/// The raw schedule is strictly decreasing from `t_max` to `t_min`; it is
/// stored ascending with exact endpoints. Levels default to one per step with
/// no truncation; see [`TimeGrid::with_substeps`] and
/// [`TimeGrid::with_truncation_steps`].
pub fn build_edm_grid(t_min: f64, t_max: f64, n_steps: usize, rho: f64) -> Result<TimeGrid> {
    if !(t_min > 0.0) {
        return Err(Error::InvalidSchedule(format!(
            "t_min must be positive, got {t_min}"
        )));
    }
    if !(t_max > t_min) {
        return Err(Error::InvalidSchedule(format!(
            "need t_max > t_min, got [{t_min}, {t_max}]"
        )));
    }
    if n_steps < 2 {
        return Err(Error::InvalidSchedule(format!(
            "need at least 2 steps, got {n_steps}"
        )));
    }
    if rho < 1.0 {
        return Err(Error::InvalidSchedule(format!("rho must be >= 1, got {rho}")));
    }
    let a = t_max.powf(1.0 / rho);
    let b = t_min.powf(1.0 / rho);
    let mut times: Vec<f64> = (0..=n_steps)
        .map(|i| {
            let u = a + (i as f64 / n_steps as f64) * (b - a);
            u.powf(rho)
        })
        .collect();
    times[0] = t_max;
    times[n_steps] = t_min;
    times.reverse();
    TimeGrid::from_times(times, 1, 0)
}

impl TimeGrid {
    /// Build from an ascending list of times.
    pub fn from_times(times: Vec<f64>, substeps: usize, trunc_index: usize) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidSchedule("grid needs at least 2 times".into()));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) || !w[0].is_finite() || !w[1].is_finite() {
                return Err(Error::InvalidSchedule(format!(
                    "times must be strictly increasing and finite, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if times[0] < 0.0 {
            return Err(Error::InvalidSchedule("negative diffusion time".into()));
        }
        if substeps == 0 {
            return Err(Error::InvalidSchedule("substeps must be positive".into()));
        }
        if trunc_index >= times.len() - 1 {
            return Err(Error::InvalidSchedule(
                "truncation leaves no room for levels".into(),
            ));
        }
        let level_steps = times.len() - 1 - trunc_index;
        if level_steps % substeps != 0 {
            return Err(Error::InvalidSchedule(format!(
                "{level_steps} steps above truncation not divisible by substeps {substeps}"
            )));
        }
        Ok(TimeGrid {
            times,
            substeps,
            trunc_index,
        })
    }

    /// Uniformly spaced levels, `substeps` equal sub-steps each, no truncation.
    pub fn uniform(t_lo: f64, t_hi: f64, num_pairs: usize, substeps: usize) -> Result<Self> {
        if num_pairs == 0 {
            return Err(Error::InvalidSchedule("need at least one level pair".into()));
        }
        let n = num_pairs * substeps;
        let times: Vec<f64> = (0..=n)
            .map(|i| t_lo + (t_hi - t_lo) * i as f64 / n as f64)
            .collect();
        TimeGrid::from_times(times, substeps, 0)
    }

    pub fn with_substeps(self, substeps: usize) -> Result<Self> {
        TimeGrid::from_times(self.times, substeps, self.trunc_index)
    }

    /// Reserve the lowest `steps` fine steps for the completion phase.
    pub fn with_truncation_steps(self, steps: usize) -> Result<Self> {
        TimeGrid::from_times(self.times, self.substeps, steps)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// Number of adjacent level pairs (the paper's M).
    pub fn num_pairs(&self) -> usize {
        (self.times.len() - 1 - self.trunc_index) / self.substeps
    }

    /// Number of ladder states, `num_pairs() + 1`.
    pub fn num_states(&self) -> usize {
        self.num_pairs() + 1
    }

    pub fn truncation_time(&self) -> f64 {
        self.times[self.trunc_index]
    }

    pub fn t_min(&self) -> f64 {
        self.times[0]
    }

    pub fn t_max(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn level_grid_index(&self, level: usize) -> usize {
        self.trunc_index + level * self.substeps
    }

    /// Diffusion time of ladder level `m`, `m = 0..=num_pairs()`.
    pub fn level_time(&self, level: usize) -> f64 {
        self.times[self.level_grid_index(level)]
    }

    /// Sub-times spanning the pair `(m-1, m)`, ascending, length `substeps+1`.
    pub fn pair_times(&self, pair: usize) -> &[f64] {
        debug_assert!(pair >= 1 && pair <= self.num_pairs());
        let lo = self.level_grid_index(pair - 1);
        let hi = self.level_grid_index(pair);
        &self.times[lo..=hi]
    }

    /// Grid times at or below the truncation time (ascending; the completion
    /// phase walks them descending). Contains only `t_min` when no truncation.
    pub fn completion_times(&self) -> &[f64] {
        &self.times[0..=self.trunc_index]
    }

    /// Mean sub-step width within level `m`'s adjacent segment, used as the
    /// local-move discretisation size. Level 0 borrows its upper segment.
    pub fn level_substep(&self, level: usize) -> f64 {
        let pair = level.max(1);
        let ts = self.pair_times(pair);
        (ts[ts.len() - 1] - ts[0]) / self.substeps as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edm_grid_matches_paper_step_count() {
        let g = build_edm_grid(0.001, 10.0, 200, 7.0).unwrap();
        assert_eq!(g.times().len(), 201);
        assert_eq!(g.t_min(), 0.001);
        assert_eq!(g.t_max(), 10.0);
    }

    #[test]
    fn degenerate_interval_rejected() {
        assert!(build_edm_grid(1.0, 1.0, 10, 7.0).is_err());
        assert!(build_edm_grid(0.0, 1.0, 10, 7.0).is_err());
        assert!(build_edm_grid(-0.5, 1.0, 10, 7.0).is_err());
    }

    #[test]
    fn edm_midpoint_cross_checked_against_independent_interpolant() {
        // Second, independent evaluation of the power interpolant.
        let (t_min, t_max, n, rho) = (0.002_f64, 80.0_f64, 128usize, 7.0_f64);
        let g = build_edm_grid(t_min, t_max, n, rho).unwrap();
        let i = 64; // midpoint index in the decreasing raw schedule
        let frac = i as f64 / n as f64;
        let expected =
            (t_max.powf(1.0 / rho) * (1.0 - frac) + t_min.powf(1.0 / rho) * frac).powf(rho);
        // raw schedule is decreasing; storage is ascending
        let got = g.times()[n - i];
        assert!(
            (got - expected).abs() <= 1e-12 * expected,
            "midpoint {got} vs oracle {expected}"
        );
    }

    #[test]
    fn levels_and_truncation() {
        let g = build_edm_grid(0.001, 10.0, 128, 7.0)
            .unwrap()
            .with_substeps(4)
            .unwrap();
        assert_eq!(g.num_pairs(), 32);
        assert_eq!(g.num_states(), 33);
        assert_eq!(g.level_time(0), 0.001);
        assert_eq!(g.level_time(32), 10.0);
        assert_eq!(g.pair_times(1).len(), 5);

        let g = build_edm_grid(0.001, 10.0, 128, 7.0)
            .unwrap()
            .with_truncation_steps(8)
            .unwrap()
            .with_substeps(4)
            .unwrap();
        assert_eq!(g.num_pairs(), 30);
        assert_eq!(g.completion_times().len(), 9);
        assert!(g.truncation_time() > g.t_min());
    }

    #[test]
    fn indivisible_substeps_rejected() {
        let g = build_edm_grid(0.001, 10.0, 130, 7.0).unwrap();
        assert!(g.with_substeps(4).is_err());
    }

    #[test]
    fn uniform_grid_spacing() {
        let g = TimeGrid::uniform(0.9, 1.0, 20, 5).unwrap();
        assert_eq!(g.num_pairs(), 20);
        assert_eq!(g.times().len(), 101);
        let dt = g.times()[1] - g.times()[0];
        assert!((dt - 1e-3).abs() < 1e-12);
    }
}
