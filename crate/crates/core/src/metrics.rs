//! Sample-quality metrics against exact desk-scale targets.

use serde::{Deserialize, Serialize};

use crate::ctmc::DiscreteState;

/// Total variation distance between a (weighted) sample histogram and exact
/// bin probabilities over `[lo, hi]`. Sample mass falling outside the range
/// is compared against the exact outside mass, so disjoint supports score 1.
pub fn tvd_histogram(
    samples: &[f64],
    weights: Option<&[f64]>,
    exact_bin_probs: &[f64],
    lo: f64,
    hi: f64,
) -> f64 {
    let bins = exact_bin_probs.len();
    assert!(bins > 0 && hi > lo);
    let mut hist = vec![0.0; bins];
    let mut outside = 0.0;
    let mut total = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let w = weights.map_or(1.0, |ws| ws[i]);
        total += w;
        if x < lo || x >= hi {
            outside += w;
        } else {
            let b = (((x - lo) / (hi - lo)) * bins as f64) as usize;
            hist[b.min(bins - 1)] += w;
        }
    }
    if total <= 0.0 {
        return 1.0;
    }
    let exact_outside = (1.0 - exact_bin_probs.iter().sum::<f64>()).max(0.0);
    let mut tvd = (outside / total - exact_outside).abs();
    for (h, p) in hist.iter().zip(exact_bin_probs.iter()) {
        tvd += (h / total - p).abs();
    }
    0.5 * tvd
}

/// Exact bin probabilities of an unnormalised density over `[lo, hi]` by
/// per-bin Simpson quadrature, normalised over the binned range.
pub fn exact_bin_probs(
    density: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    bins: usize,
    subdiv: usize,
) -> Vec<f64> {
    let subdiv = subdiv.max(2) & !1; // even
    let width = (hi - lo) / bins as f64;
    let mut masses = Vec::with_capacity(bins);
    for b in 0..bins {
        let a = lo + b as f64 * width;
        let h = width / subdiv as f64;
        let mut acc = density(a) + density(a + width);
        for i in 1..subdiv {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * density(a + i as f64 * h);
        }
        masses.push(acc * h / 3.0);
    }
    let total: f64 = masses.iter().sum();
    masses.into_iter().map(|m| m / total).collect()
}

/// TVD between empirical discrete samples and an enumerated exact
/// distribution.
pub fn tvd_discrete(samples: &[DiscreteState], exact: &[(DiscreteState, f64)]) -> f64 {
    use std::collections::HashMap;
    let mut counts: HashMap<&DiscreteState, f64> = HashMap::new();
    for s in samples {
        *counts.entry(s).or_insert(0.0) += 1.0;
    }
    let n = samples.len() as f64;
    let mut tvd = 0.0;
    let mut seen = 0.0;
    for (state, p) in exact {
        let freq = counts.get(state).copied().unwrap_or(0.0) / n;
        tvd += (freq - p).abs();
        seen += counts.get(state).copied().unwrap_or(0.0);
    }
    // sample states outside the enumerated support
    tvd += (n - seen) / n;
    0.5 * tvd
}

/// Exact 1-D Wasserstein-2 distance between two sample sets via the sorted
/// quantile coupling.
pub fn w2_1d(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|p, q| p.partial_cmp(q).unwrap());
    xb.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let m = xa.len().max(xb.len());
    let mut acc = 0.0;
    for i in 0..m {
        let q = (i as f64 + 0.5) / m as f64;
        let va = xa[((q * xa.len() as f64) as usize).min(xa.len() - 1)];
        let vb = xb[((q * xb.len() as f64) as usize).min(xb.len() - 1)];
        let d = va - vb;
        acc += d * d;
    }
    (acc / m as f64).sqrt()
}

/// Fraction of 1-D samples on each side of a split point.
pub fn mode_occupancy(samples: &[f64], split: f64) -> (f64, f64) {
    let n = samples.len() as f64;
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let neg = samples.iter().filter(|&&x| x < split).count() as f64;
    (neg / n, (n - neg) / n)
}

/// Metrics of one run, written as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tvd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode_occupancy: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swap_acceptance: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub round_trips: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ess_trace: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stitch: Option<StitchMetrics>,
    pub nfe: u64,
    pub samples: u64,
    pub wall_time_s: f64,
}

/// Success statistics of the stitching task: an iteration passes when every
/// anchor distance (start, goal, tail-to-head joins) stays under the
/// threshold; the pass-through rate tracks the distance of the closest chain
/// point to the intermediate anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StitchMetrics {
    pub success_overall: f64,
    pub success_first_quartile: f64,
    pub success_last_quartile: f64,
    pub pass_through_overall: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ContinuousModel, GaussianMixtureModel};
    use crate::rng::{Purpose, RngFactory};

    #[test]
    fn tvd_trivial_cases() {
        let exact = vec![0.5, 0.5];
        // identical histograms
        let samples = vec![0.25, 0.25, 0.75, 0.75];
        assert!(tvd_histogram(&samples, None, &exact, 0.0, 1.0) < 1e-12);
        // disjoint supports
        let far = vec![10.0, 11.0, 12.0];
        assert!((tvd_histogram(&far, None, &exact, 0.0, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tvd_self_consistency_at_binning_floor() {
        let m = GaussianMixtureModel::default_bimodal();
        let exact = exact_bin_probs(|x| m.log_pt(&[x], 0.0).exp(), -4.0, 4.0, 64, 8);
        let mut rng = RngFactory::new(31).stream(0, 0, Purpose::Oracle);
        let samples: Vec<f64> = (0..100_000).map(|_| m.sample_pt(0.0, &mut rng)[0]).collect();
        let tvd = tvd_histogram(&samples, None, &exact, -4.0, 4.0);
        assert!(tvd < 0.02, "self-drawn TVD {tvd}");
    }

    #[test]
    fn w2_trivial_and_gaussian_shift() {
        let a = vec![0.3, -0.2, 1.4];
        assert_eq!(w2_1d(&a, &a), 0.0);
        assert!((w2_1d(&[0.0, 0.0], &[1.0, 1.0]) - 1.0).abs() < 1e-12);

        let mut rng = RngFactory::new(32).stream(0, 0, Purpose::Oracle);
        let n = 100_000;
        let mut std_norm = |shift: f64| -> Vec<f64> {
            use rand::Rng;
            (0..n)
                .map(|_| {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen();
                    shift
                        + (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect()
        };
        let a = std_norm(0.0);
        let b = std_norm(1.0);
        let d = w2_1d(&a, &b);
        assert!((d - 1.0).abs() < 0.02, "w2 {d}");
    }

    #[test]
    fn discrete_tvd_and_occupancy() {
        let exact = vec![
            (DiscreteState::new(vec![0]), 0.5),
            (DiscreteState::new(vec![1]), 0.5),
        ];
        let samples = vec![
            DiscreteState::new(vec![0]),
            DiscreteState::new(vec![0]),
            DiscreteState::new(vec![1]),
            DiscreteState::new(vec![1]),
        ];
        assert!(tvd_discrete(&samples, &exact) < 1e-12);
        let off = vec![DiscreteState::new(vec![2]); 4];
        assert!((tvd_discrete(&off, &exact) - 1.0).abs() < 1e-12);

        let (lo, hi) = mode_occupancy(&[-1.0, -0.5, 2.0, 3.0], 0.0);
        assert_eq!(lo, 0.5);
        assert_eq!(hi, 0.5);
    }
}
