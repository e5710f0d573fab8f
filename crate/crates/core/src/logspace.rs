//! Log-domain scalars and reductions.
//!
//! Every density, kernel, weight and acceptance ratio in this crate lives in
//! log domain end to end; exponentiation happens only at the final
//! accept/resample draw. Products of many per-step transition kernels
//! underflow otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which process a log Radon-Nikodym estimate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProcessTag {
    /// A pretrained/analytic diffusion model, index j in a multi-model task.
    Model(usize),
    /// The user-chosen proposal process Q.
    Proposal,
    /// The auxiliary analytic reference process.
    Reference,
}

/// A log-domain scalar holding log R over a path segment.
///
/// The value is finite unless the segment contains a zero-probability
/// transition, in which case it is `-inf` and flagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRne {
    pub value: f64,
    pub tag: ProcessTag,
}

impl LogRne {
    pub fn new(value: f64, tag: ProcessTag) -> Self {
        LogRne { value, tag }
    }

    /// True when the segment hit a zero-probability transition.
    pub fn is_zero_mass(&self) -> bool {
        self.value == f64::NEG_INFINITY
    }
}

/// Numerically stable log(sum(exp(v))) with max subtraction.
///
/// An all `-inf` input returns `-inf` (zero total mass), not NaN.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("logsumexp of empty list".into()));
    }
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = values.iter().map(|v| (v - m).exp()).sum();
    Ok(m + sum.ln())
}

/// log(exp(a) + exp(b)) for two values.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}
