//! Masking-CTMC simulation with Euler-discretised categorical kernels and
//! Radon-Nikodym estimates for discrete state spaces.
//!
//! Kernels are per-token (positions factorise within one Euler step). Two
//! kernel readings coexist deliberately:
//!
//! * the sampling kernel ([`euler_kernel_probs`]) floors every entry at
//!   `1e-8` and renormalises, which is what gets simulated and what proposal
//!   RNEs must evaluate for the accept ratio to use the actual proposal
//!   density;
//! * the exact kernel drops the floor (non-finite and negative entries
//!   clipped to zero, then renormalised). Model RNEs evaluate this one, and
//!   under the linear masking schedule the per-step kernel ratio then equals
//!   the exact marginal ratio, which is what enumeration-level detailed
//!   balance checks require.
//!
//! A transition with zero exact probability yields `-inf` in strict mode and
//! the floored log value otherwise.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logspace::{LogRne, ProcessTag};
use crate::path::{Direction, PathSegment};

/// Probability floor applied to sampling kernels.
pub const KERNEL_FLOOR: f64 = 1e-8;

/// Token array over a vocabulary of `V` indices; the mask token is the
/// distinguished index `V - 1` by convention of the models in this crate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiscreteState {
    pub tokens: Vec<u32>,
}

impl DiscreteState {
    pub fn new(tokens: Vec<u32>) -> Self {
        DiscreteState { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Forward masking schedule. The linear schedule `lambda(t) = 1/(1-t)`,
/// clipped at `t <= 1 - clip`, gives survival probability exactly `1 - t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub clip: f64,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        MaskSchedule { clip: 1e-4 }
    }
}

impl MaskSchedule {
    /// Per-token rate at which an unmasked token jumps to mask.
    pub fn rate(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidSchedule(format!(
                "masking rate queried outside [0,1]: t={t}"
            )));
        }
        let tc = t.min(1.0 - self.clip);
        Ok(1.0 / (1.0 - tc))
    }

    /// Marginal survival probability of an unmasked token at time `t`.
    pub fn survival(&self, t: f64) -> f64 {
        1.0 - t
    }
}

/// Spec [OP] masking_rate: rate at time `t` under the given schedule.
pub fn masking_rate(t: f64, schedule: &MaskSchedule) -> Result<f64> {
    schedule.rate(t)
}

/// How a kernel vector is read back as a density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelEval {
    /// Floored + renormalised, identical to the sampling distribution.
    Sampling,
    /// Unfloored; zero-probability transitions fall back to the floor or
    /// `-inf` depending on the strict flag.
    Exact,
}

pub type RateFn = Arc<dyn Fn(&[u32], usize, f64) -> Vec<f64> + Send + Sync>;

/// Per-token rate specification: off-diagonal jump rates out of the current
/// token at a position (the entry at the current token itself is ignored;
/// the diagonal is implied by the kernel construction).
#[derive(Clone)]
pub struct RateMatrixSpec {
    pub role: Direction,
    pub vocab: u32,
    pub rates: RateFn,
    pub eval: KernelEval,
}

impl RateMatrixSpec {
    /// Forward masking process over `vocab` tokens with mask index `vocab-1`.
    pub fn masking_forward(vocab: u32, schedule: MaskSchedule) -> Self {
        let mask = vocab - 1;
        RateMatrixSpec {
            role: Direction::Forward,
            vocab,
            rates: Arc::new(move |tokens: &[u32], pos: usize, t: f64| {
                let mut r = vec![0.0; vocab as usize];
                let cur = tokens[pos];
                if cur != mask {
                    r[mask as usize] = schedule.rate(t).unwrap_or(0.0);
                }
                r
            }),
            eval: KernelEval::Sampling,
        }
    }

    pub fn with_eval(mut self, eval: KernelEval) -> Self {
        self.eval = eval;
        self
    }

    fn raw_probs(&self, tokens: &[u32], pos: usize, t: f64, dt: f64) -> Vec<f64> {
        let v = self.vocab as usize;
        let cur = tokens[pos] as usize;
        let rates = (self.rates)(tokens, pos, t);
        debug_assert_eq!(rates.len(), v);
        let mut probs = vec![0.0; v];
        let mut off_sum = 0.0;
        for y in 0..v {
            if y == cur {
                continue;
            }
            let p = rates[y] * dt;
            let p = if p.is_finite() { p.max(0.0) } else { 0.0 };
            probs[y] = p;
            off_sum += p;
        }
        probs[cur] = (1.0 - off_sum).max(0.0);
        let total: f64 = probs.iter().sum();
        if total > 0.0 {
            for p in probs.iter_mut() {
                *p /= total;
            }
        } else {
            probs[cur] = 1.0;
        }
        probs
    }
}

/// The per-token Euler kernel used for simulation: `delta_{v,x} + rate dt`,
/// non-finite entries removed, everything floored at `1e-8`, renormalised.
pub fn euler_kernel_probs(
    x: &DiscreteState,
    pos: usize,
    t: f64,
    dt: f64,
    spec: &RateMatrixSpec,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidSchedule(format!("kernel needs dt > 0, got {dt}")));
    }
    let mut probs = spec.raw_probs(&x.tokens, pos, t, dt);
    for p in probs.iter_mut() {
        if !p.is_finite() || *p < KERNEL_FLOOR {
            *p = KERNEL_FLOOR;
        }
    }
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
    Ok(probs)
}

/// Log kernel probability of `x[pos] -> to_token` under the spec's eval mode.
fn log_kernel_prob(
    from: &DiscreteState,
    pos: usize,
    t: f64,
    dt: f64,
    to_token: u32,
    spec: &RateMatrixSpec,
    strict: bool,
) -> Result<f64> {
    let p = match spec.eval {
        KernelEval::Sampling => euler_kernel_probs(from, pos, t, dt, spec)?[to_token as usize],
        KernelEval::Exact => spec.raw_probs(&from.tokens, pos, t, dt)[to_token as usize],
    };
    if p > 0.0 {
        Ok(p.ln())
    } else if strict {
        Ok(f64::NEG_INFINITY)
    } else {
        Ok(KERNEL_FLOOR.ln())
    }
}

/// One Euler step: every token position sampled independently from its
/// kernel. Forward steps move `t -> t + dt`, backward `t -> t - dt`; the
/// kernel is always evaluated at the current `(x, t)`.
pub fn ctmc_step(
    x: &DiscreteState,
    t: f64,
    dt: f64,
    spec: &RateMatrixSpec,
    rng: &mut ChaCha8Rng,
) -> Result<DiscreteState> {
    let mut tokens = x.tokens.clone();
    for pos in 0..x.len() {
        let probs = euler_kernel_probs(x, pos, t, dt, spec)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = probs.len() - 1;
        for (y, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = y;
                break;
            }
        }
        tokens[pos] = chosen as u32;
    }
    Ok(DiscreteState::new(tokens))
}

/// Simulate a K-step segment along ascending `times`; forward starts at
/// `times[0]`, backward at the last entry. Stored ascending either way.
pub fn simulate_segment_ctmc(
    x0: &DiscreteState,
    times: &[f64],
    spec: &RateMatrixSpec,
    rng: &mut ChaCha8Rng,
) -> Result<PathSegment<DiscreteState>> {
    if times.len() < 2 {
        return Err(Error::ShapeMismatch("segment needs at least 2 times".into()));
    }
    let k = times.len() - 1;
    let mut states: Vec<DiscreteState> = Vec::with_capacity(times.len());
    match spec.role {
        Direction::Forward => {
            states.push(x0.clone());
            for i in 0..k {
                let dt = times[i + 1] - times[i];
                let next = ctmc_step(&states[i], times[i], dt, spec, rng)?;
                states.push(next);
            }
        }
        Direction::Backward => {
            states.push(x0.clone());
            for i in (0..k).rev() {
                let dt = times[i + 1] - times[i];
                let cur = states.last().unwrap().clone();
                let next = ctmc_step(&cur, times[i + 1], dt, spec, rng)?;
                states.push(next);
            }
            states.reverse();
        }
    }
    PathSegment::new(times.to_vec(), states, spec.role)
}

/// Categorical-kernel Radon-Nikodym estimate over a token path:
/// `sum_k log B(x_k | x_{k+1}) - sum_k log F(x_{k+1} | x_k)`, summed over
/// positions. `-inf` when a required transition has zero probability and
/// `strict` is set.
pub fn rne_discrete_ctmc(
    path: &PathSegment<DiscreteState>,
    fwd: &RateMatrixSpec,
    bwd: &RateMatrixSpec,
    strict: bool,
    tag: ProcessTag,
) -> Result<LogRne> {
    debug_assert!(matches!(fwd.role, Direction::Forward));
    debug_assert!(matches!(bwd.role, Direction::Backward));
    let mut log_r = 0.0;
    for k in 0..path.num_steps() {
        let (t0, t1) = (path.times[k], path.times[k + 1]);
        let dt = t1 - t0;
        let (x0, x1) = (&path.states[k], &path.states[k + 1]);
        if x0.len() != x1.len() {
            return Err(Error::ShapeMismatch("token counts differ along path".into()));
        }
        for pos in 0..x0.len() {
            let b = log_kernel_prob(x1, pos, t1, dt, x0.tokens[pos], bwd, strict)?;
            if b == f64::NEG_INFINITY {
                // zero backward mass: the estimate itself is zero
                return Ok(LogRne::new(f64::NEG_INFINITY, tag));
            }
            let f = log_kernel_prob(x0, pos, t0, dt, x1.tokens[pos], fwd, strict)?;
            if f == f64::NEG_INFINITY {
                // zero forward mass: the ratio diverges; callers treat any
                // non-finite estimate as a forced rejection
                return Ok(LogRne::new(f64::INFINITY, tag));
            }
            log_r += b - f;
        }
    }
    Ok(LogRne::new(log_r, tag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, RngFactory};

    fn masking(vocab: u32) -> RateMatrixSpec {
        RateMatrixSpec::masking_forward(vocab, MaskSchedule::default())
    }

    #[test]
    fn linear_schedule_rate_at_zero() {
        assert_eq!(masking_rate(0.0, &MaskSchedule::default()).unwrap(), 1.0);
        assert!(masking_rate(-0.1, &MaskSchedule::default()).is_err());
        assert!(masking_rate(1.1, &MaskSchedule::default()).is_err());
    }

    /// Survival probability of the linear schedule integrates to 1 - t.
    #[test]
    fn survival_ode_oracle() {
        let sch = MaskSchedule::default();
        let mut s = 1.0;
        let n = 200_000;
        let t_end = 0.7;
        let h = t_end / n as f64;
        for i in 0..n {
            // RK4 on dS/dt = -lambda(t) S
            let t = i as f64 * h;
            let f = |t: f64, s: f64| -sch.rate(t).unwrap() * s;
            let k1 = f(t, s);
            let k2 = f(t + 0.5 * h, s + 0.5 * h * k1);
            let k3 = f(t + 0.5 * h, s + 0.5 * h * k2);
            let k4 = f(t + h, s + h * k3);
            s += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!((s - sch.survival(t_end)).abs() < 1e-6, "survival {s}");
    }

    #[test]
    fn mask_token_is_absorbing() {
        let spec = masking(4);
        let x = DiscreteState::new(vec![3]);
        let r = (spec.rates)(&x.tokens, 0, 0.5);
        assert!(r.iter().all(|&v| v == 0.0));
        let probs = euler_kernel_probs(&x, 0, 0.5, 0.01, &spec).unwrap();
        assert!(probs[3] > 1.0 - 3.0 * KERNEL_FLOOR);
    }

    #[test]
    fn near_one_full_masking() {
        // at t = 1 the survival probability vanishes and the rate saturates
        // at the clip value
        let sch = MaskSchedule::default();
        assert!(sch.survival(1.0).abs() < 1e-12);
        let lam = sch.rate(1.0).unwrap();
        assert!((lam * sch.clip - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_rates_give_one_hot_after_floor() {
        let spec = RateMatrixSpec {
            role: Direction::Forward,
            vocab: 4,
            rates: Arc::new(|_, _, _| vec![0.0; 4]),
            eval: KernelEval::Sampling,
        };
        let x = DiscreteState::new(vec![1]);
        let probs = euler_kernel_probs(&x, 0, 0.3, 0.05, &spec).unwrap();
        assert!(probs[1] >= 1.0 - 3.0 * KERNEL_FLOOR);
        for (y, p) in probs.iter().enumerate() {
            if y != 1 {
                assert!((*p - KERNEL_FLOOR).abs() < 1e-12);
            }
        }
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_masking_kernel_shares() {
        // lambda dt = 0.1: self ~ 0.9/Z, mask ~ 0.1/Z, others floored
        let spec = masking(4);
        let x = DiscreteState::new(vec![0]);
        let t = 0.0; // rate 1
        let probs = euler_kernel_probs(&x, 0, t, 0.1, &spec).unwrap();
        let z = 1.0 + 2.0 * KERNEL_FLOOR;
        assert!((probs[0] - 0.9 / z).abs() < 1e-9);
        assert!((probs[3] - 0.1 / z).abs() < 1e-9);
        assert!((probs[1] - KERNEL_FLOOR / z).abs() < 1e-12);
    }

    #[test]
    fn kernel_rows_sum_to_one() {
        let spec = masking(5);
        let x = DiscreteState::new(vec![2, 4]);
        for pos in 0..2 {
            for &dt in &[1e-3, 0.05, 0.4] {
                let probs = euler_kernel_probs(&x, pos, 0.4, dt, &spec).unwrap();
                let sum: f64 = probs.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn step_keeps_state_under_zero_rates() {
        let spec = RateMatrixSpec {
            role: Direction::Forward,
            vocab: 4,
            rates: Arc::new(|_, _, _| vec![0.0; 4]),
            eval: KernelEval::Sampling,
        };
        let x = DiscreteState::new(vec![0, 1, 2]);
        let mut rng = RngFactory::new(3).stream(0, 0, Purpose::Oracle);
        for _ in 0..200 {
            let y = ctmc_step(&x, 0.2, 0.01, &spec, &mut rng).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn fully_masked_state_is_fixed_forward() {
        let spec = masking(4);
        let x = DiscreteState::new(vec![3, 3]);
        let mut rng = RngFactory::new(4).stream(0, 0, Purpose::Oracle);
        for _ in 0..200 {
            let y = ctmc_step(&x, 0.5, 0.05, &spec, &mut rng).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn one_step_empirical_distribution_matches_kernel() {
        let spec = masking(4);
        let x = DiscreteState::new(vec![1]);
        let (t, dt) = (0.3, 0.2);
        let probs = euler_kernel_probs(&x, 0, t, dt, &spec).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 4];
        let mut rng = RngFactory::new(5).stream(0, 0, Purpose::Oracle);
        for _ in 0..n {
            let y = ctmc_step(&x, t, dt, &spec, &mut rng).unwrap();
            counts[y.tokens[0] as usize] += 1;
        }
        for y in 0..4 {
            let freq = counts[y] as f64 / n as f64;
            let sd = (probs[y] * (1.0 - probs[y]) / n as f64).sqrt();
            assert!(
                (freq - probs[y]).abs() <= 3.0 * sd + 1e-9,
                "token {y}: freq {freq} vs p {}",
                probs[y]
            );
        }
    }

    #[test]
    fn rne_single_state_path_is_zero() {
        let fwd = masking(4);
        let bwd = RateMatrixSpec {
            role: Direction::Backward,
            ..masking(4)
        };
        let path = PathSegment::new(
            vec![0.5],
            vec![DiscreteState::new(vec![1])],
            Direction::Forward,
        )
        .unwrap();
        let r = rne_discrete_ctmc(&path, &fwd, &bwd, false, ProcessTag::Proposal).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn rne_vanishes_for_symmetric_uniform_chain() {
        // identical time-independent uniform rates forward and backward
        let uniform = |role: Direction| RateMatrixSpec {
            role,
            vocab: 4,
            rates: Arc::new(|tokens: &[u32], pos, _t| {
                let mut r = vec![0.3; 4];
                r[tokens[pos] as usize] = 0.0;
                r
            }),
            eval: KernelEval::Sampling,
        };
        let fwd = uniform(Direction::Forward);
        let bwd = uniform(Direction::Backward);
        let mut rng = RngFactory::new(6).stream(0, 0, Purpose::Oracle);
        let times: Vec<f64> = (0..=5).map(|i| 0.2 + 0.05 * i as f64).collect();
        let x0 = DiscreteState::new(vec![0, 2]);
        let path = simulate_segment_ctmc(&x0, &times, &fwd, &mut rng).unwrap();
        let r = rne_discrete_ctmc(&path, &fwd, &bwd, false, ProcessTag::Proposal).unwrap();
        assert!(r.value.abs() < 1e-12, "log R = {}", r.value);
    }

    #[test]
    fn strict_mode_flags_impossible_transitions() {
        let fwd = masking(4).with_eval(KernelEval::Exact);
        let bwd = RateMatrixSpec {
            role: Direction::Backward,
            ..masking(4).with_eval(KernelEval::Exact)
        };
        // masking rates run both ways here, so a 0 -> 3 jump has forward mass
        // but zero backward mass (the bwd spec cannot leave token 3)
        let path = PathSegment::new(
            vec![0.4, 0.5],
            vec![DiscreteState::new(vec![0]), DiscreteState::new(vec![3])],
            Direction::Forward,
        )
        .unwrap();
        let strict = rne_discrete_ctmc(&path, &fwd, &bwd, true, ProcessTag::Proposal).unwrap();
        assert!(strict.is_zero_mass());
        let lax = rne_discrete_ctmc(&path, &fwd, &bwd, false, ProcessTag::Proposal).unwrap();
        assert!(lax.value.is_finite());

        // the mirrored path has zero forward mass: the ratio diverges and is
        // flagged non-finite for the caller to reject on
        let path = PathSegment::new(
            vec![0.4, 0.5],
            vec![DiscreteState::new(vec![3]), DiscreteState::new(vec![0])],
            Direction::Forward,
        )
        .unwrap();
        let strict = rne_discrete_ctmc(&path, &fwd, &bwd, true, ProcessTag::Proposal).unwrap();
        assert_eq!(strict.value, f64::INFINITY);
    }
}
