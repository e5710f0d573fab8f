//! Euler–Maruyama simulation, Gaussian transition-kernel log-densities and
//! discrete-product Radon-Nikodym estimates for SDE-type processes.
//!
//! Conventions, shared by simulation and density evaluation: forward kernels
//! evaluate drift and noise at the earlier endpoint of a sub-step, backward
//! kernels at the later endpoint. The acceptance ratio is exact only under a
//! single convention used everywhere.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logspace::{LogRne, ProcessTag};
use crate::path::{Direction, PathSegment};

const LN_2PI: f64 = 1.8378770664093453;

/// Isotropic diffusion coefficient schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SigmaSchedule {
    /// EDM variance-exploding noise, `sigma_t = sqrt(2 t)`.
    EdmVe,
    /// Constant coefficient.
    Const(f64),
}

impl SigmaSchedule {
    pub fn sigma(&self, t: f64) -> f64 {
        match self {
            SigmaSchedule::EdmVe => (2.0 * t).sqrt(),
            SigmaSchedule::Const(c) => *c,
        }
    }

    pub fn sigma2(&self, t: f64) -> f64 {
        match self {
            SigmaSchedule::EdmVe => 2.0 * t,
            SigmaSchedule::Const(c) => c * c,
        }
    }

    /// Accumulated noise variance `int_a^b sigma_s^2 ds`.
    pub fn int_sigma2(&self, a: f64, b: f64) -> f64 {
        match self {
            SigmaSchedule::EdmVe => b * b - a * a,
            SigmaSchedule::Const(c) => c * c * (b - a),
        }
    }
}

pub type DriftFn = Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;

/// A forward- or backward-direction SDE with state-dependent drift and
/// isotropic diffusion coefficient.
#[derive(Clone)]
pub struct SdeProcess {
    pub drift: DriftFn,
    pub sigma: SigmaSchedule,
    pub direction: Direction,
}

impl SdeProcess {
    pub fn forward(drift: DriftFn, sigma: SigmaSchedule) -> Self {
        SdeProcess {
            drift,
            sigma,
            direction: Direction::Forward,
        }
    }

    pub fn backward(drift: DriftFn, sigma: SigmaSchedule) -> Self {
        SdeProcess {
            drift,
            sigma,
            direction: Direction::Backward,
        }
    }

    pub fn driftless(sigma: SigmaSchedule, direction: Direction) -> Self {
        SdeProcess {
            drift: Arc::new(|x: &[f64], _t| vec![0.0; x.len()]),
            sigma,
            direction,
        }
    }
}

fn draw_standard_normal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    // Box-Muller; two uniforms per normal keeps the draw count deterministic.
    (0..dim)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

/// One Euler–Maruyama step with externally supplied noise.
///
/// Forward processes step from `t` to `t + dt`, backward from `t` to `t - dt`;
/// drift and noise are evaluated at `(x, t)` in both cases.
pub fn em_step_with_noise(
    x: &[f64],
    t: f64,
    dt: f64,
    proc: &SdeProcess,
    eps: &[f64],
) -> Result<Vec<f64>> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("em_step input at t={t}"),
        });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidSchedule(format!("em step needs dt > 0, got {dt}")));
    }
    let drift = (proc.drift)(x, t);
    let scale = proc.sigma.sigma(t) * dt.sqrt();
    let sign = match proc.direction {
        Direction::Forward => 1.0,
        Direction::Backward => -1.0,
    };
    Ok(x.iter()
        .zip(drift.iter())
        .zip(eps.iter())
        .map(|((xi, di), ei)| xi + sign * di * dt + scale * ei)
        .collect())
}

/// One Euler–Maruyama step drawing the noise from `rng`.
pub fn em_step(
    x: &[f64],
    t: f64,
    dt: f64,
    proc: &SdeProcess,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let eps = draw_standard_normal(rng, x.len());
    em_step_with_noise(x, t, dt, proc, &eps)
}

/// Log-density of the EM transition kernel for moving `x_from -> x_to` over a
/// sub-step of width `dt`, with drift and noise evaluated at `(x_from, t_eval)`.
pub fn log_kernel(
    x_to: &[f64],
    x_from: &[f64],
    t_eval: f64,
    dt: f64,
    proc: &SdeProcess,
) -> Result<f64> {
    if x_to.len() != x_from.len() {
        return Err(Error::ShapeMismatch(format!(
            "kernel endpoints of dim {} vs {}",
            x_to.len(),
            x_from.len()
        )));
    }
    let var = proc.sigma.sigma2(t_eval) * dt;
    if !(var > 0.0) {
        return Err(Error::DegenerateKernel(format!(
            "sigma^2 dt = {var} at t={t_eval}"
        )));
    }
    let drift = (proc.drift)(x_from, t_eval);
    let sign = match proc.direction {
        Direction::Forward => 1.0,
        Direction::Backward => -1.0,
    };
    let d = x_to.len() as f64;
    let mut quad = 0.0;
    for i in 0..x_to.len() {
        let mean = x_from[i] + sign * drift[i] * dt;
        let r = x_to[i] - mean;
        quad += r * r;
    }
    Ok(-0.5 * d * (LN_2PI + var.ln()) - 0.5 * quad / var)
}

/// Simulate a K-step segment along `times` (ascending). Forward direction
/// starts at `times[0]`, backward at the last time; the returned path is
/// stored ascending either way.
pub fn simulate_segment(
    x0: &[f64],
    times: &[f64],
    proc: &SdeProcess,
    rng: &mut ChaCha8Rng,
) -> Result<PathSegment<Vec<f64>>> {
    if times.len() < 2 {
        return Err(Error::ShapeMismatch("segment needs at least 2 times".into()));
    }
    let k = times.len() - 1;
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(times.len());
    match proc.direction {
        Direction::Forward => {
            states.push(x0.to_vec());
            for i in 0..k {
                let dt = times[i + 1] - times[i];
                let next = em_step(&states[i], times[i], dt, proc, rng)?;
                states.push(next);
            }
        }
        Direction::Backward => {
            states.push(x0.to_vec());
            for i in (0..k).rev() {
                let dt = times[i + 1] - times[i];
                let cur = states.last().unwrap().clone();
                let next = em_step(&cur, times[i + 1], dt, proc, rng)?;
                states.push(next);
            }
            states.reverse();
        }
    }
    PathSegment::new(times.to_vec(), states, proc.direction)
}

/// Discrete-kernel Radon-Nikodym estimate over a path:
/// `sum_k log B(x_k | x_{k+1}) - sum_k log F(x_{k+1} | x_k)`,
/// backward drifts at the later endpoint, forward drifts at the earlier one.
pub fn rne_discrete(
    path: &PathSegment<Vec<f64>>,
    fwd: &SdeProcess,
    bwd: &SdeProcess,
    tag: ProcessTag,
) -> Result<LogRne> {
    debug_assert!(matches!(fwd.direction, Direction::Forward));
    debug_assert!(matches!(bwd.direction, Direction::Backward));
    let mut log_r = 0.0;
    for k in 0..path.num_steps() {
        let (t0, t1) = (path.times[k], path.times[k + 1]);
        let dt = t1 - t0;
        let (x0, x1) = (&path.states[k], &path.states[k + 1]);
        log_r += log_kernel(x0, x1, t1, dt, bwd)?;
        log_r -= log_kernel(x1, x0, t0, dt, fwd)?;
    }
    Ok(LogRne::new(log_r, tag))
}

/// Path-integral form of the estimate (discretised Ito integrals):
/// backward integral with right-endpoint drift values, forward integral with
/// left-endpoint values, energy term as a left Riemann sum.
pub fn rne_path_integral(
    path: &PathSegment<Vec<f64>>,
    mu: &DriftFn,
    nu: &DriftFn,
    sigma: &SigmaSchedule,
    tag: ProcessTag,
) -> Result<LogRne> {
    let mut log_r = 0.0;
    for k in 0..path.num_steps() {
        let (t0, t1) = (path.times[k], path.times[k + 1]);
        let dt = t1 - t0;
        let (x0, x1) = (&path.states[k], &path.states[k + 1]);
        let s2_left = sigma.sigma2(t0);
        let s2_right = sigma.sigma2(t1);
        if !(s2_left > 0.0) || !(s2_right > 0.0) {
            return Err(Error::DegenerateKernel(format!(
                "sigma^2 vanishes on [{t0}, {t1}]"
            )));
        }
        let mu_left = mu(x0, t0);
        let nu_left = nu(x0, t0);
        let nu_right = nu(x1, t1);
        let mut bwd_ito = 0.0;
        let mut fwd_ito = 0.0;
        let mut energy = 0.0;
        for i in 0..x0.len() {
            let dx = x1[i] - x0[i];
            bwd_ito += nu_right[i] * dx;
            fwd_ito += mu_left[i] * dx;
            energy += mu_left[i] * mu_left[i] - nu_left[i] * nu_left[i];
        }
        log_r += bwd_ito / s2_right - fwd_ito / s2_left + 0.5 * energy / s2_left * dt;
    }
    Ok(LogRne::new(log_r, tag))
}

/// Affine forward drift, the family closed under Gaussian propagation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AffineForward {
    Zero,
    /// `f(x) = rate * x` with constant rate.
    Linear { rate: f64 },
}

/// An analytic Gaussian reference diffusion.
///
/// `gamma_0` is Gaussian, so every `gamma_t` stays Gaussian with moments
/// propagated in closed form under the affine forward drift; its backward
/// drift is `h_t = f_t - sigma_t^2 grad log gamma_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceProcess {
    pub mean0: Vec<f64>,
    pub var0: f64,
    pub t0: f64,
    pub forward: AffineForward,
    pub sigma: SigmaSchedule,
}

impl ReferenceProcess {
    pub fn new(
        mean0: Vec<f64>,
        var0: f64,
        t0: f64,
        forward: AffineForward,
        sigma: SigmaSchedule,
    ) -> Result<Self> {
        if !(var0 > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "reference variance must be positive, got {var0}"
            )));
        }
        Ok(ReferenceProcess {
            mean0,
            var0,
            t0,
            forward,
            sigma,
        })
    }

    /// Exact `(mean_t, var_t)` from the moment ODEs
    /// `m' = a m`, `v' = 2 a v + sigma_t^2`.
    pub fn moments(&self, t: f64) -> (Vec<f64>, f64) {
        match self.forward {
            AffineForward::Zero => {
                let v = self.var0 + self.sigma.int_sigma2(self.t0, t);
                (self.mean0.clone(), v)
            }
            AffineForward::Linear { rate } => {
                let e = (rate * (t - self.t0)).exp();
                let mean = self.mean0.iter().map(|m| m * e).collect();
                let v = match self.sigma {
                    SigmaSchedule::Const(c) => {
                        let s2 = c * c;
                        if rate == 0.0 {
                            self.var0 + s2 * (t - self.t0)
                        } else {
                            (self.var0 + s2 / (2.0 * rate)) * e * e - s2 / (2.0 * rate)
                        }
                    }
                    SigmaSchedule::EdmVe => {
                        // v' = 2 a v + 2 t, particular solution -t/a - 1/(2 a^2)
                        let a = rate;
                        if a == 0.0 {
                            self.var0 + t * t - self.t0 * self.t0
                        } else {
                            let vp = |s: f64| -s / a - 1.0 / (2.0 * a * a);
                            (self.var0 - vp(self.t0)) * (2.0 * a * (t - self.t0)).exp() + vp(t)
                        }
                    }
                };
                (mean, v)
            }
        }
    }

    pub fn log_density(&self, x: &[f64], t: f64) -> f64 {
        let (mean, v) = self.moments(t);
        let d = x.len() as f64;
        let mut quad = 0.0;
        for i in 0..x.len() {
            let r = x[i] - mean[i];
            quad += r * r;
        }
        -0.5 * d * (LN_2PI + v.ln()) - 0.5 * quad / v
    }

    pub fn forward_drift(&self) -> DriftFn {
        match self.forward {
            AffineForward::Zero => Arc::new(|x: &[f64], _t| vec![0.0; x.len()]),
            AffineForward::Linear { rate } => {
                Arc::new(move |x: &[f64], _t| x.iter().map(|v| rate * v).collect())
            }
        }
    }

    /// Backward drift `h_t(x) = f(x) - sigma_t^2 grad log gamma_t(x)`.
    pub fn backward_drift(&self) -> DriftFn {
        let me = self.clone();
        Arc::new(move |x: &[f64], t: f64| {
            let (mean, v) = me.moments(t);
            let s2 = me.sigma.sigma2(t);
            let a = match me.forward {
                AffineForward::Zero => 0.0,
                AffineForward::Linear { rate } => rate,
            };
            x.iter()
                .zip(mean.iter())
                .map(|(xi, mi)| a * xi + s2 * (xi - mi) / v)
                .collect()
        })
    }

    pub fn forward_process(&self) -> SdeProcess {
        SdeProcess::forward(self.forward_drift(), self.sigma)
    }

    pub fn backward_process(&self) -> SdeProcess {
        SdeProcess::backward(self.backward_drift(), self.sigma)
    }
}

/// Reference-stabilised estimate: forward/backward kernel ratios are taken
/// against the reference's kernels, and the reference's own product collapses
/// to the exact marginal ratio `log gamma_t - log gamma_t'`. Kernel ratios
/// cancel pairwise when the argument processes coincide with the reference's.
pub fn rne_stabilized(
    path: &PathSegment<Vec<f64>>,
    fwd: &SdeProcess,
    bwd: &SdeProcess,
    reference: &ReferenceProcess,
    tag: ProcessTag,
) -> Result<LogRne> {
    let ref_fwd = reference.forward_process();
    let ref_bwd = reference.backward_process();
    let mut log_r = 0.0;
    for k in 0..path.num_steps() {
        let (t0, t1) = (path.times[k], path.times[k + 1]);
        let dt = t1 - t0;
        let (x0, x1) = (&path.states[k], &path.states[k + 1]);
        log_r += log_kernel(x0, x1, t1, dt, bwd)? - log_kernel(x0, x1, t1, dt, &ref_bwd)?;
        log_r += log_kernel(x1, x0, t0, dt, &ref_fwd)? - log_kernel(x1, x0, t0, dt, fwd)?;
    }
    log_r += reference.log_density(path.first(), path.times[0])
        - reference.log_density(path.last(), *path.times.last().unwrap());
    Ok(LogRne::new(log_r, tag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, RngFactory};

    fn fac() -> RngFactory {
        RngFactory::new(7)
    }

    #[test]
    fn em_step_zero_drift_zero_noise() {
        let proc = SdeProcess::forward(
            Arc::new(|x: &[f64], _| vec![0.0; x.len()]),
            SigmaSchedule::Const(1.0),
        );
        let out = em_step_with_noise(&[0.0], 0.3, 0.01, &proc, &[0.0]).unwrap();
        assert_eq!(out, vec![0.0]);
    }

    #[test]
    fn em_step_forward_linear_drift() {
        let proc = SdeProcess::forward(
            Arc::new(|x: &[f64], _| x.iter().map(|v| -v).collect()),
            SigmaSchedule::Const(0.0),
        );
        let out = em_step_with_noise(&[1.0], 0.5, 0.1, &proc, &[0.0]).unwrap();
        assert!((out[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn em_step_backward_with_unit_noise() {
        let proc = SdeProcess::backward(
            Arc::new(|x: &[f64], _| vec![0.0; x.len()]),
            SigmaSchedule::Const(2.0),
        );
        let out = em_step_with_noise(&[1.0], 0.5, 0.25, &proc, &[1.0]).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn em_step_rejects_non_finite_input() {
        let proc = SdeProcess::driftless(SigmaSchedule::Const(1.0), Direction::Forward);
        assert!(em_step_with_noise(&[f64::NAN], 0.1, 0.1, &proc, &[0.0]).is_err());
    }

    #[test]
    fn log_kernel_at_mode_is_unit_gaussian_peak() {
        // sigma^2 dt = 1 with sigma = 2, dt = 0.25
        let proc = SdeProcess::forward(
            Arc::new(|x: &[f64], _| x.iter().map(|v| -v).collect()),
            SigmaSchedule::Const(2.0),
        );
        let x_from = [0.7];
        let drift = -0.7 * 0.25;
        let x_to = [0.7 + drift];
        let v = log_kernel(&x_to, &x_from, 0.4, 0.25, &proc).unwrap();
        assert!((v - (-0.5 * LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn log_kernel_symmetric_without_drift() {
        let proc = SdeProcess::driftless(SigmaSchedule::Const(1.3), Direction::Forward);
        let a = [0.2, -0.4];
        let b = [1.1, 0.3];
        let ab = log_kernel(&a, &b, 0.5, 0.2, &proc).unwrap();
        let ba = log_kernel(&b, &a, 0.5, 0.2, &proc).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn log_kernel_dim2_against_quadratic_form_oracle() {
        let proc = SdeProcess::forward(
            Arc::new(|x: &[f64], _| x.iter().map(|v| -v).collect()),
            SigmaSchedule::Const(1.0),
        );
        let (dt, t) = (0.1, 0.8);
        let x_from = [0.5, -1.2];
        let x_to = [0.61, -1.0];
        let got = log_kernel(&x_to, &x_from, t, dt, &proc).unwrap();
        // independent evaluation of the 2-d isotropic Gaussian density
        let var: f64 = 1.0 * dt;
        let mean = [x_from[0] - x_from[0] * dt, x_from[1] - x_from[1] * dt];
        let quad = (x_to[0] - mean[0]).powi(2) + (x_to[1] - mean[1]).powi(2);
        let expected = -(LN_2PI + var.ln()) - 0.5 * quad / var;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn log_kernel_degenerate_sigma_errors() {
        let proc = SdeProcess::driftless(SigmaSchedule::Const(0.0), Direction::Forward);
        assert!(matches!(
            log_kernel(&[0.0], &[0.0], 0.5, 0.1, &proc),
            Err(Error::DegenerateKernel(_))
        ));
    }

    #[test]
    fn rne_single_state_path_is_zero() {
        let fwd = SdeProcess::driftless(SigmaSchedule::Const(1.0), Direction::Forward);
        let bwd = SdeProcess::driftless(SigmaSchedule::Const(1.0), Direction::Backward);
        let path = PathSegment::new(vec![0.5], vec![vec![1.0]], Direction::Forward).unwrap();
        let r = rne_discrete(&path, &fwd, &bwd, ProcessTag::Proposal).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn rne_driftless_equal_sigma_is_zero_for_any_path() {
        let fwd = SdeProcess::driftless(SigmaSchedule::Const(1.4), Direction::Forward);
        let bwd = SdeProcess::driftless(SigmaSchedule::Const(1.4), Direction::Backward);
        let mut rng = fac().stream(0, 0, Purpose::Oracle);
        let path = simulate_segment(&[0.3, -0.2], &[0.2, 0.3, 0.4, 0.5], &fwd, &mut rng).unwrap();
        let r = rne_discrete(&path, &fwd, &bwd, ProcessTag::Proposal).unwrap();
        assert!(r.value.abs() < 1e-12);
    }

    #[test]
    fn rne_telescopes_over_interval_split() {
        let reference = ReferenceProcess::new(
            vec![0.0],
            1.0,
            0.0,
            AffineForward::Zero,
            SigmaSchedule::EdmVe,
        )
        .unwrap();
        let fwd = reference.forward_process();
        let bwd = reference.backward_process();
        let mut rng = fac().stream(0, 1, Purpose::Oracle);
        let times: Vec<f64> = (0..=8).map(|i| 0.2 + 0.05 * i as f64).collect();
        let path = simulate_segment(&[0.4], &times, &fwd, &mut rng).unwrap();
        let whole = rne_discrete(&path, &fwd, &bwd, ProcessTag::Reference)
            .unwrap()
            .value;
        let split = 5;
        let left = PathSegment::new(
            path.times[..=split].to_vec(),
            path.states[..=split].to_vec(),
            Direction::Forward,
        )
        .unwrap();
        let right = PathSegment::new(
            path.times[split..].to_vec(),
            path.states[split..].to_vec(),
            Direction::Forward,
        )
        .unwrap();
        let sum = rne_discrete(&left, &fwd, &bwd, ProcessTag::Reference)
            .unwrap()
            .value
            + rne_discrete(&right, &fwd, &bwd, ProcessTag::Reference)
                .unwrap()
                .value;
        assert!((whole - sum).abs() < 1e-12 * path.num_steps() as f64 + 1e-12);
    }

    /// Convergence of the reference identity on 2-step paths: halving dt
    /// shrinks the mean absolute error by at least 1.5x.
    #[test]
    fn reference_identity_error_halves_with_dt() {
        let reference = ReferenceProcess::new(
            vec![0.0],
            1.0,
            0.0,
            AffineForward::Zero,
            SigmaSchedule::EdmVe,
        )
        .unwrap();
        let fwd = reference.forward_process();
        let bwd = reference.backward_process();
        let f = fac();
        let mean_err = |dt: f64, stream: u64| {
            let mut total = 0.0;
            let n = 10_000;
            let mut rng = f.stream(stream, 0, Purpose::Oracle);
            for _ in 0..n {
                let t0 = 0.5;
                let times = [t0, t0 + dt, t0 + 2.0 * dt];
                let (mean, var) = reference.moments(t0);
                let x0 = {
                    let e = draw_standard_normal(&mut rng, 1);
                    vec![mean[0] + var.sqrt() * e[0]]
                };
                let path = simulate_segment(&x0, &times, &fwd, &mut rng).unwrap();
                let r = rne_discrete(&path, &fwd, &bwd, ProcessTag::Reference)
                    .unwrap()
                    .value;
                let ident = r + reference.log_density(path.last(), times[2])
                    - reference.log_density(path.first(), times[0]);
                total += ident.abs();
            }
            total / n as f64
        };
        let coarse = mean_err(2e-3, 1);
        let fine = mean_err(1e-3, 2);
        assert!(
            coarse / fine >= 1.5,
            "convergence ratio {:.3} (coarse {:.3e}, fine {:.3e})",
            coarse / fine,
            coarse,
            fine
        );
    }

    #[test]
    fn path_integral_zero_drifts_is_zero() {
        let zero: DriftFn = Arc::new(|x: &[f64], _| vec![0.0; x.len()]);
        let path = PathSegment::new(
            vec![0.2, 0.3, 0.4],
            vec![vec![0.1], vec![0.5], vec![-0.2]],
            Direction::Forward,
        )
        .unwrap();
        let r = rne_path_integral(&path, &zero, &zero, &SigmaSchedule::Const(1.0), ProcessTag::Proposal)
            .unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn path_integral_equal_constant_drifts_is_order_dt() {
        let c: DriftFn = Arc::new(|x: &[f64], _| vec![0.7; x.len()]);
        let mut rng = fac().stream(1, 1, Purpose::Oracle);
        let dt = 1e-3;
        let times: Vec<f64> = (0..=50).map(|i| 0.4 + dt * i as f64).collect();
        let proc = SdeProcess::forward(c.clone(), SigmaSchedule::Const(1.0));
        let path = simulate_segment(&[0.0], &times, &proc, &mut rng).unwrap();
        let r = rne_path_integral(&path, &c, &c, &SigmaSchedule::Const(1.0), ProcessTag::Proposal)
            .unwrap();
        // equal drifts telescope up to endpoint-evaluation differences
        assert!(r.value.abs() < 5.0 * dt * times.len() as f64);
    }

    /// The discrete-kernel estimate is the oracle: the Ito-sum form agrees to
    /// O(dt) for drift-bounded constant-sigma processes, so halving dt
    /// roughly halves the gap.
    #[test]
    fn path_integral_agrees_with_kernel_form_as_dt_shrinks() {
        let reference = ReferenceProcess::new(
            vec![0.0],
            0.8,
            0.0,
            AffineForward::Linear { rate: -0.5 },
            SigmaSchedule::Const(1.0),
        )
        .unwrap();
        let mu: DriftFn = reference.forward_drift();
        let nu: DriftFn = reference.backward_drift();
        let fwd = reference.forward_process();
        let bwd = reference.backward_process();
        let f = fac();
        let mean_gap = |dt: f64, stream: u64| {
            let n = 2000;
            let steps = (0.2 / dt).round() as usize;
            let mut total = 0.0;
            let mut rng = f.stream(stream, 3, Purpose::Oracle);
            for _ in 0..n {
                let times: Vec<f64> = (0..=steps).map(|i| 0.5 + dt * i as f64).collect();
                let path = simulate_segment(&[0.6], &times, &fwd, &mut rng).unwrap();
                let a = rne_discrete(&path, &fwd, &bwd, ProcessTag::Proposal)
                    .unwrap()
                    .value;
                let b = rne_path_integral(
                    &path,
                    &mu,
                    &nu,
                    &SigmaSchedule::Const(1.0),
                    ProcessTag::Proposal,
                )
                .unwrap()
                .value;
                total += (a - b).abs();
            }
            total / n as f64
        };
        let coarse = mean_gap(4e-3, 4);
        let fine = mean_gap(2e-3, 5);
        let ratio = coarse / fine;
        assert!(
            (1.5..=2.5).contains(&ratio),
            "gap ratio {ratio:.3} (coarse {coarse:.3e}, fine {fine:.3e})"
        );
    }

    #[test]
    fn propagate_reference_moments() {
        let ve = ReferenceProcess::new(
            vec![0.3],
            1.0,
            0.0,
            AffineForward::Zero,
            SigmaSchedule::EdmVe,
        )
        .unwrap();
        let (mean, v) = ve.moments(1.0);
        assert!((v - 2.0).abs() < 1e-14);
        assert_eq!(mean, vec![0.3]); // zero drift leaves the mean invariant

        let ou = ReferenceProcess::new(
            vec![0.0],
            0.0,
            0.0,
            AffineForward::Linear { rate: -1.0 },
            SigmaSchedule::Const(std::f64::consts::SQRT_2),
        );
        // var0 = 0 is rejected; nudge and correct analytically
        assert!(ou.is_err());
        let ou = ReferenceProcess::new(
            vec![0.0],
            1e-12,
            0.0,
            AffineForward::Linear { rate: -1.0 },
            SigmaSchedule::Const(std::f64::consts::SQRT_2),
        )
        .unwrap();
        let (_, v1) = ou.moments(1.0);
        let expected = 1.0 - (-2.0f64).exp();
        assert!((v1 - expected).abs() < 1e-10, "{v1} vs {expected}");
    }

    #[test]
    fn stabilized_collapses_to_gamma_ratio_for_reference_pair() {
        let reference = ReferenceProcess::new(
            vec![0.1],
            0.7,
            0.0,
            AffineForward::Zero,
            SigmaSchedule::EdmVe,
        )
        .unwrap();
        let fwd = reference.forward_process();
        let bwd = reference.backward_process();
        let mut rng = fac().stream(2, 9, Purpose::Oracle);
        let times: Vec<f64> = (0..=6).map(|i| 0.3 + 0.01 * i as f64).collect();
        let path = simulate_segment(&[0.2], &times, &fwd, &mut rng).unwrap();
        let r = rne_stabilized(&path, &fwd, &bwd, &reference, ProcessTag::Proposal).unwrap();
        let expected = reference.log_density(path.first(), times[0])
            - reference.log_density(path.last(), *times.last().unwrap());
        assert_eq!(r.value, expected);
    }

    #[test]
    fn stabilized_bias_vanishes_with_dt() {
        // The stabilised form replaces the reference kernel product by the
        // exact marginal ratio; its gap to the plain product estimate is the
        // reference's own discretisation error. On a fixed-step segment the
        // gap shrinks like O(dt) as the step is halved.
        let reference = ReferenceProcess::new(
            vec![0.0],
            1.0,
            0.0,
            AffineForward::Zero,
            SigmaSchedule::EdmVe,
        )
        .unwrap();
        // a non-reference pair: scaled drifts
        let fwd = SdeProcess::forward(
            Arc::new(|x: &[f64], _t| x.iter().map(|v| -0.5 * v).collect()),
            SigmaSchedule::EdmVe,
        );
        let bwd = SdeProcess::backward(
            Arc::new(|x: &[f64], _t| x.iter().map(|v| 0.25 * v).collect()),
            SigmaSchedule::EdmVe,
        );
        let f = fac();
        let mean_gap = |dt: f64, stream: u64| {
            let n = 4000;
            let steps = 4usize;
            let mut total = 0.0;
            let mut rng = f.stream(stream, 4, Purpose::Oracle);
            for _ in 0..n {
                let times: Vec<f64> = (0..=steps).map(|i| 0.4 + dt * i as f64).collect();
                let path = simulate_segment(&[0.5], &times, &fwd, &mut rng).unwrap();
                let a = rne_discrete(&path, &fwd, &bwd, ProcessTag::Proposal)
                    .unwrap()
                    .value;
                let b = rne_stabilized(&path, &fwd, &bwd, &reference, ProcessTag::Proposal)
                    .unwrap()
                    .value;
                total += (a - b).abs();
            }
            total / n as f64
        };
        let coarse = mean_gap(1e-2, 6);
        let fine = mean_gap(5e-3, 7);
        assert!(
            coarse / fine > 1.5,
            "stabilisation gap should shrink with dt: {coarse:.3e} -> {fine:.3e}"
        );
        // frozen from measurement: the 4-step gap at dt = 5e-3 sits near 4e-3
        assert!(fine < 0.02, "gap {fine}");
    }

    #[test]
    fn stabilized_with_degenerate_reference_sigma_errors() {
        let reference = ReferenceProcess::new(
            vec![0.0],
            1.0,
            0.0,
            AffineForward::Zero,
            SigmaSchedule::Const(0.0),
        )
        .unwrap();
        let fwd = SdeProcess::driftless(SigmaSchedule::Const(1.0), Direction::Forward);
        let bwd = SdeProcess::driftless(SigmaSchedule::Const(1.0), Direction::Backward);
        let path = PathSegment::new(
            vec![0.2, 0.3],
            vec![vec![0.0], vec![0.1]],
            Direction::Forward,
        )
        .unwrap();
        assert!(matches!(
            rne_stabilized(&path, &fwd, &bwd, &reference, ProcessTag::Proposal),
            Err(Error::DegenerateKernel(_))
        ));
    }
}
