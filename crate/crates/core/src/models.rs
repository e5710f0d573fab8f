//! Exact, closed-form diffusion models standing in for pretrained networks.
//!
//! Continuous targets are isotropic Gaussian mixtures noised by a
//! variance-exploding SDE (zero forward drift), so the marginal `p_t`, its
//! score, and the Tweedie posterior mean are all available in closed form.
//! Discrete targets are factorised token distributions under the linear
//! masking schedule with fully enumerable marginals.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{DiscreteState, MaskSchedule};
use crate::error::{Error, Result};
use crate::logspace::logsumexp;
use crate::sde::SigmaSchedule;

const LN_2PI: f64 = 1.8378770664093453;

fn gaussian_log_density(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    let mut quad = 0.0;
    for i in 0..x.len() {
        let r = x[i] - mean[i];
        quad += r * r;
    }
    -0.5 * d * (LN_2PI + var.ln()) - 0.5 * quad / var
}

/// A model exposing everything the control tasks need from a "pretrained"
/// diffusion: exact noised marginals, scores, Tweedie denoising, and
/// reference draws. Forward drift is zero (VE family) throughout.
pub trait ContinuousModel: Send + Sync {
    fn dim(&self) -> usize;
    fn sigma(&self) -> SigmaSchedule;
    /// Accumulated noise variance from time 0 to `t`.
    fn noise_var(&self, t: f64) -> f64 {
        self.sigma().int_sigma2(0.0, t)
    }
    fn log_pt(&self, x: &[f64], t: f64) -> f64;
    fn score(&self, x: &[f64], t: f64) -> Vec<f64>;
    /// Tweedie posterior mean `E[x_0 | x_t = x]`.
    fn denoise(&self, x: &[f64], t: f64) -> Vec<f64>;
    fn sample_p0(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn sample_pt(&self, t: f64, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// Mean and isotropic variance matching `p_t`'s first two moments.
    fn moment_match(&self, t: f64) -> (Vec<f64>, f64);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: f64,
}

/// Isotropic Gaussian mixture under VE noising.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureModel {
    pub components: Vec<MixtureComponent>,
    pub sigma: SigmaSchedule,
    /// Condition tag; a tagged model acts as the "conditional model" in
    /// classifier-free-guidance tasks.
    pub label: Option<String>,
}

impl GaussianMixtureModel {
    pub fn new(components: Vec<MixtureComponent>, sigma: SigmaSchedule) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidConfig("mixture needs components".into()));
        }
        let dim = components[0].mean.len();
        let mut total = 0.0;
        for c in &components {
            if c.mean.len() != dim {
                return Err(Error::InvalidConfig("component dims differ".into()));
            }
            if !(c.weight > 0.0) || !(c.var > 0.0) {
                return Err(Error::InvalidConfig(
                    "component weights and variances must be positive".into(),
                ));
            }
            total += c.weight;
        }
        let mut components = components;
        for c in components.iter_mut() {
            c.weight /= total;
        }
        Ok(GaussianMixtureModel {
            components,
            sigma,
            label: None,
        })
    }

    /// The default desk-scale test target: equal-weight modes at +/-2 with
    /// component sigma 0.2, in 1-D, under the EDM noise schedule.
    pub fn default_bimodal() -> Self {
        GaussianMixtureModel::new(
            vec![
                MixtureComponent {
                    weight: 0.5,
                    mean: vec![-2.0],
                    var: 0.04,
                },
                MixtureComponent {
                    weight: 0.5,
                    mean: vec![2.0],
                    var: 0.04,
                },
            ],
            SigmaSchedule::EdmVe,
        )
        .unwrap()
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    /// Log responsibilities and total log density at `(x, t)`.
    fn posterior(&self, x: &[f64], t: f64) -> (Vec<f64>, f64) {
        let s = self.noise_var(t);
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + gaussian_log_density(x, &c.mean, c.var + s))
            .collect();
        let total = logsumexp(&logs).expect("non-empty mixture");
        (logs, total)
    }
}

impl ContinuousModel for GaussianMixtureModel {
    fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    fn sigma(&self) -> SigmaSchedule {
        self.sigma
    }

    fn log_pt(&self, x: &[f64], t: f64) -> f64 {
        self.posterior(x, t).1
    }

    fn score(&self, x: &[f64], t: f64) -> Vec<f64> {
        let s = self.noise_var(t);
        let (logs, total) = self.posterior(x, t);
        let mut g = vec![0.0; x.len()];
        for (c, lw) in self.components.iter().zip(logs.iter()) {
            let r = (lw - total).exp();
            let v = c.var + s;
            for i in 0..x.len() {
                g[i] += r * (c.mean[i] - x[i]) / v;
            }
        }
        g
    }

    fn denoise(&self, x: &[f64], t: f64) -> Vec<f64> {
        let s = self.noise_var(t);
        let (logs, total) = self.posterior(x, t);
        let mut m = vec![0.0; x.len()];
        for (c, lw) in self.components.iter().zip(logs.iter()) {
            let r = (lw - total).exp();
            let v = c.var + s;
            for i in 0..x.len() {
                // conjugate posterior mean of x_0 within the component
                m[i] += r * (s * c.mean[i] + c.var * x[i]) / v;
            }
        }
        m
    }

    fn sample_p0(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.sample_pt(0.0, rng)
    }

    fn sample_pt(&self, t: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = self.noise_var(t);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut comp = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                comp = c;
                break;
            }
        }
        let sd = (comp.var + s).sqrt();
        comp.mean
            .iter()
            .map(|m| {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen();
                m + sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect()
    }

    fn moment_match(&self, t: f64) -> (Vec<f64>, f64) {
        let s = self.noise_var(t);
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for c in &self.components {
            for i in 0..d {
                mean[i] += c.weight * c.mean[i];
            }
        }
        let mut var = 0.0;
        for c in &self.components {
            let mut spread = 0.0;
            for i in 0..d {
                let r = c.mean[i] - mean[i];
                spread += r * r;
            }
            var += c.weight * ((c.var + s) + spread / d as f64);
        }
        (mean, var)
    }
}

/// Product of independent per-block models over a concatenated state, used
/// for segment-composition targets. Density, score and denoiser all act
/// blockwise, so the product behaves as one model with exact quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockProductModel {
    pub blocks: Vec<GaussianMixtureModel>,
}

impl BlockProductModel {
    pub fn new(blocks: Vec<GaussianMixtureModel>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidConfig("block product needs blocks".into()));
        }
        let sigma = blocks[0].sigma;
        if blocks.iter().any(|b| b.sigma != sigma) {
            return Err(Error::InvalidConfig(
                "block models must share the noise schedule".into(),
            ));
        }
        Ok(BlockProductModel { blocks })
    }

    fn ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut lo = 0;
        for b in &self.blocks {
            let hi = lo + b.dim();
            out.push((lo, hi));
            lo = hi;
        }
        out
    }
}

impl ContinuousModel for BlockProductModel {
    fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }

    fn sigma(&self) -> SigmaSchedule {
        self.blocks[0].sigma
    }

    fn log_pt(&self, x: &[f64], t: f64) -> f64 {
        self.ranges()
            .iter()
            .zip(self.blocks.iter())
            .map(|(&(lo, hi), b)| b.log_pt(&x[lo..hi], t))
            .sum()
    }

    fn score(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(x.len());
        for (&(lo, hi), b) in self.ranges().iter().zip(self.blocks.iter()) {
            g.extend(b.score(&x[lo..hi], t));
        }
        g
    }

    fn denoise(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut m = Vec::with_capacity(x.len());
        for (&(lo, hi), b) in self.ranges().iter().zip(self.blocks.iter()) {
            m.extend(b.denoise(&x[lo..hi], t));
        }
        m
    }

    fn sample_p0(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.sample_pt(0.0, rng)
    }

    fn sample_pt(&self, t: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        for b in &self.blocks {
            x.extend(b.sample_pt(t, rng));
        }
        x
    }

    fn moment_match(&self, t: f64) -> (Vec<f64>, f64) {
        let mut mean = Vec::with_capacity(self.dim());
        let mut var = 0.0;
        let d = self.dim() as f64;
        for b in &self.blocks {
            let (m, v) = b.moment_match(t);
            var += v * b.dim() as f64 / d;
            mean.extend(m);
        }
        (mean, var)
    }
}

/// Enumerable discrete model: `positions` tokens, each drawn independently
/// from `p0` over `vocab - 1` real tokens, masked by the linear schedule.
/// The mask index is `vocab - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactDiscreteModel {
    pub p0: Vec<f64>,
    pub positions: usize,
    pub schedule: MaskSchedule,
    pub label: Option<String>,
}

/// Joint state spaces above this size are refused.
pub const ENUMERATION_GUARD: u64 = 1_000_000;

impl ExactDiscreteModel {
    pub fn new(p0: Vec<f64>, positions: usize) -> Result<Self> {
        if p0.is_empty() || positions == 0 {
            return Err(Error::InvalidConfig("empty discrete model".into()));
        }
        if p0.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::InvalidConfig(
                "token probabilities must be positive".into(),
            ));
        }
        let total: f64 = p0.iter().sum();
        let p0 = p0.into_iter().map(|p| p / total).collect();
        Ok(ExactDiscreteModel {
            p0,
            positions,
            schedule: MaskSchedule::default(),
            label: None,
        })
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    /// Vocabulary size including the mask token.
    pub fn vocab(&self) -> u32 {
        self.p0.len() as u32 + 1
    }

    pub fn mask_token(&self) -> u32 {
        self.p0.len() as u32
    }

    /// Exact per-token marginal at time `t`: `(1-t) p0(v)` for real tokens,
    /// `t` for the mask.
    pub fn token_marginal(&self, token: u32, t: f64) -> f64 {
        if token == self.mask_token() {
            t
        } else {
            (1.0 - t) * self.p0[token as usize]
        }
    }

    /// Exact joint log-marginal of a token array at time `t`.
    pub fn log_marginal(&self, x: &DiscreteState, t: f64) -> f64 {
        debug_assert_eq!(x.len(), self.positions);
        x.tokens
            .iter()
            .map(|&v| self.token_marginal(v, t).ln())
            .sum()
    }

    /// Exact concrete score `p_t(y) / p_t(x)` for substituting `y_token` at
    /// `pos`. Enumeration guard applies to the joint space the ratio lives in.
    pub fn concrete_score(&self, x: &DiscreteState, y_token: u32, pos: usize, t: f64) -> Result<f64> {
        let size = (self.vocab() as u64).checked_pow(self.positions as u32);
        match size {
            Some(s) if s <= ENUMERATION_GUARD => {}
            _ => return Err(Error::EnumerationGuard(size.unwrap_or(u64::MAX))),
        }
        let cur = x.tokens[pos];
        if y_token == cur {
            return Ok(1.0);
        }
        Ok(self.token_marginal(y_token, t) / self.token_marginal(cur, t))
    }

    /// Enumerate the joint state space with exact probabilities at `t`.
    pub fn enumerate_joint(&self, t: f64) -> Result<Vec<(DiscreteState, f64)>> {
        let v = self.vocab() as u64;
        let size = v.checked_pow(self.positions as u32).unwrap_or(u64::MAX);
        if size > ENUMERATION_GUARD {
            return Err(Error::EnumerationGuard(size));
        }
        let mut out = Vec::with_capacity(size as usize);
        for code in 0..size {
            let mut tokens = Vec::with_capacity(self.positions);
            let mut rem = code;
            for _ in 0..self.positions {
                tokens.push((rem % v) as u32);
                rem /= v;
            }
            let state = DiscreteState::new(tokens);
            let p = state
                .tokens
                .iter()
                .map(|&tok| self.token_marginal(tok, t))
                .product();
            out.push((state, p));
        }
        Ok(out)
    }

    pub fn sample_p0(&self, rng: &mut ChaCha8Rng) -> DiscreteState {
        self.sample_pt(0.0, rng)
    }

    pub fn sample_pt(&self, t: f64, rng: &mut ChaCha8Rng) -> DiscreteState {
        let tokens = (0..self.positions)
            .map(|_| {
                if rng.gen::<f64>() < t {
                    self.mask_token()
                } else {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut tok = self.p0.len() - 1;
                    for (i, p) in self.p0.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            tok = i;
                            break;
                        }
                    }
                    tok as u32
                }
            })
            .collect();
        DiscreteState::new(tokens)
    }

    pub fn fully_masked(&self) -> DiscreteState {
        DiscreteState::new(vec![self.mask_token(); self.positions])
    }
}

/// Coefficients of the trajectory-stitching reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StitchWeights {
    pub lambda_o: f64,
    pub lambda_p: f64,
    pub lambda_n: f64,
    pub lambda_i: f64,
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub tau: f64,
}

impl StitchWeights {
    /// Published defaults for `j` composed segments:
    /// endpoint and intermediate terms at `100 j`, neighbour term 100,
    /// L2 coefficient 1, L1 coefficient 10, attention temperature 10.
    pub fn defaults_for(j: usize) -> Self {
        StitchWeights {
            lambda_o: 100.0 * j as f64,
            lambda_p: 100.0 * j as f64,
            lambda_n: 100.0,
            lambda_i: 100.0 * j as f64,
            lambda_l1: 10.0,
            lambda_l2: 1.0,
            tau: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_o,
            self.lambda_p,
            self.lambda_n,
            self.lambda_i,
            self.lambda_l1,
            self.lambda_l2,
            self.tau,
        ];
        if all.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidConfig(
                "stitch weights must be positive".into(),
            ));
        }
        Ok(())
    }
}
