//! The inference-time control tasks: annealed targets, proposal processes,
//! reward terms, and the swap log-acceptance assembled from path RNEs.
//!
//! A task never evaluates target densities directly inside the sampler; the
//! marginal ratio of the annealed target over a segment is always expressed
//! through the models' Radon-Nikodym estimates on the proposal paths, plus
//! reward endpoint values. Exact densities are reserved for oracles and
//! metrics.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{
    ctmc_step, euler_kernel_probs, rne_discrete_ctmc, DiscreteState, KernelEval, MaskSchedule,
    RateMatrixSpec,
};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::logspace::ProcessTag;
use crate::models::{ContinuousModel, ExactDiscreteModel, StitchWeights};
use crate::path::{Direction, PathSegment};
use crate::sde::{rne_discrete, rne_stabilized, ReferenceProcess, SdeProcess, SigmaSchedule};

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

/// Anchor points of the trajectory-stitching reward, in data coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchAnchors {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub intermediate: Option<[f64; 2]>,
}

/// Terminal reward `r_0` definitions available to the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RewardKind {
    /// `r_0(x) = -scale * ||x - center||^2`, a soft well.
    Quadratic { center: Vec<f64>, scale: f64 },
    /// Tail-to-head stitching of `segments` chains of `points` 2-D points.
    Stitch {
        segments: usize,
        points: usize,
        anchors: StitchAnchors,
        weights: StitchWeights,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kind: RewardKind,
    /// Declares the reward gradient cheap enough for local exploration.
    pub cheap_gradient: bool,
}

impl RewardSpec {
    pub fn r0(&self, x: &[f64]) -> f64 {
        match &self.kind {
            RewardKind::Quadratic { center, scale } => {
                let mut q = 0.0;
                for (xi, ci) in x.iter().zip(center.iter()) {
                    let r = xi - ci;
                    q += r * r;
                }
                -scale * q
            }
            RewardKind::Stitch {
                segments,
                points,
                anchors,
                weights,
            } => stitch_reward(x, *segments, *points, anchors, weights),
        }
    }

    /// Analytic gradient of `r_0`. The L1 pieces use the sign subgradient.
    pub fn grad0(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            RewardKind::Quadratic { center, scale } => x
                .iter()
                .zip(center.iter())
                .map(|(xi, ci)| -2.0 * scale * (xi - ci))
                .collect(),
            RewardKind::Stitch {
                segments,
                points,
                anchors,
                weights,
            } => stitch_reward_grad(x, *segments, *points, anchors, weights),
        }
    }
}

/// Power interpolant for the reward strength along the ladder:
/// exactly 1 at level 0 (data end) and exactly 0 at level M (noise end),
/// non-increasing in t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSchedule {
    pub rho: f64,
}

impl RewardSchedule {
    pub fn new(rho: f64) -> Self {
        RewardSchedule { rho }
    }

    pub fn beta(&self, level: usize, num_pairs: usize) -> f64 {
        if level >= num_pairs {
            return 0.0;
        }
        if level == 0 {
            return 1.0;
        }
        let frac = (num_pairs - level) as f64 / num_pairs as f64;
        frac.powf(self.rho)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTerm {
    pub spec: RewardSpec,
    pub schedule: RewardSchedule,
}

// ---------------------------------------------------------------------------
// Stitching reward
// ---------------------------------------------------------------------------

fn penalty(a: &[f64], b: &[f64], w: &StitchWeights) -> f64 {
    let mut l2 = 0.0;
    let mut l1 = 0.0;
    for (ai, bi) in a.iter().zip(b.iter()) {
        let d = ai - bi;
        l2 += d * d;
        l1 += d.abs();
    }
    w.lambda_l2 * l2 + w.lambda_l1 * l1
}

fn penalty_grad(a: &[f64], b: &[f64], w: &StitchWeights, out: &mut [f64], coef: f64) {
    for i in 0..a.len() {
        let d = a[i] - b[i];
        out[i] += coef * (2.0 * w.lambda_l2 * d + w.lambda_l1 * d.signum());
    }
}

fn point(chain: &[f64], points: usize, seg: usize, idx: usize) -> &[f64] {
    let base = (seg * points + idx) * 2;
    &chain[base..base + 2]
}

/// Attention weights over all chain points for the intermediate anchor:
/// a softmax of the negative penalties at temperature tau. Sums to 1.
pub fn stitch_attention(
    chain: &[f64],
    segments: usize,
    points: usize,
    intermediate: &[f64; 2],
    w: &StitchWeights,
) -> Vec<f64> {
    let n = segments * points;
    let logits: Vec<f64> = (0..n)
        .map(|k| -w.tau * penalty(point(chain, points, k / points, k % points), intermediate, w))
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Stitching reward over a flat chain of `segments * points` 2-D points:
/// endpoint terms against the start and goal anchors, tail-to-head neighbour
/// terms, and an attention-weighted intermediate term when an intermediate
/// anchor is set. Each distance enters as an L2 plus L1 penalty.
pub fn stitch_reward(
    chain: &[f64],
    segments: usize,
    points: usize,
    anchors: &StitchAnchors,
    w: &StitchWeights,
) -> f64 {
    debug_assert_eq!(chain.len(), segments * points * 2);
    let mut r = 0.0;
    r -= w.lambda_o * penalty(point(chain, points, 0, 0), &anchors.start, w);
    r -= w.lambda_p * penalty(point(chain, points, segments - 1, points - 1), &anchors.goal, w);
    for j in 0..segments.saturating_sub(1) {
        r -= w.lambda_n
            * penalty(
                point(chain, points, j, points - 1),
                point(chain, points, j + 1, 0),
                w,
            );
    }
    if let Some(inter) = &anchors.intermediate {
        let alpha = stitch_attention(chain, segments, points, inter, w);
        let mut acc = 0.0;
        for k in 0..segments * points {
            acc += alpha[k] * penalty(point(chain, points, k / points, k % points), inter, w);
        }
        r -= w.lambda_i * acc;
    }
    r
}

fn stitch_reward_grad(
    chain: &[f64],
    segments: usize,
    points: usize,
    anchors: &StitchAnchors,
    w: &StitchWeights,
) -> Vec<f64> {
    let mut g = vec![0.0; chain.len()];
    let idx = |seg: usize, i: usize| (seg * points + i) * 2;

    {
        let base = idx(0, 0);
        let p = chain[base..base + 2].to_vec();
        penalty_grad(&p, &anchors.start, w, &mut g[base..base + 2], -w.lambda_o);
    }
    {
        let base = idx(segments - 1, points - 1);
        let p = chain[base..base + 2].to_vec();
        penalty_grad(&p, &anchors.goal, w, &mut g[base..base + 2], -w.lambda_p);
    }
    for j in 0..segments.saturating_sub(1) {
        let a = idx(j, points - 1);
        let b = idx(j + 1, 0);
        let pa = chain[a..a + 2].to_vec();
        let pb = chain[b..b + 2].to_vec();
        penalty_grad(&pa, &pb, w, &mut g[a..a + 2], -w.lambda_n);
        penalty_grad(&pb, &pa, w, &mut g[b..b + 2], -w.lambda_n);
    }
    if let Some(inter) = &anchors.intermediate {
        let n = segments * points;
        let alpha = stitch_attention(chain, segments, points, inter, w);
        let costs: Vec<f64> = (0..n)
            .map(|k| penalty(point(chain, points, k / points, k % points), inter, w))
            .collect();
        let f: f64 = alpha.iter().zip(costs.iter()).map(|(a, c)| a * c).sum();
        // d(sum_k alpha_k c_k)/d c_l = alpha_l (1 - tau (c_l - F))
        for l in 0..n {
            let coef = -w.lambda_i * alpha[l] * (1.0 - w.tau * (costs[l] - f));
            let base = l * 2;
            let p = chain[base..base + 2].to_vec();
            penalty_grad(&p, inter, w, &mut g[base..base + 2], coef);
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Continuous tasks
// ---------------------------------------------------------------------------

/// How the communication proposal drifts are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalStyle {
    /// Task-adapted drifts: forward drift carries the (weighted) scores,
    /// backward drift is the plain noising drift.
    TaskHeuristic,
    /// The first model's own forward/backward pair: forward noising drift,
    /// backward exact reversal. Under this choice the proposal RNE equals the
    /// model RNE term for term, so unit-temperature acceptance is exactly 1.
    ExactReversal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TaskKind {
    Tempering { beta: f64 },
    RewardTilt,
    Composition,
    CfgDebias { w: f64, w_prop: f64 },
}

/// A control task over continuous (Gaussian diffusion) models.
#[derive(Clone)]
pub struct ContinuousTask {
    pub kind: TaskKind,
    pub models: Vec<Arc<dyn ContinuousModel>>,
    pub reward: Option<RewardTerm>,
    pub proposal: ProposalStyle,
    pub reference: Option<ReferenceProcess>,
}

impl ContinuousTask {
    /// Construct a task; everything except reward presence is checked here.
    /// `validate` re-checks the full invariant set and is called again by the
    /// engines before running (a reward-tilt task must have picked up its
    /// reward term by then).
    pub fn new(kind: TaskKind, models: Vec<Arc<dyn ContinuousModel>>) -> Result<Self> {
        let task = ContinuousTask {
            kind,
            models,
            reward: None,
            proposal: ProposalStyle::TaskHeuristic,
            reference: None,
        };
        task.validate_structure()?;
        Ok(task)
    }

    pub fn with_reward(mut self, term: RewardTerm) -> Self {
        self.reward = Some(term);
        self
    }

    pub fn with_proposal(mut self, proposal: ProposalStyle) -> Self {
        self.proposal = proposal;
        self
    }

    /// Attach the moment-matched Gaussian of the first model's data
    /// distribution as the stabilising reference.
    pub fn with_moment_matched_reference(mut self) -> Self {
        let (mean, var) = self.models[0].moment_match(0.0);
        self.reference = Some(
            ReferenceProcess::new(
                mean,
                var,
                0.0,
                crate::sde::AffineForward::Zero,
                self.models[0].sigma(),
            )
            .expect("moment-matched variance is positive"),
        );
        self
    }

    fn validate_structure(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::InvalidConfig("task needs at least one model".into()));
        }
        let dim = self.models[0].dim();
        let sigma = self.models[0].sigma();
        for m in &self.models {
            if m.dim() != dim || m.sigma() != sigma {
                return Err(Error::InvalidConfig(
                    "task models must share dimension and noise schedule".into(),
                ));
            }
        }
        match self.kind {
            TaskKind::Tempering { beta } => {
                if !(beta > 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "inverse temperature must be positive, got {beta}"
                    )));
                }
            }
            TaskKind::RewardTilt => {}
            TaskKind::Composition => {
                if self.models.len() < 2 {
                    return Err(Error::InvalidConfig(
                        "composition needs at least two models".into(),
                    ));
                }
            }
            TaskKind::CfgDebias { w, w_prop } => {
                if self.models.len() != 2 {
                    return Err(Error::InvalidConfig(
                        "guidance debias needs exactly [unconditional, conditional] models".into(),
                    ));
                }
                if !w.is_finite() || !w_prop.is_finite() {
                    return Err(Error::InvalidConfig("guidance weights must be finite".into()));
                }
            }
        }
        if let Some(term) = &self.reward {
            if let RewardKind::Stitch { weights, .. } = &term.spec.kind {
                weights.validate()?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if matches!(self.kind, TaskKind::RewardTilt) && self.reward.is_none() {
            return Err(Error::InvalidConfig(
                "reward-tilting task without a reward term".into(),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim()
    }

    pub fn sigma(&self) -> SigmaSchedule {
        self.models[0].sigma()
    }

    /// Score of the unnormalised annealed target at `(x, t)`, excluding any
    /// reward term (forward drift of the noising family is zero).
    fn combined_score(&self, x: &[f64], t: f64) -> Vec<f64> {
        match self.kind {
            TaskKind::Tempering { beta } => self.models[0]
                .score(x, t)
                .into_iter()
                .map(|s| beta * s)
                .collect(),
            TaskKind::RewardTilt => self.models[0].score(x, t),
            TaskKind::Composition => {
                let mut g = vec![0.0; x.len()];
                for m in &self.models {
                    for (gi, si) in g.iter_mut().zip(m.score(x, t)) {
                        *gi += si;
                    }
                }
                g
            }
            TaskKind::CfgDebias { w, .. } => self.cfg_score(x, t, w),
        }
    }

    fn cfg_score(&self, x: &[f64], t: f64, weight: f64) -> Vec<f64> {
        let su = self.models[0].score(x, t);
        let sc = self.models[1].score(x, t);
        su.iter()
            .zip(sc.iter())
            .map(|(u, c)| (1.0 - weight) * u + weight * c)
            .collect()
    }

    /// Proposal drift pair `(a_t, b_t)` as forward/backward processes.
    pub fn proposal_pair(&self) -> (SdeProcess, SdeProcess) {
        let sigma = self.sigma();
        match self.proposal {
            ProposalStyle::ExactReversal => {
                let m = self.models[0].clone();
                let bwd = SdeProcess::backward(
                    Arc::new(move |x: &[f64], t: f64| {
                        let s2 = m.sigma().sigma2(t);
                        m.score(x, t).into_iter().map(|s| -s2 * s).collect()
                    }),
                    sigma,
                );
                (SdeProcess::driftless(sigma, Direction::Forward), bwd)
            }
            ProposalStyle::TaskHeuristic => {
                let task = self.clone();
                let fwd = SdeProcess::forward(
                    Arc::new(move |x: &[f64], t: f64| {
                        let s2 = task.sigma().sigma2(t);
                        let score = match task.kind {
                            TaskKind::CfgDebias { w_prop, .. } => task.cfg_score(x, t, w_prop),
                            _ => task.combined_score(x, t),
                        };
                        score.into_iter().map(|s| -s2 * s).collect()
                    }),
                    sigma,
                );
                (fwd, SdeProcess::driftless(sigma, Direction::Backward))
            }
        }
    }

    /// The model `j` forward/backward pair `(f, g_j)`.
    fn model_pair(&self, j: usize) -> (SdeProcess, SdeProcess) {
        let sigma = self.sigma();
        let m = self.models[j].clone();
        let bwd = SdeProcess::backward(
            Arc::new(move |x: &[f64], t: f64| {
                let s2 = m.sigma().sigma2(t);
                m.score(x, t).into_iter().map(|s| -s2 * s).collect()
            }),
            sigma,
        );
        (SdeProcess::driftless(sigma, Direction::Forward), bwd)
    }

    /// All RNEs a task needs on one path: the proposal estimate and one per
    /// model, stabilised against the reference when one is attached.
    pub fn path_rnes(&self, path: &PathSegment<Vec<f64>>) -> Result<PathRnes> {
        let (fwd_q, bwd_q) = self.proposal_pair();
        self.path_rnes_with(path, &fwd_q, &bwd_q)
    }

    /// RNEs against the SMC propagation pair: the plain noising process
    /// forward and the guided reverse drift backward (what `smc_propagate`
    /// simulates). Under the exact-reversal style this coincides with the
    /// communication proposal pair.
    pub fn smc_path_rnes(&self, path: &PathSegment<Vec<f64>>) -> Result<PathRnes> {
        let sigma = self.sigma();
        let (fwd_prop, bwd_prop) = self.proposal_pair();
        let bwd = match self.proposal {
            ProposalStyle::ExactReversal => bwd_prop,
            ProposalStyle::TaskHeuristic => SdeProcess::backward(fwd_prop.drift.clone(), sigma),
        };
        let fwd = SdeProcess::driftless(sigma, Direction::Forward);
        self.path_rnes_with(path, &fwd, &bwd)
    }

    fn path_rnes_with(
        &self,
        path: &PathSegment<Vec<f64>>,
        fwd_q: &SdeProcess,
        bwd_q: &SdeProcess,
    ) -> Result<PathRnes> {
        let q = match &self.reference {
            Some(r) => rne_stabilized(path, fwd_q, bwd_q, r, ProcessTag::Proposal)?,
            None => rne_discrete(path, fwd_q, bwd_q, ProcessTag::Proposal)?,
        };
        let mut models = Vec::with_capacity(self.models.len());
        for j in 0..self.models.len() {
            let (fwd, bwd) = self.model_pair(j);
            let r = match &self.reference {
                Some(rf) => rne_stabilized(path, &fwd, &bwd, rf, ProcessTag::Model(j))?,
                None => rne_discrete(path, &fwd, &bwd, ProcessTag::Model(j))?,
            };
            models.push(r.value);
        }
        Ok(PathRnes {
            q: q.value,
            models,
        })
    }

    /// Reward value at a ladder level: `beta_m * r_0(E[x_0 | x])`, computed
    /// with the first model's Tweedie denoiser. Zero at the noise end,
    /// exactly `r_0` modulo denoiser contraction at the data end.
    pub fn tweedie_reward(&self, x: &[f64], level: usize, grid: &TimeGrid) -> f64 {
        let Some(term) = &self.reward else { return 0.0 };
        let beta = term.schedule.beta(level, grid.num_pairs());
        if beta == 0.0 {
            return 0.0;
        }
        let t = grid.level_time(level);
        let denoised = self.models[0].denoise(x, t);
        beta * term.spec.r0(&denoised)
    }

    /// `log pi_{t_hi}(x_hi) - log pi_{t_lo}(x_lo)` along a path between the
    /// levels, up to the level-constant normaliser, expressed through RNEs
    /// and reward endpoint values.
    pub fn log_target_ratio(
        &self,
        rnes: &PathRnes,
        endpoints: (&[f64], &[f64]),
        levels: (usize, usize),
        grid: &TimeGrid,
    ) -> f64 {
        let base = match self.kind {
            TaskKind::Tempering { beta } => -beta * rnes.models[0],
            TaskKind::RewardTilt => -rnes.models[0],
            TaskKind::Composition => -rnes.models.iter().sum::<f64>(),
            TaskKind::CfgDebias { w, .. } => {
                -(1.0 - w) * rnes.models[0] - w * rnes.models[1]
            }
        };
        let reward = if self.reward.is_some() {
            self.tweedie_reward(endpoints.1, levels.1, grid)
                - self.tweedie_reward(endpoints.0, levels.0, grid)
        } else {
            0.0
        };
        base + reward
    }

    /// Swap log-acceptance for a level pair: the forward path starts at the
    /// lower level, the backward path at the upper one. Any non-finite RNE
    /// forces rejection.
    pub fn swap_log_accept(
        &self,
        fwd_path: &PathSegment<Vec<f64>>,
        bwd_path: &PathSegment<Vec<f64>>,
        levels: (usize, usize),
        grid: &TimeGrid,
    ) -> Result<f64> {
        let rnes_f = self.path_rnes(fwd_path)?;
        let rnes_b = self.path_rnes(bwd_path)?;
        if !rnes_f.all_finite() || !rnes_b.all_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        let ltr_f = self.log_target_ratio(
            &rnes_f,
            (fwd_path.first(), fwd_path.last()),
            levels,
            grid,
        );
        let ltr_b = self.log_target_ratio(
            &rnes_b,
            (bwd_path.first(), bwd_path.last()),
            levels,
            grid,
        );
        let interior = ltr_f - ltr_b + rnes_f.q - rnes_b.q;
        Ok(interior.min(0.0))
    }

    /// Score of `log pi_{t_m}` for local exploration, including the reward
    /// gradient when the reward declares it cheap. The reward gradient is
    /// taken at the denoised point and scaled by the schedule, without the
    /// denoiser Jacobian; local moves are unadjusted either way and the
    /// communication step carries the exact target.
    pub fn target_score(&self, x: &[f64], level: usize, grid: &TimeGrid) -> Vec<f64> {
        let t = grid.level_time(level);
        let mut g = self.combined_score(x, t);
        if let Some(term) = &self.reward {
            if term.spec.cheap_gradient {
                let beta = term.schedule.beta(level, grid.num_pairs());
                if beta > 0.0 {
                    let denoised = self.models[0].denoise(x, t);
                    for (gi, ri) in g.iter_mut().zip(term.spec.grad0(&denoised)) {
                        *gi += beta * ri;
                    }
                }
            }
        }
        g
    }

    /// Unnormalised log target at `(x, t)` with the reward strength of the
    /// given level; oracle/metric use only.
    pub fn unnormalized_log_target(&self, x: &[f64], t: f64, level: usize, grid: &TimeGrid) -> f64 {
        let base = match self.kind {
            TaskKind::Tempering { beta } => beta * self.models[0].log_pt(x, t),
            TaskKind::RewardTilt => self.models[0].log_pt(x, t),
            TaskKind::Composition => self.models.iter().map(|m| m.log_pt(x, t)).sum(),
            TaskKind::CfgDebias { w, .. } => {
                (1.0 - w) * self.models[0].log_pt(x, t) + w * self.models[1].log_pt(x, t)
            }
        };
        base + self.tweedie_reward(x, level, grid)
    }

    /// Gaussian approximation of the top-of-ladder target from the models'
    /// moment-matched marginals; sampled directly by the top-level refresh.
    pub fn top_reference(&self, t_top: f64) -> Result<(Vec<f64>, f64)> {
        match self.kind {
            TaskKind::Tempering { beta } => {
                let (m, v) = self.models[0].moment_match(t_top);
                Ok((m, v / beta))
            }
            TaskKind::RewardTilt => Ok(self.models[0].moment_match(t_top)),
            TaskKind::Composition => {
                let mut prec = 0.0;
                let mut mean = vec![0.0; self.dim()];
                for model in &self.models {
                    let (m, v) = model.moment_match(t_top);
                    prec += 1.0 / v;
                    for (mi, x) in mean.iter_mut().zip(m.iter()) {
                        *mi += x / v;
                    }
                }
                for mi in mean.iter_mut() {
                    *mi /= prec;
                }
                Ok((mean, 1.0 / prec))
            }
            TaskKind::CfgDebias { w, .. } => {
                let (mu, vu) = self.models[0].moment_match(t_top);
                let (mc, vc) = self.models[1].moment_match(t_top);
                let prec = (1.0 - w) / vu + w / vc;
                if !(prec > 0.0) {
                    return Err(Error::DegenerateWeights(format!(
                        "guidance weight {w} makes the top-level precision non-positive"
                    )));
                }
                let mean = mu
                    .iter()
                    .zip(mc.iter())
                    .map(|(u, c)| ((1.0 - w) * u / vu + w * c / vc) / prec)
                    .collect();
                Ok((mean, 1.0 / prec))
            }
        }
    }

    pub fn sample_top(&self, t_top: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let (mean, var) = self.top_reference(t_top)?;
        let sd = var.sqrt();
        Ok(mean
            .iter()
            .map(|m| {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen();
                m + sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect())
    }
}

/// The RNE values a task consumes for one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRnes {
    pub q: f64,
    pub models: Vec<f64>,
}

impl PathRnes {
    pub fn all_finite(&self) -> bool {
        self.q.is_finite() && self.models.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Discrete tasks
// ---------------------------------------------------------------------------

/// Guidance debiasing over masking diffusion: target
/// `pi_t \propto p_t^(1-w) p_t(.|c)^w`, per token position.
#[derive(Clone)]
pub struct DiscreteCfgTask {
    pub uncond: Arc<ExactDiscreteModel>,
    pub cond: Arc<ExactDiscreteModel>,
    pub w: f64,
    pub w_prop: f64,
    /// Strict mode maps zero-probability transitions to a rejected swap
    /// instead of the floored log value.
    pub strict: bool,
}

impl DiscreteCfgTask {
    pub fn new(
        uncond: Arc<ExactDiscreteModel>,
        cond: Arc<ExactDiscreteModel>,
        w: f64,
        w_prop: f64,
    ) -> Result<Self> {
        if uncond.vocab() != cond.vocab() || uncond.positions != cond.positions {
            return Err(Error::InvalidConfig(
                "conditional and unconditional models must share shape".into(),
            ));
        }
        if !w.is_finite() || !w_prop.is_finite() {
            return Err(Error::InvalidConfig("guidance weights must be finite".into()));
        }
        Ok(DiscreteCfgTask {
            uncond,
            cond,
            w,
            w_prop,
            strict: false,
        })
    }

    pub fn with_strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn vocab(&self) -> u32 {
        self.uncond.vocab()
    }

    pub fn positions(&self) -> usize {
        self.uncond.positions
    }

    fn schedule(&self) -> MaskSchedule {
        self.uncond.schedule
    }

    /// Guidance-weighted unmasking rates: `B(x, y) = Lambda(y, x)
    /// cs_c(y|x)^w cs_u(y|x)^(1-w)` with the exact concrete scores.
    fn cfg_backward_rates(&self, weight: f64) -> RateMatrixSpec {
        let uncond = self.uncond.clone();
        let cond = self.cond.clone();
        let vocab = self.vocab();
        let mask = vocab - 1;
        let schedule = self.schedule();
        RateMatrixSpec {
            role: Direction::Backward,
            vocab,
            rates: Arc::new(move |tokens: &[u32], pos: usize, t: f64| {
                let mut r = vec![0.0; vocab as usize];
                if tokens[pos] != mask {
                    return r; // only the mask unmasks backward in time
                }
                let lam = schedule.rate(t).unwrap_or(0.0);
                for v in 0..mask {
                    let cs_u = uncond.token_marginal(v, t) / uncond.token_marginal(mask, t);
                    let cs_c = cond.token_marginal(v, t) / cond.token_marginal(mask, t);
                    r[v as usize] = lam * cs_c.powf(weight) * cs_u.powf(1.0 - weight);
                }
                r
            }),
            eval: KernelEval::Sampling,
        }
    }

    /// Proposal pair: forward masking, backward guidance-weighted unmasking
    /// at strength `w_prop`. Both evaluate as sampling kernels.
    pub fn proposal_pair(&self) -> (RateMatrixSpec, RateMatrixSpec) {
        (
            RateMatrixSpec::masking_forward(self.vocab(), self.schedule()),
            self.cfg_backward_rates(self.w_prop),
        )
    }

    /// Model pair for `j` in {0: unconditional, 1: conditional}: forward
    /// masking and the model's exact reversal, both read unfloored so the
    /// per-step kernel ratio equals the exact marginal ratio.
    fn model_pair(&self, j: usize) -> (RateMatrixSpec, RateMatrixSpec) {
        let model = if j == 0 {
            self.uncond.clone()
        } else {
            self.cond.clone()
        };
        let vocab = self.vocab();
        let mask = vocab - 1;
        let schedule = self.schedule();
        let fwd = RateMatrixSpec::masking_forward(vocab, schedule).with_eval(KernelEval::Exact);
        let bwd = RateMatrixSpec {
            role: Direction::Backward,
            vocab,
            rates: Arc::new(move |tokens: &[u32], pos: usize, t: f64| {
                let mut r = vec![0.0; vocab as usize];
                if tokens[pos] != mask {
                    return r;
                }
                let lam = schedule.rate(t).unwrap_or(0.0);
                for v in 0..mask {
                    r[v as usize] =
                        lam * model.token_marginal(v, t) / model.token_marginal(mask, t);
                }
                r
            }),
            eval: KernelEval::Exact,
        };
        (fwd, bwd)
    }

    pub fn path_rnes(&self, path: &PathSegment<DiscreteState>) -> Result<PathRnes> {
        let (fwd_q, bwd_q) = self.proposal_pair();
        let q = rne_discrete_ctmc(path, &fwd_q, &bwd_q, self.strict, ProcessTag::Proposal)?;
        let mut models = Vec::with_capacity(2);
        for j in 0..2 {
            let (fwd, bwd) = self.model_pair(j);
            let r = rne_discrete_ctmc(path, &fwd, &bwd, self.strict, ProcessTag::Model(j))?;
            models.push(r.value);
        }
        Ok(PathRnes {
            q: q.value,
            models,
        })
    }

    pub fn log_target_ratio(&self, rnes: &PathRnes) -> f64 {
        -(1.0 - self.w) * rnes.models[0] - self.w * rnes.models[1]
    }

    pub fn swap_log_accept(
        &self,
        fwd_path: &PathSegment<DiscreteState>,
        bwd_path: &PathSegment<DiscreteState>,
    ) -> Result<f64> {
        let rnes_f = self.path_rnes(fwd_path)?;
        let rnes_b = self.path_rnes(bwd_path)?;
        if !rnes_f.all_finite() || !rnes_b.all_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        let interior =
            self.log_target_ratio(&rnes_f) - self.log_target_ratio(&rnes_b) + rnes_f.q - rnes_b.q;
        Ok(interior.min(0.0))
    }

    /// Unnormalised per-token target weight at `(token, t)`.
    pub fn token_target_weight(&self, token: u32, t: f64) -> f64 {
        self.uncond.token_marginal(token, t).powf(1.0 - self.w)
            * self.cond.token_marginal(token, t).powf(self.w)
    }

    /// Exact enumerated target distribution at time `t`, normalised.
    pub fn enumerate_target(&self, t: f64) -> Result<Vec<(DiscreteState, f64)>> {
        let joint = self.uncond.enumerate_joint(t)?;
        let mut out: Vec<(DiscreteState, f64)> = joint
            .into_iter()
            .map(|(state, _)| {
                let w: f64 = state
                    .tokens
                    .iter()
                    .map(|&tok| self.token_target_weight(tok, t))
                    .product();
                (state, w)
            })
            .collect();
        let total: f64 = out.iter().map(|(_, w)| w).sum();
        for (_, w) in out.iter_mut() {
            *w /= total;
        }
        Ok(out)
    }

    /// One Metropolis-Hastings sweep over token positions with a uniform
    /// proposal over the other tokens and the exact guidance-weighted
    /// concrete-score ratio as the acceptance.
    pub fn mh_local_move(
        &self,
        x: &DiscreteState,
        t: f64,
        rng: &mut ChaCha8Rng,
    ) -> DiscreteState {
        let v = self.vocab();
        let mut tokens = x.tokens.clone();
        for pos in 0..tokens.len() {
            let cur = tokens[pos];
            let offset = rng.gen_range(1..v);
            let proposal = (cur + offset) % v;
            let ratio = self.token_target_weight(proposal, t)
                / self.token_target_weight(cur, t);
            if ratio >= 1.0 || rng.gen::<f64>() < ratio {
                tokens[pos] = proposal;
            }
        }
        DiscreteState::new(tokens)
    }

    pub fn sample_top(&self) -> DiscreteState {
        self.uncond.fully_masked()
    }

    /// Simulate one backward completion sweep along descending `times`.
    pub fn complete(
        &self,
        x: &DiscreteState,
        times: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<DiscreteState> {
        let bwd = self.cfg_backward_rates(self.w_prop);
        let mut cur = x.clone();
        for i in (0..times.len() - 1).rev() {
            let dt = times[i + 1] - times[i];
            cur = ctmc_step(&cur, times[i + 1], dt, &bwd, rng)?;
        }
        Ok(cur)
    }
}

/// Euler kernel of a proposal spec as the engine samples it; re-exported for
/// enumeration oracles.
pub fn proposal_kernel_probs(
    x: &DiscreteState,
    pos: usize,
    t: f64,
    dt: f64,
    spec: &RateMatrixSpec,
) -> Result<Vec<f64>> {
    euler_kernel_probs(x, pos, t, dt, spec)
}
