//! Experiment configuration, builders, the run orchestrator and file
//! outputs. Configs are one JSON document; every output directory carries
//! the resolved config, its hash, samples as CSV, diagnostics and metrics
//! as JSON. Runs are deterministic per (config, seed).

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctmc::DiscreteState;
use crate::engine::{
    ContinuousDynamics, DiscreteDynamics, Dynamics, Engine, EngineConfig, LocalMove, OnlineEvent,
    SampleRow,
};
use crate::error::{Error, Result};
use crate::grid::{build_edm_grid, TimeGrid};
use crate::metrics::{
    exact_bin_probs, mode_occupancy, tvd_discrete, tvd_histogram, w2_1d, MetricReport,
    StitchMetrics,
};
use crate::models::{
    BlockProductModel, ContinuousModel, ExactDiscreteModel, GaussianMixtureModel,
    MixtureComponent, StitchWeights,
};
use crate::rng::{Purpose, RngFactory};
use crate::sde::SigmaSchedule;
use crate::smc::{smc_run, ResampleScheme, ResampleTrigger, SmcConfig, SmcDiagnostics};
use crate::tasks::{
    ContinuousTask, DiscreteCfgTask, ProposalStyle, RewardKind, RewardSchedule, RewardSpec,
    RewardTerm, StitchAnchors, TaskKind,
};

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentConfig {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaConfig {
    #[default]
    EdmVe,
    Const {
        value: f64,
    },
}

impl SigmaConfig {
    fn build(&self) -> SigmaSchedule {
        match self {
            SigmaConfig::EdmVe => SigmaSchedule::EdmVe,
            SigmaConfig::Const { value } => SigmaSchedule::Const(*value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    /// Isotropic Gaussian mixture; `cond_components` adds the conditional
    /// model for guidance tasks.
    GaussianMixture {
        components: Vec<ComponentConfig>,
        #[serde(default)]
        cond_components: Option<Vec<ComponentConfig>>,
        #[serde(default)]
        sigma: SigmaConfig,
    },
    /// Product of `segments` identical mixture blocks over 2-D chains of
    /// `points` points; component means are smoothed random walks generated
    /// deterministically from `shape_seed`.
    SegmentChain {
        segments: usize,
        points: usize,
        shapes: usize,
        shape_seed: u64,
        component_sd: f64,
        box_halfwidth: f64,
    },
    /// Factorised token model under linear masking; `cond_p0` adds the
    /// conditional model for guidance tasks.
    DiscreteMasking {
        p0: Vec<f64>,
        #[serde(default)]
        cond_p0: Option<Vec<f64>>,
        positions: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardConfig {
    Quadratic {
        center: Vec<f64>,
        scale: f64,
    },
    Stitch {
        start: [f64; 2],
        goal: [f64; 2],
        #[serde(default)]
        intermediate: Option<[f64; 2]>,
        #[serde(default)]
        weights: Option<StitchWeights>,
    },
}

fn default_reward_rho() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    Tempering {
        beta: f64,
    },
    RewardTilt {
        reward: RewardConfig,
        #[serde(default = "default_reward_rho")]
        rho: f64,
    },
    /// Compose `copies` copies of the base model.
    Composition {
        copies: usize,
    },
    CfgDebias {
        w: f64,
        #[serde(default)]
        w_prop: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridKind {
    Edm {
        t_min: f64,
        t_max: f64,
        steps: usize,
        rho: f64,
    },
    Uniform {
        t_lo: f64,
        t_hi: f64,
        steps: usize,
    },
}

fn default_substeps() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    #[serde(flatten)]
    pub kind: GridKind,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub trunc_steps: usize,
}

impl GridConfig {
    pub fn build(&self) -> Result<TimeGrid> {
        let grid = match self.kind {
            GridKind::Edm {
                t_min,
                t_max,
                steps,
                rho,
            } => build_edm_grid(t_min, t_max, steps, rho)?,
            GridKind::Uniform { t_lo, t_hi, steps } => {
                let times: Vec<f64> = (0..=steps)
                    .map(|i| t_lo + (t_hi - t_lo) * i as f64 / steps as f64)
                    .collect();
                TimeGrid::from_times(times, 1, 0)?
            }
        };
        grid.with_truncation_steps(self.trunc_steps)?
            .with_substeps(self.substeps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProposalConfig {
    #[default]
    TaskHeuristic,
    ExactReversal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineEventConfig {
    pub at_iteration: u64,
    pub reward: RewardConfig,
    #[serde(default = "default_reward_rho")]
    pub rho: f64,
}

fn default_true() -> bool {
    true
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSettings {
    pub iterations: u64,
    /// Defaults to 2% of the iteration budget.
    #[serde(default)]
    pub burn_in: Option<u64>,
    #[serde(default)]
    pub local_move: LocalMove,
    #[serde(default = "default_true")]
    pub resample_top_level: bool,
    #[serde(default)]
    pub proposal: ProposalConfig,
    /// Reference-process stabilisation of the RNE computation; defaults to
    /// on for tempering and off elsewhere.
    #[serde(default)]
    pub use_reference: Option<bool>,
    /// Strict CTMC mode: floored transitions reject the swap outright.
    #[serde(default)]
    pub strict_ctmc: bool,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub online: Vec<OnlineEventConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerConfig {
    Always,
    EssBelow { threshold: f64 },
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemeConfig {
    Systematic,
    Partial { fraction: f64 },
}

fn default_resample_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmcSettings {
    pub particles: usize,
    #[serde(default = "default_resample_every")]
    pub resample_every: usize,
    pub scheme: SchemeConfig,
    pub trigger: TriggerConfig,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_bins() -> usize {
    64
}

fn default_w2_samples() -> usize {
    10_000
}

fn default_stitch_threshold() -> f64 {
    0.45
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub range: Option<(f64, f64)>,
    #[serde(default = "default_w2_samples")]
    pub w2_reference_samples: usize,
    /// Success radius for stitching metrics, in data units.
    #[serde(default = "default_stitch_threshold")]
    pub stitch_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            bins: default_bins(),
            range: None,
            w2_reference_samples: default_w2_samples(),
            stitch_threshold: default_stitch_threshold(),
        }
    }
}

fn default_metrics() -> MetricsConfig {
    MetricsConfig::default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub grid: GridConfig,
    pub engine: EngineSettings,
    #[serde(default)]
    pub smc: Option<SmcSettings>,
    #[serde(default = "default_metrics")]
    pub metrics: MetricsConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(self).expect("config serialises").as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

fn build_mixture(components: &[ComponentConfig], sigma: SigmaSchedule) -> Result<GaussianMixtureModel> {
    GaussianMixtureModel::new(
        components
            .iter()
            .map(|c| MixtureComponent {
                weight: c.weight,
                mean: c.mean.clone(),
                var: c.var,
            })
            .collect(),
        sigma,
    )
}

/// Smoothed random-walk shapes for the segment model, deterministic in the
/// shape seed.
pub fn build_segment_model(
    segments: usize,
    points: usize,
    shapes: usize,
    shape_seed: u64,
    component_sd: f64,
    box_halfwidth: f64,
) -> Result<BlockProductModel> {
    if segments == 0 || points < 2 || shapes == 0 {
        return Err(Error::InvalidConfig(
            "segment chain needs segments >= 1, points >= 2, shapes >= 1".into(),
        ));
    }
    let factory = RngFactory::new(shape_seed);
    let mut comps = Vec::with_capacity(shapes);
    for s in 0..shapes {
        let mut rng = factory.stream(s as u64, 0, Purpose::Init);
        let mut mean = Vec::with_capacity(points * 2);
        let mut pos = [
            box_halfwidth * (2.0 * rng.gen::<f64>() - 1.0) * 0.7,
            box_halfwidth * (2.0 * rng.gen::<f64>() - 1.0) * 0.7,
        ];
        let step = 2.0 * box_halfwidth / points as f64;
        let mut vel = [
            step * (2.0 * rng.gen::<f64>() - 1.0),
            step * (2.0 * rng.gen::<f64>() - 1.0),
        ];
        for _ in 0..points {
            mean.extend_from_slice(&pos);
            for d in 0..2 {
                vel[d] = 0.7 * vel[d] + 0.5 * step * (2.0 * rng.gen::<f64>() - 1.0);
                pos[d] = (pos[d] + vel[d]).clamp(-box_halfwidth, box_halfwidth);
            }
        }
        comps.push(MixtureComponent {
            weight: 1.0,
            mean,
            var: component_sd * component_sd,
        });
    }
    let block = GaussianMixtureModel::new(comps, SigmaSchedule::EdmVe)?;
    BlockProductModel::new(vec![block; segments])
}

fn build_reward(cfg: &RewardConfig, rho: f64, model: &ModelConfig) -> Result<RewardTerm> {
    let kind = match cfg {
        RewardConfig::Quadratic { center, scale } => RewardKind::Quadratic {
            center: center.clone(),
            scale: *scale,
        },
        RewardConfig::Stitch {
            start,
            goal,
            intermediate,
            weights,
        } => {
            let ModelConfig::SegmentChain {
                segments, points, ..
            } = model
            else {
                return Err(Error::InvalidConfig(
                    "stitch reward requires the segment_chain model".into(),
                ));
            };
            RewardKind::Stitch {
                segments: *segments,
                points: *points,
                anchors: StitchAnchors {
                    start: *start,
                    goal: *goal,
                    intermediate: *intermediate,
                },
                weights: weights.unwrap_or_else(|| StitchWeights::defaults_for(*segments)),
            }
        }
    };
    Ok(RewardTerm {
        spec: RewardSpec {
            kind,
            cheap_gradient: true,
        },
        schedule: RewardSchedule::new(rho),
    })
}

/// A built experiment: the domain-specific dynamics plus shared pieces.
pub enum BuiltDynamics {
    Continuous(ContinuousDynamics),
    Discrete(DiscreteDynamics),
}

pub struct BuiltExperiment {
    pub grid: TimeGrid,
    pub dynamics: BuiltDynamics,
    pub engine_config: EngineConfig,
    pub smc_config: Option<SmcConfig>,
    pub config_hash: String,
}

pub fn build_experiment(cfg: &ExperimentConfig) -> Result<BuiltExperiment> {
    let grid = cfg.grid.build()?;
    let config_hash = cfg.hash();

    let burn_in = cfg
        .engine
        .burn_in
        .unwrap_or_else(|| EngineConfig::default_burn_in(cfg.engine.iterations));
    let mut online = Vec::new();
    for ev in &cfg.engine.online {
        online.push(OnlineEvent {
            at_iteration: ev.at_iteration,
            reward: build_reward(&ev.reward, ev.rho, &cfg.model)?,
        });
    }
    let engine_config = EngineConfig {
        iterations: cfg.engine.iterations,
        burn_in,
        local_move: cfg.engine.local_move,
        resample_top_level: cfg.engine.resample_top_level,
        seed: cfg.seed,
        online,
        workers: cfg.engine.workers,
    };
    let smc_config = cfg.smc.as_ref().map(|s| SmcConfig {
        particles: s.particles,
        resample_every: s.resample_every,
        scheme: match s.scheme {
            SchemeConfig::Systematic => ResampleScheme::Systematic,
            SchemeConfig::Partial { fraction } => ResampleScheme::Partial { fraction },
        },
        trigger: match s.trigger {
            TriggerConfig::Always => ResampleTrigger::Always,
            TriggerConfig::EssBelow { threshold } => ResampleTrigger::EssBelow(threshold),
            TriggerConfig::Never => ResampleTrigger::Never,
        },
        seed: cfg.seed,
        workers: s.workers,
    });

    let dynamics = match &cfg.model {
        ModelConfig::DiscreteMasking {
            p0,
            cond_p0,
            positions,
        } => {
            let TaskConfig::CfgDebias { w, w_prop } = &cfg.task else {
                return Err(Error::InvalidConfig(
                    "discrete models support the cfg_debias task".into(),
                ));
            };
            let Some(cond_p0) = cond_p0 else {
                return Err(Error::InvalidConfig(
                    "cfg_debias needs cond_p0 on the discrete model".into(),
                ));
            };
            let uncond = Arc::new(ExactDiscreteModel::new(p0.clone(), *positions)?);
            let cond = Arc::new(
                ExactDiscreteModel::new(cond_p0.clone(), *positions)?.with_label("cond"),
            );
            let task = DiscreteCfgTask::new(uncond, cond, *w, w_prop.unwrap_or(*w))?
                .with_strict(cfg.engine.strict_ctmc);
            BuiltDynamics::Discrete(DiscreteDynamics::new(task))
        }
        model_cfg => {
            let (base, cond): (Arc<dyn ContinuousModel>, Option<Arc<dyn ContinuousModel>>) =
                match model_cfg {
                    ModelConfig::GaussianMixture {
                        components,
                        cond_components,
                        sigma,
                    } => {
                        let sigma = sigma.build();
                        let base = Arc::new(build_mixture(components, sigma)?);
                        let cond = match cond_components {
                            Some(cs) => Some(Arc::new(
                                build_mixture(cs, sigma)?.with_label("cond"),
                            )
                                as Arc<dyn ContinuousModel>),
                            None => None,
                        };
                        (base, cond)
                    }
                    ModelConfig::SegmentChain {
                        segments,
                        points,
                        shapes,
                        shape_seed,
                        component_sd,
                        box_halfwidth,
                    } => (
                        Arc::new(build_segment_model(
                            *segments,
                            *points,
                            *shapes,
                            *shape_seed,
                            *component_sd,
                            *box_halfwidth,
                        )?),
                        None,
                    ),
                    ModelConfig::DiscreteMasking { .. } => unreachable!(),
                };

            let mut task = match &cfg.task {
                TaskConfig::Tempering { beta } => {
                    ContinuousTask::new(TaskKind::Tempering { beta: *beta }, vec![base])?
                }
                TaskConfig::RewardTilt { reward, rho } => {
                    let term = build_reward(reward, *rho, &cfg.model)?;
                    ContinuousTask::new(TaskKind::RewardTilt, vec![base])?.with_reward(term)
                }
                TaskConfig::Composition { copies } => {
                    let models: Vec<Arc<dyn ContinuousModel>> =
                        (0..*copies).map(|_| base.clone()).collect();
                    ContinuousTask::new(TaskKind::Composition, models)?
                }
                TaskConfig::CfgDebias { w, w_prop } => {
                    let Some(cond) = cond else {
                        return Err(Error::InvalidConfig(
                            "cfg_debias needs cond_components on the model".into(),
                        ));
                    };
                    ContinuousTask::new(
                        TaskKind::CfgDebias {
                            w: *w,
                            w_prop: w_prop.unwrap_or(*w),
                        },
                        vec![base, cond],
                    )?
                }
            };
            match cfg.engine.proposal {
                ProposalConfig::TaskHeuristic => {}
                ProposalConfig::ExactReversal => {
                    task = task.with_proposal(ProposalStyle::ExactReversal);
                }
            }
            let use_reference = cfg
                .engine
                .use_reference
                .unwrap_or(matches!(cfg.task, TaskConfig::Tempering { .. }));
            if use_reference {
                task = task.with_moment_matched_reference();
            }
            BuiltDynamics::Continuous(ContinuousDynamics::new(task)?)
        }
    };

    Ok(BuiltExperiment {
        grid,
        dynamics,
        engine_config,
        smc_config,
        config_hash,
    })
}

// ---------------------------------------------------------------------------
// Outputs
// ---------------------------------------------------------------------------

pub fn write_samples_csv<S>(
    path: &Path,
    labels: &[String],
    rows: &[SampleRow<S>],
    fields: impl Fn(&S) -> Vec<String>,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write!(w, "iteration,replica_id")?;
    for l in labels {
        write!(w, ",{l}")?;
    }
    writeln!(w)?;
    for row in rows {
        write!(w, "{},{}", row.iteration, row.replica_id)?;
        for f in fields(&row.state) {
            write!(w, ",{f}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

/// Parsed samples file: continuous rows or discrete token rows.
pub enum LoadedSamples {
    Continuous(Vec<SampleRow<Vec<f64>>>),
    Discrete(Vec<SampleRow<DiscreteState>>),
}

pub fn read_samples_csv(path: &Path, discrete: bool) -> Result<LoadedSamples> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let _header = lines
        .next()
        .ok_or_else(|| Error::InvalidConfig("empty samples file".into()))??;
    let mut cont = Vec::new();
    let mut disc = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let iteration: u64 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::InvalidConfig("bad iteration field".into()))?;
        let replica_id: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::InvalidConfig("bad replica field".into()))?;
        if discrete {
            let tokens: std::result::Result<Vec<u32>, _> =
                parts.map(|v| v.parse::<u32>()).collect();
            disc.push(SampleRow {
                iteration,
                replica_id,
                state: DiscreteState::new(
                    tokens.map_err(|e| Error::InvalidConfig(format!("bad token: {e}")))?,
                ),
            });
        } else {
            let xs: std::result::Result<Vec<f64>, _> = parts.map(|v| v.parse::<f64>()).collect();
            cont.push(SampleRow {
                iteration,
                replica_id,
                state: xs.map_err(|e| Error::InvalidConfig(format!("bad value: {e}")))?,
            });
        }
    }
    Ok(if discrete {
        LoadedSamples::Discrete(disc)
    } else {
        LoadedSamples::Continuous(cont)
    })
}

// ---------------------------------------------------------------------------
// Metrics assembly
// ---------------------------------------------------------------------------

/// Inverse-CDF sampling from an unnormalised 1-D density on a fine grid.
pub fn sample_exact_1d(
    density: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    grid_points: usize,
    count: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f64> {
    let n = grid_points.max(16);
    let h = (hi - lo) / n as f64;
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    let mut prev = density(lo);
    for i in 1..=n {
        let cur = density(lo + i as f64 * h);
        acc += 0.5 * (prev + cur) * h;
        cdf.push(acc);
        prev = cur;
    }
    let total = acc;
    (0..count)
        .map(|_| {
            let u: f64 = rng.gen::<f64>() * total;
            let idx = cdf.partition_point(|&c| c < u).clamp(1, n);
            let (c0, c1) = (cdf[idx - 1], cdf[idx]);
            let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
            lo + (idx as f64 - 1.0 + frac) * h
        })
        .collect()
}

fn stitch_distances(
    chain: &[f64],
    segments: usize,
    points: usize,
    start: &[f64; 2],
    goal: &[f64; 2],
) -> Vec<f64> {
    let pt = |seg: usize, idx: usize| {
        let b = (seg * points + idx) * 2;
        [chain[b], chain[b + 1]]
    };
    let d = |a: [f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut out = vec![d(pt(0, 0), start), d(pt(segments - 1, points - 1), goal)];
    for j in 0..segments - 1 {
        let tail = pt(j, points - 1);
        let head = pt(j + 1, 0);
        out.push(d(tail, &head));
    }
    out
}

/// True when every anchor distance of the chain is below the threshold.
pub fn stitch_success(
    chain: &[f64],
    segments: usize,
    points: usize,
    start: &[f64; 2],
    goal: &[f64; 2],
    threshold: f64,
) -> bool {
    stitch_distances(chain, segments, points, start, goal)
        .into_iter()
        .all(|d| d < threshold)
}

/// True when some chain point passes within the threshold of the point.
pub fn stitch_pass_through(chain: &[f64], point: &[f64; 2], threshold: f64) -> bool {
    chain
        .chunks_exact(2)
        .any(|p| ((p[0] - point[0]).powi(2) + (p[1] - point[1]).powi(2)).sqrt() < threshold)
}

fn compute_stitch_metrics(
    rows: &[SampleRow<Vec<f64>>],
    segments: usize,
    points: usize,
    anchors: &StitchAnchors,
    threshold: f64,
) -> StitchMetrics {
    let n = rows.len();
    if n == 0 {
        return StitchMetrics::default();
    }
    let succ: Vec<bool> = rows
        .iter()
        .map(|r| {
            stitch_success(
                &r.state,
                segments,
                points,
                &anchors.start,
                &anchors.goal,
                threshold,
            )
        })
        .collect();
    let rate = |s: &[bool]| s.iter().filter(|&&b| b).count() as f64 / s.len().max(1) as f64;
    let q = n / 4;
    let pass = match &anchors.intermediate {
        Some(p) => {
            rows.iter()
                .filter(|r| stitch_pass_through(&r.state, p, threshold))
                .count() as f64
                / n as f64
        }
        None => 0.0,
    };
    StitchMetrics {
        success_overall: rate(&succ),
        success_first_quartile: rate(&succ[..q.max(1)]),
        success_last_quartile: rate(&succ[n - q.max(1)..]),
        pass_through_overall: pass,
    }
}

fn compute_metrics_continuous(
    cfg: &ExperimentConfig,
    grid: &TimeGrid,
    task: &ContinuousTask,
    rows: &[SampleRow<Vec<f64>>],
    weights: Option<&[f64]>,
) -> Result<MetricReport> {
    let mut report = MetricReport {
        samples: rows.len() as u64,
        ..Default::default()
    };
    let t_sample = grid.t_min();
    if task.dim() == 1 {
        let (lo, hi) = cfg.metrics.range.unwrap_or((-4.0, 4.0));
        let xs: Vec<f64> = rows.iter().map(|r| r.state[0]).collect();
        let density = |x: f64| task.unnormalized_log_target(&[x], t_sample, 0, grid).exp();
        let exact = exact_bin_probs(&density, lo, hi, cfg.metrics.bins, 8);
        report.tvd = Some(tvd_histogram(&xs, weights, &exact, lo, hi));
        report.mode_occupancy = Some(mode_occupancy(&xs, 0.5 * (lo + hi)));
        if cfg.metrics.w2_reference_samples > 0 && !xs.is_empty() {
            let mut rng = RngFactory::new(cfg.seed ^ 0x5EED).stream(0, 0, Purpose::Oracle);
            let reference = sample_exact_1d(
                &density,
                lo,
                hi,
                2048,
                cfg.metrics.w2_reference_samples,
                &mut rng,
            );
            report.w2 = Some(w2_1d(&xs, &reference));
        }
    }
    if let Some(term) = &task.reward {
        if let RewardKind::Stitch {
            segments,
            points,
            anchors,
            ..
        } = &term.spec.kind
        {
            report.stitch = Some(compute_stitch_metrics(
                rows,
                *segments,
                *points,
                anchors,
                cfg.metrics.stitch_threshold,
            ));
        }
    }
    Ok(report)
}

fn compute_metrics_discrete(
    grid: &TimeGrid,
    task: &DiscreteCfgTask,
    rows: &[SampleRow<DiscreteState>],
) -> Result<MetricReport> {
    let exact = task.enumerate_target(grid.t_min())?;
    let states: Vec<DiscreteState> = rows.iter().map(|r| r.state.clone()).collect();
    Ok(MetricReport {
        samples: rows.len() as u64,
        tvd: Some(tvd_discrete(&states, &exact)),
        ..Default::default()
    })
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Pt,
    Smc,
}

pub struct RunOutput {
    pub dir: PathBuf,
    pub report: MetricReport,
}

fn pt_samples<D: Dynamics>(
    grid: &TimeGrid,
    dynamics: D,
    engine_config: &EngineConfig,
    config_hash: &str,
    dir: &Path,
) -> Result<(D, Vec<SampleRow<D::State>>, crate::engine::Diagnostics)> {
    let mut engine = Engine::init(dynamics, grid.clone(), engine_config.clone(), config_hash)?;
    engine.run()?;
    write_samples_csv(
        &dir.join("samples.csv"),
        &engine.dynamics.state_labels(),
        &engine.samples,
        |s| engine.dynamics.state_fields(s),
    )?;
    write_json(&dir.join("diagnostics.json"), &engine.diagnostics)?;
    engine.write_checkpoint(&dir.join("checkpoint.json"))?;
    let Engine {
        dynamics,
        samples,
        diagnostics,
        ..
    } = engine;
    Ok((dynamics, samples, diagnostics))
}

fn smc_samples<D: Dynamics>(
    grid: &TimeGrid,
    dynamics: &D,
    smc_cfg: &SmcConfig,
    dir: &Path,
) -> Result<(Vec<SampleRow<D::State>>, Vec<f64>, SmcDiagnostics)> {
    let (ps, diag) = smc_run(dynamics, grid, smc_cfg)?;
    let rows: Vec<SampleRow<D::State>> = ps
        .particles
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, state)| SampleRow {
            iteration: i as u64,
            replica_id: i,
            state,
        })
        .collect();
    write_samples_csv(
        &dir.join("samples.csv"),
        &dynamics.state_labels(),
        &rows,
        |s| dynamics.state_fields(s),
    )?;
    #[derive(Serialize)]
    struct Dump<'a> {
        #[serde(flatten)]
        diagnostics: &'a SmcDiagnostics,
        ancestry: &'a [Vec<usize>],
    }
    write_json(
        &dir.join("diagnostics.json"),
        &Dump {
            diagnostics: &diag,
            ancestry: &ps.ancestry,
        },
    )?;
    let weights = ps.normalized_weights()?;
    Ok((rows, weights, diag))
}

/// Execute one experiment and write `config.json`, `samples.csv`,
/// `diagnostics.json`, `metrics.json` (and a final `checkpoint.json` for PT
/// runs) under `out_root/<name>`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mode: RunMode,
    out_root: &Path,
) -> Result<RunOutput> {
    let built = build_experiment(cfg)?;
    let dir = out_root.join(&cfg.name);
    std::fs::create_dir_all(&dir)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        config_hash: &'a str,
        #[serde(flatten)]
        config: &'a ExperimentConfig,
    }
    write_json(
        &dir.join("config.json"),
        &Resolved {
            config_hash: &built.config_hash,
            config: cfg,
        },
    )?;

    let BuiltExperiment {
        grid,
        dynamics,
        engine_config,
        smc_config,
        config_hash,
    } = built;

    let report = match (mode, dynamics) {
        (RunMode::Pt, BuiltDynamics::Continuous(dynamics)) => {
            let (dynamics, samples, diag) =
                pt_samples(&grid, dynamics, &engine_config, &config_hash, &dir)?;
            let mut report =
                compute_metrics_continuous(cfg, &grid, &dynamics.task, &samples, None)?;
            report.swap_acceptance = Some(diag.acceptance_rates());
            report.round_trips = Some(diag.total_round_trips());
            report.nfe = diag.nfe;
            report.wall_time_s = diag.wall_time_s;
            report
        }
        (RunMode::Pt, BuiltDynamics::Discrete(dynamics)) => {
            let (dynamics, samples, diag) =
                pt_samples(&grid, dynamics, &engine_config, &config_hash, &dir)?;
            let mut report = compute_metrics_discrete(&grid, &dynamics.task, &samples)?;
            report.swap_acceptance = Some(diag.acceptance_rates());
            report.round_trips = Some(diag.total_round_trips());
            report.nfe = diag.nfe;
            report.wall_time_s = diag.wall_time_s;
            report
        }
        (RunMode::Smc, BuiltDynamics::Continuous(dynamics)) => {
            let smc_cfg = smc_config.ok_or_else(|| {
                Error::InvalidConfig("smc run requested without an smc config block".into())
            })?;
            let (rows, weights, diag) = smc_samples(&grid, &dynamics, &smc_cfg, &dir)?;
            let mut report =
                compute_metrics_continuous(cfg, &grid, &dynamics.task, &rows, Some(&weights))?;
            report.ess_trace = Some(diag.ess_history.clone());
            report.nfe = diag.nfe;
            report.wall_time_s = diag.wall_time_s;
            report
        }
        (RunMode::Smc, BuiltDynamics::Discrete(dynamics)) => {
            let smc_cfg = smc_config.ok_or_else(|| {
                Error::InvalidConfig("smc run requested without an smc config block".into())
            })?;
            let (rows, _weights, diag) = smc_samples(&grid, &dynamics, &smc_cfg, &dir)?;
            let mut report = compute_metrics_discrete(&grid, &dynamics.task, &rows)?;
            report.ess_trace = Some(diag.ess_history.clone());
            report.nfe = diag.nfe;
            report.wall_time_s = diag.wall_time_s;
            report
        }
    };
    write_json(&dir.join("metrics.json"), &report)?;
    Ok(RunOutput { dir, report })
}

/// Recompute metrics from a stored run directory and emit plot-ready tables.
pub fn report_run(dir: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(dir.join("config.json"))?;
    #[derive(Deserialize)]
    struct Resolved {
        #[allow(dead_code)]
        config_hash: String,
        #[serde(flatten)]
        config: ExperimentConfig,
    }
    let resolved: Resolved =
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
    let cfg = resolved.config;
    let built = build_experiment(&cfg)?;
    let discrete = matches!(cfg.model, ModelConfig::DiscreteMasking { .. });
    let samples = read_samples_csv(&dir.join("samples.csv"), discrete)?;
    let report = match (&built.dynamics, &samples) {
        (BuiltDynamics::Continuous(dynamics), LoadedSamples::Continuous(rows)) => {
            compute_metrics_continuous(&cfg, &built.grid, &dynamics.task, rows, None)?
        }
        (BuiltDynamics::Discrete(dynamics), LoadedSamples::Discrete(rows)) => {
            compute_metrics_discrete(&built.grid, &dynamics.task, rows)?
        }
        _ => unreachable!("domain fixed by the model config"),
    };
    write_json(&dir.join("metrics_recomputed.json"), &report)?;

    // plot-ready histogram table for 1-D continuous runs
    if let (BuiltDynamics::Continuous(dynamics), LoadedSamples::Continuous(rows)) =
        (&built.dynamics, &samples)
    {
        if dynamics.task.dim() == 1 {
            let (lo, hi) = cfg.metrics.range.unwrap_or((-4.0, 4.0));
            let bins = cfg.metrics.bins;
            let t_sample = built.grid.t_min();
            let density = |x: f64| {
                dynamics
                    .task
                    .unnormalized_log_target(&[x], t_sample, 0, &built.grid)
                    .exp()
            };
            let exact = exact_bin_probs(density, lo, hi, bins, 8);
            let width = (hi - lo) / bins as f64;
            let mut hist = vec![0.0; bins];
            for r in rows {
                let x = r.state[0];
                if x >= lo && x < hi {
                    hist[(((x - lo) / width) as usize).min(bins - 1)] += 1.0;
                }
            }
            let n = rows.len().max(1) as f64;
            let file = std::fs::File::create(dir.join("histogram.csv"))?;
            let mut w = std::io::BufWriter::new(file);
            writeln!(w, "bin_center,empirical,exact")?;
            for b in 0..bins {
                let center = lo + (b as f64 + 0.5) * width;
                writeln!(w, "{:?},{:?},{:?}", center, hist[b] / n, exact[b])?;
            }
        }
    }
    Ok(report)
}

/// Resume a checkpointed PT run for `extra_iterations` more iterations.
/// Outputs land in a `resume-<from>-<to>` subdirectory next to the
/// checkpoint; the samples file holds only the resumed stretch, which
/// matches what an uninterrupted run would have produced there.
pub fn resume_run(checkpoint_path: &Path, extra_iterations: u64) -> Result<RunOutput> {
    if extra_iterations == 0 {
        return Err(Error::InvalidConfig("resume needs iterations > 0".into()));
    }
    let dir = checkpoint_path
        .parent()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no parent directory".into()))?;
    let text = std::fs::read_to_string(dir.join("config.json"))?;
    #[derive(Deserialize)]
    struct Resolved {
        config_hash: String,
        #[serde(flatten)]
        config: ExperimentConfig,
    }
    let resolved: Resolved =
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
    let cfg = resolved.config;
    let built = build_experiment(&cfg)?;
    if built.config_hash != resolved.config_hash {
        return Err(Error::Checkpoint(format!(
            "stored config hash {} does not match the rebuilt config {}",
            resolved.config_hash, built.config_hash
        )));
    }

    let BuiltExperiment {
        grid,
        dynamics,
        mut engine_config,
        config_hash,
        ..
    } = built;

    match dynamics {
        BuiltDynamics::Continuous(dynamics) => {
            let ckpt = Engine::<ContinuousDynamics>::read_checkpoint(checkpoint_path)?;
            let from = ckpt.ensemble.iteration;
            engine_config.iterations = from + extra_iterations;
            let out_dir = dir.join(format!("resume-{}-{}", from, engine_config.iterations));
            std::fs::create_dir_all(&out_dir)?;
            let mut engine =
                Engine::resume(dynamics, grid.clone(), engine_config, &config_hash, ckpt)?;
            engine.run()?;
            write_samples_csv(
                &out_dir.join("samples.csv"),
                &engine.dynamics.state_labels(),
                &engine.samples,
                |s| engine.dynamics.state_fields(s),
            )?;
            write_json(&out_dir.join("diagnostics.json"), &engine.diagnostics)?;
            engine.write_checkpoint(&out_dir.join("checkpoint.json"))?;
            let mut report =
                compute_metrics_continuous(&cfg, &grid, &engine.dynamics.task, &engine.samples, None)?;
            report.swap_acceptance = Some(engine.diagnostics.acceptance_rates());
            report.round_trips = Some(engine.diagnostics.total_round_trips());
            report.nfe = engine.diagnostics.nfe;
            report.wall_time_s = engine.diagnostics.wall_time_s;
            write_json(&out_dir.join("metrics.json"), &report)?;
            Ok(RunOutput {
                dir: out_dir,
                report,
            })
        }
        BuiltDynamics::Discrete(dynamics) => {
            let ckpt = Engine::<DiscreteDynamics>::read_checkpoint(checkpoint_path)?;
            let from = ckpt.ensemble.iteration;
            engine_config.iterations = from + extra_iterations;
            let out_dir = dir.join(format!("resume-{}-{}", from, engine_config.iterations));
            std::fs::create_dir_all(&out_dir)?;
            let mut engine =
                Engine::resume(dynamics, grid.clone(), engine_config, &config_hash, ckpt)?;
            engine.run()?;
            write_samples_csv(
                &out_dir.join("samples.csv"),
                &engine.dynamics.state_labels(),
                &engine.samples,
                |s| engine.dynamics.state_fields(s),
            )?;
            write_json(&out_dir.join("diagnostics.json"), &engine.diagnostics)?;
            engine.write_checkpoint(&out_dir.join("checkpoint.json"))?;
            let mut report = compute_metrics_discrete(&grid, &engine.dynamics.task, &engine.samples)?;
            report.swap_acceptance = Some(engine.diagnostics.acceptance_rates());
            report.round_trips = Some(engine.diagnostics.total_round_trips());
            report.nfe = engine.diagnostics.nfe;
            report.wall_time_s = engine.diagnostics.wall_time_s;
            write_json(&out_dir.join("metrics.json"), &report)?;
            Ok(RunOutput {
                dir: out_dir,
                report,
            })
        }
    }
}
