//! Score-distillation gradients and the optimization loop.
//!
//! All gradients here are *descent* directions on the rendered sample: the
//! optimizer applies `x <- x - eta * grad`. For a set of `N` samples the
//! per-sample residuals `r_j` (for instance `eps_hat_j - eps_j`) are mixed as
//!
//! ```text
//! grad_i = (w / N) * sum_j [ k(y_j, y_i) r_j - grad_{y_j} k(y_j, y_i) ]
//! ```
//!
//! where `y` are the kernel arguments (noised or clean samples). Residuals
//! point against the score, so the kernel-gradient term carries a minus sign
//! in descent form; after the update it pushes samples apart, as in SVGD.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::canvas::Renderer;
use crate::error::{check_dims, CsdError, Result};
use crate::kernel::{KernelSpec, PairKernel};
use crate::oracle::{Condition, EpsQuery, GuidanceParams, ScoreOracle};
use crate::schedule::{noise_sample, NoiseSchedule, NoiseSharing, StepDraw};
use crate::seed::Rng;
use crate::svgd::{kernel_mix, pairwise_distance_stats, ParticleSet};

/// Timestep weighting `w(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightPolicy {
    #[default]
    ConstantOne,
    SigmaSquared,
}

/// What is subtracted from the guided prediction at the target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// `eps_hat(x_t) - eps`.
    RandomNoise,
    /// Image-only guided prediction at the noised source.
    #[default]
    SourceConditional,
    /// Prediction under a source prompt at the noised source, with the target
    /// prompt used at the target.
    Dds {
        source_text_ref: String,
        target_text_ref: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KernelOn {
    #[default]
    Noised,
    Clean,
}

/// `Svgd` mixes residuals through the kernel; `Independent` updates each
/// sample from its own residual alone (single-sample distillation per
/// particle), which is the no-mixing ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    #[default]
    Svgd,
    Independent,
}

/// Step decay: the learning rate is multiplied by `factor` every `every` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub every: usize,
    pub factor: f64,
}

impl Default for LrDecay {
    fn default() -> Self {
        LrDecay {
            every: 100,
            factor: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default)]
    pub guidance: GuidanceParams,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub weight_policy: WeightPolicy,
    #[serde(default)]
    pub noise_sharing: NoiseSharing,
    #[serde(default)]
    pub baseline: Baseline,
    #[serde(default)]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub kernel_on: KernelOn,
    #[serde(default)]
    pub coupling: Coupling,
    pub eta: f64,
    #[serde(default)]
    pub lr_decay: LrDecay,
    pub steps: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            guidance: GuidanceParams::default(),
            schedule: NoiseSchedule::default(),
            weight_policy: WeightPolicy::default(),
            noise_sharing: NoiseSharing::default(),
            baseline: Baseline::default(),
            kernel: KernelSpec::default(),
            kernel_on: KernelOn::default(),
            coupling: Coupling::default(),
            eta: 0.1,
            lr_decay: LrDecay::default(),
            steps: 100,
        }
    }
}

fn nest(err: CsdError, prefix: &str) -> CsdError {
    match err {
        CsdError::Config { path, message } => CsdError::Config {
            path: format!("{prefix}.{path}"),
            message,
        },
        other => other,
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate().map_err(|e| nest(e, "guidance"))?;
        self.schedule.validate().map_err(|e| nest(e, "schedule"))?;
        self.kernel.validate().map_err(|e| nest(e, "kernel"))?;
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(CsdError::config("eta", "must be positive and finite"));
        }
        if self.lr_decay.every == 0 {
            return Err(CsdError::config("lr_decay.every", "must be at least 1"));
        }
        let f = self.lr_decay.factor;
        if !(f > 0.0 && f <= 1.0) {
            return Err(CsdError::config("lr_decay.factor", "must lie in (0, 1]"));
        }
        if self.steps == 0 {
            return Err(CsdError::config("steps", "must be at least 1"));
        }
        Ok(())
    }

    pub fn weight(&self, t: f64) -> Result<f64> {
        Ok(match self.weight_policy {
            WeightPolicy::ConstantOne => 1.0,
            WeightPolicy::SigmaSquared => {
                let (_, s) = self.schedule.alpha_sigma(t)?;
                s * s
            }
        })
    }

    /// Learning rate in effect at `step` (0-based).
    pub fn eta_at(&self, step: usize) -> f64 {
        let k = (step / self.lr_decay.every) as i32;
        self.eta * self.lr_decay.factor.powi(k)
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn check_finite(vectors: &[Vec<f64>], what: &'static str) -> Result<()> {
    for (i, v) in vectors.iter().enumerate() {
        if v.iter().any(|a| !a.is_finite()) {
            return Err(CsdError::NonFinite { what, index: i });
        }
    }
    Ok(())
}

/// Single-sample distillation gradient `w * (eps_hat(x_t) - eps)` with
/// `x_t = alpha_t x + sigma_t eps`. The renderer Jacobian is left to the
/// caller.
#[allow(clippy::too_many_arguments)]
pub fn sds_grad(
    x: &[f64],
    oracle: &dyn ScoreOracle,
    cond: &Condition,
    g: &GuidanceParams,
    schedule: &NoiseSchedule,
    t: f64,
    eps: &[f64],
    w: f64,
) -> Result<Vec<f64>> {
    let x_t = noise_sample(schedule, x, t, eps)?;
    let pred = oracle.eps(&x_t, t, cond, g)?;
    check_dims("oracle output", x.len(), pred.len())?;
    Ok(pred.iter().zip(eps).map(|(p, e)| w * (p - e)).collect())
}

/// Mix per-sample residuals through the kernel (or not, under
/// [`Coupling::Independent`]) and apply the weight `w`.
pub fn mix_residuals(
    points: &[Vec<f64>],
    residuals: &[Vec<f64>],
    kernel: &dyn PairKernel,
    coupling: Coupling,
    w: f64,
) -> Vec<Vec<f64>> {
    match coupling {
        Coupling::Independent => residuals
            .iter()
            .map(|r| r.iter().map(|v| w * v).collect())
            .collect(),
        Coupling::Svgd => {
            let (attraction, repulsion) = kernel_mix(points, residuals, kernel);
            attraction
                .iter()
                .zip(&repulsion)
                .map(|(a, r)| a.iter().zip(r).map(|(x, y)| w * (x - y)).collect())
                .collect()
        }
    }
}

fn noised(schedule: &NoiseSchedule, xs: &[Vec<f64>], draw: &StepDraw) -> Result<Vec<Vec<f64>>> {
    xs.iter()
        .enumerate()
        .map(|(i, x)| noise_sample(schedule, x, draw.t, draw.noise_for(i)))
        .collect()
}

fn mix_for(
    clean: &[Vec<f64>],
    noised: &[Vec<f64>],
    residuals: &[Vec<f64>],
    config: &DistillConfig,
    w: f64,
) -> Result<Vec<Vec<f64>>> {
    let points = match config.kernel_on {
        KernelOn::Noised => noised,
        KernelOn::Clean => clean,
    };
    let kernel = config.kernel.resolve(points)?;
    Ok(mix_residuals(points, residuals, &kernel, config.coupling, w))
}

fn check_conds(n: usize, conds: &[Condition]) -> Result<()> {
    check_dims("conditions per particle", n, conds.len())
}

/// Collaborative distillation gradient for every sample of `set`.
pub fn csd_grads(
    set: &ParticleSet,
    oracle: &dyn ScoreOracle,
    conds: &[Condition],
    g: &GuidanceParams,
    draw: &StepDraw,
    config: &DistillConfig,
) -> Result<Vec<Vec<f64>>> {
    let n = set.len();
    check_conds(n, conds)?;
    draw.check(n, set.dim())?;
    let x_t = noised(&config.schedule, set.particles(), draw)?;
    let queries: Vec<EpsQuery<'_>> = x_t
        .iter()
        .zip(conds)
        .map(|(x, cond)| EpsQuery {
            x_t: x,
            t: draw.t,
            cond,
        })
        .collect();
    let preds = oracle.eps_batch(&queries, g)?;
    let residuals: Vec<Vec<f64>> = preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            check_dims("oracle output", set.dim(), p.len())?;
            Ok(sub(p, draw.noise_for(i)))
        })
        .collect::<Result<_>>()?;
    check_finite(&residuals, "oracle prediction")?;
    let w = config.weight(draw.t)?;
    mix_for(set.particles(), &x_t, &residuals, config, w)
}

/// Instruction-only signal for one sample: the dual-guided prediction at the
/// noised target minus the image-only guided prediction at the noised source,
/// both noised with the same `(t, eps)`.
#[allow(clippy::too_many_arguments)]
pub fn csd_edit_delta(
    x: &[f64],
    x_src: &[f64],
    oracle: &dyn ScoreOracle,
    cond: &Condition,
    g: &GuidanceParams,
    schedule: &NoiseSchedule,
    t: f64,
    eps: &[f64],
) -> Result<Vec<f64>> {
    if !matches!(cond, Condition::ImageText { .. }) {
        return Err(CsdError::Contract(
            "editing delta needs an image-text condition".into(),
        ));
    }
    check_dims("csd_edit_delta source", x.len(), x_src.len())?;
    let x_t = noise_sample(schedule, x, t, eps)?;
    let src_t = noise_sample(schedule, x_src, t, eps)?;
    let full = oracle.eps(&x_t, t, cond, g)?;
    let base = oracle.eps(&src_t, t, &cond.without_text(), g)?;
    check_dims("oracle output", x.len(), full.len())?;
    check_dims("oracle output", x.len(), base.len())?;
    Ok(sub(&full, &base))
}

/// Source set (frozen), target set (optimized) and per-particle conditions.
#[derive(Debug, Clone)]
pub struct EditProblem {
    pub source: ParticleSet,
    pub target: ParticleSet,
    pub conditions: Vec<Condition>,
}

impl EditProblem {
    /// Starts the target at the source.
    pub fn new(source: ParticleSet, conditions: Vec<Condition>) -> Result<Self> {
        check_conds(source.len(), &conditions)?;
        Ok(EditProblem {
            target: source.clone(),
            source,
            conditions,
        })
    }
}

/// One residual vector per particle.
pub type Residuals = Vec<Vec<f64>>;

/// Per-particle residuals for an editing step under the configured baseline,
/// together with the noised targets.
pub fn edit_residuals(
    source: &ParticleSet,
    target: &ParticleSet,
    conditions: &[Condition],
    oracle: &dyn ScoreOracle,
    g: &GuidanceParams,
    draw: &StepDraw,
    config: &DistillConfig,
) -> Result<(Residuals, Residuals)> {
    let n = target.len();
    check_conds(n, conditions)?;
    check_dims("source particle count", n, source.len())?;
    check_dims("source dimension", target.dim(), source.dim())?;
    draw.check(n, target.dim())?;
    let x_t = noised(&config.schedule, target.particles(), draw)?;

    let residuals = match &config.baseline {
        Baseline::RandomNoise => {
            let queries: Vec<EpsQuery<'_>> = x_t
                .iter()
                .zip(conditions)
                .map(|(x, cond)| EpsQuery { x_t: x, t: draw.t, cond })
                .collect();
            let preds = oracle.eps_batch(&queries, g)?;
            preds
                .iter()
                .enumerate()
                .map(|(i, p)| sub(p, draw.noise_for(i)))
                .collect::<Vec<_>>()
        }
        Baseline::SourceConditional => {
            for c in conditions {
                if !matches!(c, Condition::ImageText { .. }) {
                    return Err(CsdError::Contract(
                        "source-conditional baseline needs image-text conditions".into(),
                    ));
                }
            }
            let src_t = noised(&config.schedule, source.particles(), draw)?;
            let base_conds: Vec<Condition> = conditions.iter().map(Condition::without_text).collect();
            let mut queries: Vec<EpsQuery<'_>> = Vec::with_capacity(2 * n);
            for (x, cond) in x_t.iter().zip(conditions) {
                queries.push(EpsQuery { x_t: x, t: draw.t, cond });
            }
            for (x, cond) in src_t.iter().zip(&base_conds) {
                queries.push(EpsQuery { x_t: x, t: draw.t, cond });
            }
            let preds = oracle.eps_batch(&queries, g)?;
            (0..n).map(|i| sub(&preds[i], &preds[n + i])).collect()
        }
        Baseline::Dds {
            source_text_ref,
            target_text_ref,
        } => {
            let src_t = noised(&config.schedule, source.particles(), draw)?;
            let mut tgt_conds = Vec::with_capacity(n);
            let mut src_conds = Vec::with_capacity(n);
            for c in conditions {
                let s = c.source_ref().ok_or_else(|| {
                    CsdError::Contract("delta baseline needs conditions with a source ref".into())
                })?;
                tgt_conds.push(Condition::image_text(s, target_text_ref.as_str()));
                src_conds.push(Condition::image_text(s, source_text_ref.as_str()));
            }
            let mut queries: Vec<EpsQuery<'_>> = Vec::with_capacity(2 * n);
            for (x, cond) in x_t.iter().zip(&tgt_conds) {
                queries.push(EpsQuery { x_t: x, t: draw.t, cond });
            }
            for (x, cond) in src_t.iter().zip(&src_conds) {
                queries.push(EpsQuery { x_t: x, t: draw.t, cond });
            }
            let preds = oracle.eps_batch(&queries, g)?;
            (0..n).map(|i| sub(&preds[i], &preds[n + i])).collect()
        }
    };
    for r in &residuals {
        check_dims("oracle output", target.dim(), r.len())?;
    }
    check_finite(&residuals, "editing residual")?;
    Ok((residuals, x_t))
}

/// Collaborative editing gradient for every target particle.
pub fn csd_edit_grads(
    problem: &EditProblem,
    oracle: &dyn ScoreOracle,
    g: &GuidanceParams,
    draw: &StepDraw,
    config: &DistillConfig,
) -> Result<Vec<Vec<f64>>> {
    edit_step_grads(&problem.source, &problem.target, &problem.conditions, oracle, g, draw, config)
}

pub(crate) fn edit_step_grads(
    source: &ParticleSet,
    target: &ParticleSet,
    conditions: &[Condition],
    oracle: &dyn ScoreOracle,
    g: &GuidanceParams,
    draw: &StepDraw,
    config: &DistillConfig,
) -> Result<Vec<Vec<f64>>> {
    let (residuals, x_t) = edit_residuals(source, target, conditions, oracle, g, draw, config)?;
    let w = config.weight(draw.t)?;
    mix_for(target.particles(), &x_t, &residuals, config, w)
}

/// Per-step record of an optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub eta: f64,
    pub t: f64,
    pub mean_grad_norm: f64,
    pub mean_pairwise_distance: f64,
    pub min_pairwise_distance: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub particles: ParticleSet,
    pub metrics: Vec<StepMetrics>,
}

pub(crate) fn descend(xs: &[Vec<f64>], grads: &[Vec<f64>], eta: f64, step: usize) -> Result<Vec<Vec<f64>>> {
    let next: Vec<Vec<f64>> = xs
        .iter()
        .zip(grads)
        .map(|(x, g)| x.iter().zip(g).map(|(a, b)| a - eta * b).collect())
        .collect();
    check_finite(&next, "particle").map_err(|e| CsdError::NumericAbort {
        step,
        source: Box::new(e),
    })?;
    Ok(next)
}

pub(crate) fn mean_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().map(|g| norm(g)).sum::<f64>() / grads.len().max(1) as f64
}

fn abort_at(step: usize) -> impl Fn(CsdError) -> CsdError {
    move |e| match e {
        e @ CsdError::NumericAbort { .. } => e,
        e @ CsdError::NonFinite { .. } => CsdError::NumericAbort {
            step,
            source: Box::new(e),
        },
        other => other,
    }
}

/// Run `config.steps` editing iterations: draw `(t, eps)`, compute the
/// editing gradients, descend with the decayed learning rate.
pub fn optimize(
    problem: &EditProblem,
    oracle: &dyn ScoreOracle,
    config: &DistillConfig,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let mut target = problem.target.clone();
    let mut metrics = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let started = Instant::now();
        let draw = StepDraw::sample(rng, &config.schedule, target.len(), target.dim(), config.noise_sharing);
        let grads = edit_step_grads(
            &problem.source,
            &target,
            &problem.conditions,
            oracle,
            &config.guidance,
            &draw,
            config,
        )
        .map_err(abort_at(step))?;
        let eta = config.eta_at(step);
        let next = descend(target.particles(), &grads, eta, step)?;
        target = ParticleSet::new(next)?;
        let (mean_d, min_d) = pairwise_distance_stats(target.particles());
        metrics.push(StepMetrics {
            step,
            eta,
            t: draw.t,
            mean_grad_norm: mean_norm(&grads),
            mean_pairwise_distance: mean_d,
            min_pairwise_distance: min_d,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(Trajectory {
        particles: target,
        metrics,
    })
}

/// Parameters rendered through a shared [`Renderer`], with one condition per
/// particle.
#[derive(Debug, Clone)]
pub struct GenerateProblem {
    pub params: ParticleSet,
    pub renderer: Renderer,
    pub conditions: Vec<Condition>,
}

/// Generation-mode loop: collaborative distillation on the rendered samples,
/// pulled back to parameters through the renderer Jacobian.
pub fn optimize_generate(
    problem: &GenerateProblem,
    oracle: &dyn ScoreOracle,
    config: &DistillConfig,
    rng: &mut Rng,
) -> Result<Trajectory> {
    check_conds(problem.params.len(), &problem.conditions)?;
    let mut params = problem.params.clone();
    let mut metrics = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let started = Instant::now();
        let rendered: Vec<Vec<f64>> = params
            .particles()
            .iter()
            .map(|p| problem.renderer.render(p))
            .collect::<Result<_>>()?;
        let rendered = ParticleSet::new(rendered)?;
        let draw = StepDraw::sample(rng, &config.schedule, rendered.len(), rendered.dim(), config.noise_sharing);
        let pixel_grads = csd_grads(&rendered, oracle, &problem.conditions, &config.guidance, &draw, config)
            .map_err(abort_at(step))?;
        let grads: Vec<Vec<f64>> = pixel_grads
            .iter()
            .map(|g| problem.renderer.apply_jacobian(g))
            .collect::<Result<_>>()?;
        let eta = config.eta_at(step);
        let next = descend(params.particles(), &grads, eta, step)?;
        params = ParticleSet::new(next)?;
        let (mean_d, min_d) = pairwise_distance_stats(params.particles());
        metrics.push(StepMetrics {
            step,
            eta,
            t: draw.t,
            mean_grad_norm: mean_norm(&grads),
            mean_pairwise_distance: mean_d,
            min_pairwise_distance: min_d,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(Trajectory {
        particles: params,
        metrics,
    })
}
