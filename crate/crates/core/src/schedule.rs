//! Variance-preserving forward process: `x_t = alpha_t * x0 + sigma_t * eps`.

use std::f64::consts::FRAC_PI_2;

use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, CsdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `alpha = cos(pi t / 2)`, `sigma = sin(pi t / 2)`.
    #[default]
    VpCosine,
    /// `alpha = sqrt(1 - t)`, `sigma = sqrt(t)`.
    VpLinear,
}

/// Noise schedule over `t in [0, 1]` together with the timestep range that
/// distillation samples from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    #[serde(default)]
    pub kind: ScheduleKind,
    pub t_min: f64,
    pub t_max: f64,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_min: f64, t_max: f64) -> Result<Self> {
        let s = NoiseSchedule { kind, t_min, t_max };
        s.validate()?;
        Ok(s)
    }

    /// Editing range `[0.2, 0.5]`.
    pub fn editing(kind: ScheduleKind) -> Self {
        NoiseSchedule {
            kind,
            t_min: 0.2,
            t_max: 0.5,
        }
    }

    /// Generation range `[0.2, 0.98]`.
    pub fn generation(kind: ScheduleKind) -> Self {
        NoiseSchedule {
            kind,
            t_min: 0.2,
            t_max: 0.98,
        }
    }

    /// Accepts the degenerate range `t_min == t_max`.
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min.is_finite() && self.t_max.is_finite()) {
            return Err(CsdError::config("t_min", "timestep bounds must be finite"));
        }
        if !(0.0..1.0).contains(&self.t_min) {
            return Err(CsdError::config("t_min", "must lie in [0, 1)"));
        }
        if self.t_max < self.t_min || self.t_max > 1.0 {
            return Err(CsdError::config("t_max", "must lie in [t_min, 1]"));
        }
        Ok(())
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        alpha_sigma(self.kind, t)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::editing(ScheduleKind::VpCosine)
    }
}

pub fn alpha_sigma(kind: ScheduleKind, t: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CsdError::Domain(format!("timestep {t} outside [0, 1]")));
    }
    Ok(match kind {
        ScheduleKind::VpCosine => {
            let (s, c) = (FRAC_PI_2 * t).sin_cos();
            (c, s)
        }
        ScheduleKind::VpLinear => ((1.0 - t).sqrt(), t.sqrt()),
    })
}

/// `alpha_t * x0 + sigma_t * eps`.
pub fn noise_sample(schedule: &NoiseSchedule, x0: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    check_dims("noise_sample", x0.len(), eps.len())?;
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| alpha * x + sigma * e)
        .collect())
}

/// Uniform draw on `[t_min, t_max]`.
pub fn sample_timestep<R: rand::Rng + ?Sized>(rng: &mut R, schedule: &NoiseSchedule) -> f64 {
    let u: f64 = rng.random();
    schedule.t_min + (schedule.t_max - schedule.t_min) * u
}

pub fn standard_normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSharing {
    /// One draw of `eps` used by every particle.
    #[default]
    SharedAcrossParticles,
    PerParticle,
}

/// One timestep and its Gaussian noise. `eps` holds either a single shared
/// vector or one vector per particle.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraw {
    pub t: f64,
    pub eps: Vec<Vec<f64>>,
}

impl StepDraw {
    pub fn shared(t: f64, eps: Vec<f64>) -> Self {
        StepDraw { t, eps: vec![eps] }
    }

    pub fn per_particle(t: f64, eps: Vec<Vec<f64>>) -> Self {
        StepDraw { t, eps }
    }

    /// Draws `t` first, then the noise vectors, from the same generator.
    pub fn sample<R: rand::Rng + ?Sized>(
        rng: &mut R,
        schedule: &NoiseSchedule,
        particles: usize,
        dim: usize,
        sharing: NoiseSharing,
    ) -> Self {
        let t = sample_timestep(rng, schedule);
        let count = match sharing {
            NoiseSharing::SharedAcrossParticles => 1,
            NoiseSharing::PerParticle => particles,
        };
        let eps = (0..count).map(|_| standard_normal_vec(rng, dim)).collect();
        StepDraw { t, eps }
    }

    /// Noise used by particle `i`.
    pub fn noise_for(&self, i: usize) -> &[f64] {
        if self.eps.len() == 1 {
            &self.eps[0]
        } else {
            &self.eps[i]
        }
    }

    pub fn is_shared(&self) -> bool {
        self.eps.len() == 1
    }

    pub(crate) fn check(&self, particles: usize, dim: usize) -> Result<()> {
        if self.eps.len() != 1 && self.eps.len() != particles {
            return Err(CsdError::DimensionMismatch {
                context: "step draw particle count",
                expected: particles,
                found: self.eps.len(),
            });
        }
        for e in &self.eps {
            check_dims("step draw noise", dim, e.len())?;
        }
        Ok(())
    }
}
