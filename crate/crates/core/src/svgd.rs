//! Stein variational gradient descent over a set of particles.
//!
//! The direction for particle `i` is
//! `(1/N) sum_j [ k(x_j, x_i) score(x_j) + grad_{x_j} k(x_j, x_i) ]`
//! and the update moves particles along it (`x += eta * dx`), so they seek
//! high target density while the kernel gradient keeps them apart.

use rayon::prelude::*;

use crate::error::{check_dims, CsdError, Result};
use crate::kernel::{KernelSpec, PairKernel};

/// `N >= 1` finite vectors of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    particles: Vec<Vec<f64>>,
}

impl ParticleSet {
    pub fn new(particles: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = particles.first() else {
            return Err(CsdError::Domain("particle set must be non-empty".into()));
        };
        let d = first.len();
        if d == 0 {
            return Err(CsdError::Domain("particles must have dimension >= 1".into()));
        }
        for (i, p) in particles.iter().enumerate() {
            check_dims("particle set", d, p.len())?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(CsdError::NonFinite {
                    what: "particle entry",
                    index: i,
                });
            }
        }
        Ok(ParticleSet { particles })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    pub fn particles(&self) -> &[Vec<f64>] {
        &self.particles
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.particles[i]
    }

    pub fn into_inner(self) -> Vec<Vec<f64>> {
        self.particles
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut m = vec![0.0; self.dim()];
        for p in &self.particles {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    /// Unbiased per-axis sample variance (zero for a single particle).
    pub fn variance(&self) -> Vec<f64> {
        let n = self.len();
        let mean = self.mean();
        let mut v = vec![0.0; self.dim()];
        if n < 2 {
            return v;
        }
        for p in &self.particles {
            for ((a, x), m) in v.iter_mut().zip(p).zip(&mean) {
                *a += (x - m) * (x - m);
            }
        }
        v.iter_mut().for_each(|a| *a /= (n - 1) as f64);
        v
    }
}

/// Mean and minimum Euclidean distance over distinct pairs; `(0, 0)` for one
/// particle.
pub fn pairwise_distance_stats(points: &[Vec<f64>]) -> (f64, f64) {
    let n = points.len();
    if n < 2 {
        return (0.0, 0.0);
    }
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            sum += d;
            min = min.min(d);
        }
    }
    (sum / (n * (n - 1) / 2) as f64, min)
}

/// Per-particle update split into its two parts.
#[derive(Debug, Clone, PartialEq)]
pub struct SvgdDirection {
    pub attraction: Vec<Vec<f64>>,
    pub repulsion: Vec<Vec<f64>>,
    pub total: Vec<Vec<f64>>,
}

impl SvgdDirection {
    fn from_parts(attraction: Vec<Vec<f64>>, repulsion: Vec<Vec<f64>>) -> Self {
        let total = attraction
            .iter()
            .zip(&repulsion)
            .map(|(a, r)| a.iter().zip(r).map(|(x, y)| x + y).collect())
            .collect();
        SvgdDirection {
            attraction,
            repulsion,
            total,
        }
    }
}

/// Kernel-weighted average of `drive` and the mean kernel gradient, both
/// evaluated at `points`:
/// `attraction_i = (1/N) sum_j k(p_j, p_i) drive_j`,
/// `repulsion_i = (1/N) sum_j grad_{p_j} k(p_j, p_i)`.
pub fn kernel_mix(
    points: &[Vec<f64>],
    drive: &[Vec<f64>],
    kernel: &dyn PairKernel,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = points.len();
    let inv = 1.0 / n as f64;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = drive[i].len();
            let mut attr = vec![0.0; d];
            let mut rep = vec![0.0; points[i].len()];
            for j in 0..n {
                let k = kernel.value(&points[j], &points[i]);
                for (a, s) in attr.iter_mut().zip(&drive[j]) {
                    *a += k * s;
                }
                if j != i {
                    for (r, g) in rep.iter_mut().zip(kernel.grad_first(&points[j], &points[i])) {
                        *r += g;
                    }
                }
            }
            attr.iter_mut().for_each(|a| *a *= inv);
            rep.iter_mut().for_each(|r| *r *= inv);
            (attr, rep)
        })
        .collect();
    rows.into_iter().unzip()
}

fn scores<F>(set: &ParticleSet, score_fn: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    set.particles
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let s = score_fn(x);
            check_dims("score output", x.len(), s.len())?;
            if s.iter().any(|v| !v.is_finite()) {
                return Err(CsdError::NonFinite {
                    what: "score",
                    index: i,
                });
            }
            Ok(s)
        })
        .collect()
}

/// SVGD direction for every particle, with the bandwidth resolved once from
/// the current particle positions.
pub fn svgd_direction<F>(set: &ParticleSet, score_fn: F, kernel: &KernelSpec) -> Result<SvgdDirection>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let rbf = kernel.resolve(set.particles())?;
    svgd_direction_with(set, score_fn, &rbf)
}

pub fn svgd_direction_with<F>(
    set: &ParticleSet,
    score_fn: F,
    kernel: &dyn PairKernel,
) -> Result<SvgdDirection>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let s = scores(set, &score_fn)?;
    let (attraction, repulsion) = kernel_mix(set.particles(), &s, kernel);
    Ok(SvgdDirection::from_parts(attraction, repulsion))
}

/// Synchronous update `x_i += eta * dx_i`, all directions taken from the
/// pre-step positions.
pub fn svgd_step<F>(set: &ParticleSet, score_fn: F, kernel: &KernelSpec, eta: f64) -> Result<ParticleSet>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(CsdError::Domain(format!("step size {eta} must be non-negative")));
    }
    let dir = svgd_direction(set, score_fn, kernel)?;
    let next = set
        .particles
        .iter()
        .zip(&dir.total)
        .map(|(x, d)| x.iter().zip(d).map(|(a, b)| a + eta * b).collect())
        .collect();
    ParticleSet::new(next)
}

/// Empirical Stein operator applied to the kernel at `probe`:
/// `(1/M) sum_j [ k(x_j, probe) score(x_j) + grad_{x_j} k(x_j, probe) ]`.
/// Vanishes in expectation when the samples come from the density whose
/// score is `score_fn`.
pub fn stein_residual<F>(
    samples: &ParticleSet,
    score_fn: F,
    kernel: &KernelSpec,
    probe: &[f64],
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    check_dims("stein_residual probe", samples.dim(), probe.len())?;
    let rbf = kernel.resolve(samples.particles())?;
    let s = scores(samples, &score_fn)?;
    let m = samples.len() as f64;
    let mut out = vec![0.0; probe.len()];
    for (x, sx) in samples.particles().iter().zip(&s) {
        let k = rbf.value(x, probe);
        let g = rbf.grad_first(x, probe);
        for ((o, si), gi) in out.iter_mut().zip(sx).zip(g) {
            *o += k * si + gi;
        }
    }
    out.iter_mut().for_each(|o| *o /= m);
    Ok(out)
}
