//! Self-test suite behind `csd check`: quick versions of the library's
//! invariants on fixed seeds.

use rand::Rng as _;

use crate::canvas::{accumulate_normalize, CountMode, PatchGrid, Renderer};
use crate::distill::{csd_grads, sds_grad, DistillConfig};
use crate::error::Result;
use crate::kernel::{rbf, rbf_grad_first, KernelSpec};
use crate::oracle::{AnalyticOracle, Condition, EditOracle, GaussianMixture, GuidanceParams};
use crate::schedule::{alpha_sigma, ScheduleKind, StepDraw};
use crate::seed;
use crate::svgd::{svgd_step, ParticleSet};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: [(&str, Check); 7] = [
    ("schedule-unit-norm", schedule_unit_norm),
    ("mixture-eps-finite-difference", eps_finite_difference),
    ("rbf-gradient-finite-difference", rbf_finite_difference),
    ("single-particle-reduction", single_particle_reduction),
    ("normalization-constant-field", normalization_constant),
    ("normalization-disjoint-identity", normalization_disjoint),
    ("svgd-gaussian-convergence", svgd_convergence),
];

pub fn run_checks() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
            log::info!("check {name}: {}", if passed { "pass" } else { "FAIL" });
            CheckOutcome { name, passed, detail }
        })
        .collect()
}

fn schedule_unit_norm() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for kind in [ScheduleKind::VpCosine, ScheduleKind::VpLinear] {
        for k in 0..=1000 {
            let (a, s) = alpha_sigma(kind, k as f64 / 1000.0)?;
            worst = worst.max((a * a + s * s - 1.0).abs());
        }
    }
    Ok((worst < 1e-12, format!("max |alpha^2 + sigma^2 - 1| = {worst:.3e}")))
}

fn two_component(rng: &mut seed::Rng, dim: usize) -> Result<GaussianMixture> {
    let mut comp = || -> (Vec<f64>, Vec<f64>) {
        (
            (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..dim).map(|_| rng.random_range(0.3..2.0)).collect(),
        )
    };
    let (m0, v0) = comp();
    let (m1, v1) = comp();
    GaussianMixture::new(vec![0.4, 0.6], vec![m0, m1], vec![v0, v1])
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eps_finite_difference() -> Result<(bool, String)> {
    let mut rng = seed::stream(0, "check-eps", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let gmm = two_component(&mut rng, 3)?;
        let t = rng.random_range(0.1..0.9);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let marg = gmm.marginal(ScheduleKind::VpCosine, t)?;
        let (_, sigma) = alpha_sigma(ScheduleKind::VpCosine, t)?;
        let eps = gmm.eps(ScheduleKind::VpCosine, &x, t)?;
        let h = 1e-5;
        for k in 0..3 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += h;
            xm[k] -= h;
            let fd = (marg.log_density(&xp)? - marg.log_density(&xm)?) / (2.0 * h);
            worst = worst.max(rel_err(eps[k], -sigma * fd));
        }
    }
    Ok((worst < 1e-6, format!("max relative error {worst:.3e}")))
}

fn rbf_finite_difference() -> Result<(bool, String)> {
    let mut rng = seed::stream(0, "check-rbf", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = rng.random_range(0.5..3.0);
        let g = rbf_grad_first(&x, &y, h)?;
        let step = 1e-5;
        for k in 0..3 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += step;
            xm[k] -= step;
            let fd = (rbf(&xp, &y, h)? - rbf(&xm, &y, h)?) / (2.0 * step);
            worst = worst.max(rel_err(g[k], fd));
        }
    }
    Ok((worst < 1e-6, format!("max relative error {worst:.3e}")))
}

fn single_particle_reduction() -> Result<(bool, String)> {
    let mut rng = seed::stream(0, "check-n1", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let gmm = two_component(&mut rng, 4)?;
        let oracle = AnalyticOracle::new(EditOracle::new(gmm), ScheduleKind::VpCosine);
        let config = DistillConfig::default();
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let draw = StepDraw::sample(&mut rng, &config.schedule, 1, 4, config.noise_sharing);
        let g = GuidanceParams::default();
        let cond = Condition::Unconditional;
        let csd = csd_grads(&ParticleSet::new(vec![x.clone()])?, &oracle, std::slice::from_ref(&cond), &g, &draw, &config)?;
        let sds = sds_grad(&x, &oracle, &cond, &g, &config.schedule, draw.t, draw.noise_for(0), 1.0)?;
        for (a, b) in csd[0].iter().zip(&sds) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    Ok((worst < 1e-12, format!("max relative difference {worst:.3e}")))
}

fn scatter_constant(grid: &PatchGrid, value: f64) -> Result<Vec<f64>> {
    let grads: Vec<Vec<f64>> = grid
        .origins
        .iter()
        .map(|&origin| {
            Renderer::PatchView {
                height: grid.height,
                width: grid.width,
                channels: 1,
                patch: grid.patch,
                origin,
            }
            .apply_jacobian(&vec![value; grid.patch * grid.patch])
        })
        .collect::<Result<_>>()?;
    accumulate_normalize(&grads, grid, &grid.origins, 1, CountMode::BatchRelative)
}

fn normalization_constant() -> Result<(bool, String)> {
    let grid = PatchGrid::new(13, 17, 5, 3)?;
    let out = scatter_constant(&grid, 0.7)?;
    let exact = out.iter().all(|v| *v == 0.7);
    Ok((exact, format!("{} cells, {} patches", out.len(), grid.len())))
}

fn normalization_disjoint() -> Result<(bool, String)> {
    let grid = PatchGrid::new(8, 12, 4, 4)?;
    let out = scatter_constant(&grid, -1.25)?;
    let exact = out.iter().all(|v| *v == -1.25) && grid.counts.iter().all(|c| *c == 1);
    Ok((exact, format!("{} patches, all cells covered once", grid.len())))
}

fn svgd_convergence() -> Result<(bool, String)> {
    let mut rng = seed::stream(0, "check-svgd", 0);
    let particles: Vec<Vec<f64>> = (0..32)
        .map(|_| vec![5.0 + rng.random_range(-1.0..1.0), 5.0 + rng.random_range(-1.0..1.0)])
        .collect();
    let mut set = ParticleSet::new(particles)?;
    let spec = KernelSpec::median();
    for _ in 0..300 {
        set = svgd_step(&set, |x| x.iter().map(|v| -v).collect(), &spec, 0.3)?;
    }
    let mean = set.mean();
    let var = set.variance();
    let ok = mean.iter().all(|m| m.abs() < 0.2) && var.iter().all(|v| (0.5..1.5).contains(v));
    Ok((ok, format!("mean {mean:.3?}, variance {var:.3?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for o in run_checks() {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }
}
