use csd_core::bridge::{encode_request, serve};
use csd_core::canvas::{accumulate_normalize, enumerate_patches, Canvas, CountMode, PatchGrid, Renderer};
use csd_core::distill::{mix_residuals, Coupling};
use csd_core::harness::seam_discrepancy;
use csd_core::kernel::{KernelSpec, PairKernel, Rbf};
use csd_core::oracle::{cfg_combine, ip2p_combine, Condition, GaussianMixture, GuidanceParams};
use csd_core::schedule::{alpha_sigma, sample_timestep, NoiseSchedule, ScheduleKind};
use csd_core::seed;
use csd_core::svgd::{svgd_direction, svgd_step, ParticleSet};
use csd_core::toy;
use proptest::prelude::*;

fn vec_of(dim: usize, range: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-range..range, dim)
}

fn particles(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(vec_of(dim, 3.0), 2..7)
}

fn kind() -> impl Strategy<Value = ScheduleKind> {
    prop_oneof![Just(ScheduleKind::VpCosine), Just(ScheduleKind::VpLinear)]
}

/// (H, W, P, s) within the enumeration preconditions.
fn grid_dims() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..7, 0usize..9, 0usize..9).prop_flat_map(|(p, dh, dw)| (Just(p + dh), Just(p + dw), Just(p), 1..=p))
}

/// Kernel wrapper scaling every value by `c` and leaving gradients alone.
struct Scaled<'a>(&'a Rbf, f64);

impl PairKernel for Scaled<'_> {
    fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        self.1 * self.0.value(x, y)
    }
    fn grad_first(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.0.grad_first(x, y)
    }
}

proptest! {
    #[test]
    fn variance_preserving_everywhere(k in kind(), t in 0.0f64..=1.0) {
        let (a, s) = alpha_sigma(k, t).unwrap();
        prop_assert!((a * a + s * s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn timestep_draws_reproduce(root in any::<u64>(), lo in 0.0f64..0.5, width in 0.0f64..0.5) {
        let s = NoiseSchedule::new(ScheduleKind::VpCosine, lo, lo + width).unwrap();
        let a: Vec<f64> = { let mut r = seed::stream(root, "t", 0); (0..5).map(|_| sample_timestep(&mut r, &s)).collect() };
        let b: Vec<f64> = { let mut r = seed::stream(root, "t", 0); (0..5).map(|_| sample_timestep(&mut r, &s)).collect() };
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|t| (lo..=lo + width).contains(t)));
    }

    #[test]
    fn guidance_is_affine_in_each_scale(
        u in vec_of(3, 5.0), i in vec_of(3, 5.0), it in vec_of(3, 5.0),
        w0 in 0.0f64..10.0, w1 in 0.0f64..10.0, fixed in 0.0f64..10.0,
    ) {
        let mid = 0.5 * (w0 + w1);
        let collinear = |f: &dyn Fn(f64) -> Vec<f64>| {
            let (a, b, m) = (f(w0), f(w1), f(mid));
            a.iter().zip(&b).zip(&m).all(|((a, b), m)| (0.5 * (a + b) - m).abs() < 1e-9)
        };
        prop_assert!(collinear(&|w| cfg_combine(&u, &i, w).unwrap()));
        let text_scale = collinear(&|w| ip2p_combine(&u, &i, &it, &GuidanceParams { omega_y: w, omega_s: fixed }).unwrap());
        let image_scale = collinear(&|w| ip2p_combine(&u, &i, &it, &GuidanceParams { omega_y: fixed, omega_s: w }).unwrap());
        prop_assert!(text_scale && image_scale);
    }

    #[test]
    fn log_density_stays_finite_far_out(x in vec_of(3, 1e3), k in kind(), t in 0.01f64..0.99) {
        let gmm = GaussianMixture::new(
            vec![0.25, 0.75],
            vec![vec![1.0, -1.0, 0.0], vec![-2.0, 2.0, 0.5]],
            vec![vec![1.0; 3]; 2],
        ).unwrap();
        prop_assert!(gmm.log_density(&x).unwrap().is_finite());
        prop_assert!(gmm.eps(k, &x, t).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_particle_direction_is_the_score(x in vec_of(3, 3.0), h in 0.1f64..10.0) {
        let set = ParticleSet::new(vec![x.clone()]).unwrap();
        let score = |p: &[f64]| p.iter().map(|v| -0.5 * v + 1.0).collect::<Vec<f64>>();
        let d = svgd_direction(&set, score, &KernelSpec::fixed(h)).unwrap();
        prop_assert_eq!(&d.total[0], &score(&x));
    }

    #[test]
    fn svgd_is_index_equivariant(pts in particles(2), rot in 0usize..7) {
        let n = pts.len();
        let mut perm = pts.clone();
        perm.rotate_left(rot % n);
        let score = |p: &[f64]| p.iter().map(|v| -v).collect::<Vec<f64>>();
        let a = svgd_direction(&ParticleSet::new(pts).unwrap(), score, &KernelSpec::median()).unwrap();
        let b = svgd_direction(&ParticleSet::new(perm).unwrap(), score, &KernelSpec::median()).unwrap();
        let mut expected = a.total.clone();
        expected.rotate_left(rot % n);
        for (x, y) in expected.iter().zip(&b.total) {
            for (p, q) in x.iter().zip(y) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn repulsion_separates_near_duplicates(x in vec_of(3, 3.0), dir in vec_of(3, 1.0)) {
        let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(len > 1e-3);
        let y: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + 1e-3 * d / len).collect();
        let mut set = ParticleSet::new(vec![x, y]).unwrap();
        let dist = |s: &ParticleSet| s.get(0).iter().zip(s.get(1)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let mut last = dist(&set);
        for _ in 0..5 {
            set = svgd_step(&set, |p| vec![0.0; p.len()], &KernelSpec::fixed(1.0), 0.1).unwrap();
            let d = dist(&set);
            prop_assert!(d > last);
            last = d;
        }
    }

    #[test]
    fn attraction_scales_with_kernel(pts in particles(3), c in 0.1f64..10.0) {
        let rbf = Rbf::euclidean(2.0);
        let residuals: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| v.sin()).collect()).collect();
        let zero_grad = |x: &[f64]| vec![0.0; x.len()];
        // Compare attraction only: subtract the repulsion, which is the
        // same for both kernels.
        let base = mix_residuals(&pts, &residuals, &rbf, Coupling::Svgd, 1.0);
        let scaled = mix_residuals(&pts, &residuals, &Scaled(&rbf, c), Coupling::Svgd, 1.0);
        let zeros: Vec<Vec<f64>> = pts.iter().map(|p| zero_grad(p)).collect();
        let rep = mix_residuals(&pts, &zeros, &rbf, Coupling::Svgd, 1.0);
        for ((b, s), r) in base.iter().zip(&scaled).zip(&rep) {
            for k in 0..b.len() {
                let (att_b, att_s) = (b[k] - r[k], s[k] - r[k]);
                prop_assert!((att_s - c * att_b).abs() < 1e-9 * (1.0 + att_s.abs()));
            }
        }
    }

    #[test]
    fn grids_cover_every_cell((h, w, p, s) in grid_dims()) {
        let grid = PatchGrid::new(h, w, p, s).unwrap();
        let origins = enumerate_patches(h, w, p, s).unwrap();
        prop_assert_eq!(&grid.origins, &origins);
        for u in 0..h {
            for v in 0..w {
                let covering = origins.iter().filter(|(r, c)| (*r..r + p).contains(&u) && (*c..c + p).contains(&v)).count();
                prop_assert!(covering >= 1);
                prop_assert_eq!(grid.count(u, v) as usize, covering);
            }
        }
    }

    #[test]
    fn constant_fields_survive_normalization((h, w, p, s) in grid_dims(), c in -5.0f64..5.0, channels in 1usize..3) {
        let grid = PatchGrid::new(h, w, p, s).unwrap();
        let grads: Vec<Vec<f64>> = grid.origins.iter().map(|&origin| {
            Renderer::PatchView { height: h, width: w, channels, patch: p, origin }
                .apply_jacobian(&vec![c; p * p * channels])
                .unwrap()
        }).collect();
        let out = accumulate_normalize(&grads, &grid, &grid.origins, channels, CountMode::BatchRelative).unwrap();
        prop_assert!(out.iter().all(|v| *v == c));
    }

    #[test]
    fn extract_and_scatter_are_adjoint((h, w, p, s) in grid_dims(), pick in any::<prop::sample::Index>(), fill in any::<u64>()) {
        let grid = PatchGrid::new(h, w, p, s).unwrap();
        let origin = grid.origins[pick.index(grid.len())];
        let canvas = Canvas::from_fn(h, w, 2, |u, v, c| ((u * 31 + v * 7 + c) as f64 + fill as f64 * 1e-19).cos());
        let patch: Vec<f64> = (0..p * p * 2).map(|k| (k as f64 * 0.7).sin()).collect();
        let scattered = Renderer::PatchView { height: h, width: w, channels: 2, patch: p, origin }.apply_jacobian(&patch).unwrap();
        let lhs: f64 = canvas.extract(origin, p).iter().zip(&patch).map(|(a, b)| a * b).sum();
        let rhs: f64 = canvas.values.iter().zip(&scattered).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn seam_discrepancy_respects_transposition((h, w, p, s) in grid_dims(), seed_value in any::<u64>()) {
        let grid = PatchGrid::new(h, w, p, s).unwrap();
        let grid_t = PatchGrid::new(w, h, p, s).unwrap();
        let f = |u: usize, v: usize| ((u * 13 + v * 5) as f64 + (seed_value % 97) as f64).sin();
        let before = Canvas::zeros(h, w, 1);
        let after = Canvas::from_fn(h, w, 1, |u, v, _| f(u, v));
        let before_t = Canvas::zeros(w, h, 1);
        let after_t = Canvas::from_fn(w, h, 1, |u, v, _| f(v, u));
        let a = seam_discrepancy(&before, &after, &grid).unwrap();
        let b = seam_discrepancy(&before_t, &after_t, &grid_t).unwrap();
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn server_answers_each_request_once(ids in prop::collection::vec(any::<u32>(), 0..12), t in 0.05f64..0.95) {
        let oracle = toy::shift_oracle(2, 1.0);
        let g = GuidanceParams::new(2.0, 1.0).unwrap();
        let conds = [Condition::Unconditional, Condition::image(toy::SOURCE_REF), toy::edit_condition()];
        let input: String = ids.iter().enumerate()
            .map(|(k, id)| encode_request(*id as u64, &[0.5, -0.5], t, &conds[k % 3], &g).unwrap() + "\n")
            .collect();
        let mut out = Vec::new();
        serve(input.as_bytes(), &mut out, &oracle, ScheduleKind::VpCosine).unwrap();
        let text = String::from_utf8(out).unwrap();
        let echoed: Vec<u64> = text.lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["id"].as_u64().unwrap())
            .collect();
        prop_assert_eq!(echoed, ids.iter().map(|&i| i as u64).collect::<Vec<_>>());
    }
}
