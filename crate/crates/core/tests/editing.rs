use csd_core::canvas::{edit_canvas, edit_frames, Canvas, CanvasEditOptions, CountMode, FrameEditOptions, PatchGrid};
use csd_core::distill::{optimize, Coupling, DistillConfig, EditProblem, LrDecay};
use csd_core::kernel::KernelSpec;
use csd_core::oracle::{AnalyticOracle, EditOracle, GaussianMixture};
use csd_core::schedule::{NoiseSharing, ScheduleKind};
use csd_core::seed::{self, Rng};
use csd_core::svgd::{pairwise_distance_stats, ParticleSet};
use csd_core::toy;
use rand::Rng as _;
use rand_distr::StandardNormal;

fn gauss(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn flat_oracle(dim: usize) -> AnalyticOracle {
    let prior = GaussianMixture::new(
        vec![0.5, 0.5],
        vec![vec![0.0; dim], vec![2.0; dim]],
        vec![vec![1.0; dim]; 2],
    )
    .unwrap();
    let edit = EditOracle::new(prior.clone())
        .with_image(toy::SOURCE_REF, prior.clone())
        .with_image_text(toy::SOURCE_REF, toy::TEXT_REF, prior);
    AnalyticOracle::new(edit, ScheduleKind::VpCosine)
}

fn consistency_config(coupling: Coupling) -> DistillConfig {
    DistillConfig {
        eta: 0.1,
        steps: 300,
        coupling,
        kernel: KernelSpec::fixed(1000.0),
        noise_sharing: NoiseSharing::PerParticle,
        lr_decay: LrDecay { every: 100, factor: 0.5 },
        ..DistillConfig::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn toy_edit_moves_particles_to_instruction_mode() {
    let dim = 4;
    let shift = 3.0;
    let oracle = toy::analytic(toy::shift_oracle(dim, shift));
    let config = DistillConfig {
        eta: 0.05,
        steps: 300,
        lr_decay: LrDecay { every: 100, factor: 0.5 },
        ..DistillConfig::default()
    };
    for s in 0..10u64 {
        let mut init = seed::stream(s, "toy-edit-init", 0);
        let sources: Vec<Vec<f64>> = (0..8).map(|_| gauss(&mut init, dim, 0.5)).collect();
        let set = ParticleSet::new(sources).unwrap();
        let (initial_spread, _) = pairwise_distance_stats(set.particles());
        let problem = EditProblem::new(set, vec![toy::edit_condition(); 8]).unwrap();
        let mut rng = seed::stream(s, "toy-edit-optimize", 0);
        let out = optimize(&problem, &oracle, &config, &mut rng).unwrap();
        let var = out.particles.variance();
        for x in out.particles.particles() {
            for (k, v) in x.iter().enumerate() {
                let sd = var[k].sqrt();
                assert!((v - shift).abs() <= 3.0 * sd, "seed {s}: coord {k} = {v}, sd {sd}");
            }
        }
        let (final_spread, _) = pairwise_distance_stats(out.particles.particles());
        let ratio = final_spread / initial_spread;
        assert!((0.25..=4.0).contains(&ratio), "seed {s}: spread ratio {ratio}");
    }
}

#[test]
fn canvas_without_instruction_signal_is_unchanged() {
    let (h, w, p, c) = (6, 10, 4, 1);
    let grid = PatchGrid::new(h, w, p, 2).unwrap();
    let oracle = flat_oracle(p * p * c);
    let mut rng = seed::stream(4, "zero-signal", 0);
    let source = Canvas::new(h, w, c, gauss(&mut rng, h * w * c, 1.0)).unwrap();
    let opts = CanvasEditOptions {
        batch_size: 1,
        count_mode: CountMode::BatchRelative,
        condition: toy::edit_condition(),
    };
    let config = DistillConfig { steps: 50, ..DistillConfig::default() };
    let out = edit_canvas(&source, &grid, &oracle, &config, &opts, &mut rng).unwrap();
    for (a, b) in out.canvas.values.iter().zip(&source.values) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn single_patch_canvas_equals_vector_edit() {
    let (side, c) = (3, 2);
    let dim = side * side * c;
    let oracle = toy::analytic(toy::shift_oracle(dim, 2.0));
    let mut init = seed::stream(5, "single-patch", 0);
    let source = Canvas::new(side, side, c, gauss(&mut init, dim, 0.5)).unwrap();
    let grid = PatchGrid::new(side, side, side, 1).unwrap();
    let config = DistillConfig { steps: 40, ..DistillConfig::default() };
    let opts = CanvasEditOptions {
        batch_size: 1,
        count_mode: CountMode::BatchRelative,
        condition: toy::edit_condition(),
    };
    let canvas = edit_canvas(&source, &grid, &oracle, &config, &opts, &mut seed::stream(5, "run", 0)).unwrap();
    let problem = EditProblem::new(ParticleSet::new(vec![source.values.clone()]).unwrap(), vec![toy::edit_condition()]).unwrap();
    let vector = optimize(&problem, &oracle, &config, &mut seed::stream(5, "run", 0)).unwrap();
    for (a, b) in canvas.canvas.values.iter().zip(vector.particles.get(0)) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn single_frame_equals_vector_edit() {
    let dim = 2 * 2 * 3;
    let oracle = toy::analytic(toy::shift_oracle(dim, 2.0));
    let mut init = seed::stream(6, "single-frame", 0);
    let frame = Canvas::new(2, 2, 3, gauss(&mut init, dim, 0.5)).unwrap();
    let config = DistillConfig { steps: 40, ..DistillConfig::default() };
    let opts = FrameEditOptions {
        batch_size: 1,
        conditions: vec![toy::edit_condition()],
    };
    let frames = edit_frames(std::slice::from_ref(&frame), &oracle, &config, &opts, &mut seed::stream(6, "run", 0)).unwrap();
    let problem = EditProblem::new(ParticleSet::new(vec![frame.values.clone()]).unwrap(), vec![toy::edit_condition()]).unwrap();
    let vector = optimize(&problem, &oracle, &config, &mut seed::stream(6, "run", 0)).unwrap();
    for (a, b) in frames.frames[0].values.iter().zip(vector.particles.get(0)) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn identical_frames_stay_identical_with_shared_noise() {
    let dim = 2 * 2 * 2;
    let oracle = toy::analytic(toy::bimodal_oracle(dim, 2.0));
    let mut init = seed::stream(7, "identical-frames", 0);
    let frame = Canvas::new(2, 2, 2, gauss(&mut init, dim, 0.5)).unwrap();
    let frames = vec![frame; 4];
    let config = DistillConfig { steps: 30, ..DistillConfig::default() };
    let opts = FrameEditOptions {
        batch_size: 4,
        conditions: vec![toy::edit_condition(); 4],
    };
    let out = edit_frames(&frames, &oracle, &config, &opts, &mut init).unwrap();
    for f in &out.frames[1..] {
        assert_eq!(f.values, out.frames[0].values);
    }
    assert_ne!(out.frames[0].values, frames[0].values);
}

fn coefficient_of_variation(frames: &[Canvas]) -> f64 {
    let mut d = Vec::new();
    for i in 0..frames.len() {
        for j in i + 1..frames.len() {
            let sq: f64 = frames[i].values.iter().zip(&frames[j].values).map(|(a, b)| (a - b).powi(2)).sum();
            d.push(sq.sqrt());
        }
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

#[test]
fn drifting_frames_keep_more_uniform_spacing_with_kernel_mixing() {
    let (h, w, c, count) = (4, 4, 2, 8);
    let dim = h * w * c;
    let oracle = toy::analytic(toy::bimodal_oracle(dim, 3.0));
    let opts = FrameEditOptions {
        batch_size: 4,
        conditions: vec![toy::edit_condition()],
    };
    let mut mixed = Vec::new();
    let mut ablated = Vec::new();
    for s in 0..5u64 {
        let mut init = seed::stream(s, "drifting-frames", 0);
        let base = gauss(&mut init, dim, 0.5);
        let direction = gauss(&mut init, dim, 0.05);
        let frames: Vec<Canvas> = (0..count)
            .map(|f| {
                let v = base.iter().zip(&direction).map(|(b, d)| b + f as f64 * d).collect();
                Canvas::new(h, w, c, v).unwrap()
            })
            .collect();
        for (coupling, out) in [(Coupling::Svgd, &mut mixed), (Coupling::Independent, &mut ablated)] {
            let mut rng = seed::stream(s, "drifting-frames", 1);
            let e = edit_frames(&frames, &oracle, &consistency_config(coupling), &opts, &mut rng).unwrap();
            out.push(coefficient_of_variation(&e.frames));
        }
    }
    let (m, a) = (median(mixed), median(ablated));
    assert!(m < a, "kernel mixing cv {m} vs ablation {a}");
}

#[test]
fn canvas_edit_is_deterministic_and_reports_visits() {
    let (h, w, p) = (8, 20, 8);
    let grid = PatchGrid::new(h, w, p, 4).unwrap();
    let oracle = toy::analytic(toy::bimodal_oracle(p * p, 3.0));
    let mut init = seed::stream(8, "visits", 0);
    let source = Canvas::new(h, w, 1, gauss(&mut init, h * w, 0.5)).unwrap();
    let opts = CanvasEditOptions {
        batch_size: 2,
        count_mode: CountMode::BatchRelative,
        condition: toy::edit_condition(),
    };
    let config = DistillConfig { steps: 60, ..DistillConfig::default() };
    let a = edit_canvas(&source, &grid, &oracle, &config, &opts, &mut seed::stream(8, "run", 0)).unwrap();
    let b = edit_canvas(&source, &grid, &oracle, &config, &opts, &mut seed::stream(8, "run", 0)).unwrap();
    assert_eq!(a.canvas, b.canvas);
    assert_eq!(a.visits, b.visits);
    assert_eq!(a.steps.len(), 60);
    let total: u32 = a.visits.iter().sum();
    assert_eq!(total as usize, 60 * 2 * p * p);
    // Corner cells sit in one patch only, so they are visited less than the middle.
    assert!(a.visits[0] < a.visits[w / 2]);
}
