//! Mode runners and artifact writing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::bridge::BridgeOracle;
use crate::canvas::{edit_canvas, edit_frames, Canvas, CanvasEditOptions, FrameEditOptions, PatchGrid};
use crate::distill::{optimize_generate, DistillConfig, GenerateProblem};
use crate::error::{CsdError, Result};
use crate::harness::check::run_checks;
use crate::harness::config::{
    load_config, CanvasSource, ExperimentConfig, FramesSource, GeneratedCanvas, Mode, OracleSection,
};
use crate::harness::metrics::{format_real, write_metrics_csv, write_timing_csv, MetricsRow};
use crate::oracle::{AnalyticOracle, Condition, GaussianMixture, ScoreOracle};
use crate::schedule::standard_normal_vec;
use crate::seed::{self, Rng};
use crate::svgd::{pairwise_distance_stats, stein_residual, svgd_direction, ParticleSet};

/// What a run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub mode: Mode,
    pub output_dir: PathBuf,
    /// Artifact file names relative to `output_dir`.
    pub files: Vec<String>,
    pub steps: usize,
    pub config_hash: String,
    pub checks_failed: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    mode: Mode,
    seed: u64,
    config_sha256: &'a str,
    steps: usize,
    files: &'a [String],
}

/// Load `config_path`, apply overrides, and run it.
pub fn run_file(config_path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<RunSummary> {
    let mut cfg = load_config(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o.to_path_buf();
    }
    run(&cfg)
}

/// Build the oracle a config names.
pub fn build_oracle(cfg: &ExperimentConfig) -> Result<Box<dyn ScoreOracle>> {
    let kind = cfg.distill.as_ref().map(|d| d.schedule.kind).unwrap_or_default();
    match cfg.oracle.as_ref() {
        Some(OracleSection::Bridge(endpoint)) => Ok(Box::new(BridgeOracle::connect(endpoint)?)),
        Some(section) => Ok(Box::new(AnalyticOracle::new(
            section.edit_oracle().expect("local section"),
            kind,
        ))),
        None => Err(CsdError::config("oracle", "section is required")),
    }
}

/// Execute a validated config, writing `metrics.csv`, `timing.csv`, the final
/// state and `manifest.json` into its output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut checks_failed = 0;

    let rows = match cfg.mode {
        Mode::Check => {
            let outcomes = run_checks();
            let mut w = csv_out(&dir.join("check.csv"))?;
            w.write_record(["check", "passed", "detail"]).map_err(csv_err)?;
            for o in &outcomes {
                w.write_record([o.name, if o.passed { "true" } else { "false" }, o.detail.as_str()])
                    .map_err(csv_err)?;
            }
            w.flush()?;
            files.push("check.csv".to_string());
            checks_failed = outcomes.iter().filter(|o| !o.passed).count();
            Vec::new()
        }
        Mode::Svgd => run_svgd(cfg, &mut files)?,
        Mode::Generate => run_generate(cfg, &mut files)?,
        Mode::EditCanvas => run_canvas(cfg, &mut files)?,
        Mode::EditFrames => run_frames(cfg, &mut files)?,
    };

    write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
    write_timing_csv(&dir.join("timing.csv"), &rows)?;
    files.push("metrics.csv".to_string());
    files.push("timing.csv".to_string());
    let hash = cfg.hash();
    let manifest = Manifest {
        mode: cfg.mode,
        seed: cfg.seed,
        config_sha256: &hash,
        steps: rows.len(),
        files: &files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    files.push("manifest.json".to_string());
    log::info!("{:?} run finished: {} steps, output in {}", cfg.mode, rows.len(), dir.display());
    Ok(RunSummary {
        mode: cfg.mode,
        output_dir: dir.clone(),
        files,
        steps: rows.len(),
        config_hash: hash,
        checks_failed,
    })
}

fn csv_err(e: csv::Error) -> CsdError {
    CsdError::Protocol(format!("csv: {e}"))
}

fn csv_out(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err)
}

/// One row per particle, columns `x0, x1, ...`.
pub fn write_particles_csv(path: &Path, particles: &[Vec<f64>]) -> Result<()> {
    let mut w = csv_out(path)?;
    let dim = particles.first().map_or(0, Vec::len);
    w.write_record((0..dim).map(|k| format!("x{k}"))).map_err(csv_err)?;
    for p in particles {
        w.write_record(p.iter().map(|v| format_real(*v))).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn distill(cfg: &ExperimentConfig) -> &DistillConfig {
    cfg.distill.as_ref().expect("validated")
}

fn gaussian_cloud(rng: &mut Rng, count: usize, mean: &[f64], std: f64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            standard_normal_vec(rng, mean.len())
                .iter()
                .zip(mean)
                .map(|(z, m)| m + std * z)
                .collect()
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn run_svgd(cfg: &ExperimentConfig, files: &mut Vec<String>) -> Result<Vec<MetricsRow>> {
    let section = cfg.svgd.as_ref().expect("validated");
    let d = distill(cfg);
    let target: GaussianMixture = cfg
        .oracle
        .as_ref()
        .and_then(OracleSection::edit_oracle)
        .expect("validated")
        .unconditional;
    let score = |x: &[f64]| target.score(x).expect("dimension validated");
    let dim = target.dim();
    let probe: Vec<f64> = (0..dim)
        .map(|k| target.weights.iter().zip(&target.means).map(|(w, m)| w * m[k]).sum())
        .collect();

    let mut rng = seed::stream(cfg.seed, "init", 0);
    let mut set = ParticleSet::new(gaussian_cloud(&mut rng, section.particles, &section.init_mean, section.init_std))?;
    let mut rows = Vec::with_capacity(d.steps);
    for step in 0..d.steps {
        let started = Instant::now();
        let eta = d.eta_at(step);
        let abort = |e: CsdError| match e {
            CsdError::NonFinite { .. } => CsdError::NumericAbort {
                step,
                source: Box::new(e),
            },
            other => other,
        };
        let dir = svgd_direction(&set, score, &d.kernel).map_err(abort)?;
        let stein = norm(&stein_residual(&set, score, &d.kernel, &probe).map_err(abort)?);
        let next: Vec<Vec<f64>> = set
            .particles()
            .iter()
            .zip(&dir.total)
            .map(|(x, g)| x.iter().zip(g).map(|(a, b)| a + eta * b).collect())
            .collect();
        set = ParticleSet::new(next).map_err(abort)?;
        let (mean_d, min_d) = pairwise_distance_stats(set.particles());
        rows.push(MetricsRow {
            step,
            eta,
            t_drawn: 0.0,
            mean_grad_norm: dir.total.iter().map(|g| norm(g)).sum::<f64>() / set.len() as f64,
            mean_pairwise_distance: mean_d,
            min_pairwise_distance: min_d,
            seam_discrepancy: None,
            stein_residual: Some(stein),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    write_particles_csv(&cfg.output_dir.join("particles.csv"), set.particles())?;
    files.push("particles.csv".to_string());
    Ok(rows)
}

fn broadcast(conds: &[Condition], count: usize) -> Vec<Condition> {
    if conds.len() == 1 {
        vec![conds[0].clone(); count]
    } else {
        conds.to_vec()
    }
}

fn run_generate(cfg: &ExperimentConfig, files: &mut Vec<String>) -> Result<Vec<MetricsRow>> {
    let section = cfg.generate.as_ref().expect("validated");
    let oracle = build_oracle(cfg)?;
    let mut init = seed::stream(cfg.seed, "init", 0);
    let zero = vec![0.0; section.param_dim];
    let problem = GenerateProblem {
        params: ParticleSet::new(gaussian_cloud(&mut init, section.particles, &zero, section.init_std))?,
        renderer: section.renderer.clone(),
        conditions: broadcast(&section.conditions, section.particles),
    };
    let mut rng = seed::stream(cfg.seed, "optimize", 0);
    let traj = optimize_generate(&problem, oracle.as_ref(), distill(cfg), &mut rng)?;
    let rendered: Vec<Vec<f64>> = traj
        .particles
        .particles()
        .iter()
        .map(|p| section.renderer.render(p))
        .collect::<Result<_>>()?;
    write_particles_csv(&cfg.output_dir.join("particles.csv"), traj.particles.particles())?;
    write_particles_csv(&cfg.output_dir.join("rendered.csv"), &rendered)?;
    files.push("particles.csv".to_string());
    files.push("rendered.csv".to_string());
    Ok(traj.metrics.iter().map(MetricsRow::from).collect())
}

fn generated_canvas(g: &GeneratedCanvas, rng: &mut Rng) -> Result<Canvas> {
    let n = g.height * g.width * g.channels;
    let values = standard_normal_vec(rng, n).iter().map(|z| g.mean + g.std * z).collect();
    Canvas::new(g.height, g.width, g.channels, values)
}

fn read_canvas(path: &Path) -> Result<Canvas> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        Canvas::read_csv(path)
    } else {
        Canvas::read_binary(path)
    }
}

fn check_oracle_dim(cfg: &ExperimentConfig, path: &str, dim: usize) -> Result<()> {
    if let Some(o) = cfg.oracle.as_ref().and_then(OracleSection::edit_oracle) {
        if o.dim() != dim {
            return Err(CsdError::config(
                path,
                format!("sample dimension {dim} does not match oracle dimension {}", o.dim()),
            ));
        }
    }
    Ok(())
}

fn run_canvas(cfg: &ExperimentConfig, files: &mut Vec<String>) -> Result<Vec<MetricsRow>> {
    let section = cfg.canvas.as_ref().expect("validated");
    let source = match &section.source {
        CanvasSource::File(p) => read_canvas(p).map_err(|e| CsdError::config("canvas.source.file", e.to_string()))?,
        CanvasSource::Generated(g) => generated_canvas(g, &mut seed::stream(cfg.seed, "canvas-init", 0))?,
    };
    let grid = PatchGrid::new(source.height, source.width, section.patch_size, section.stride)
        .map_err(|e| CsdError::config("canvas.patch_size", e.to_string()))?;
    if section.batch_size == 0 || section.batch_size > grid.len() {
        return Err(CsdError::config("canvas.batch_size", format!("must lie in [1, {}]", grid.len())));
    }
    check_oracle_dim(cfg, "canvas.patch_size", section.patch_size * section.patch_size * source.channels)?;
    let oracle = build_oracle(cfg)?;
    let opts = CanvasEditOptions {
        batch_size: section.batch_size,
        count_mode: section.count_mode,
        condition: section.condition.clone(),
    };
    let mut rng = seed::stream(cfg.seed, "optimize", 0);
    let edit = edit_canvas(&source, &grid, oracle.as_ref(), distill(cfg), &opts, &mut rng)?;
    source.write_binary(&cfg.output_dir.join("canvas_source.bin"))?;
    edit.canvas.write_binary(&cfg.output_dir.join("canvas_final.bin"))?;
    let mut w = csv_out(&cfg.output_dir.join("visits.csv"))?;
    w.write_record(["row", "col", "visits"]).map_err(csv_err)?;
    for u in 0..grid.height {
        for v in 0..grid.width {
            w.write_record([u.to_string(), v.to_string(), edit.visits[u * grid.width + v].to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    files.extend(["canvas_source.bin", "canvas_final.bin", "visits.csv"].map(String::from));
    Ok(edit.steps.iter().map(MetricsRow::from).collect())
}

fn run_frames(cfg: &ExperimentConfig, files: &mut Vec<String>) -> Result<Vec<MetricsRow>> {
    let section = cfg.frames.as_ref().expect("validated");
    let frames: Vec<Canvas> = match &section.source {
        FramesSource::Files(paths) => paths
            .iter()
            .enumerate()
            .map(|(i, p)| read_canvas(p).map_err(|e| CsdError::config(format!("frames.source.files[{i}]"), e.to_string())))
            .collect::<Result<_>>()?,
        FramesSource::Generated { count, canvas } => (0..*count)
            .map(|k| generated_canvas(canvas, &mut seed::stream(cfg.seed, "frames-init", k as u64)))
            .collect::<Result<_>>()?,
    };
    check_oracle_dim(cfg, "frames.source", frames[0].values.len())?;
    let oracle = build_oracle(cfg)?;
    let opts = FrameEditOptions {
        batch_size: section.batch_size,
        conditions: section.conditions.clone(),
    };
    let mut rng = seed::stream(cfg.seed, "optimize", 0);
    let edit = edit_frames(&frames, oracle.as_ref(), distill(cfg), &opts, &mut rng)?;
    for (k, f) in edit.frames.iter().enumerate() {
        let name = format!("frame_{k:03}.bin");
        f.write_binary(&cfg.output_dir.join(&name))?;
        files.push(name);
    }
    Ok(edit.metrics.iter().map(MetricsRow::from).collect())
}
