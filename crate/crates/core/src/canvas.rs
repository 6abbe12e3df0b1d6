//! Renderers and the overlapping-patch coordinator.
//!
//! A large canvas is covered by `P x P` patches laid out with stride `s`; each
//! step a batch of patches forms the particle set, their gradients are
//! scattered back and every cell is divided by the number of batch patches
//! covering it.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::distill::{descend, edit_step_grads, mean_norm, DistillConfig, StepMetrics};
use crate::error::{check_dims, CsdError, Result};
use crate::harness::metrics::seam_discrepancy;
use crate::oracle::{Condition, ScoreOracle};
use crate::schedule::StepDraw;
use crate::seed::Rng;
use crate::svgd::{pairwise_distance_stats, ParticleSet};

/// `height x width x channels` values, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl Canvas {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(CsdError::Domain("canvas dimensions must be at least 1".into()));
        }
        check_dims("canvas values", height * width * channels, values.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CsdError::NonFinite {
                what: "canvas value",
                index: i,
            });
        }
        Ok(Canvas {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Canvas {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(height * width * channels);
        for u in 0..height {
            for v in 0..width {
                for c in 0..channels {
                    values.push(f(u, v, c));
                }
            }
        }
        Canvas {
            height,
            width,
            channels,
            values,
        }
    }

    pub fn index(&self, u: usize, v: usize, c: usize) -> usize {
        (u * self.width + v) * self.channels + c
    }

    pub fn get(&self, u: usize, v: usize, c: usize) -> f64 {
        self.values[self.index(u, v, c)]
    }

    pub fn same_shape(&self, other: &Canvas) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Copy of the `patch x patch` window at `origin`.
    pub fn extract(&self, origin: (usize, usize), patch: usize) -> Vec<f64> {
        let (r0, c0) = origin;
        let mut out = Vec::with_capacity(patch * patch * self.channels);
        for u in r0..r0 + patch {
            let start = self.index(u, c0, 0);
            out.extend_from_slice(&self.values[start..start + patch * self.channels]);
        }
        out
    }

    /// Write `values` into the window at `origin`.
    pub fn paste(&mut self, origin: (usize, usize), patch: usize, values: &[f64]) {
        let (r0, c0) = origin;
        let row = patch * self.channels;
        for (k, u) in (r0..r0 + patch).enumerate() {
            let start = self.index(u, c0, 0);
            self.values[start..start + row].copy_from_slice(&values[k * row..(k + 1) * row]);
        }
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(b"CSDC")?;
        for dim in [self.height, self.width, self.channels] {
            let d = u32::try_from(dim).map_err(|_| CsdError::Domain("canvas too large".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..4] != b"CSDC" {
            return Err(CsdError::Protocol("canvas file lacks the CSDC header".into()));
        }
        let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
        let (h, w, c) = (dim(0), dim(1), dim(2));
        let body = &bytes[16..];
        if body.len() != h * w * c * 8 {
            return Err(CsdError::Protocol(format!(
                "canvas body holds {} bytes, header implies {}",
                body.len(),
                h * w * c * 8
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Canvas::new(h, w, c, values)
    }

    /// One `row,col,channel,value` line per entry after a header line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "row,col,channel,value")?;
        for u in 0..self.height {
            for v in 0..self.width {
                for c in 0..self.channels {
                    writeln!(w, "{u},{v},{c},{:e}", self.get(u, v, c))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut entries = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if n == 0 {
                if line.trim() != "row,col,channel,value" {
                    return Err(CsdError::Protocol("canvas csv header must be row,col,channel,value".into()));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let bad = || CsdError::Protocol(format!("malformed canvas csv line {}", n + 1));
            if fields.len() != 4 {
                return Err(bad());
            }
            let u: usize = fields[0].trim().parse().map_err(|_| bad())?;
            let v: usize = fields[1].trim().parse().map_err(|_| bad())?;
            let c: usize = fields[2].trim().parse().map_err(|_| bad())?;
            let x: f64 = fields[3].trim().parse().map_err(|_| bad())?;
            entries.push((u, v, c, x));
        }
        let h = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
        let w = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
        let c = entries.iter().map(|e| e.2 + 1).max().unwrap_or(0);
        if h * w * c != entries.len() {
            return Err(CsdError::Protocol("canvas csv does not cover every cell exactly once".into()));
        }
        let mut values = vec![f64::NAN; h * w * c];
        for (u, v, ch, x) in entries {
            let i = (u * w + v) * c + ch;
            if !values[i].is_nan() {
                return Err(CsdError::Protocol(format!("duplicate canvas csv entry ({u},{v},{ch})")));
            }
            values[i] = x;
        }
        Canvas::new(h, w, c, values)
    }
}

fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|o| o + patch <= len)
        .collect();
    if *out.last().unwrap() != len - patch {
        out.push(len - patch);
    }
    out
}

/// Patch origins, row-major: rows step by `stride` from 0 and the last origin
/// is clamped to `H - P` (same for columns), so every cell is covered.
pub fn enumerate_patches(height: usize, width: usize, patch: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if patch == 0 || patch > height || patch > width {
        return Err(CsdError::Domain(format!(
            "patch size {patch} must lie in [1, min({height}, {width})]"
        )));
    }
    if stride == 0 || stride > patch {
        return Err(CsdError::Domain(format!("stride {stride} must lie in [1, {patch}]")));
    }
    let rows = axis_origins(height, patch, stride);
    let cols = axis_origins(width, patch, stride);
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect())
}

/// Patch layout over a `height x width` canvas with per-cell coverage counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub stride: usize,
    pub origins: Vec<(usize, usize)>,
    pub counts: Vec<u32>,
}

fn coverage(height: usize, width: usize, patch: usize, origins: &[(usize, usize)]) -> Vec<u32> {
    let mut counts = vec![0u32; height * width];
    for &(r0, c0) in origins {
        for u in r0..r0 + patch {
            for v in c0..c0 + patch {
                counts[u * width + v] += 1;
            }
        }
    }
    counts
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize, stride: usize) -> Result<Self> {
        let origins = enumerate_patches(height, width, patch, stride)?;
        let counts = coverage(height, width, patch, &origins);
        Ok(PatchGrid {
            height,
            width,
            patch,
            stride,
            origins,
            counts,
        })
    }

    pub fn count(&self, u: usize, v: usize) -> u32 {
        self.counts[u * self.width + v]
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Row positions `b` such that cells `b - 1` and `b` straddle a patch edge,
    /// and the same for columns.
    pub fn boundaries(&self) -> (Vec<usize>, Vec<usize>) {
        let edges = |len: usize, starts: Vec<usize>| {
            let mut b: Vec<usize> = starts
                .iter()
                .flat_map(|&o| [o, o + self.patch])
                .filter(|&e| e > 0 && e < len)
                .collect();
            b.sort_unstable();
            b.dedup();
            b
        };
        let rows = self.origins.iter().map(|o| o.0).collect();
        let cols = self.origins.iter().map(|o| o.1).collect();
        (edges(self.height, rows), edges(self.width, cols))
    }
}

/// Differentiable map from parameters to a rendered sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Renderer {
    #[default]
    Identity,
    /// `x = A theta` with `A` stored row-major as `rows x cols`.
    Linear {
        rows: usize,
        cols: usize,
        matrix: Vec<f64>,
    },
    /// The `patch x patch` window at `origin` of a canvas-shaped parameter.
    PatchView {
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
        origin: (usize, usize),
    },
}

impl Renderer {
    pub fn linear(rows: usize, cols: usize, matrix: Vec<f64>) -> Result<Self> {
        let r = Renderer::Linear { rows, cols, matrix };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Renderer::Identity => Ok(()),
            Renderer::Linear { rows, cols, matrix } => {
                if *rows == 0 || *cols == 0 {
                    return Err(CsdError::config("renderer.linear", "matrix dimensions must be at least 1"));
                }
                if matrix.len() != rows * cols {
                    return Err(CsdError::config(
                        "renderer.linear.matrix",
                        format!("expected {} entries, found {}", rows * cols, matrix.len()),
                    ));
                }
                if matrix.iter().any(|v| !v.is_finite()) {
                    return Err(CsdError::config("renderer.linear.matrix", "entries must be finite"));
                }
                Ok(())
            }
            Renderer::PatchView {
                height,
                width,
                channels,
                patch,
                origin,
            } => {
                if *channels == 0 || *patch == 0 || origin.0 + patch > *height || origin.1 + patch > *width {
                    return Err(CsdError::config("renderer.patch-view", "window must lie inside the canvas"));
                }
                Ok(())
            }
        }
    }

    pub fn render(&self, theta: &[f64]) -> Result<Vec<f64>> {
        match self {
            Renderer::Identity => Ok(theta.to_vec()),
            Renderer::Linear { rows, cols, matrix } => {
                check_dims("linear renderer input", *cols, theta.len())?;
                Ok((0..*rows)
                    .map(|r| {
                        matrix[r * cols..(r + 1) * cols]
                            .iter()
                            .zip(theta)
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect())
            }
            Renderer::PatchView {
                height,
                width,
                channels,
                patch,
                origin,
            } => {
                check_dims("patch-view renderer input", height * width * channels, theta.len())?;
                let canvas = Canvas {
                    height: *height,
                    width: *width,
                    channels: *channels,
                    values: theta.to_vec(),
                };
                Ok(canvas.extract(*origin, *patch))
            }
        }
    }

    /// Pull a rendered-sample gradient back to parameters (`J^T g`).
    pub fn apply_jacobian(&self, pixel_grad: &[f64]) -> Result<Vec<f64>> {
        match self {
            Renderer::Identity => Ok(pixel_grad.to_vec()),
            Renderer::Linear { rows, cols, matrix } => {
                check_dims("linear renderer gradient", *rows, pixel_grad.len())?;
                let mut out = vec![0.0; *cols];
                for (r, g) in pixel_grad.iter().enumerate() {
                    for (o, a) in out.iter_mut().zip(&matrix[r * cols..(r + 1) * cols]) {
                        *o += a * g;
                    }
                }
                Ok(out)
            }
            Renderer::PatchView {
                height,
                width,
                channels,
                patch,
                origin,
            } => {
                check_dims("patch-view gradient", patch * patch * channels, pixel_grad.len())?;
                let mut canvas = Canvas::zeros(*height, *width, *channels);
                canvas.paste(*origin, *patch, pixel_grad);
                Ok(canvas.values)
            }
        }
    }
}

/// Free-function form of [`Renderer::apply_jacobian`].
pub fn apply_jacobian(renderer: &Renderer, pixel_grad: &[f64]) -> Result<Vec<f64>> {
    renderer.apply_jacobian(pixel_grad)
}

/// Which patches count toward a cell's normalizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CountMode {
    /// Patches in the current batch.
    #[default]
    BatchRelative,
    /// Every patch of the grid.
    FullGrid,
}

/// Average the scattered canvas gradients over the patches covering each
/// cell. `canvas_grads[i]` belongs to `batch_origins[i]`. Cells no patch
/// covers get 0.
///
/// The average is kept as a running mean so a constant field comes back
/// bit-for-bit. With [`CountMode::FullGrid`] the batch sum is divided by the
/// full-grid count instead.
pub fn accumulate_normalize(
    canvas_grads: &[Vec<f64>],
    grid: &PatchGrid,
    batch_origins: &[(usize, usize)],
    channels: usize,
    mode: CountMode,
) -> Result<Vec<f64>> {
    if let Some(o) = batch_origins.iter().find(|o| !grid.origins.contains(o)) {
        return Err(CsdError::Contract(format!("origin {o:?} is not part of the grid")));
    }
    check_dims("scattered gradients per origin", batch_origins.len(), canvas_grads.len())?;
    let cells = grid.height * grid.width;
    let mut mean = vec![0.0; cells * channels];
    let mut seen = vec![0u32; cells];
    for (g, &(r0, c0)) in canvas_grads.iter().zip(batch_origins) {
        check_dims("scattered gradient", cells * channels, g.len())?;
        for u in r0..r0 + grid.patch {
            for v in c0..c0 + grid.patch {
                let cell = u * grid.width + v;
                seen[cell] += 1;
                let k = f64::from(seen[cell]);
                for c in cell * channels..(cell + 1) * channels {
                    mean[c] += (g[c] - mean[c]) / k;
                }
            }
        }
    }
    if mode == CountMode::FullGrid {
        for (cell, (&n, &full)) in seen.iter().zip(&grid.counts).enumerate() {
            if n != 0 && n != full {
                let scale = f64::from(n) / f64::from(full);
                mean[cell * channels..(cell + 1) * channels].iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    Ok(mean)
}

/// Batch and condition settings for canvas editing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanvasEditOptions {
    pub batch_size: usize,
    #[serde(default)]
    pub count_mode: CountMode,
    pub condition: Condition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanvasStep {
    pub metrics: StepMetrics,
    pub seam_discrepancy: f64,
}

#[derive(Debug, Clone)]
pub struct CanvasEdit {
    pub canvas: Canvas,
    pub steps: Vec<CanvasStep>,
    /// Per-cell number of times the cell was inside a sampled patch.
    pub visits: Vec<u32>,
}

fn sample_batch(rng: &mut Rng, total: usize, batch: usize) -> Vec<usize> {
    if batch == total {
        return (0..total).collect();
    }
    let mut picked = index::sample(rng, total, batch).into_vec();
    picked.sort_unstable();
    picked
}

/// Patch-based editing of `source`. Each step samples `batch_size` patches
/// without replacement, edits them as one particle set against the frozen
/// source patches, and writes the count-normalized gradient back.
pub fn edit_canvas(
    source: &Canvas,
    grid: &PatchGrid,
    oracle: &dyn ScoreOracle,
    config: &DistillConfig,
    opts: &CanvasEditOptions,
    rng: &mut Rng,
) -> Result<CanvasEdit> {
    if grid.height != source.height || grid.width != source.width {
        return Err(CsdError::Contract("patch grid does not match canvas shape".into()));
    }
    if opts.batch_size == 0 || opts.batch_size > grid.len() {
        return Err(CsdError::Domain(format!(
            "batch size {} must lie in [1, {}]",
            opts.batch_size,
            grid.len()
        )));
    }
    let p = grid.patch;
    let channels = source.channels;
    let dim = p * p * channels;
    let mut current = source.clone();
    let mut visits = vec![0u32; grid.height * grid.width];
    let mut steps = Vec::with_capacity(config.steps);
    let conditions = vec![opts.condition.clone(); opts.batch_size];

    for step in 0..config.steps {
        let started = Instant::now();
        let picked = sample_batch(rng, grid.len(), opts.batch_size);
        let origins: Vec<(usize, usize)> = picked.iter().map(|&i| grid.origins[i]).collect();
        let targets = ParticleSet::new(origins.iter().map(|&o| current.extract(o, p)).collect())?;
        let sources = ParticleSet::new(origins.iter().map(|&o| source.extract(o, p)).collect())?;
        let draw = StepDraw::sample(rng, &config.schedule, origins.len(), dim, config.noise_sharing);
        let grads = edit_step_grads(&sources, &targets, &conditions, oracle, &config.guidance, &draw, config)
            .map_err(|e| match e {
                e @ CsdError::NonFinite { .. } => CsdError::NumericAbort {
                    step,
                    source: Box::new(e),
                },
                other => other,
            })?;
        let scattered: Vec<Vec<f64>> = origins
            .iter()
            .zip(&grads)
            .map(|(&origin, g)| {
                Renderer::PatchView {
                    height: grid.height,
                    width: grid.width,
                    channels,
                    patch: p,
                    origin,
                }
                .apply_jacobian(g)
            })
            .collect::<Result<_>>()?;
        let update = accumulate_normalize(&scattered, grid, &origins, channels, opts.count_mode)?;
        let eta = config.eta_at(step);
        let next = descend(std::slice::from_ref(&current.values), std::slice::from_ref(&update), eta, step)?;
        current.values = next.into_iter().next().unwrap();
        for &(r0, c0) in &origins {
            for u in r0..r0 + p {
                for v in c0..c0 + p {
                    visits[u * grid.width + v] += 1;
                }
            }
        }
        let (mean_d, min_d) = pairwise_distance_stats(targets.particles());
        steps.push(CanvasStep {
            metrics: StepMetrics {
                step,
                eta,
                t: draw.t,
                mean_grad_norm: mean_norm(&grads),
                mean_pairwise_distance: mean_d,
                min_pairwise_distance: min_d,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            },
            seam_discrepancy: seam_discrepancy(source, &current, grid)?,
        });
    }
    Ok(CanvasEdit {
        canvas: current,
        steps,
        visits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEditOptions {
    pub batch_size: usize,
    /// One condition shared by all frames, or one per frame.
    pub conditions: Vec<Condition>,
}

#[derive(Debug, Clone)]
pub struct FramesEdit {
    pub frames: Vec<Canvas>,
    pub metrics: Vec<StepMetrics>,
}

/// Sequence editing: each step a random batch of whole frames is the particle
/// set (identity renderer).
pub fn edit_frames(
    frames: &[Canvas],
    oracle: &dyn ScoreOracle,
    config: &DistillConfig,
    opts: &FrameEditOptions,
    rng: &mut Rng,
) -> Result<FramesEdit> {
    let Some(first) = frames.first() else {
        return Err(CsdError::Domain("need at least one frame".into()));
    };
    if let Some(i) = frames.iter().position(|f| !f.same_shape(first)) {
        return Err(CsdError::Contract(format!("frame {i} differs in shape from frame 0")));
    }
    let count = frames.len();
    if opts.batch_size == 0 || opts.batch_size > count {
        return Err(CsdError::Domain(format!(
            "batch size {} must lie in [1, {count}]",
            opts.batch_size
        )));
    }
    let conds: Vec<Condition> = match opts.conditions.len() {
        1 => vec![opts.conditions[0].clone(); count],
        n if n == count => opts.conditions.clone(),
        n => {
            return Err(CsdError::DimensionMismatch {
                context: "frame conditions",
                expected: count,
                found: n,
            })
        }
    };
    let dim = first.values.len();
    let mut current: Vec<Vec<f64>> = frames.iter().map(|f| f.values.clone()).collect();
    let mut metrics = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let started = Instant::now();
        let picked = sample_batch(rng, count, opts.batch_size);
        let targets = ParticleSet::new(picked.iter().map(|&i| current[i].clone()).collect())?;
        let sources = ParticleSet::new(picked.iter().map(|&i| frames[i].values.clone()).collect())?;
        let batch_conds: Vec<Condition> = picked.iter().map(|&i| conds[i].clone()).collect();
        let draw = StepDraw::sample(rng, &config.schedule, picked.len(), dim, config.noise_sharing);
        let grads = edit_step_grads(&sources, &targets, &batch_conds, oracle, &config.guidance, &draw, config)
            .map_err(|e| match e {
                e @ CsdError::NonFinite { .. } => CsdError::NumericAbort {
                    step,
                    source: Box::new(e),
                },
                other => other,
            })?;
        let eta = config.eta_at(step);
        let next = descend(targets.particles(), &grads, eta, step)?;
        for (&i, x) in picked.iter().zip(next) {
            current[i] = x;
        }
        let (mean_d, min_d) = pairwise_distance_stats(&current);
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
    let frames = current
        .into_iter()
        .map(|values| Canvas::new(first.height, first.width, first.channels, values))
        .collect::<Result<_>>()?;
    Ok(FramesEdit { frames, metrics })
}
