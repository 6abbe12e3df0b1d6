//! Experiment configuration file.
//!
//! UTF-8 JSON, unknown keys rejected. Example:
//!
//! ```json
//! {
//!   "mode": "svgd",
//!   "seed": 7,
//!   "oracle": {"mixture": {"weights": [1.0], "means": [[0.0, 0.0]], "variances": [[1.0, 1.0]]}},
//!   "distill": {"eta": 0.3, "steps": 500},
//!   "svgd": {"particles": 64, "init_mean": [5.0, 5.0], "init_std": 1.0},
//!   "output_dir": "out"
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::BridgeEndpoint;
use crate::canvas::{CountMode, PatchGrid, Renderer};
use crate::distill::{Baseline, DistillConfig};
use crate::error::{CsdError, Result};
use crate::oracle::{Condition, EditOracle, GaussianMixture};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Svgd,
    Generate,
    EditCanvas,
    EditFrames,
    Check,
}

/// Where epsilon-predictions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSection {
    /// A single mixture used as the unconditional branch.
    Mixture(GaussianMixture),
    Edit(EditOracle),
    Bridge(BridgeEndpoint),
}

impl OracleSection {
    /// In-process oracle, if this section describes one.
    pub fn edit_oracle(&self) -> Option<EditOracle> {
        match self {
            OracleSection::Mixture(g) => Some(EditOracle::new(g.clone())),
            OracleSection::Edit(e) => Some(e.clone()),
            OracleSection::Bridge(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvgdSection {
    pub particles: usize,
    pub init_mean: Vec<f64>,
    #[serde(default = "one")]
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub particles: usize,
    pub param_dim: usize,
    #[serde(default = "one")]
    pub init_std: f64,
    #[serde(default)]
    pub renderer: Renderer,
    /// One condition for all particles or one per particle.
    #[serde(default = "unconditional")]
    pub conditions: Vec<Condition>,
}

/// Initial canvas: a file (`.csv` or the binary format) or Gaussian values
/// drawn from the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CanvasSource {
    File(PathBuf),
    Generated(GeneratedCanvas),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedCanvas {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "one")]
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanvasSection {
    pub source: CanvasSource,
    pub patch_size: usize,
    pub stride: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub count_mode: CountMode,
    pub condition: Condition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FramesSource {
    Files(Vec<PathBuf>),
    Generated { count: usize, canvas: GeneratedCanvas },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramesSection {
    pub source: FramesSource,
    pub batch_size: usize,
    pub conditions: Vec<Condition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svgd: Option<SvgdSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canvas: Option<CanvasSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<FramesSection>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn one() -> f64 {
    1.0
}

fn unconditional() -> Vec<Condition> {
    vec![Condition::Unconditional]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("csd-out")
}

fn nest(err: CsdError, prefix: &str) -> CsdError {
    match err {
        CsdError::Config { path, message } => CsdError::Config {
            path: format!("{prefix}.{path}"),
            message,
        },
        other => CsdError::config(prefix, other.to_string()),
    }
}

fn require<'a, T>(section: &'a Option<T>, name: &str, mode: Mode) -> Result<&'a T> {
    section
        .as_ref()
        .ok_or_else(|| CsdError::config(name, format!("section is required in mode {mode:?}")))
}

fn check_std(path: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(CsdError::config(path, "must be non-negative and finite"))
    }
}

fn check_conditions(path: &str, conds: &[Condition], oracle: Option<&EditOracle>, count: usize) -> Result<()> {
    if conds.len() != 1 && conds.len() != count {
        return Err(CsdError::config(
            path,
            format!("expected 1 or {count} conditions, found {}", conds.len()),
        ));
    }
    if let Some(o) = oracle {
        for (i, c) in conds.iter().enumerate() {
            let found = match c {
                Condition::Unconditional => true,
                Condition::Image { source_ref } => o.image.contains_key(source_ref),
                Condition::ImageText { source_ref, text_ref } => o
                    .image_text
                    .contains_key(&(source_ref.clone(), text_ref.clone())),
            };
            if !found {
                return Err(CsdError::config(format!("{path}[{i}]"), "oracle has no branch for this condition"));
            }
        }
    }
    Ok(())
}

fn check_generated(path: &str, g: &GeneratedCanvas) -> Result<()> {
    if g.height == 0 || g.width == 0 || g.channels == 0 {
        return Err(CsdError::config(path, "canvas dimensions must be at least 1"));
    }
    if !g.mean.is_finite() {
        return Err(CsdError::config(format!("{path}.mean"), "must be finite"));
    }
    check_std(&format!("{path}.std"), g.std)
}

impl ExperimentConfig {
    /// Check every section the mode uses, with field paths in errors.
    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::Check {
            return Ok(());
        }
        let oracle = require(&self.oracle, "oracle", self.mode)?;
        let local = oracle.edit_oracle();
        match oracle {
            OracleSection::Mixture(g) => g.validate().map_err(|e| nest(e, "oracle.mixture"))?,
            OracleSection::Edit(e) => e.validate().map_err(|e| nest(e, "oracle.edit"))?,
            OracleSection::Bridge(b) => b.validate().map_err(|e| nest(e, "oracle.bridge"))?,
        }
        let distill = require(&self.distill, "distill", self.mode)?;
        distill.validate().map_err(|e| nest(e, "distill"))?;
        let dim = local.as_ref().map(EditOracle::dim);
        let dim_matches = |path: &str, d: usize| match dim {
            Some(od) if od != d => Err(CsdError::config(
                path,
                format!("sample dimension {d} does not match oracle dimension {od}"),
            )),
            _ => Ok(()),
        };

        match self.mode {
            Mode::Check => unreachable!(),
            Mode::Svgd => {
                let s = require(&self.svgd, "svgd", self.mode)?;
                if local.is_none() {
                    return Err(CsdError::config("oracle", "svgd mode needs an in-process mixture"));
                }
                if s.particles == 0 {
                    return Err(CsdError::config("svgd.particles", "must be at least 1"));
                }
                if s.init_mean.iter().any(|v| !v.is_finite()) {
                    return Err(CsdError::config("svgd.init_mean", "entries must be finite"));
                }
                check_std("svgd.init_std", s.init_std)?;
                dim_matches("svgd.init_mean", s.init_mean.len())?;
            }
            Mode::Generate => {
                let s = require(&self.generate, "generate", self.mode)?;
                if s.particles == 0 {
                    return Err(CsdError::config("generate.particles", "must be at least 1"));
                }
                if s.param_dim == 0 {
                    return Err(CsdError::config("generate.param_dim", "must be at least 1"));
                }
                check_std("generate.init_std", s.init_std)?;
                s.renderer.validate().map_err(|e| nest(e, "generate"))?;
                let rendered = match &s.renderer {
                    Renderer::Identity => s.param_dim,
                    Renderer::Linear { rows, cols, .. } => {
                        if *cols != s.param_dim {
                            return Err(CsdError::config(
                                "generate.renderer.linear.cols",
                                format!("must equal param_dim {}", s.param_dim),
                            ));
                        }
                        *rows
                    }
                    Renderer::PatchView {
                        height,
                        width,
                        channels,
                        patch,
                        ..
                    } => {
                        if height * width * channels != s.param_dim {
                            return Err(CsdError::config(
                                "generate.renderer.patch-view",
                                format!("canvas size must equal param_dim {}", s.param_dim),
                            ));
                        }
                        patch * patch * channels
                    }
                };
                dim_matches("generate.renderer", rendered)?;
                check_conditions("generate.conditions", &s.conditions, local.as_ref(), s.particles)?;
            }
            Mode::EditCanvas => {
                let s = require(&self.canvas, "canvas", self.mode)?;
                // File-backed canvases are checked once loaded.
                if let CanvasSource::Generated(g) = &s.source {
                    check_generated("canvas.source.generated", g)?;
                    let grid = PatchGrid::new(g.height, g.width, s.patch_size, s.stride)
                        .map_err(|e| nest(e, "canvas.patch_size"))?;
                    check_batch("canvas.batch_size", s.batch_size, grid.len())?;
                    dim_matches("canvas.patch_size", s.patch_size * s.patch_size * g.channels)?;
                }
                self.check_edit_conditions(std::slice::from_ref(&s.condition), local.as_ref(), 1)?;
            }
            Mode::EditFrames => {
                let s = require(&self.frames, "frames", self.mode)?;
                let count = match &s.source {
                    FramesSource::Generated { count, canvas } => {
                        check_generated("frames.source.generated.canvas", canvas)?;
                        dim_matches("frames.source", canvas.height * canvas.width * canvas.channels)?;
                        *count
                    }
                    FramesSource::Files(files) => files.len(),
                };
                if count == 0 {
                    return Err(CsdError::config("frames.source", "need at least one frame"));
                }
                check_batch("frames.batch_size", s.batch_size, count)?;
                self.check_edit_conditions(&s.conditions, local.as_ref(), count)?;
            }
        }
        Ok(())
    }

    fn check_edit_conditions(&self, conds: &[Condition], oracle: Option<&EditOracle>, count: usize) -> Result<()> {
        let path = match self.mode {
            Mode::EditCanvas => "canvas.condition",
            _ => "frames.conditions",
        };
        check_conditions(path, conds, oracle, count)?;
        let baseline = &self.distill.as_ref().expect("validated").baseline;
        for (i, c) in conds.iter().enumerate() {
            let ok = match baseline {
                Baseline::SourceConditional => matches!(c, Condition::ImageText { .. }),
                Baseline::Dds { .. } => c.source_ref().is_some(),
                Baseline::RandomNoise => true,
            };
            if !ok {
                return Err(CsdError::config(
                    format!("{path}[{i}]"),
                    "condition kind does not fit the configured baseline",
                ));
            }
        }
        if let (Baseline::Dds {
            source_text_ref,
            target_text_ref,
        }, Some(o)) = (baseline, oracle)
        {
            for c in conds {
                let src = c.source_ref().expect("checked above").to_string();
                for txt in [source_text_ref, target_text_ref] {
                    if !o.image_text.contains_key(&(src.clone(), txt.clone())) {
                        return Err(CsdError::config(
                            "distill.baseline.dds",
                            format!("oracle has no branch for (`{src}`, `{txt}`)"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn check_batch(path: &str, batch: usize, total: usize) -> Result<()> {
    if batch == 0 || batch > total {
        return Err(CsdError::config(path, format!("must lie in [1, {total}]")));
    }
    Ok(())
}

/// Parse a config from JSON text. Errors carry the path of the offending field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CsdError::config(if path.is_empty() { ".".into() } else { path }, e.into_inner().to_string())
    })?;
    Ok(cfg)
}

/// Read, parse and validate a config file. Relative input paths inside it are
/// resolved against the file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    if let Some(CanvasSection {
        source: CanvasSource::File(p),
        ..
    }) = cfg.canvas.as_mut()
    {
        resolve(p);
    }
    if let Some(FramesSection {
        source: FramesSource::Files(files),
        ..
    }) = cfg.frames.as_mut()
    {
        files.iter_mut().for_each(resolve);
    }
    cfg.validate()?;
    Ok(cfg)
}
