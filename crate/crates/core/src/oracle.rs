//! Score oracles answering "which noise was mixed into `x_t`?".
//!
//! The interface is the epsilon-prediction. For a density `p_t` the exact
//! prediction is `eps = -sigma_t * grad log p_t(x_t)`; [`GaussianMixture::eps`]
//! is the only place that conversion happens.

use std::collections::BTreeMap;

use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, CsdError, Result};
use crate::schedule::{alpha_sigma, ScheduleKind};

/// Conditioning signal for an epsilon query. The refs are opaque names that
/// the oracle resolves.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Condition {
    Unconditional,
    Image { source_ref: String },
    ImageText { source_ref: String, text_ref: String },
}

impl Condition {
    pub fn image(source: impl Into<String>) -> Self {
        Condition::Image {
            source_ref: source.into(),
        }
    }

    pub fn image_text(source: impl Into<String>, text: impl Into<String>) -> Self {
        Condition::ImageText {
            source_ref: source.into(),
            text_ref: text.into(),
        }
    }

    pub fn source_ref(&self) -> Option<&str> {
        match self {
            Condition::Unconditional => None,
            Condition::Image { source_ref } | Condition::ImageText { source_ref, .. } => {
                Some(source_ref)
            }
        }
    }

    pub fn text_ref(&self) -> Option<&str> {
        match self {
            Condition::ImageText { text_ref, .. } => Some(text_ref),
            _ => None,
        }
    }

    /// The image-only condition this one extends, if any.
    pub fn without_text(&self) -> Condition {
        match self {
            Condition::ImageText { source_ref, .. } => Condition::Image {
                source_ref: source_ref.clone(),
            },
            other => other.clone(),
        }
    }
}

/// Text scale `omega_y` and image scale `omega_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceParams {
    pub omega_y: f64,
    pub omega_s: f64,
}

impl GuidanceParams {
    pub fn new(omega_y: f64, omega_s: f64) -> Result<Self> {
        let g = GuidanceParams { omega_y, omega_s };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_y.is_finite() && self.omega_y >= 0.0) {
            return Err(CsdError::config("omega_y", "must be finite and >= 0"));
        }
        if !(self.omega_s.is_finite() && self.omega_s >= 0.0) {
            return Err(CsdError::config("omega_s", "must be finite and >= 0"));
        }
        Ok(())
    }
}

impl Default for GuidanceParams {
    fn default() -> Self {
        GuidanceParams {
            omega_y: 7.5,
            omega_s: 1.5,
        }
    }
}

/// Classifier-free guidance: `e_u + omega * (e_c - e_u)`.
pub fn cfg_combine(eps_uncond: &[f64], eps_cond: &[f64], omega: f64) -> Result<Vec<f64>> {
    check_dims("cfg_combine", eps_uncond.len(), eps_cond.len())?;
    Ok(eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(u, c)| u + omega * (c - u))
        .collect())
}

/// Dual image/text guidance:
/// `e_u + omega_s (e_i - e_u) + omega_y (e_it - e_i)`.
pub fn ip2p_combine(
    eps_uncond: &[f64],
    eps_img: &[f64],
    eps_imgtxt: &[f64],
    g: &GuidanceParams,
) -> Result<Vec<f64>> {
    check_dims("ip2p_combine", eps_uncond.len(), eps_img.len())?;
    check_dims("ip2p_combine", eps_uncond.len(), eps_imgtxt.len())?;
    Ok(eps_uncond
        .iter()
        .zip(eps_img)
        .zip(eps_imgtxt)
        .map(|((u, i), it)| u + g.omega_s * (i - u) + g.omega_y * (it - i))
        .collect())
}

/// Mixture of axis-aligned Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Per-axis variances of each component.
    pub variances: Vec<Vec<f64>>,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let gmm = GaussianMixture {
            weights,
            means,
            variances,
        };
        gmm.validate()?;
        Ok(gmm)
    }

    /// Single component `N(mean, variance * I)`.
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(vec![1.0], vec![mean], vec![vec![variance; d]])
    }

    pub fn standard(dim: usize) -> Self {
        GaussianMixture {
            weights: vec![1.0],
            means: vec![vec![0.0; dim]],
            variances: vec![vec![1.0; dim]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(CsdError::config("weights", "mixture needs at least one component"));
        }
        if self.means.len() != k || self.variances.len() != k {
            return Err(CsdError::config(
                "means",
                format!(
                    "{} weights but {} means and {} variance vectors",
                    k,
                    self.means.len(),
                    self.variances.len()
                ),
            ));
        }
        if let Some(i) = self.weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(CsdError::config(format!("weights[{i}]"), "must be positive and finite"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() >= 1e-12 {
            return Err(CsdError::config("weights", format!("sum to {total}, expected 1")));
        }
        let d = self.means[0].len();
        if d == 0 {
            return Err(CsdError::config("means[0]", "dimension must be at least 1"));
        }
        for (i, (m, v)) in self.means.iter().zip(&self.variances).enumerate() {
            if m.len() != d {
                return Err(CsdError::config(format!("means[{i}]"), format!("expected dimension {d}")));
            }
            if v.len() != d {
                return Err(CsdError::config(
                    format!("variances[{i}]"),
                    format!("expected dimension {d}"),
                ));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(CsdError::config(format!("means[{i}]"), "entries must be finite"));
            }
            if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(CsdError::config(
                    format!("variances[{i}]"),
                    "entries must be positive and finite",
                ));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Noised marginal at `t`: means scale by `alpha_t`, variances become
    /// `alpha_t^2 v + sigma_t^2`.
    pub fn marginal(&self, kind: ScheduleKind, t: f64) -> Result<GaussianMixture> {
        let (alpha, sigma) = alpha_sigma(kind, t)?;
        let (a2, s2) = (alpha * alpha, sigma * sigma);
        Ok(GaussianMixture {
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|m| m.iter().map(|x| alpha * x).collect())
                .collect(),
            variances: self
                .variances
                .iter()
                .map(|v| v.iter().map(|x| a2 * x + s2).collect())
                .collect(),
        })
    }

    fn component_log_terms(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (m, v))| {
                let quad: f64 = x
                    .iter()
                    .zip(m.iter().zip(v))
                    .map(|(xi, (mi, vi))| {
                        let r = xi - mi;
                        r * r / vi + vi.ln() + LN_2PI
                    })
                    .sum();
                w.ln() - 0.5 * quad
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dims("log_density", self.dim(), x.len())?;
        Ok(log_sum_exp(&self.component_log_terms(x)))
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dims("responsibilities", self.dim(), x.len())?;
        let terms = self.component_log_terms(x);
        let norm = log_sum_exp(&terms);
        Ok(terms.iter().map(|l| (l - norm).exp()).collect())
    }

    /// `grad_x log p(x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let resp = self.responsibilities(x)?;
        let mut out = vec![0.0; x.len()];
        for (r, (m, v)) in resp.iter().zip(self.means.iter().zip(&self.variances)) {
            if *r == 0.0 {
                continue;
            }
            for (o, (xi, (mi, vi))) in out.iter_mut().zip(x.iter().zip(m.iter().zip(v))) {
                *o -= r * (xi - mi) / vi;
            }
        }
        Ok(out)
    }

    /// Exact epsilon-prediction of the noised mixture at `(x_t, t)`.
    pub fn eps(&self, kind: ScheduleKind, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dims("gmm_eps", self.dim(), x_t.len())?;
        let (_, sigma) = alpha_sigma(kind, t)?;
        if sigma <= 0.0 {
            return Err(CsdError::Domain(format!(
                "epsilon prediction undefined at t = {t} (sigma_t = 0)"
            )));
        }
        let score = self.marginal(kind, t)?.score(x_t)?;
        Ok(score.into_iter().map(|s| -sigma * s).collect())
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.means[k]
            .iter()
            .zip(&self.variances[k])
            .map(|(m, v)| {
                let z: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * z
            })
            .collect()
    }
}

/// Free-function form of [`GaussianMixture::marginal`].
pub fn gmm_marginal(gmm: &GaussianMixture, kind: ScheduleKind, t: f64) -> Result<GaussianMixture> {
    gmm.marginal(kind, t)
}

/// Free-function form of [`GaussianMixture::eps`].
pub fn gmm_eps(gmm: &GaussianMixture, kind: ScheduleKind, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    gmm.eps(kind, x_t, t)
}

/// Three-way conditioned toy oracle: an unconditional mixture, one mixture
/// per source image and one per (source, instruction) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EditOracleSpec", into = "EditOracleSpec")]
pub struct EditOracle {
    pub unconditional: GaussianMixture,
    pub image: BTreeMap<String, GaussianMixture>,
    pub image_text: BTreeMap<(String, String), GaussianMixture>,
}

/// Which raw branch of an [`EditOracle`] to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch<'a> {
    Unconditional,
    Image(&'a str),
    ImageText(&'a str, &'a str),
}

impl EditOracle {
    pub fn new(unconditional: GaussianMixture) -> Self {
        EditOracle {
            unconditional,
            image: BTreeMap::new(),
            image_text: BTreeMap::new(),
        }
    }

    pub fn with_image(mut self, source: &str, gmm: GaussianMixture) -> Self {
        self.image.insert(source.to_owned(), gmm);
        self
    }

    pub fn with_image_text(mut self, source: &str, text: &str, gmm: GaussianMixture) -> Self {
        self.image_text
            .insert((source.to_owned(), text.to_owned()), gmm);
        self
    }

    pub fn dim(&self) -> usize {
        self.unconditional.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.unconditional
            .validate()
            .map_err(|e| prefix_config(e, "unconditional"))?;
        let d = self.dim();
        for (src, g) in &self.image {
            g.validate().map_err(|e| prefix_config(e, &format!("image[{src}]")))?;
            if g.dim() != d {
                return Err(CsdError::config(format!("image[{src}]"), format!("expected dimension {d}")));
            }
        }
        for ((src, txt), g) in &self.image_text {
            let path = format!("image_text[{src},{txt}]");
            g.validate().map_err(|e| prefix_config(e, &path))?;
            if g.dim() != d {
                return Err(CsdError::config(path, format!("expected dimension {d}")));
            }
            if !self.image.contains_key(src) {
                return Err(CsdError::config(path, "no image-conditional branch for this source"));
            }
        }
        Ok(())
    }

    pub fn branch(&self, branch: Branch<'_>) -> Result<&GaussianMixture> {
        match branch {
            Branch::Unconditional => Ok(&self.unconditional),
            Branch::Image(src) => self
                .image
                .get(src)
                .ok_or_else(|| CsdError::Lookup(format!("unknown source ref `{src}`"))),
            Branch::ImageText(src, txt) => self
                .image_text
                .get(&(src.to_owned(), txt.to_owned()))
                .ok_or_else(|| {
                    CsdError::Lookup(format!("unknown (source, text) ref (`{src}`, `{txt}`)"))
                }),
        }
    }

    /// Raw, unguided prediction of one branch.
    pub fn branch_eps(&self, kind: ScheduleKind, branch: Branch<'_>, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        self.branch(branch)?.eps(kind, x_t, t)
    }
}

/// Guided prediction of an [`EditOracle`]: unconditional queries return the raw
/// branch, image queries apply guidance with `omega_s`, and image-text queries
/// apply the dual combination.
pub fn edit_oracle_eps(
    oracle: &EditOracle,
    kind: ScheduleKind,
    x_t: &[f64],
    t: f64,
    cond: &Condition,
    g: &GuidanceParams,
) -> Result<Vec<f64>> {
    match cond {
        Condition::Unconditional => oracle.branch_eps(kind, Branch::Unconditional, x_t, t),
        Condition::Image { source_ref } => {
            let img = oracle.branch(Branch::Image(source_ref))?;
            let e_u = oracle.unconditional.eps(kind, x_t, t)?;
            let e_i = img.eps(kind, x_t, t)?;
            cfg_combine(&e_u, &e_i, g.omega_s)
        }
        Condition::ImageText {
            source_ref,
            text_ref,
        } => {
            let img = oracle.branch(Branch::Image(source_ref))?;
            let txt = oracle.branch(Branch::ImageText(source_ref, text_ref))?;
            let e_u = oracle.unconditional.eps(kind, x_t, t)?;
            let e_i = img.eps(kind, x_t, t)?;
            let e_it = txt.eps(kind, x_t, t)?;
            ip2p_combine(&e_u, &e_i, &e_it, g)
        }
    }
}

fn prefix_config(err: CsdError, prefix: &str) -> CsdError {
    match err {
        CsdError::Config { path, message } => CsdError::Config {
            path: format!("{prefix}.{path}"),
            message,
        },
        other => other,
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageEntry {
    source_ref: String,
    mixture: GaussianMixture,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageTextEntry {
    source_ref: String,
    text_ref: String,
    mixture: GaussianMixture,
}

/// On-disk layout of an [`EditOracle`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditOracleSpec {
    unconditional: GaussianMixture,
    #[serde(default)]
    image: Vec<ImageEntry>,
    #[serde(default)]
    image_text: Vec<ImageTextEntry>,
}

impl TryFrom<EditOracleSpec> for EditOracle {
    type Error = CsdError;

    fn try_from(spec: EditOracleSpec) -> Result<Self> {
        let mut oracle = EditOracle::new(spec.unconditional);
        for e in spec.image {
            if oracle.image.insert(e.source_ref.clone(), e.mixture).is_some() {
                return Err(CsdError::config("image", format!("duplicate source ref `{}`", e.source_ref)));
            }
        }
        for e in spec.image_text {
            let key = (e.source_ref, e.text_ref);
            if oracle.image_text.contains_key(&key) {
                return Err(CsdError::config(
                    "image_text",
                    format!("duplicate ref (`{}`, `{}`)", key.0, key.1),
                ));
            }
            oracle.image_text.insert(key, e.mixture);
        }
        oracle.validate()?;
        Ok(oracle)
    }
}

impl From<EditOracle> for EditOracleSpec {
    fn from(o: EditOracle) -> Self {
        EditOracleSpec {
            unconditional: o.unconditional,
            image: o
                .image
                .into_iter()
                .map(|(source_ref, mixture)| ImageEntry { source_ref, mixture })
                .collect(),
            image_text: o
                .image_text
                .into_iter()
                .map(|((source_ref, text_ref), mixture)| ImageTextEntry {
                    source_ref,
                    text_ref,
                    mixture,
                })
                .collect(),
        }
    }
}

/// One query in a batch.
#[derive(Debug, Clone, Copy)]
pub struct EpsQuery<'a> {
    pub x_t: &'a [f64],
    pub t: f64,
    pub cond: &'a Condition,
}

/// Anything that can produce a guided epsilon-prediction.
pub trait ScoreOracle: Send + Sync {
    fn eps(&self, x_t: &[f64], t: f64, cond: &Condition, g: &GuidanceParams) -> Result<Vec<f64>>;

    /// Evaluate several queries; results are in query order.
    fn eps_batch(&self, queries: &[EpsQuery<'_>], g: &GuidanceParams) -> Result<Vec<Vec<f64>>> {
        queries
            .iter()
            .map(|q| self.eps(q.x_t, q.t, q.cond, g))
            .collect()
    }
}

/// In-process [`EditOracle`] bound to a schedule kind.
#[derive(Debug, Clone)]
pub struct AnalyticOracle {
    pub edit: EditOracle,
    pub kind: ScheduleKind,
}

impl AnalyticOracle {
    pub fn new(edit: EditOracle, kind: ScheduleKind) -> Self {
        AnalyticOracle { edit, kind }
    }
}

impl ScoreOracle for AnalyticOracle {
    fn eps(&self, x_t: &[f64], t: f64, cond: &Condition, g: &GuidanceParams) -> Result<Vec<f64>> {
        edit_oracle_eps(&self.edit, self.kind, x_t, t, cond, g)
    }

    fn eps_batch(&self, queries: &[EpsQuery<'_>], g: &GuidanceParams) -> Result<Vec<Vec<f64>>> {
        queries
            .par_iter()
            .map(|q| self.eps(q.x_t, q.t, q.cond, g))
            .collect()
    }
}
