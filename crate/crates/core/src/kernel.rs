//! RBF kernel `k(x, y) = exp(-d(x, y)^2 / h)` with a pluggable distance and
//! the median bandwidth heuristic.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, CsdError, Result};

/// A squared distance and its gradient in the first argument.
pub trait Distance: Send + Sync {
    fn squared(&self, x: &[f64], y: &[f64]) -> f64;

    /// `grad_x d(x, y)^2`.
    fn squared_grad_first(&self, x: &[f64], y: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredEuclidean;

impl Distance for SquaredEuclidean {
    fn squared(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    fn squared_grad_first(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        x.iter().zip(y).map(|(a, b)| 2.0 * (a - b)).collect()
    }
}

type Registry = RwLock<HashMap<String, Arc<dyn Distance>>>;

fn registry() -> &'static Registry {
    static REGISTRY: OnceLock<Registry> = OnceLock::new();
    REGISTRY.get_or_init(|| RwLock::new(HashMap::new()))
}

/// Make a distance available to [`DistanceSpec::Pluggable`] under `id`.
/// Re-registering an id replaces the previous entry.
pub fn register_distance(id: &str, distance: Arc<dyn Distance>) {
    registry()
        .write()
        .expect("distance registry poisoned")
        .insert(id.to_owned(), distance);
}

pub fn lookup_distance(id: &str) -> Result<Arc<dyn Distance>> {
    registry()
        .read()
        .expect("distance registry poisoned")
        .get(id)
        .cloned()
        .ok_or_else(|| CsdError::Lookup(format!("no distance registered under `{id}`")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceSpec {
    #[default]
    SquaredEuclidean,
    /// A distance registered with [`register_distance`].
    Pluggable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    Fixed(f64),
    #[default]
    MedianHeuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    #[serde(default)]
    pub distance: DistanceSpec,
    #[serde(default)]
    pub bandwidth: Bandwidth,
}

impl KernelSpec {
    pub fn fixed(h: f64) -> Self {
        KernelSpec {
            distance: DistanceSpec::SquaredEuclidean,
            bandwidth: Bandwidth::Fixed(h),
        }
    }

    pub fn median() -> Self {
        KernelSpec::default()
    }

    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h.is_finite() && h > 0.0) {
                return Err(CsdError::config("bandwidth.fixed", "bandwidth must be positive and finite"));
            }
        }
        if let DistanceSpec::Pluggable(id) = &self.distance {
            lookup_distance(id).map_err(|e| CsdError::config("distance.pluggable", e.to_string()))?;
        }
        Ok(())
    }

    /// Fix the bandwidth for one set of points. A single point needs no
    /// bandwidth (its only kernel value is 1), so it resolves to `h = 1`.
    pub fn resolve(&self, points: &[Vec<f64>]) -> Result<Rbf> {
        let distance: Arc<dyn Distance> = match &self.distance {
            DistanceSpec::SquaredEuclidean => Arc::new(SquaredEuclidean),
            DistanceSpec::Pluggable(id) => lookup_distance(id)?,
        };
        let h = match self.bandwidth {
            Bandwidth::Fixed(h) => {
                if !(h.is_finite() && h > 0.0) {
                    return Err(CsdError::Domain(format!("bandwidth {h} must be positive")));
                }
                h
            }
            Bandwidth::MedianHeuristic if points.len() < 2 => 1.0,
            Bandwidth::MedianHeuristic => median_bandwidth_with(points, distance.as_ref())?,
        };
        Ok(Rbf { h, distance })
    }
}

/// Pairwise kernel as seen by the particle updates.
pub trait PairKernel: Sync {
    fn value(&self, x: &[f64], y: &[f64]) -> f64;

    /// `grad_x k(x, y)`, the derivative in the first slot.
    fn grad_first(&self, x: &[f64], y: &[f64]) -> Vec<f64>;
}

/// RBF kernel with a resolved bandwidth.
#[derive(Clone)]
pub struct Rbf {
    pub h: f64,
    distance: Arc<dyn Distance>,
}

impl fmt::Debug for Rbf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Rbf").field("h", &self.h).finish_non_exhaustive()
    }
}

impl Rbf {
    pub fn euclidean(h: f64) -> Self {
        Rbf {
            h,
            distance: Arc::new(SquaredEuclidean),
        }
    }
}

impl PairKernel for Rbf {
    fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        (-self.distance.squared(x, y) / self.h).exp()
    }

    fn grad_first(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let k = self.value(x, y);
        self.distance
            .squared_grad_first(x, y)
            .into_iter()
            .map(|g| -g * k / self.h)
            .collect()
    }
}

fn check_bandwidth(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(CsdError::Domain(format!("bandwidth {h} must be positive")))
    }
}

/// `exp(-|x - y|^2 / h)`.
pub fn rbf(x: &[f64], y: &[f64], h: f64) -> Result<f64> {
    check_bandwidth(h)?;
    check_dims("rbf", x.len(), y.len())?;
    Ok(Rbf::euclidean(h).value(x, y))
}

/// `grad_x k(x, y) = -(2 / h) (x - y) k(x, y)`.
pub fn rbf_grad_first(x: &[f64], y: &[f64], h: f64) -> Result<Vec<f64>> {
    check_bandwidth(h)?;
    check_dims("rbf_grad_first", x.len(), y.len())?;
    Ok(Rbf::euclidean(h).grad_first(x, y))
}

/// `med^2 / ln B` over the `B (B - 1) / 2` pairwise Euclidean distances.
pub fn median_bandwidth(points: &[Vec<f64>]) -> Result<f64> {
    median_bandwidth_with(points, &SquaredEuclidean)
}

pub fn median_bandwidth_with(points: &[Vec<f64>], distance: &dyn Distance) -> Result<f64> {
    let b = points.len();
    if b < 2 {
        return Err(CsdError::Domain(format!(
            "median bandwidth needs at least 2 points, got {b}"
        )));
    }
    let d = points[0].len();
    for p in points {
        check_dims("median_bandwidth", d, p.len())?;
    }
    let mut dists = Vec::with_capacity(b * (b - 1) / 2);
    for i in 0..b {
        for j in (i + 1)..b {
            dists.push(distance.squared(&points[i], &points[j]).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let med = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    let h = med * med / (b as f64).ln();
    if !(h.is_finite() && h > 0.0) {
        log::warn!("median bandwidth degenerate (median distance {med}); falling back to h = 1");
        return Ok(1.0);
    }
    Ok(h)
}
