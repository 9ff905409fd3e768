use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed, normal_vec, streams};

pub const METRICS_VERSION: u32 = 1;
pub const DEFAULT_PROJECTIONS: usize = 256;

fn check_dim(samples: &[Vec<f64>], what: &str) -> Result<usize> {
    let d = samples
        .first()
        .ok_or_else(|| Error::domain(format!("{what}: empty sample set")))?
        .len();
    for row in samples {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(what.to_string()));
        }
    }
    Ok(d)
}

/// Mean squared distance between seed-paired endpoints.
pub fn endpoint_alignment_mse(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "unpaired inputs: {} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    let da = check_dim(a, "endpoint alignment")?;
    let db = check_dim(b, "endpoint alignment")?;
    if da != db {
        return Err(Error::DimensionMismatch { expected: da, got: db });
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
        .sum();
    Ok(total / a.len() as f64)
}

/// 1D Wasserstein-1 between two empirical distributions, `integral |F_a - F_b|`.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("wasserstein: empty sample set"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(s / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] <= next {
            i += 1;
        }
        while j < b.len() && b[j] <= next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Unit projection directions drawn from the projection stream.
pub fn projections(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n as u64)
        .map(|p| {
            let mut rng = keyed(seed, 0, p, streams::PROJECTIONS);
            loop {
                let v = normal_vec(&mut rng, dim);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    return v.into_iter().map(|x| x / norm).collect();
                }
            }
        })
        .collect()
}

/// Average 1D Wasserstein-1 over random unit projections.
pub fn sliced_wasserstein(a: &[Vec<f64>], b: &[Vec<f64>], n_projections: usize, seed: u64) -> Result<f64> {
    let da = check_dim(a, "sliced wasserstein")?;
    let db = check_dim(b, "sliced wasserstein")?;
    if da != db {
        return Err(Error::DimensionMismatch { expected: da, got: db });
    }
    if n_projections == 0 {
        return Err(Error::domain("sliced wasserstein needs at least one projection"));
    }
    let dot = |x: &[f64], v: &[f64]| x.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let mut total = 0.0;
    for v in projections(da, n_projections, seed) {
        let pa: Vec<f64> = a.iter().map(|x| dot(x, &v)).collect();
        let pb: Vec<f64> = b.iter().map(|x| dot(x, &v)).collect();
        total += wasserstein_1d(&pa, &pb)?;
    }
    Ok(total / n_projections as f64)
}

/// Mean Euclidean distance over all unordered pairs.
pub fn diversity_mean_pairwise(samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::domain("diversity needs at least two samples"));
    }
    check_dim(samples, "diversity")?;
    let n = samples.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in i + 1..n {
            row += samples[i]
                .iter()
                .zip(&samples[j])
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt();
        }
        total += row;
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeeds {
    pub samples: Option<u64>,
    pub reference: Option<u64>,
    pub projections: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    /// Present only for seed-paired comparisons.
    pub endpoint_alignment_mse: Option<f64>,
    pub sliced_wasserstein: f64,
    pub diversity_mean_pairwise: f64,
    pub reference_diversity_mean_pairwise: f64,
    pub nfe_used: Option<usize>,
    pub n_samples: usize,
    pub n_reference: usize,
    pub n_projections: usize,
    pub seeds: MetricSeeds,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.endpoint_alignment_mse.unwrap_or(0.0),
            self.sliced_wasserstein,
            self.diversity_mean_pairwise,
            self.reference_diversity_mean_pairwise,
        ];
        if vals.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::non_finite("metrics report"))
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalRequest<'a> {
    pub samples: &'a [Vec<f64>],
    pub reference: &'a [Vec<f64>],
    pub paired: bool,
    pub n_projections: usize,
    pub projection_seed: u64,
    pub nfe_used: Option<usize>,
    pub seeds: (Option<u64>, Option<u64>),
}

pub fn evaluate(req: &EvalRequest<'_>) -> Result<MetricsReport> {
    let endpoint = if req.paired {
        if let (Some(a), Some(b)) = req.seeds {
            if a != b {
                return Err(Error::domain(format!("unpaired inputs: seeds {a} and {b} differ")));
            }
        }
        Some(endpoint_alignment_mse(req.samples, req.reference)?)
    } else {
        None
    };
    let report = MetricsReport {
        version: METRICS_VERSION,
        endpoint_alignment_mse: endpoint,
        sliced_wasserstein: sliced_wasserstein(req.samples, req.reference, req.n_projections, req.projection_seed)?,
        diversity_mean_pairwise: diversity_mean_pairwise(req.samples)?,
        reference_diversity_mean_pairwise: diversity_mean_pairwise(req.reference)?,
        nfe_used: req.nfe_used,
        n_samples: req.samples.len(),
        n_reference: req.reference.len(),
        n_projections: req.n_projections,
        seeds: MetricSeeds {
            samples: req.seeds.0,
            reference: req.seeds.1,
            projections: req.projection_seed,
        },
    };
    report.validate()?;
    Ok(report)
}
