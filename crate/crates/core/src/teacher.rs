//! Analytic Gaussian-mixture teacher with exact probability-flow velocities.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{log_sum_exp, sq_dist};
use crate::ode::{integrate_state, VelocityField};
use crate::rng::{initial_noise, keyed, normal_vec, streams};
use crate::schedule::{Schedule, TimeShift, T_FLOOR};

/// Isotropic GM prior `sum_j w_j N(theta_j, rho_j^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmPrior {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
}

impl GmPrior {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let j = self.weights.len();
        if j == 0 || self.means.len() != j || self.stds.len() != j {
            return Err(Error::Config(
                "GM prior needs matching non-empty weights, means and stds".into(),
            ));
        }
        if self.weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Config("GM prior weights must be positive".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("GM prior weights sum to {total}, expected 1")));
        }
        if self.stds.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("GM prior stds must be positive".into()));
        }
        for m in &self.means {
            if m.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.len(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("GM prior means must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.means[0].len()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    /// Log responsibilities `r_j` of `x_t` (unnormalized).
    pub fn log_responsibilities(&self, x_t: &[f64], t: f64) -> Vec<f64> {
        let (a, s) = (Schedule::alpha(t), Schedule::sigma(t));
        let d = x_t.len() as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((&w, theta), &rho)| {
                let var = s * s + a * a * rho * rho;
                let mut q = 0.0;
                for (&x, &th) in x_t.iter().zip(theta) {
                    let r = x - a * th;
                    q += r * r;
                }
                w.ln() - 0.5 * d * (2.0 * PI * var).ln() - 0.5 * q / var
            })
            .collect()
    }

    /// Normalized responsibilities.
    pub fn responsibilities(&self, x_t: &[f64], t: f64) -> Vec<f64> {
        let r = self.log_responsibilities(x_t, t);
        let lse = log_sum_exp(&r);
        r.iter().map(|v| (v - lse).exp()).collect()
    }

    /// `E[x0 | x_t]` under this prior.
    pub fn posterior_mean(&self, x_t: &[f64], t: f64) -> Vec<f64> {
        let (a, s) = (Schedule::alpha(t), Schedule::sigma(t));
        let lik_prec = a * a / (s * s);
        let resp = self.responsibilities(x_t, t);
        let mut out = vec![0.0; x_t.len()];
        for ((theta, &rho), &r) in self.means.iter().zip(&self.stds).zip(&resp) {
            if r == 0.0 {
                continue;
            }
            let prior_prec = 1.0 / (rho * rho);
            let lambda = prior_prec + lik_prec;
            for ((o, &th), &x) in out.iter_mut().zip(theta).zip(x_t) {
                *o += r * (th * prior_prec + a * x / (s * s)) / lambda;
            }
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut j = self.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                j = i;
                break;
            }
        }
        let eps = normal_vec(rng, self.means[j].len());
        self.means[j].iter().zip(&eps).map(|(m, e)| m + self.stds[j] * e).collect()
    }

    /// Pooled mixture with equal weight per part.
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a GmPrior>) -> GmPrior {
        let parts: Vec<&GmPrior> = parts.into_iter().collect();
        let n = parts.len() as f64;
        let mut out = GmPrior {
            weights: Vec::new(),
            means: Vec::new(),
            stds: Vec::new(),
        };
        for p in parts {
            out.weights.extend(p.weights.iter().map(|w| w / n));
            out.means.extend(p.means.iter().cloned());
            out.stds.extend_from_slice(&p.stds);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassPrior {
    pub id: u32,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTeacherSpec {
    dim: usize,
    classes: Vec<ClassPrior>,
    #[serde(default = "one")]
    cfg_scale: f64,
    #[serde(default = "full_interval")]
    cfg_interval: [f64; 2],
}

fn one() -> f64 {
    1.0
}

fn full_interval() -> [f64; 2] {
    [0.0, 1.0]
}

/// Per-class GM data priors plus interval CFG settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTeacherSpec", into = "RawTeacherSpec")]
pub struct TeacherSpec {
    pub dim: usize,
    pub classes: BTreeMap<u32, GmPrior>,
    pub uncond: GmPrior,
    pub cfg_scale: f64,
    pub cfg_interval: [f64; 2],
}

impl TryFrom<RawTeacherSpec> for TeacherSpec {
    type Error = Error;

    fn try_from(raw: RawTeacherSpec) -> Result<Self> {
        let mut classes = BTreeMap::new();
        for c in raw.classes {
            let prior = GmPrior {
                weights: c.weights,
                means: c.means,
                stds: c.stds,
            };
            if classes.insert(c.id, prior).is_some() {
                return Err(Error::Config(format!("duplicate teacher class id {}", c.id)));
            }
        }
        TeacherSpec::new(raw.dim, classes, raw.cfg_scale, raw.cfg_interval)
    }
}

impl From<TeacherSpec> for RawTeacherSpec {
    fn from(s: TeacherSpec) -> Self {
        RawTeacherSpec {
            dim: s.dim,
            classes: s
                .classes
                .into_iter()
                .map(|(id, p)| ClassPrior {
                    id,
                    weights: p.weights,
                    means: p.means,
                    stds: p.stds,
                })
                .collect(),
            cfg_scale: s.cfg_scale,
            cfg_interval: s.cfg_interval,
        }
    }
}

impl TeacherSpec {
    pub fn new(dim: usize, classes: BTreeMap<u32, GmPrior>, cfg_scale: f64, cfg_interval: [f64; 2]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("teacher dimension must be positive".into()));
        }
        if classes.is_empty() {
            return Err(Error::Config("teacher needs at least one class".into()));
        }
        for p in classes.values() {
            p.validate(dim)?;
        }
        if !(cfg_scale >= 1.0 && cfg_scale.is_finite()) {
            return Err(Error::Config(format!("cfg_scale must be >= 1, got {cfg_scale}")));
        }
        let [lo, hi] = cfg_interval;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("cfg interval [{lo}, {hi}] is not ordered inside [0, 1]")));
        }
        let uncond = GmPrior::pooled(classes.values());
        Ok(TeacherSpec {
            dim,
            classes,
            uncond,
            cfg_scale,
            cfg_interval,
        })
    }

    /// Single-class teacher.
    pub fn single(prior: GmPrior) -> Result<Self> {
        let dim = prior.means.first().map_or(0, Vec::len);
        TeacherSpec::new(dim, BTreeMap::from([(0, prior)]), 1.0, [0.0, 1.0])
    }

    /// `modes` equal-weight components evenly spaced on a circle.
    pub fn ring(modes: usize, radius: f64, std: f64) -> Result<Self> {
        TeacherSpec::single(ring_prior(modes, radius, std, 0.0))
    }

    /// Two concentric rings, one condition class per ring.
    pub fn two_rings(inner: usize, outer: usize, r_inner: f64, r_outer: f64, std: f64, cfg_scale: f64) -> Result<Self> {
        let classes = BTreeMap::from([
            (0, ring_prior(inner, r_inner, std, 0.0)),
            (1, ring_prior(outer, r_outer, std, PI / outer as f64)),
        ]);
        TeacherSpec::new(2, classes, cfg_scale, [0.0, 0.7])
    }

    /// `side x side` lattice of equal-weight components centered at the origin.
    pub fn grid(side: usize, spacing: f64, std: f64) -> Result<Self> {
        if side == 0 {
            return Err(Error::Config("grid side must be positive".into()));
        }
        let off = (side as f64 - 1.0) / 2.0;
        let mut means = Vec::new();
        for i in 0..side {
            for j in 0..side {
                means.push(vec![(i as f64 - off) * spacing, (j as f64 - off) * spacing]);
            }
        }
        let n = means.len();
        TeacherSpec::single(GmPrior {
            weights: vec![1.0 / n as f64; n],
            means,
            stds: vec![std; n],
        })
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.keys().copied().collect()
    }

    pub fn prior(&self, c: u32) -> Result<&GmPrior> {
        self.classes.get(&c).ok_or(Error::UnknownCondition(c))
    }

    fn check_time(t: f64) -> Result<()> {
        if !(T_FLOOR..=1.0).contains(&t) {
            return Err(Error::domain(format!("teacher time {t} outside [{T_FLOOR}, 1]")));
        }
        Ok(())
    }

    pub fn in_cfg_interval(&self, t: f64) -> bool {
        self.cfg_interval[0] <= t && t <= self.cfg_interval[1]
    }
}

fn ring_prior(modes: usize, radius: f64, std: f64, phase: f64) -> GmPrior {
    let means = (0..modes)
        .map(|i| {
            let a = phase + TAU * i as f64 / modes as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect();
    GmPrior {
        weights: vec![1.0 / modes as f64; modes],
        means,
        stds: vec![std; modes],
    }
}

fn prior_velocity(prior: &GmPrior, x_t: &[f64], t: f64) -> Vec<f64> {
    let m = prior.posterior_mean(x_t, t);
    x_t.iter().zip(&m).map(|(x, m)| (x - m) / t).collect()
}

/// Exact conditional velocity `(x_t - E[x0 | x_t, c]) / t`.
pub fn teacher_velocity(spec: &TeacherSpec, x_t: &[f64], t: f64, c: u32) -> Result<Vec<f64>> {
    check_dim(spec.dim, x_t.len())?;
    TeacherSpec::check_time(t)?;
    Ok(prior_velocity(spec.prior(c)?, x_t, t))
}

/// Unconditional velocity under the pooled prior.
pub fn teacher_velocity_uncond(spec: &TeacherSpec, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(spec.dim, x_t.len())?;
    TeacherSpec::check_time(t)?;
    Ok(prior_velocity(&spec.uncond, x_t, t))
}

/// Interval classifier-free guidance; conditional-only outside the interval.
pub fn teacher_velocity_cfg(spec: &TeacherSpec, x_t: &[f64], t: f64, c: u32) -> Result<Vec<f64>> {
    let cond = teacher_velocity(spec, x_t, t, c)?;
    if spec.cfg_scale == 1.0 || !spec.in_cfg_interval(t) {
        return Ok(cond);
    }
    let unc = prior_velocity(&spec.uncond, x_t, t);
    Ok(cfg_combine(&cond, &unc, spec.cfg_scale))
}

/// `u_uncond + w (u_cond - u_uncond)`.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], w: f64) -> Vec<f64> {
    cond.iter().zip(uncond).map(|(c, u)| u + w * (c - u)).collect()
}

/// A velocity oracle the trainer can query.
pub trait Teacher {
    fn dim(&self) -> usize;
    fn velocity(&self, x_t: &[f64], t: f64, c: u32) -> Result<Vec<f64>>;
}

impl Teacher for TeacherSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x_t: &[f64], t: f64, c: u32) -> Result<Vec<f64>> {
        teacher_velocity_cfg(self, x_t, t, c)
    }
}

/// A teacher bound to one condition, usable by the integrator.
pub struct TeacherField<'a, T: Teacher + ?Sized> {
    pub teacher: &'a T,
    pub condition: u32,
}

impl<T: Teacher + ?Sized> VelocityField for TeacherField<'_, T> {
    fn dim(&self) -> usize {
        self.teacher.dim()
    }

    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.teacher.velocity(x, t, self.condition)
    }
}

/// Integrate the teacher ODE from `x1` at `tau = 1` down to `tau = 0`.
pub fn teacher_sample_from<T: Teacher + ?Sized>(
    teacher: &T,
    c: u32,
    x1: &[f64],
    substeps: usize,
    shift: TimeShift,
) -> Result<Vec<f64>> {
    if substeps == 0 {
        return Err(Error::domain("teacher sampling needs at least one substep"));
    }
    let field = TeacherField { teacher, condition: c };
    integrate_state(&field, x1, 1.0, 0.0, 1.0 / substeps as f64, shift)
}

/// Teacher sample number `index` of a seeded batch; pairs with the student sampler.
pub fn teacher_sample<T: Teacher + ?Sized>(
    teacher: &T,
    c: u32,
    substeps: usize,
    seed: u64,
    index: u64,
    shift: TimeShift,
) -> Result<Vec<f64>> {
    let x1 = initial_noise(seed, index, teacher.dim());
    teacher_sample_from(teacher, c, &x1, substeps, shift)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub name: String,
    pub samples: Vec<Vec<f64>>,
    pub labels: Option<Vec<u32>>,
}

impl ToyDataset {
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (i, row) in self.samples.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Config(format!("dataset row {i} has {} values, expected {d}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("dataset row {i} is not finite")));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != self.samples.len() {
                return Err(Error::Config("dataset labels do not match sample count".into()));
            }
        }
        Ok(())
    }
}

/// Checkerboard support: 4x4 cells on `[-2, 2]^2`, cells with even index sum.
pub fn checkerboard_contains(p: &[f64]) -> bool {
    if p.len() != 2 || p.iter().any(|v| !(-2.0..2.0).contains(v)) {
        return false;
    }
    let i = (p[0] + 2.0).floor() as i64;
    let j = (p[1] + 2.0).floor() as i64;
    (i + j) % 2 == 0
}

/// Deterministic toy data. `gm-grid` draws from the teacher's pooled prior;
/// `csv` loads the first `n` rows of `csv_path`.
pub fn gen_toy_dataset(
    name: &str,
    n: usize,
    seed: u64,
    teacher: &TeacherSpec,
    csv_path: Option<&Path>,
) -> Result<ToyDataset> {
    if n == 0 {
        return Err(Error::domain("dataset size must be at least 1"));
    }
    let mut rng = keyed(seed, 0, 0, streams::DATASET);
    let (samples, labels) = match name {
        "gm-grid" => {
            let ids = teacher.class_ids();
            let mut samples = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let c = ids[rng.random_range(0..ids.len())];
                samples.push(teacher.classes[&c].sample(&mut rng));
                labels.push(c);
            }
            (samples, Some(labels))
        }
        "rings" => {
            let mut samples = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let ring = rng.random_range(0..2u32);
                let r = if ring == 0 { 1.0 } else { 2.0 };
                let a: f64 = rng.random_range(0.0..TAU);
                let noise: f64 = normal_vec(&mut rng, 1)[0] * 0.05;
                samples.push(vec![(r + noise) * a.cos(), (r + noise) * a.sin()]);
                labels.push(ring);
            }
            (samples, Some(labels))
        }
        "checkerboard" => {
            let cells: Vec<(f64, f64)> = (0..4)
                .flat_map(|i| (0..4).map(move |j| (i, j)))
                .filter(|(i, j)| (i + j) % 2 == 0)
                .map(|(i, j)| (i as f64 - 2.0, j as f64 - 2.0))
                .collect();
            let samples = (0..n)
                .map(|_| {
                    let (x, y) = cells[rng.random_range(0..cells.len())];
                    vec![x + rng.random::<f64>(), y + rng.random::<f64>()]
                })
                .collect();
            (samples, None)
        }
        "csv" => {
            let path = csv_path.ok_or_else(|| Error::Config("csv dataset needs a path".into()))?;
            let (mut samples, mut labels) = crate::io::read_samples_csv(path)?;
            samples.truncate(n);
            if let Some(l) = labels.as_mut() {
                l.truncate(n);
            }
            (samples, labels)
        }
        other => return Err(Error::Config(format!("unknown dataset '{other}'"))),
    };
    let ds = ToyDataset {
        name: name.to_string(),
        samples,
        labels,
    };
    ds.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    Ok(ds)
}

/// Squared distance from `x` to the nearest component mean; handy for diagnostics.
pub fn nearest_mode_dist2(prior: &GmPrior, x: &[f64]) -> f64 {
    prior.means.iter().map(|m| sq_dist(m, x)).fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gm::{gm_velocity, FactorGm, Space};
    use crate::rng::seeded;

    fn single(theta: Vec<f64>, rho: f64) -> TeacherSpec {
        TeacherSpec::single(GmPrior {
            weights: vec![1.0],
            means: vec![theta],
            stds: vec![rho],
        })
        .unwrap()
    }

    fn random_prior<R: Rng>(rng: &mut R, k: usize, dim: usize, shared_std: bool) -> GmPrior {
        let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let rho0 = rng.random_range(0.1..1.0);
        GmPrior {
            weights: w,
            means: (0..k).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect(),
            stds: (0..k)
                .map(|_| if shared_std { rho0 } else { rng.random_range(0.1..1.0) })
                .collect(),
        }
    }

    /// Trapezoid quadrature of E[x0 | x_t] for a 1D prior.
    fn quadrature_mean(prior: &GmPrior, x_t: f64, t: f64) -> f64 {
        let (a, s) = (Schedule::alpha(t), Schedule::sigma(t));
        // posterior concentrates near x_t / a with width ~ s / a; cover both it and the prior
        let lo = prior
            .means
            .iter()
            .zip(&prior.stds)
            .map(|(m, r)| m[0] - 12.0 * r)
            .fold(f64::INFINITY, f64::min);
        let hi = prior
            .means
            .iter()
            .zip(&prior.stds)
            .map(|(m, r)| m[0] + 12.0 * r)
            .fold(f64::NEG_INFINITY, f64::max);
        let n = 20001;
        let h = (hi - lo) / (n - 1) as f64;
        let logq = |x0: f64| -> f64 {
            let terms: Vec<f64> = prior
                .weights
                .iter()
                .zip(&prior.means)
                .zip(&prior.stds)
                .map(|((w, m), r)| w.ln() - 0.5 * ((x0 - m[0]) / r).powi(2) - r.ln())
                .collect();
            log_sum_exp(&terms) - 0.5 * ((x_t - a * x0) / s).powi(2)
        };
        let logs: Vec<f64> = (0..n).map(|i| logq(lo + i as f64 * h)).collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut m) = (0.0, 0.0);
        for (i, l) in logs.iter().enumerate() {
            let wt = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            let p = (l - mx).exp() * wt;
            z += p;
            m += p * (lo + i as f64 * h);
        }
        m / z
    }

    #[test]
    fn hand_conjugate_example() {
        let spec = single(vec![0.0], 1.0);
        let u = teacher_velocity(&spec, &[0.5], 0.5, 0).unwrap();
        assert!(u[0].abs() < 1e-15);
        assert!((spec.classes[&0].posterior_mean(&[0.5], 0.5)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn isolated_component_dominates() {
        let spec = TeacherSpec::ring(8, 20.0, 0.1).unwrap();
        let prior = &spec.classes[&0];
        let t = 0.3;
        let x: Vec<f64> = prior.means[2].iter().map(|v| Schedule::alpha(t) * v).collect();
        let r = prior.responsibilities(&x, t);
        assert!(r[2] > 1.0 - 1e-6);
        let u = teacher_velocity(&spec, &x, t, 0).unwrap();
        let m = prior.posterior_mean(&x, t);
        for j in 0..2 {
            assert!((m[j] - prior.means[2][j]).abs() < 1e-9);
            assert!((u[j] - (x[j] - prior.means[2][j]) / t).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_quadrature_oracle() {
        let mut rng = seeded(21);
        for _ in 0..200 {
            let k = rng.random_range(1..=4);
            let prior = random_prior(&mut rng, k, 1, false);
            let spec = TeacherSpec::single(prior.clone()).unwrap();
            let t = rng.random_range(0.05..0.95);
            let x0 = prior.sample(&mut rng)[0];
            let x_t = Schedule::alpha(t) * x0 + t * normal_vec(&mut rng, 1)[0];
            let want = quadrature_mean(&prior, x_t, t);
            let got = spec.classes[&0].posterior_mean(&[x_t], t)[0];
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
            let r = spec.classes[&0].responsibilities(&[x_t], t);
            assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn agrees_with_gm_kernel() {
        let mut rng = seeded(22);
        for case in 0..500 {
            let k = rng.random_range(1..=5);
            let prior = random_prior(&mut rng, k, 2, true);
            let spec = TeacherSpec::single(prior.clone()).unwrap();
            let gm = FactorGm::new(
                1,
                k,
                2,
                prior.weights.iter().map(|w| w.ln()).collect(),
                prior.means.concat(),
                prior.stds[0].ln(),
                Space::X0,
                vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                1.0,
            )
            .unwrap();
            let t = rng.random_range(0.01..1.0);
            let x = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            let a = teacher_velocity(&spec, &x, t, 0).unwrap();
            let b = gm_velocity(&gm, &x, t).unwrap();
            for j in 0..2 {
                assert!((a[j] - b[j]).abs() <= 1e-9 * a[j].abs().max(1.0), "case {case}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn cfg_combination_rules() {
        let spec = TeacherSpec::two_rings(4, 8, 1.0, 2.5, 0.1, 1.0).unwrap();
        let x = [0.3, -0.2];
        assert_eq!(
            teacher_velocity_cfg(&spec, &x, 0.5, 1).unwrap(),
            teacher_velocity(&spec, &x, 0.5, 1).unwrap()
        );
        let guided = TeacherSpec::two_rings(4, 8, 1.0, 2.5, 0.1, 3.0).unwrap();
        assert_eq!(
            teacher_velocity_cfg(&guided, &x, 0.9, 1).unwrap(),
            teacher_velocity(&guided, &x, 0.9, 1).unwrap()
        );
        assert_ne!(
            teacher_velocity_cfg(&guided, &x, 0.5, 1).unwrap(),
            teacher_velocity(&guided, &x, 0.5, 1).unwrap()
        );
        assert_eq!(cfg_combine(&[1.0], &[0.0], 2.0), vec![2.0]);
        assert!(matches!(teacher_velocity(&spec, &x, 0.5, 7), Err(Error::UnknownCondition(7))));
        assert!(teacher_velocity(&spec, &x, 0.0, 0).is_err());
        assert!(teacher_velocity(&spec, &x, 1.5, 0).is_err());
    }

    #[test]
    fn spec_validation_and_serde() {
        let spec = TeacherSpec::two_rings(3, 5, 1.0, 2.0, 0.2, 2.0).unwrap();
        let js = serde_json::to_string(&spec).unwrap();
        let back: TeacherSpec = serde_json::from_str(&js).unwrap();
        assert_eq!(spec, back);
        let bad = r#"{"dim":1,"classes":[{"id":0,"weights":[0.5,0.6],"means":[[0],[1]],"stds":[1,1]}]}"#;
        assert!(serde_json::from_str::<TeacherSpec>(bad).is_err());
        let bad = r#"{"dim":1,"classes":[{"id":0,"weights":[1],"means":[[0]],"stds":[1]}],"cfg_interval":[0.8,0.2]}"#;
        assert!(serde_json::from_str::<TeacherSpec>(bad).is_err());
    }

    #[test]
    fn datasets_are_deterministic_and_on_support() {
        let spec = TeacherSpec::grid(3, 1.5, 0.1).unwrap();
        let a = gen_toy_dataset("gm-grid", 4, 7, &spec, None).unwrap();
        let b = gen_toy_dataset("gm-grid", 4, 7, &spec, None).unwrap();
        assert_eq!(a, b);
        let cb = gen_toy_dataset("checkerboard", 5000, 3, &spec, None).unwrap();
        assert!(cb.samples.iter().all(|p| checkerboard_contains(p)));
        let rings = gen_toy_dataset("rings", 2000, 3, &spec, None).unwrap();
        for p in &rings.samples {
            let r = p[0].hypot(p[1]);
            assert!((r - 1.0).abs() < 0.4 || (r - 2.0).abs() < 0.4);
        }
        assert!(gen_toy_dataset("spiral", 4, 1, &spec, None).is_err());
        assert!(gen_toy_dataset("csv", 4, 1, &spec, None).is_err());
    }

    #[test]
    fn gm_grid_mean_matches_prior() {
        let spec = TeacherSpec::grid(3, 1.5, 0.3).unwrap();
        let n = 100_000;
        let ds = gen_toy_dataset("gm-grid", n, 9, &spec, None).unwrap();
        let prior = &spec.uncond;
        let mean = prior.mean();
        for j in 0..2 {
            let m: f64 = ds.samples.iter().map(|p| p[j]).sum::<f64>() / n as f64;
            let var: f64 = prior
                .weights
                .iter()
                .zip(&prior.means)
                .zip(&prior.stds)
                .map(|((w, th), r)| w * (r * r + (th[j] - mean[j]).powi(2)))
                .sum();
            assert!((m - mean[j]).abs() <= 3.0 * (var / n as f64).sqrt());
        }
    }

    #[test]
    fn single_gaussian_sample_hits_analytic_flow() {
        let theta = vec![1.0, -0.5];
        let rho = 0.05;
        let spec = single(theta.clone(), rho);
        for idx in 0..5 {
            let x1 = initial_noise(3, idx, 2);
            let x = teacher_sample_from(&spec, 0, &x1, 512, TimeShift::default()).unwrap();
            // the flow maps eps to theta + rho eps
            for j in 0..2 {
                assert!((x[j] - (theta[j] + rho * x1[j])).abs() < 1e-2);
            }
            assert!(crate::numeric::sq_dist(&x, &theta).sqrt() < 1e-2 + 4.0 * rho * 1.5);
        }
        let a = teacher_sample(&spec, 0, 128, 5, 0, TimeShift::default()).unwrap();
        let b = teacher_sample(&spec, 0, 128, 5, 0, TimeShift::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn euler_is_first_order() {
        let spec = TeacherSpec::ring(8, 2.0, 0.2).unwrap();
        let shift = TimeShift::new(2.0).unwrap();
        let mut ratios = Vec::new();
        for idx in 0..8 {
            let x1 = initial_noise(17, idx, 2);
            let reference = teacher_sample_from(&spec, 0, &x1, 2048, shift).unwrap();
            let e128 = sq_dist(&teacher_sample_from(&spec, 0, &x1, 128, shift).unwrap(), &reference).sqrt();
            let e256 = sq_dist(&teacher_sample_from(&spec, 0, &x1, 256, shift).unwrap(), &reference).sqrt();
            ratios.push(e128 / e256);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((1.5..=2.5).contains(&mean), "{ratios:?}");
    }

    #[test]
    fn single_gaussian_endpoint_moments() {
        let theta = [0.5, -1.0];
        let rho = 0.7;
        let spec = single(theta.to_vec(), rho);
        let n = 10_000;
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|i| teacher_sample(&spec, 0, 128, 99, i, TimeShift::default()).unwrap())
            .collect();
        for j in 0..2 {
            let m = xs.iter().map(|x| x[j]).sum::<f64>() / n as f64;
            let v = xs.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let var = rho * rho;
            assert!((m - theta[j]).abs() <= 4.0 * (var / n as f64).sqrt());
            // sample variance has std var * sqrt(2 / (n - 1))
            assert!((v - var).abs() <= 4.0 * var * (2.0 / (n - 1) as f64).sqrt());
        }
    }
}
