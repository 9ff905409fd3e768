//! Network-free policies: the DX grid and the GMFlow mixture.
//!
//! A policy is produced by one student evaluation at an origin state and is
//! valid on the raw-time segment `[tau_dst, tau_src]`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gm::{gm_dropout, gm_velocity, gm_velocity_vjp, FactorGm, GmGrad, Space};
use crate::numeric::all_finite;
use crate::ode::VelocityField;
use crate::rng::seeded;
use crate::schedule::{Schedule, TimeShift, T_FLOOR};

/// Output head layout of the student network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicyHead {
    /// `n` grid velocities of size `D` each.
    Dx { n: usize },
    /// `L x K` logits, `L x K x C` u-space means, one shared `log_s`.
    Gm { l: usize, k: usize, c: usize },
}

impl PolicyHead {
    pub fn output_size(&self, dim: usize) -> usize {
        match *self {
            PolicyHead::Dx { n } => n * dim,
            PolicyHead::Gm { l, k, c } => l * (k + k * c) + 1,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match *self {
            PolicyHead::Dx { n: 0 } => Err(Error::Config("DX head needs n >= 1".into())),
            PolicyHead::Gm { l, k, c } if l == 0 || k == 0 || c == 0 => {
                Err(Error::Config("GM head needs L, K, C >= 1".into()))
            }
            PolicyHead::Gm { l, c, .. } if l * c != dim => Err(Error::Config(format!(
                "GM head factorization {l} x {c} does not match data dimension {dim}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Grid of denoised estimates at evenly spaced raw times, stored in shifted time.
#[derive(Debug, Clone, PartialEq)]
pub struct DxGrid {
    /// Decreasing shifted times, `grid_times[0]` at the segment start.
    pub grid_times: Vec<f64>,
    /// Row-major `N x D`.
    pub x0hat: Vec<f64>,
    pub dim: usize,
}

impl DxGrid {
    pub fn new(grid_times: Vec<f64>, x0hat: Vec<f64>, dim: usize) -> Result<Self> {
        if grid_times.is_empty() {
            return Err(Error::domain("DX grid needs at least one point"));
        }
        check_dim(grid_times.len() * dim, x0hat.len())?;
        if grid_times.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::domain("DX grid times must be strictly decreasing"));
        }
        Ok(DxGrid {
            grid_times,
            x0hat,
            dim,
        })
    }

    /// Grid times evenly spaced in raw time over `[tau_dst, tau_src]`.
    pub fn raw_spaced_times(n: usize, tau_src: f64, tau_dst: f64, shift: TimeShift) -> Vec<f64> {
        if n == 1 {
            return vec![shift.apply_unchecked(tau_src)];
        }
        let step = (tau_src - tau_dst) / (n as f64 - 1.0);
        (0..n)
            .map(|i| {
                let tau = if i == n - 1 { tau_dst } else { tau_src - i as f64 * step };
                shift.apply_unchecked(tau)
            })
            .collect()
    }

    /// Interpolation weights `(index, weight)`; at most two entries.
    fn weights(&self, t: f64) -> [(usize, f64); 2] {
        let n = self.grid_times.len();
        if t >= self.grid_times[0] {
            return [(0, 1.0), (0, 0.0)];
        }
        if t <= self.grid_times[n - 1] {
            return [(n - 1, 1.0), (n - 1, 0.0)];
        }
        // grid_times is decreasing
        let i = self.grid_times.partition_point(|&g| g > t).saturating_sub(1);
        let (hi, lo) = (self.grid_times[i], self.grid_times[i + 1]);
        let w = (hi - t) / (hi - lo);
        [(i, 1.0 - w), (i + 1, w)]
    }

    /// Piecewise-linear `x0hat(t)`, clamped outside the grid.
    pub fn x0_at(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, w) in self.weights(t) {
            if w != 0.0 {
                for (o, &v) in out.iter_mut().zip(&self.x0hat[i * self.dim..(i + 1) * self.dim]) {
                    *o += w * v;
                }
            }
        }
        out
    }
}

/// `(x_t - x0hat(t)) / t`.
pub fn dx_velocity(grid: &DxGrid, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(grid.dim, x_t.len())?;
    if !(t >= T_FLOOR) {
        return Err(Error::domain(format!("query time {t} below floor {T_FLOOR}")));
    }
    let x0 = grid.x0_at(t);
    Ok(x_t.iter().zip(&x0).map(|(&x, &z)| (x - z) / t).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyKind {
    Dx(DxGrid),
    /// The u-space mixture (for gradients) and its cached x0-space form.
    Gm { u: FactorGm, x0: FactorGm },
}

/// A policy anchored at `(x_src, tau_src)` and valid down to `tau_dst`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyHandle {
    pub kind: PolicyKind,
    pub x_src: Vec<f64>,
    pub tau_src: f64,
    pub tau_dst: f64,
    pub t_src: f64,
    pub t_dst: f64,
    pub shift: TimeShift,
}

/// Accumulated gradient w.r.t. the raw head outputs of a policy.
#[derive(Debug, Clone)]
pub enum PolicyGrad {
    Dx(Vec<f64>),
    Gm(GmGrad),
}

impl PolicyGrad {
    /// Flatten into the head layout of [`PolicyHead`].
    pub fn write_raw(&self, out: &mut [f64]) {
        match self {
            PolicyGrad::Dx(g) => out.copy_from_slice(g),
            PolicyGrad::Gm(g) => {
                let (a, b) = (g.logits.len(), g.means.len());
                out[..a].copy_from_slice(&g.logits);
                out[a..a + b].copy_from_slice(&g.means);
                out[a + b] = g.log_s;
            }
        }
    }
}

const WINDOW_TOL: f64 = 1e-12;

impl PolicyHandle {
    fn check_segment(tau_src: f64, tau_dst: f64) -> Result<()> {
        if !(tau_src > 0.0 && tau_src <= 1.0 && tau_dst >= 0.0 && tau_dst < tau_src) {
            return Err(Error::domain(format!(
                "invalid policy segment [{tau_dst}, {tau_src}]"
            )));
        }
        Ok(())
    }

    /// Build a policy from raw head outputs (u-parameterized).
    pub fn from_head(
        head: PolicyHead,
        raw: &[f64],
        x_src: &[f64],
        tau_src: f64,
        tau_dst: f64,
        shift: TimeShift,
    ) -> Result<Self> {
        let dim = x_src.len();
        head.validate(dim)?;
        check_dim(head.output_size(dim), raw.len())?;
        Self::check_segment(tau_src, tau_dst)?;
        if !all_finite(raw) {
            return Err(Error::non_finite("student head output"));
        }
        let t_src = shift.apply_unchecked(tau_src);
        let t_dst = shift.apply_unchecked(tau_dst);
        let sigma = Schedule::sigma(t_src);
        let kind = match head {
            PolicyHead::Dx { n } => {
                let grid_times = DxGrid::raw_spaced_times(n, tau_src, tau_dst, shift);
                let x0hat = raw
                    .chunks(dim)
                    .flat_map(|u| u.iter().zip(x_src).map(move |(&ui, &xs)| xs - sigma * ui))
                    .collect();
                PolicyKind::Dx(DxGrid::new(grid_times, x0hat, dim)?)
            }
            PolicyHead::Gm { l, k, c } => {
                let u = FactorGm::new(
                    l,
                    k,
                    c,
                    raw[..l * k].to_vec(),
                    raw[l * k..l * k + l * k * c].to_vec(),
                    raw[l * k + l * k * c],
                    Space::U,
                    x_src.to_vec(),
                    t_src,
                )?;
                let x0 = u.to_x0();
                PolicyKind::Gm { u, x0 }
            }
        };
        Ok(PolicyHandle {
            kind,
            x_src: x_src.to_vec(),
            tau_src,
            tau_dst,
            t_src,
            t_dst,
            shift,
        })
    }

    /// Wrap an explicit mixture; its origin time must equal `shift(tau_src)`.
    pub fn from_gm(gm: FactorGm, tau_src: f64, tau_dst: f64, shift: TimeShift) -> Result<Self> {
        Self::check_segment(tau_src, tau_dst)?;
        let t_src = shift.apply_unchecked(tau_src);
        if (t_src - gm.t_src).abs() > 1e-12 {
            return Err(Error::domain(format!(
                "mixture origin t={} does not match segment start t={t_src}",
                gm.t_src
            )));
        }
        let x_src = gm.x_src.clone();
        let (u, x0) = match gm.space {
            Space::U => {
                let x0 = gm.to_x0();
                (gm, x0)
            }
            Space::X0 => {
                // recover u-space means: mu = (x_src - mux) / sigma_src
                let sigma = Schedule::sigma(gm.t_src);
                let mut u = gm.clone();
                for i in 0..gm.l {
                    for kk in 0..gm.k {
                        for j in 0..gm.c {
                            let idx = (i * gm.k + kk) * gm.c + j;
                            u.means[idx] = (gm.x_src[i * gm.c + j] - gm.means[idx]) / sigma;
                        }
                    }
                }
                u.log_s = gm.log_s - sigma.ln();
                u.space = Space::U;
                (u, gm)
            }
        };
        Ok(PolicyHandle {
            kind: PolicyKind::Gm { u, x0 },
            x_src,
            tau_src,
            tau_dst,
            t_src,
            t_dst: shift.apply_unchecked(tau_dst),
            shift,
        })
    }

    pub fn from_dx(grid: DxGrid, x_src: Vec<f64>, tau_src: f64, tau_dst: f64, shift: TimeShift) -> Result<Self> {
        Self::check_segment(tau_src, tau_dst)?;
        check_dim(grid.dim, x_src.len())?;
        Ok(PolicyHandle {
            kind: PolicyKind::Dx(grid),
            x_src,
            tau_src,
            tau_dst,
            t_src: shift.apply_unchecked(tau_src),
            t_dst: shift.apply_unchecked(tau_dst),
            shift,
        })
    }

    pub fn dim(&self) -> usize {
        self.x_src.len()
    }

    pub fn is_gm(&self) -> bool {
        matches!(self.kind, PolicyKind::Gm { .. })
    }

    fn check_window(&self, t: f64) -> Result<()> {
        let lo = self.t_dst.max(T_FLOOR);
        let tol = WINDOW_TOL * (1.0 + self.t_src);
        if t > self.t_src + tol || t < lo - tol || t < T_FLOOR {
            return Err(Error::WindowViolation {
                t,
                lo,
                hi: self.t_src,
            });
        }
        Ok(())
    }

    pub fn velocity(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_window(t)?;
        match &self.kind {
            PolicyKind::Dx(grid) => dx_velocity(grid, x_t, t),
            PolicyKind::Gm { x0, .. } => gm_velocity(x0, x_t, t.min(self.t_src)),
        }
    }

    pub fn zero_grad(&self) -> PolicyGrad {
        match &self.kind {
            PolicyKind::Dx(grid) => PolicyGrad::Dx(vec![0.0; grid.x0hat.len()]),
            PolicyKind::Gm { u, .. } => PolicyGrad::Gm(GmGrad::zeros(u.l, u.k, u.c)),
        }
    }

    /// Velocity at `(x_t, t)`; adds `cotangent^T d(velocity)/d(raw head)` into `grad`.
    pub fn velocity_vjp(&self, x_t: &[f64], t: f64, cotangent: &[f64], grad: &mut PolicyGrad) -> Result<Vec<f64>> {
        self.check_window(t)?;
        check_dim(self.dim(), cotangent.len())?;
        match (&self.kind, grad) {
            (PolicyKind::Dx(grid), PolicyGrad::Dx(g)) => {
                let v = dx_velocity(grid, x_t, t)?;
                // x0hat_i = x_src - sigma_src u_i and v = (x - x0hat(t)) / t
                let scale = Schedule::sigma(self.t_src) / t;
                for (i, w) in grid.weights(t) {
                    if w != 0.0 {
                        for (j, &cj) in cotangent.iter().enumerate() {
                            g[i * grid.dim + j] += cj * w * scale;
                        }
                    }
                }
                Ok(v)
            }
            (PolicyKind::Gm { u, .. }, PolicyGrad::Gm(g)) => gm_velocity_vjp(u, x_t, t.min(self.t_src), cotangent, g),
            _ => Err(Error::domain("gradient accumulator does not match policy family")),
        }
    }

    /// GM temperature; DX policies are returned unchanged.
    pub fn with_temperature(&self, temperature: f64) -> Result<PolicyHandle> {
        match &self.kind {
            PolicyKind::Dx(_) => Ok(self.clone()),
            PolicyKind::Gm { u, .. } => {
                let u = u.with_temperature(temperature)?;
                let x0 = u.to_x0();
                Ok(PolicyHandle {
                    kind: PolicyKind::Gm { u, x0 },
                    ..self.clone()
                })
            }
        }
    }

    /// GM component dropout; DX policies are returned unchanged with an empty mask.
    pub fn with_dropout<R: rand::Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> Result<(PolicyHandle, Vec<bool>)> {
        match &self.kind {
            PolicyKind::Dx(_) => Ok((self.clone(), Vec::new())),
            PolicyKind::Gm { u, .. } => {
                let (u, mask) = gm_dropout(u, rate, rng)?;
                let x0 = u.to_x0();
                Ok((
                    PolicyHandle {
                        kind: PolicyKind::Gm { u, x0 },
                        ..self.clone()
                    },
                    mask,
                ))
            }
        }
    }
}

impl VelocityField for PolicyHandle {
    fn dim(&self) -> usize {
        self.x_src.len()
    }

    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        PolicyHandle::velocity(self, x, t)
    }
}

/// One trajectory constraint for [`toyfit`]: the velocity `u` at `(x, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTarget {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyfitConfig {
    pub l: usize,
    pub k: usize,
    pub c: usize,
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyfitReport {
    pub policy: FactorGm,
    /// Final mean squared velocity residual, averaged over targets and dimensions.
    pub residual: f64,
    pub iterations: usize,
    /// Residual every 100 iterations.
    pub history: Vec<f64>,
}

fn toyfit_residual(policy: &FactorGm, targets: &[FitTarget]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for tg in targets {
        let v = gm_velocity(policy, &tg.x, tg.t)?;
        sum += v.iter().zip(&tg.u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += v.len();
    }
    Ok(sum / count as f64)
}

/// `n` constraints on a random quadratic curve `x(t) = a + b t + c t^2` with
/// coefficients in `[-1, 1]`, at times evenly spread over `[0.2, 0.9]`.
pub fn random_smooth_targets(seed: u64, n: usize, dim: usize) -> Vec<FitTarget> {
    use rand::Rng;

    let mut rng = seeded(seed);
    let coef: Vec<[f64; 3]> = (0..dim)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    (0..n)
        .map(|i| {
            let t = if n == 1 { 0.5 } else { 0.2 + 0.7 * i as f64 / (n - 1) as f64 };
            FitTarget {
                t,
                x: coef.iter().map(|[a, b, c]| a + b * t + c * t * t).collect(),
                u: coef.iter().map(|[_, b, c]| b + 2.0 * c * t).collect(),
            }
        })
        .collect()
}

/// Fit a mixture anchored at `t_src = 1` (so its x0-space form is a data prior)
/// directly to a set of trajectory constraints with Adam.
pub fn toyfit(targets: &[FitTarget], cfg: &ToyfitConfig) -> Result<ToyfitReport> {
    use rand::Rng;

    if targets.is_empty() {
        return Err(Error::domain("toyfit needs at least one target"));
    }
    if cfg.k == 0 {
        return Err(Error::domain("toyfit needs K >= 1"));
    }
    let dim = cfg.l * cfg.c;
    for tg in targets {
        check_dim(dim, tg.x.len())?;
        check_dim(dim, tg.u.len())?;
        if !(tg.t >= T_FLOOR && tg.t <= 1.0) {
            return Err(Error::domain(format!("target time {} outside [{T_FLOOR}, 1]", tg.t)));
        }
    }
    let mut ts: Vec<f64> = targets.iter().map(|t| t.t).collect();
    ts.sort_by(f64::total_cmp);
    if ts.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::domain("toyfit target times must be pairwise distinct"));
    }

    let mut rng = seeded(cfg.seed);
    let (l, k, c) = (cfg.l, cfg.k, cfg.c);
    // anchored at the origin of u-space: mux = -mu
    let mut policy = FactorGm::new(
        l,
        k,
        c,
        vec![0.0; l * k],
        (0..l * k * c).map(|_| rng.random_range(-2.0..2.0)).collect(),
        0.0,
        Space::U,
        vec![0.0; dim],
        1.0,
    )?;
    let n_params = l * k + l * k * c + 1;
    let mut opt = crate::student::Adam::new(n_params);
    let mut params = vec![0.0; n_params];
    let pack = |p: &FactorGm, out: &mut [f64]| {
        out[..l * k].copy_from_slice(&p.logits);
        out[l * k..l * k + l * k * c].copy_from_slice(&p.means);
        out[n_params - 1] = p.log_s;
    };
    pack(&policy, &mut params);
    let mut history = Vec::new();
    let mut grad_raw = vec![0.0; n_params];
    let norm = 1.0 / (targets.len() * dim) as f64;
    for it in 0..cfg.iters {
        let mut g = GmGrad::zeros(l, k, c);
        for tg in targets {
            let v = gm_velocity(&policy, &tg.x, tg.t)?;
            let cot: Vec<f64> = v.iter().zip(&tg.u).map(|(a, b)| 2.0 * norm * (a - b)).collect();
            gm_velocity_vjp(&policy, &tg.x, tg.t, &cot, &mut g)?;
        }
        PolicyGrad::Gm(g).write_raw(&mut grad_raw);
        if !all_finite(&grad_raw) {
            return Err(Error::non_finite(format!("toyfit gradient at iteration {it}")));
        }
        opt.step(&mut params, &grad_raw, cfg.lr);
        policy.logits.copy_from_slice(&params[..l * k]);
        policy.means.copy_from_slice(&params[l * k..l * k + l * k * c]);
        policy.log_s = params[n_params - 1];
        if it % 100 == 0 {
            let r = toyfit_residual(&policy, targets)?;
            if !r.is_finite() {
                return Err(Error::non_finite(format!("toyfit residual at iteration {it}")));
            }
            history.push(r);
        }
    }
    let residual = toyfit_residual(&policy, targets)?;
    if !residual.is_finite() {
        return Err(Error::non_finite("toyfit final residual"));
    }
    Ok(ToyfitReport {
        policy,
        residual,
        iterations: cfg.iters,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gm::gm_velocity_discrete;
    use crate::rng::seeded;
    use rand::Rng;

    fn shift1() -> TimeShift {
        TimeShift::default()
    }

    #[test]
    fn dx_grid_point_and_midpoint() {
        let grid = DxGrid::new(vec![0.8, 0.4], vec![1.0, 2.0, 3.0, 6.0], 2).unwrap();
        let v = dx_velocity(&grid, &[0.5, 0.5], 0.8).unwrap();
        assert!((v[0] - (0.5 - 1.0) / 0.8).abs() < 1e-15);
        assert!((v[1] - (0.5 - 2.0) / 0.8).abs() < 1e-15);
        let x0 = grid.x0_at(0.6);
        assert!((x0[0] - 2.0).abs() < 1e-15 && (x0[1] - 4.0).abs() < 1e-15);
        // clamped outside
        assert_eq!(grid.x0_at(0.9), vec![1.0, 2.0]);
        assert_eq!(grid.x0_at(0.1), vec![3.0, 6.0]);
    }

    #[test]
    fn dx_constant_grid_matches_discrete_single_mode() {
        let c = [0.7, -0.2];
        let grid = DxGrid::new(vec![1.0, 0.5, 0.0], [c, c, c].concat(), 2).unwrap();
        let gm = FactorGm::new(1, 1, 2, vec![0.0], c.to_vec(), f64::NEG_INFINITY, Space::X0, vec![0.3, 0.3], 1.0)
            .unwrap();
        let mut rng = seeded(1);
        for _ in 0..50 {
            let t = rng.random_range(0.01..1.0);
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let a = dx_velocity(&grid, &x, t).unwrap();
            let b = gm_velocity_discrete(&gm, &x, t).unwrap();
            let s = gm_velocity(&gm, &x, t).unwrap();
            for j in 0..2 {
                assert!((a[j] - b[j]).abs() < 1e-12);
                assert!((a[j] - s[j]).abs() <= 1e-6 * (1.0 + a[j].abs()));
            }
        }
    }

    #[test]
    fn dx_x0_term_ignores_state() {
        let head = PolicyHead::Dx { n: 4 };
        let raw: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let p = PolicyHandle::from_head(head, &raw, &[0.2, -0.4], 1.0, 0.5, shift1()).unwrap();
        let t = 0.7;
        let base: Vec<f64> = {
            let x = [0.0, 0.0];
            p.velocity(&x, t).unwrap().iter().zip(&x).map(|(v, x)| v * t - x).collect()
        };
        for x in [[1.0, 2.0], [-5.0, 0.3], [100.0, -100.0]] {
            let term: Vec<f64> = p.velocity(&x, t).unwrap().iter().zip(&x).map(|(v, x)| v * t - x).collect();
            for j in 0..2 {
                assert!((term[j] - base[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gm_head_velocity_reacts_to_state_and_dx_does_not() {
        let mut rng = seeded(4);
        let gm_head = PolicyHead::Gm { l: 1, k: 3, c: 2 };
        for _ in 0..20 {
            let x_src = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let raw_gm: Vec<f64> = (0..gm_head.output_size(2)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let raw_dx: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pg = PolicyHandle::from_head(gm_head, &raw_gm, &x_src, 1.0, 0.0, shift1()).unwrap();
            let pd = PolicyHandle::from_head(PolicyHead::Dx { n: 5 }, &raw_dx, &x_src, 1.0, 0.0, shift1()).unwrap();
            let t = rng.random_range(0.1..0.9);
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let h = 1e-5;
            let x0hat = |p: &PolicyHandle, x: &[f64]| -> Vec<f64> {
                p.velocity(x, t).unwrap().iter().zip(x).map(|(v, xi)| xi - v * t).collect()
            };
            let xp = [x[0] + h, x[1]];
            let dg = (x0hat(&pg, &xp)[0] - x0hat(&pg, &x)[0]) / h;
            let dd = (x0hat(&pd, &xp)[0] - x0hat(&pd, &x)[0]) / h;
            assert!(dd.abs() < 1e-6);
            assert!(dg.abs() > 1e-6, "GM denoiser must depend on x_t");
        }
    }

    #[test]
    fn window_is_enforced() {
        let raw = vec![0.0; PolicyHead::Gm { l: 1, k: 2, c: 1 }.output_size(1)];
        let p = PolicyHandle::from_head(PolicyHead::Gm { l: 1, k: 2, c: 1 }, &raw, &[0.0], 0.75, 0.5, shift1()).unwrap();
        assert!(p.velocity(&[0.0], 0.75).is_ok());
        assert!(p.velocity(&[0.0], 0.5).is_ok());
        assert!(matches!(p.velocity(&[0.0], 0.8), Err(Error::WindowViolation { .. })));
        assert!(matches!(p.velocity(&[0.0], 0.4), Err(Error::WindowViolation { .. })));
    }

    #[test]
    fn origin_query_gives_prior_mean_velocity() {
        let head = PolicyHead::Gm { l: 1, k: 2, c: 1 };
        let raw = [0.3, -0.2, 0.5, -1.0, -0.7];
        let x_src = [0.4];
        let p = PolicyHandle::from_head(head, &raw, &x_src, 0.6, 0.2, shift1()).unwrap();
        let w = crate::numeric::softmax(&raw[..2]);
        let mean_u = w[0] * raw[2] + w[1] * raw[3];
        let v = p.velocity(&x_src, 0.6).unwrap();
        // at the origin the posterior equals the prior, so v = mean of u
        assert!((v[0] - mean_u).abs() < 1e-12);
    }

    #[test]
    fn dropout_equals_reduced_mixture() {
        let mut rng = seeded(8);
        let head = PolicyHead::Gm { l: 2, k: 4, c: 1 };
        let raw: Vec<f64> = (0..head.output_size(2)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = PolicyHandle::from_head(head, &raw, &[0.1, 0.2], 1.0, 0.0, shift1()).unwrap();
        let (pd, mask) = loop {
            let (pd, mask) = p.with_dropout(0.5, &mut rng).unwrap();
            if mask.iter().any(|&m| !m) {
                break (pd, mask);
            }
        };
        let keep: Vec<usize> = (0..4).filter(|&k| mask[k]).collect();
        let kk = keep.len();
        let PolicyKind::Gm { u, .. } = &p.kind else { unreachable!() };
        let mut logits = Vec::new();
        let mut means = Vec::new();
        for i in 0..2 {
            for &k in &keep {
                logits.push(u.logits[i * 4 + k]);
                means.push(u.means[i * 4 + k]);
            }
        }
        let reduced = FactorGm::new(2, kk, 1, logits, means, u.log_s, Space::U, u.x_src.clone(), 1.0).unwrap();
        let pr = PolicyHandle::from_gm(reduced, 1.0, 0.0, shift1()).unwrap();
        for &t in &[0.9, 0.5, 0.1] {
            let x = [0.3, -0.6];
            let a = pd.velocity(&x, t).unwrap();
            let b = pr.velocity(&x, t).unwrap();
            for j in 0..2 {
                assert!((a[j] - b[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn from_gm_roundtrips_spaces() {
        let gm = FactorGm::new(1, 2, 1, vec![0.1, 0.4], vec![1.0, -1.0], -1.0, Space::X0, vec![0.5], 0.8).unwrap();
        let p = PolicyHandle::from_gm(gm.clone(), 0.8, 0.0, shift1()).unwrap();
        let PolicyKind::Gm { u, x0 } = &p.kind else { unreachable!() };
        let back = u.to_x0();
        for (a, b) in back.means.iter().zip(&gm.means) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((back.log_s - gm.log_s).abs() < 1e-12);
        assert_eq!(x0, &gm);
    }

    #[test]
    fn finite_for_large_states() {
        let mut rng = seeded(12);
        let head = PolicyHead::Gm { l: 1, k: 4, c: 2 };
        for _ in 0..50 {
            let raw: Vec<f64> = (0..head.output_size(2)).map(|_| rng.random_range(-3.0..3.0)).collect();
            let x_src = [rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3)];
            let p = PolicyHandle::from_head(head, &raw, &x_src, 1.0, 0.0, shift1()).unwrap();
            let x = [rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3)];
            for &t in &[1.0, 0.5, 1e-3, T_FLOOR] {
                assert!(p.velocity(&x, t).unwrap().iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn dx_vjp_matches_finite_differences() {
        let mut rng = seeded(13);
        let head = PolicyHead::Dx { n: 5 };
        let raw: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x_src = [0.2, 0.9];
        let p = PolicyHandle::from_head(head, &raw, &x_src, 0.8, 0.3, shift1()).unwrap();
        let x = [0.4, -0.3];
        let t = 0.47;
        let cot = [0.6, -1.1];
        let mut g = p.zero_grad();
        p.velocity_vjp(&x, t, &cot, &mut g).unwrap();
        let mut flat = vec![0.0; 10];
        g.write_raw(&mut flat);
        for idx in 0..10 {
            let f = |delta: f64| {
                let mut r = raw.clone();
                r[idx] += delta;
                let q = PolicyHandle::from_head(head, &r, &x_src, 0.8, 0.3, shift1()).unwrap();
                let v = q.velocity(&x, t).unwrap();
                v[0] * cot[0] + v[1] * cot[1]
            };
            let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((fd - flat[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn toyfit_single_target_single_mode() {
        let targets = random_smooth_targets(2, 1, 2);
        let cfg = ToyfitConfig {
            l: 1,
            k: 1,
            c: 2,
            iters: 3000,
            lr: 0.05,
            seed: 1,
        };
        let rep = toyfit(&targets, &cfg).unwrap();
        assert!(rep.residual <= 1e-8, "residual {}", rep.residual);
    }

    #[test]
    fn toyfit_rejects_duplicate_times() {
        let mut targets = random_smooth_targets(2, 2, 2);
        targets[1].t = targets[0].t;
        let cfg = ToyfitConfig {
            l: 1,
            k: 2,
            c: 2,
            iters: 10,
            lr: 0.01,
            seed: 1,
        };
        assert!(toyfit(&targets, &cfg).is_err());
    }
}
