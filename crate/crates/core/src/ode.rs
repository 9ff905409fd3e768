//! Fixed-step explicit Euler machinery.
//!
//! Substeps are uniform in raw time `tau` and mapped through the time shift,
//! so the shifted step length varies along a segment.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::all_finite;
use crate::policy::PolicyHandle;
use crate::rng::initial_noise;
use crate::schedule::{StepGrid, TimeShift, T_FLOOR};

/// Anything that yields a velocity at `(x, t)` in shifted time.
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    /// Raw substep size.
    pub substep: f64,
    /// Raw micro-window size for windowed velocity matching.
    pub window_dtau: f64,
    /// GM temperature for every segment but the last.
    pub temperature: f64,
    /// GM temperature on the final segment.
    pub final_segment_temperature: f64,
    pub record_trajectory: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            substep: 1.0 / 128.0,
            window_dtau: 3.0 / 128.0,
            temperature: 1.0,
            final_segment_temperature: 1.0,
            record_trajectory: false,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.substep > 0.0 && self.substep <= 1.0) {
            return Err(Error::Config(format!("substep must lie in (0, 1], got {}", self.substep)));
        }
        if !(self.window_dtau >= 0.0 && self.window_dtau <= 1.0) {
            return Err(Error::Config(format!(
                "window_dtau must lie in [0, 1], got {}",
                self.window_dtau
            )));
        }
        if !(self.temperature > 0.0 && self.final_segment_temperature > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }

    /// Temperature applied to segment `index` of `nfe`.
    pub fn segment_temperature(&self, index: usize, nfe: usize) -> f64 {
        if index + 1 == nfe {
            self.final_segment_temperature
        } else {
            self.temperature
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Teacher,
    Policy,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajPoint {
    pub tau: f64,
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajPoint>,
    pub provenance: Provenance,
}

impl Trajectory {
    pub fn endpoint(&self) -> &[f64] {
        &self.points.last().expect("trajectory is never empty").x
    }

    /// Append another trajectory that starts where this one ends.
    fn extend_from(&mut self, other: Trajectory) {
        let skip = usize::from(!self.points.is_empty());
        self.points.extend(other.points.into_iter().skip(skip));
        if self.provenance != other.provenance {
            self.provenance = Provenance::Mixed;
        }
    }
}

/// `x' = x - h_t u`.
pub fn euler_step(x: &[f64], u: &[f64], h_t: f64) -> Result<Vec<f64>> {
    check_dim(x.len(), u.len())?;
    Ok(x.iter().zip(u).map(|(&xi, &ui)| xi - h_t * ui).collect())
}

fn euler_step_inplace(x: &mut [f64], u: &[f64], h_t: f64) {
    for (xi, &ui) in x.iter_mut().zip(u) {
        *xi -= h_t * ui;
    }
}

/// Raw substep boundaries from `from_tau` down to `to_tau`.
///
/// A trailing left endpoint whose shifted time falls below the floor is merged
/// into the previous substep.
pub fn substep_boundaries(from_tau: f64, to_tau: f64, substep: f64, shift: TimeShift) -> Vec<f64> {
    if from_tau <= to_tau {
        return vec![from_tau];
    }
    let n = (((from_tau - to_tau) / substep) - 1e-9).ceil().max(1.0) as usize;
    let mut taus: Vec<f64> = (0..n).map(|k| from_tau - k as f64 * substep).collect();
    taus.push(to_tau);
    while taus.len() > 2 && shift.apply_unchecked(taus[taus.len() - 2]) < T_FLOOR {
        taus.remove(taus.len() - 2);
    }
    taus
}

/// Integrate `field` over raw time `[to_tau, from_tau]`, recording every substep when asked.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    from_tau: f64,
    to_tau: f64,
    substep: f64,
    shift: TimeShift,
    record: bool,
    provenance: Provenance,
) -> Result<Trajectory> {
    check_dim(field.dim(), x.len())?;
    if !(0.0..=1.0).contains(&to_tau) || !(0.0..=1.0).contains(&from_tau) || to_tau > from_tau {
        return Err(Error::domain(format!("invalid integration range [{to_tau}, {from_tau}]")));
    }
    let taus = substep_boundaries(from_tau, to_tau, substep, shift);
    let mut state = x.to_vec();
    let mut points = Vec::with_capacity(if record { taus.len() } else { 2 });
    let t0 = shift.apply_unchecked(from_tau);
    points.push(TrajPoint {
        tau: from_tau,
        t: t0,
        x: state.clone(),
    });
    for (k, w) in taus.windows(2).enumerate() {
        let (ta, tb) = (shift.apply_unchecked(w[0]), shift.apply_unchecked(w[1]));
        if ta < T_FLOOR {
            return Err(Error::domain(format!("substep {k} starts below the time floor at t={ta}")));
        }
        let u = field.velocity(&state, ta)?;
        euler_step_inplace(&mut state, &u, ta - tb);
        if !all_finite(&state) {
            return Err(Error::non_finite(format!("state after substep {k} (t={ta})")));
        }
        if record {
            points.push(TrajPoint {
                tau: w[1],
                t: tb,
                x: state.clone(),
            });
        }
    }
    if !record && taus.len() > 1 {
        points.push(TrajPoint {
            tau: to_tau,
            t: shift.apply_unchecked(to_tau),
            x: state,
        });
    }
    Ok(Trajectory { points, provenance })
}

/// Endpoint only, without allocating a trajectory.
pub fn integrate_state<F: VelocityField + ?Sized>(
    field: &F,
    x: &[f64],
    from_tau: f64,
    to_tau: f64,
    substep: f64,
    shift: TimeShift,
) -> Result<Vec<f64>> {
    let traj = integrate(field, x, from_tau, to_tau, substep, shift, false, Provenance::Policy)?;
    Ok(traj.points.into_iter().last().expect("non-empty").x)
}

fn check_policy_range(policy: &PolicyHandle, from_tau: f64, to_tau: f64) -> Result<()> {
    let tol = 1e-12;
    if from_tau > policy.tau_src + tol || to_tau < policy.tau_dst - tol || to_tau > from_tau {
        return Err(Error::WindowViolation {
            t: to_tau,
            lo: policy.tau_dst,
            hi: policy.tau_src,
        });
    }
    Ok(())
}

/// Roll a policy over `[to_tau, from_tau]`; the trajectory always includes both endpoints.
pub fn rollout_policy(policy: &PolicyHandle, from_tau: f64, to_tau: f64, cfg: &RolloutConfig) -> Result<Trajectory> {
    rollout_policy_from(policy, &policy.x_src, from_tau, to_tau, cfg)
}

/// As [`rollout_policy`] but from an explicit state at `from_tau`.
pub fn rollout_policy_from(
    policy: &PolicyHandle,
    x: &[f64],
    from_tau: f64,
    to_tau: f64,
    cfg: &RolloutConfig,
) -> Result<Trajectory> {
    check_policy_range(policy, from_tau, to_tau)?;
    integrate(policy, x, from_tau, to_tau, cfg.substep, policy.shift, true, Provenance::Policy)
}

/// Detached rollout returning only the endpoint.
pub fn rollout_state(policy: &PolicyHandle, x: &[f64], from_tau: f64, to_tau: f64, substep: f64) -> Result<Vec<f64>> {
    check_policy_range(policy, from_tau, to_tau)?;
    integrate_state(policy, x, from_tau, to_tau, substep, policy.shift)
}

/// One evaluation point of a micro window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPoint {
    pub x: Vec<f64>,
    pub t: f64,
    pub weight: f64,
}

/// Left-Riemann evaluation points of the window `[tau - window_dtau, tau]`,
/// truncated at the policy's segment end. Weights are normalized shifted-step lengths.
pub fn micro_window_points(
    policy: &PolicyHandle,
    x: &[f64],
    tau: f64,
    window_dtau: f64,
    substep: f64,
) -> Result<Vec<WindowPoint>> {
    let lo = (tau - window_dtau).max(policy.tau_dst);
    let shift = policy.shift;
    let taus = substep_boundaries(tau, lo, substep, shift);
    if taus.len() < 2 {
        return Ok(vec![WindowPoint {
            x: x.to_vec(),
            t: shift.apply_unchecked(tau),
            weight: 1.0,
        }]);
    }
    check_policy_range(policy, tau, lo)?;
    let total = shift.apply_unchecked(tau) - shift.apply_unchecked(lo);
    let mut state = x.to_vec();
    let mut points = Vec::with_capacity(taus.len() - 1);
    for (k, w) in taus.windows(2).enumerate() {
        let (ta, tb) = (shift.apply_unchecked(w[0]), shift.apply_unchecked(w[1]));
        points.push(WindowPoint {
            x: state.clone(),
            t: ta,
            weight: (ta - tb) / total,
        });
        if k + 2 < taus.len() {
            let u = policy.velocity(&state, ta)?;
            euler_step_inplace(&mut state, &u, ta - tb);
            if !all_finite(&state) {
                return Err(Error::non_finite(format!("micro-window state after substep {k}")));
            }
        }
    }
    Ok(points)
}

/// Weighted average policy velocity over a micro window.
pub fn micro_window_velocity(
    policy: &PolicyHandle,
    x: &[f64],
    tau: f64,
    window_dtau: f64,
    cfg: &RolloutConfig,
) -> Result<Vec<f64>> {
    let pts = micro_window_points(policy, x, tau, window_dtau, cfg.substep)?;
    let mut avg = vec![0.0; x.len()];
    for p in &pts {
        let u = policy.velocity(&p.x, p.t)?;
        for (a, v) in avg.iter_mut().zip(&u) {
            *a += p.weight * v;
        }
    }
    Ok(avg)
}

/// Source of per-segment policies: a trained student or a fixed fitted mixture.
pub trait PolicyProvider {
    fn dim(&self) -> usize;
    fn generate(&self, x_src: &[f64], tau_src: f64, tau_dst: f64, condition: u32) -> Result<PolicyHandle>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub tau_src: f64,
    pub tau_dst: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub x: Vec<f64>,
    pub trajectory: Option<Trajectory>,
    pub segments: Vec<SegmentRecord>,
}

/// Multi-segment sampling from an explicit initial noise `x1`.
pub fn sample_from<P: PolicyProvider + ?Sized>(
    provider: &P,
    grid: &StepGrid,
    cfg: &RolloutConfig,
    x1: &[f64],
    condition: u32,
) -> Result<SampleOutput> {
    check_dim(provider.dim(), x1.len())?;
    let mut x = x1.to_vec();
    let mut traj: Option<Trajectory> = None;
    let mut segments = Vec::with_capacity(grid.nfe);
    for (i, (tau_src, tau_dst)) in grid.segments().enumerate() {
        let temperature = cfg.segment_temperature(i, grid.nfe);
        let mut policy = provider.generate(&x, tau_src, tau_dst, condition)?;
        if temperature != 1.0 {
            policy = policy.with_temperature(temperature)?;
        }
        segments.push(SegmentRecord {
            tau_src,
            tau_dst,
            temperature,
        });
        let seg = integrate(
            &policy,
            &x,
            tau_src,
            tau_dst,
            cfg.substep,
            policy.shift,
            cfg.record_trajectory,
            Provenance::Policy,
        )?;
        x = seg.endpoint().to_vec();
        if cfg.record_trajectory {
            match traj.as_mut() {
                Some(t) => t.extend_from(seg),
                None => traj = Some(seg),
            }
        }
    }
    Ok(SampleOutput {
        x,
        trajectory: traj,
        segments,
    })
}

/// Sample number `index` of a seeded batch.
pub fn sample<P: PolicyProvider + ?Sized>(
    provider: &P,
    grid: &StepGrid,
    cfg: &RolloutConfig,
    seed: u64,
    index: u64,
    condition: u32,
) -> Result<SampleOutput> {
    let x1 = initial_noise(seed, index, provider.dim());
    sample_from(provider, grid, cfg, &x1, condition)
}
