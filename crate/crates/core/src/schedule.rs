//! Linear flow schedule, time shifting and step grids.
//!
//! All times are stored in raw space `tau` and mapped to shifted time `t`
//! on demand. Under the linear schedule `alpha_t = 1 - t` and `sigma_t = t`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// No velocity is evaluated below this shifted time.
pub const T_FLOOR: f64 = 1e-4;

/// The fixed linear noise schedule.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Schedule;

impl Schedule {
    #[inline]
    pub fn alpha(t: f64) -> f64 {
        1.0 - t
    }

    #[inline]
    pub fn sigma(t: f64) -> f64 {
        t
    }
}

/// Monotone remap `t = m tau / (1 + (m - 1) tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct TimeShift {
    m: f64,
}

impl TryFrom<f64> for TimeShift {
    type Error = Error;

    fn try_from(m: f64) -> Result<Self> {
        TimeShift::new(m)
    }
}

impl From<TimeShift> for f64 {
    fn from(s: TimeShift) -> f64 {
        s.m
    }
}

impl Default for TimeShift {
    fn default() -> Self {
        TimeShift { m: 1.0 }
    }
}

impl TimeShift {
    pub fn new(m: f64) -> Result<Self> {
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::domain(format!("shift m must be positive, got {m}")));
        }
        Ok(TimeShift { m })
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn apply(&self, tau: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::domain(format!("raw time {tau} outside [0, 1]")));
        }
        Ok(self.apply_unchecked(tau))
    }

    /// Shift without range checks; callers guarantee `tau` in `[0, 1]`.
    #[inline]
    pub fn apply_unchecked(&self, tau: f64) -> f64 {
        if self.m == 1.0 {
            return tau;
        }
        self.m * tau / (1.0 + (self.m - 1.0) * tau)
    }

    /// Analytic inverse `tau = t / (m - (m - 1) t)`.
    pub fn inverse(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("shifted time {t} outside [0, 1]")));
        }
        if self.m == 1.0 {
            return Ok(t);
        }
        Ok(t / (self.m - (self.m - 1.0) * t))
    }

    /// Smallest raw time whose shifted value reaches [`T_FLOOR`].
    pub fn tau_floor(&self) -> f64 {
        let tau = self.inverse(T_FLOOR).expect("floor is in range");
        // guard against the inverse rounding just below the floor
        if self.apply_unchecked(tau) < T_FLOOR {
            tau.next_up()
        } else {
            tau
        }
    }
}

pub fn shift_time(tau: f64, m: f64) -> Result<f64> {
    TimeShift::new(m)?.apply(tau)
}

/// Raw-time boundaries `1 = tau_0 > tau_1 > ... > tau_nfe = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepGrid {
    pub nfe: usize,
    pub final_step_scale: f64,
    pub raw_boundaries: Vec<f64>,
}

pub fn make_step_grid(nfe: usize, final_step_scale: f64) -> Result<StepGrid> {
    if nfe == 0 {
        return Err(Error::domain("nfe must be at least 1"));
    }
    if !(final_step_scale > 0.0 && final_step_scale <= 1.0) {
        return Err(Error::domain(format!(
            "final step scale must lie in (0, 1], got {final_step_scale}"
        )));
    }
    let h = 1.0 / (nfe as f64 - 1.0 + final_step_scale);
    let mut raw_boundaries: Vec<f64> = (0..nfe).map(|k| 1.0 - k as f64 * h).collect();
    raw_boundaries.push(0.0);
    Ok(StepGrid {
        nfe,
        final_step_scale,
        raw_boundaries,
    })
}

impl StepGrid {
    /// Segments as `(tau_src, tau_dst)` pairs, from noise to data.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.raw_boundaries.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn segment(&self, index: usize) -> (f64, f64) {
        (self.raw_boundaries[index], self.raw_boundaries[index + 1])
    }

    /// Index of the segment whose start is the smallest boundary `>= tau`.
    pub fn snap_up(&self, tau: f64) -> usize {
        // boundaries are decreasing; the last start with tau_src >= tau wins
        let mut idx = 0;
        for k in 0..self.nfe {
            if self.raw_boundaries[k] >= tau {
                idx = k;
            } else {
                break;
            }
        }
        idx
    }

    pub fn interval_lengths(&self) -> Vec<f64> {
        self.segments().map(|(a, b)| a - b).collect()
    }
}

/// `x_t = (1 - t) x0 + t eps`.
pub fn forward_diffuse(x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(x0.len(), eps.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("time {t} outside [0, 1]")));
    }
    let (a, s) = (Schedule::alpha(t), Schedule::sigma(t));
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect())
}

/// `u = (x_t - x0) / t`.
pub fn sample_velocity(x_t: &[f64], x0: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(x_t.len(), x0.len())?;
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::domain(format!("sample velocity needs t in (0, 1], got {t}")));
    }
    Ok(x_t.iter().zip(x0).map(|(&x, &z)| (x - z) / t).collect())
}
