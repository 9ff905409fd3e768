//! Gaussian-mixture kernel.
//!
//! A policy predicts an isotropic mixture over the velocity `u` at its origin
//! state `(x_src, t_src)`. Substituting `u = (x_src - x0) / sigma_src` turns it
//! into a mixture over `x0`; a Bayes update with the forward-diffusion
//! likelihood then gives the denoising posterior at any later `(x_t, t)`,
//! which is again an isotropic mixture:
//!
//! ```text
//! nu    = alpha_t x_t / sigma_t^2 - alpha_src x_src / sigma_src^2
//! zeta  = alpha_t^2 / sigma_t^2   - alpha_src^2 / sigma_src^2
//! d     = s_x^2 zeta + 1
//! s'^2  = s_x^2 / d
//! mu'_k = (s_x^2 nu + mux_k) / d
//! a'_k  = log A_k + mux_k . (nu - zeta mux_k / 2) / d
//! ```
//!
//! The velocity is `(x_t - sum_k A'_k mu'_k) / t`. Setting `s_x = 0` gives the
//! discrete-support form.
//!
//! Weights are always kept as unnormalized logits and normalized through a
//! max-subtracted softmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{log_sum_exp, softmax, softmax_into};
use crate::schedule::{Schedule, T_FLOOR};

/// Which variable a mixture is defined over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Space {
    /// Velocity `u` at the origin state.
    U,
    /// Clean data `x0`.
    X0,
}

impl Space {
    fn name(self) -> &'static str {
        match self {
            Space::U => "u-space",
            Space::X0 => "x0-space",
        }
    }
}

/// Isotropic mixture over a `C`-dimensional chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoGm {
    pub logits: Vec<f64>,
    /// Row-major `K x C`.
    pub means: Vec<f64>,
    pub log_s: f64,
    pub c: usize,
    pub space: Space,
}

impl IsoGm {
    pub fn new(logits: Vec<f64>, means: Vec<f64>, log_s: f64, c: usize, space: Space) -> Result<Self> {
        if logits.is_empty() || c == 0 {
            return Err(Error::domain("mixture needs K >= 1 and C >= 1"));
        }
        check_dim(logits.len() * c, means.len())?;
        Ok(IsoGm {
            logits,
            means,
            log_s,
            c,
            space,
        })
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.c..(k + 1) * self.c]
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn std(&self) -> f64 {
        self.log_s.exp()
    }

    /// Mixture mean `sum_k A_k mu_k`.
    pub fn mixture_mean(&self) -> Vec<f64> {
        let w = self.weights();
        let mut out = vec![0.0; self.c];
        for (k, &a) in w.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.mean(k)) {
                *o += a * m;
            }
        }
        out
    }
}

/// Reparameterize a velocity mixture at `(x_src, t_src)` over `x0`.
///
/// `mux_k = x_src - sigma_src mu_k`, `s_x = sigma_src s`; logits are unchanged.
pub fn u_to_x0(gm: &IsoGm, x_src: &[f64], t_src: f64) -> Result<IsoGm> {
    if gm.space != Space::U {
        return Err(Error::WrongSpace {
            expected: Space::U.name(),
        });
    }
    check_dim(gm.c, x_src.len())?;
    check_origin_time(t_src)?;
    let sigma = Schedule::sigma(t_src);
    let means = gm
        .means
        .chunks(gm.c)
        .flat_map(|mu| mu.iter().zip(x_src).map(move |(&m, &x)| x - sigma * m))
        .collect();
    Ok(IsoGm {
        logits: gm.logits.clone(),
        means,
        log_s: gm.log_s + sigma.ln(),
        c: gm.c,
        space: Space::X0,
    })
}

fn check_origin_time(t_src: f64) -> Result<()> {
    if !(t_src > 0.0 && t_src <= 1.0) {
        return Err(Error::domain(format!("origin time {t_src} outside (0, 1]")));
    }
    Ok(())
}

fn check_query_time(t: f64, t_src: f64) -> Result<()> {
    if t > t_src {
        return Err(Error::WindowViolation {
            t,
            lo: T_FLOOR,
            hi: t_src,
        });
    }
    if !(t >= T_FLOOR) {
        return Err(Error::domain(format!("query time {t} below floor {T_FLOOR}")));
    }
    Ok(())
}

/// Denoising posterior of a chunk mixture at `(x_t, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGm {
    pub logits: Vec<f64>,
    /// Row-major `K x C`.
    pub means: Vec<f64>,
    /// Posterior variance `s'^2`.
    pub s2: f64,
    pub x_t: Vec<f64>,
    pub t: f64,
    pub nu: Vec<f64>,
    pub zeta: f64,
    pub c: usize,
}

impl PosteriorGm {
    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn mean(&self) -> Vec<f64> {
        let w = self.weights();
        let mut out = vec![0.0; self.c];
        for (k, &a) in w.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(&self.means[k * self.c..(k + 1) * self.c]) {
                *o += a * m;
            }
        }
        out
    }
}

/// `(nu, zeta)` for a query at `(x_t, t)` given origin `(x_src, t_src)`.
fn bayes_stats(x_src: &[f64], t_src: f64, x_t: &[f64], t: f64, nu: &mut [f64]) -> f64 {
    let (a, s) = (Schedule::alpha(t), Schedule::sigma(t));
    let (a0, s0) = (Schedule::alpha(t_src), Schedule::sigma(t_src));
    let (ca, c0) = (a / (s * s), a0 / (s0 * s0));
    for ((n, &x), &xs) in nu.iter_mut().zip(x_t).zip(x_src) {
        *n = ca * x - c0 * xs;
    }
    let zeta = a * a / (s * s) - a0 * a0 / (s0 * s0);
    // alpha^2/sigma^2 is decreasing in t, so only rounding can push zeta below zero
    debug_assert!(zeta >= -1e-9 * (1.0 + (a * a / (s * s)).abs()), "zeta = {zeta}");
    zeta.max(0.0)
}

/// Posterior logits and means for one chunk; returns `d = s_x^2 zeta + 1`.
fn chunk_posterior(
    logits: &[f64],
    means_x: &[f64],
    s_x2: f64,
    nu: &[f64],
    zeta: f64,
    out_logits: &mut [f64],
    out_means: &mut [f64],
) -> f64 {
    let c = nu.len();
    let d = s_x2 * zeta + 1.0;
    for (k, &a) in logits.iter().enumerate() {
        let mux = &means_x[k * c..(k + 1) * c];
        let mut quad = 0.0;
        for j in 0..c {
            quad += mux[j] * (nu[j] - 0.5 * zeta * mux[j]);
            out_means[k * c + j] = (s_x2 * nu[j] + mux[j]) / d;
        }
        out_logits[k] = a + quad / d;
    }
    d
}

pub fn gm_posterior(gm_x0: &IsoGm, x_src: &[f64], t_src: f64, x_t: &[f64], t: f64) -> Result<PosteriorGm> {
    if gm_x0.space != Space::X0 {
        return Err(Error::WrongSpace {
            expected: Space::X0.name(),
        });
    }
    check_dim(gm_x0.c, x_src.len())?;
    check_dim(gm_x0.c, x_t.len())?;
    check_origin_time(t_src)?;
    check_query_time(t, t_src)?;
    let c = gm_x0.c;
    let mut nu = vec![0.0; c];
    let zeta = bayes_stats(x_src, t_src, x_t, t, &mut nu);
    let s_x2 = (2.0 * gm_x0.log_s).exp();
    let lse = log_sum_exp(&gm_x0.logits);
    let log_a: Vec<f64> = gm_x0.logits.iter().map(|&a| a - lse).collect();
    let mut logits = vec![0.0; gm_x0.k()];
    let mut means = vec![0.0; gm_x0.k() * c];
    let d = chunk_posterior(&log_a, &gm_x0.means, s_x2, &nu, zeta, &mut logits, &mut means);
    Ok(PosteriorGm {
        logits,
        means,
        s2: s_x2 / d,
        x_t: x_t.to_vec(),
        t,
        nu,
        zeta,
        c,
    })
}

/// Temperature scaling: weights `A^(1/T)` renormalized, variance times `T`.
pub trait Temperature: Sized {
    fn apply_temperature(&self, temperature: f64) -> Result<Self>;
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::domain(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

fn scale_logits(logits: &[f64], temperature: f64) -> Vec<f64> {
    // normalize first so that masked (-inf) logits stay masked and finite ones stay bounded
    let lse = log_sum_exp(logits);
    logits.iter().map(|&a| (a - lse) / temperature).collect()
}

impl Temperature for IsoGm {
    fn apply_temperature(&self, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(IsoGm {
            logits: scale_logits(&self.logits, temperature),
            log_s: self.log_s + 0.5 * temperature.ln(),
            ..self.clone()
        })
    }
}

impl Temperature for PosteriorGm {
    fn apply_temperature(&self, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(PosteriorGm {
            logits: scale_logits(&self.logits, temperature),
            s2: self.s2 * temperature,
            ..self.clone()
        })
    }
}

pub fn apply_temperature<G: Temperature>(gm: &G, temperature: f64) -> Result<G> {
    gm.apply_temperature(temperature)
}

/// Factorized mixture over `L` chunks of `C` channels with one shared std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorGm {
    pub l: usize,
    pub k: usize,
    pub c: usize,
    /// Row-major `L x K`.
    pub logits: Vec<f64>,
    /// Row-major `L x K x C`.
    pub means: Vec<f64>,
    pub log_s: f64,
    pub space: Space,
    /// Origin state, `L x C`.
    pub x_src: Vec<f64>,
    pub t_src: f64,
}

impl FactorGm {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        l: usize,
        k: usize,
        c: usize,
        logits: Vec<f64>,
        means: Vec<f64>,
        log_s: f64,
        space: Space,
        x_src: Vec<f64>,
        t_src: f64,
    ) -> Result<Self> {
        if l == 0 || k == 0 || c == 0 {
            return Err(Error::domain("factorized mixture needs L, K, C >= 1"));
        }
        check_dim(l * k, logits.len())?;
        check_dim(l * k * c, means.len())?;
        check_dim(l * c, x_src.len())?;
        check_origin_time(t_src)?;
        Ok(FactorGm {
            l,
            k,
            c,
            logits,
            means,
            log_s,
            space,
            x_src,
            t_src,
        })
    }

    pub fn dim(&self) -> usize {
        self.l * self.c
    }

    pub fn chunk(&self, i: usize) -> IsoGm {
        IsoGm {
            logits: self.logits[i * self.k..(i + 1) * self.k].to_vec(),
            means: self.means[i * self.k * self.c..(i + 1) * self.k * self.c].to_vec(),
            log_s: self.log_s,
            c: self.c,
            space: self.space,
        }
    }

    pub fn chunk_origin(&self, i: usize) -> &[f64] {
        &self.x_src[i * self.c..(i + 1) * self.c]
    }

    /// The same policy expressed over `x0`; a no-op when already there.
    pub fn to_x0(&self) -> FactorGm {
        if self.space == Space::X0 {
            return self.clone();
        }
        let sigma = Schedule::sigma(self.t_src);
        let (k, c) = (self.k, self.c);
        let mut means = self.means.clone();
        for i in 0..self.l {
            let xs = &self.x_src[i * c..(i + 1) * c];
            for kk in 0..k {
                let base = (i * k + kk) * c;
                for j in 0..c {
                    means[base + j] = xs[j] - sigma * self.means[base + j];
                }
            }
        }
        FactorGm {
            means,
            log_s: self.log_s + sigma.ln(),
            space: Space::X0,
            ..self.clone()
        }
    }

    pub fn with_temperature(&self, temperature: f64) -> Result<FactorGm> {
        check_temperature(temperature)?;
        let mut logits = Vec::with_capacity(self.logits.len());
        for row in self.logits.chunks(self.k) {
            logits.extend(scale_logits(row, temperature));
        }
        Ok(FactorGm {
            logits,
            log_s: self.log_s + 0.5 * temperature.ln(),
            ..self.clone()
        })
    }

    pub fn posterior(&self, i: usize, x_t_chunk: &[f64], t: f64) -> Result<PosteriorGm> {
        let gm = self.to_x0();
        gm_posterior(&gm.chunk(i), self.chunk_origin(i), self.t_src, x_t_chunk, t)
    }
}

fn velocity_impl(policy: &FactorGm, x_t: &[f64], t: f64, discrete: bool) -> Result<Vec<f64>> {
    check_dim(policy.dim(), x_t.len())?;
    check_query_time(t, policy.t_src)?;
    let owned;
    let gm = if policy.space == Space::X0 {
        policy
    } else {
        owned = policy.to_x0();
        &owned
    };
    let (k, c) = (gm.k, gm.c);
    let s_x2 = if discrete { 0.0 } else { (2.0 * gm.log_s).exp() };
    let mut out = vec![0.0; x_t.len()];
    let mut nu = vec![0.0; c];
    let mut post_logits = vec![0.0; k];
    let mut post_means = vec![0.0; k * c];
    let mut w = vec![0.0; k];
    for i in 0..gm.l {
        let xc = &x_t[i * c..(i + 1) * c];
        let zeta = bayes_stats(gm.chunk_origin(i), gm.t_src, xc, t, &mut nu);
        chunk_posterior(
            &gm.logits[i * k..(i + 1) * k],
            &gm.means[i * k * c..(i + 1) * k * c],
            s_x2,
            &nu,
            zeta,
            &mut post_logits,
            &mut post_means,
        );
        softmax_into(&post_logits, &mut w);
        for j in 0..c {
            let mut m = 0.0;
            for kk in 0..k {
                if w[kk] > 0.0 {
                    m += w[kk] * post_means[kk * c + j];
                }
            }
            out[i * c + j] = (xc[j] - m) / t;
        }
    }
    Ok(out)
}

/// Closed-form velocity of a factorized mixture policy at `(x_t, t)`.
pub fn gm_velocity(policy: &FactorGm, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    velocity_impl(policy, x_t, t, false)
}

/// Velocity in the discrete-support limit `s_x -> 0`; the stored std is ignored.
pub fn gm_velocity_discrete(policy: &FactorGm, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    velocity_impl(policy, x_t, t, true)
}

/// Gradient of a velocity functional w.r.t. the u-space parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GmGrad {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_s: f64,
}

impl GmGrad {
    pub fn zeros(l: usize, k: usize, c: usize) -> Self {
        GmGrad {
            logits: vec![0.0; l * k],
            means: vec![0.0; l * k * c],
            log_s: 0.0,
        }
    }
}

/// Velocity of a u-space policy plus the vector-Jacobian product
/// `cotangent^T d(velocity)/d(params)`, accumulated into `grad`.
pub fn gm_velocity_vjp(
    policy: &FactorGm,
    x_t: &[f64],
    t: f64,
    cotangent: &[f64],
    grad: &mut GmGrad,
) -> Result<Vec<f64>> {
    if policy.space != Space::U {
        return Err(Error::WrongSpace {
            expected: Space::U.name(),
        });
    }
    check_dim(policy.dim(), x_t.len())?;
    check_dim(policy.dim(), cotangent.len())?;
    check_query_time(t, policy.t_src)?;
    let (k, c) = (policy.k, policy.c);
    let sigma_src = Schedule::sigma(policy.t_src);
    let s_x2 = (2.0 * (policy.log_s + sigma_src.ln())).exp();

    let mut out = vec![0.0; x_t.len()];
    let mut nu = vec![0.0; c];
    let mut mux = vec![0.0; k * c];
    let mut post_logits = vec![0.0; k];
    let mut post_means = vec![0.0; k * c];
    let mut w = vec![0.0; k];
    let mut mean = vec![0.0; c];
    let mut g_mean = vec![0.0; c];
    let mut g_s2 = 0.0;

    for i in 0..policy.l {
        let xs = policy.chunk_origin(i);
        let xc = &x_t[i * c..(i + 1) * c];
        for kk in 0..k {
            for j in 0..c {
                mux[kk * c + j] = xs[j] - sigma_src * policy.means[(i * k + kk) * c + j];
            }
        }
        let zeta = bayes_stats(xs, policy.t_src, xc, t, &mut nu);
        let d = chunk_posterior(
            &policy.logits[i * k..(i + 1) * k],
            &mux,
            s_x2,
            &nu,
            zeta,
            &mut post_logits,
            &mut post_means,
        );
        softmax_into(&post_logits, &mut w);
        mean.iter_mut().for_each(|m| *m = 0.0);
        for kk in 0..k {
            for j in 0..c {
                mean[j] += w[kk] * post_means[kk * c + j];
            }
        }
        for j in 0..c {
            out[i * c + j] = (xc[j] - mean[j]) / t;
            g_mean[j] = -cotangent[i * c + j] / t;
        }
        let g_dot_mean: f64 = g_mean.iter().zip(&mean).map(|(a, b)| a * b).sum();
        for kk in 0..k {
            let pm = &post_means[kk * c..(kk + 1) * c];
            let mx = &mux[kk * c..(kk + 1) * c];
            // softmax pullback onto the posterior logit
            let g_dot_pm: f64 = g_mean.iter().zip(pm).map(|(a, b)| a * b).sum();
            let r = w[kk] * (g_dot_pm - g_dot_mean);
            grad.logits[i * k + kk] += r;
            let mut quad = 0.0;
            for j in 0..c {
                quad += mx[j] * (nu[j] - 0.5 * zeta * mx[j]);
                let g_mux = w[kk] * g_mean[j] / d + r * (nu[j] - zeta * mx[j]) / d;
                grad.means[(i * k + kk) * c + j] += -sigma_src * g_mux;
                g_s2 += w[kk] * g_mean[j] * (nu[j] - zeta * pm[j]) / d;
            }
            g_s2 -= r * zeta * quad / (d * d);
        }
    }
    grad.log_s += 2.0 * s_x2 * g_s2;
    Ok(out)
}

/// Bernoulli component dropout shared across chunks.
///
/// Returns the masked policy and the keep-mask. Masked logits become `-inf`;
/// if every component is dropped the mask is redrawn.
pub fn gm_dropout<R: Rng + ?Sized>(policy: &FactorGm, rate: f64, rng: &mut R) -> Result<(FactorGm, Vec<bool>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::domain(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if rate == 0.0 {
        return Ok((policy.clone(), vec![true; policy.k]));
    }
    let mask = loop {
        let m: Vec<bool> = (0..policy.k).map(|_| rng.random::<f64>() >= rate).collect();
        if m.iter().any(|&b| b) {
            break m;
        }
    };
    let mut out = policy.clone();
    for row in out.logits.chunks_mut(policy.k) {
        for (a, &keep) in row.iter_mut().zip(&mask) {
            if !keep {
                *a = f64::NEG_INFINITY;
            }
        }
    }
    Ok((out, mask))
}
