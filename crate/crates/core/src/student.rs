//! The policy generator: a small MLP mapping `(x_src, t_src, c)` to policy
//! parameters, with exact reverse-mode gradients through the policy velocity.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::all_finite;
use crate::ode::{PolicyProvider, RolloutConfig, WindowPoint};
use crate::policy::{PolicyHandle, PolicyHead};
use crate::rng::{keyed, normal_vec, streams};
use crate::schedule::TimeShift;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    /// Derivative given pre-activation `z` and output `y`.
    #[inline]
    fn grad(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

/// Head initialization. `Zero` leaves every mixture component identical, and
/// identical components receive identical gradients; `Spread` breaks the tie by
/// drawing the u-space mean biases of a GM head from `N(0, mean_std^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HeadInit {
    #[default]
    Zero,
    Spread { mean_std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Number of sinusoidal time frequencies, geometric in `[1, 1000]`.
    #[serde(default = "default_freqs")]
    pub time_freqs: usize,
    /// One-hot condition classes; 0 disables the condition input.
    #[serde(default)]
    pub conditions: usize,
    /// Feed the network input straight into the head next to the last hidden layer.
    #[serde(default = "default_skip")]
    pub input_skip: bool,
    #[serde(default)]
    pub head_init: HeadInit,
    pub head: PolicyHead,
}

fn default_hidden() -> Vec<usize> {
    vec![256, 256, 256]
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_freqs() -> usize {
    16
}

fn default_skip() -> bool {
    true
}

impl StudentConfig {
    pub fn new(dim: usize, head: PolicyHead) -> Self {
        StudentConfig {
            dim,
            hidden: default_hidden(),
            activation: default_activation(),
            time_freqs: default_freqs(),
            conditions: 0,
            input_skip: default_skip(),
            head_init: HeadInit::Zero,
            head,
        }
    }

    fn skips(&self) -> bool {
        self.input_skip && !self.hidden.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("student dimension must be positive".into()));
        }
        if let HeadInit::Spread { mean_std } = self.head_init {
            if !(mean_std >= 0.0 && mean_std.is_finite()) {
                return Err(Error::Config(format!("head_init mean_std must be non-negative, got {mean_std}")));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        self.head.validate(self.dim)
    }

    pub fn input_size(&self) -> usize {
        self.dim + 2 * self.time_freqs + self.conditions
    }

    pub fn output_size(&self) -> usize {
        self.head.output_size(self.dim)
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_size()];
        sizes.extend(&self.hidden);
        sizes.push(self.output_size());
        let mut dims: Vec<(usize, usize)> = sizes.windows(2).map(|w| (w[0], w[1])).collect();
        if self.skips() {
            dims.last_mut().expect("head layer").0 += self.input_size();
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    fn frequencies(&self) -> Vec<f64> {
        match self.time_freqs {
            0 => Vec::new(),
            1 => vec![1.0],
            f => (0..f).map(|i| 1000f64.powf(i as f64 / (f - 1) as f64)).collect(),
        }
    }

    /// Network input row for one origin.
    pub fn features(&self, x_src: &[f64], t_src: f64, c: u32) -> Result<Vec<f64>> {
        check_dim(self.dim, x_src.len())?;
        if self.conditions > 0 && c as usize >= self.conditions {
            return Err(Error::UnknownCondition(c));
        }
        let mut row = Vec::with_capacity(self.input_size());
        row.extend_from_slice(x_src);
        let freqs = self.frequencies();
        row.extend(freqs.iter().map(|w| (w * t_src).sin()));
        row.extend(freqs.iter().map(|w| (w * t_src).cos()));
        if self.conditions > 0 {
            row.extend((0..self.conditions).map(|i| if i == c as usize { 1.0 } else { 0.0 }));
        }
        Ok(row)
    }
}

/// Hidden layers get LeCun-normal weights; head weights are zero and head
/// biases follow `cfg.head_init`.
pub fn init_params(cfg: &StudentConfig, seed: u64) -> Vec<f64> {
    let mut rng = keyed(seed, 0, 0, streams::INIT);
    let dims = cfg.layer_dims();
    let mut params = Vec::with_capacity(cfg.param_count());
    for (li, &(i, o)) in dims.iter().enumerate() {
        if li + 1 == dims.len() {
            params.extend(std::iter::repeat_n(0.0, i * o));
            let mut bias = vec![0.0; o];
            if let (HeadInit::Spread { mean_std }, PolicyHead::Gm { l, k, c }) = (cfg.head_init, cfg.head) {
                let mut head_rng = keyed(seed, 0, 1, streams::INIT);
                let means = &mut bias[l * k..l * k + l * k * c];
                for (m, z) in means.iter_mut().zip(normal_vec(&mut head_rng, l * k * c)) {
                    *m = mean_std * z;
                }
            }
            params.extend(bias);
        } else {
            let scale = (1.0 / i as f64).sqrt();
            params.extend(normal_vec(&mut rng, i * o).into_iter().map(|v| v * scale));
            params.extend(std::iter::repeat_n(0.0, o));
        }
    }
    params
}

struct Layer<'a> {
    w: ArrayView2<'a, f64>,
    b: ArrayView2<'a, f64>,
    w_off: usize,
    b_off: usize,
}

fn layers<'a>(cfg: &StudentConfig, params: &'a [f64]) -> Result<Vec<Layer<'a>>> {
    check_dim(cfg.param_count(), params.len())?;
    let mut off = 0;
    let mut out = Vec::new();
    for (i, o) in cfg.layer_dims() {
        let w = ArrayView2::from_shape((i, o), &params[off..off + i * o]).expect("layer shape");
        let b = ArrayView2::from_shape((1, o), &params[off + i * o..off + i * o + o]).expect("bias shape");
        out.push(Layer {
            w,
            b,
            w_off: off,
            b_off: off + i * o,
        });
        off += i * o + o;
    }
    Ok(out)
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    /// `acts[0]` is the input, `acts[i]` the output of hidden layer `i`.
    acts: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    /// Head input: last hidden activation, plus the network input when skipping.
    head_in: Array2<f64>,
}

/// Batched forward pass: one row of head outputs per input row.
pub fn head_outputs(cfg: &StudentConfig, params: &[f64], inputs: Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
    let ls = layers(cfg, params)?;
    let n = ls.len();
    let mut acts = vec![inputs];
    let mut pre = Vec::with_capacity(n - 1);
    for (li, layer) in ls.iter().enumerate() {
        if li + 1 == n {
            let head_in = if cfg.skips() {
                ndarray::concatenate(Axis(1), &[acts[li].view(), acts[0].view()]).expect("rows agree")
            } else {
                acts[li].clone()
            };
            let z = head_in.dot(&layer.w) + &layer.b;
            if !z.iter().all(|v| v.is_finite()) {
                return Err(Error::non_finite("student head output"));
            }
            return Ok((z, ForwardCache { acts, pre, head_in }));
        }
        let z = acts[li].dot(&layer.w) + &layer.b;
        let h = z.mapv(|v| cfg.activation.apply(v));
        pre.push(z);
        acts.push(h);
    }
    unreachable!("network has at least one layer")
}

/// Backward pass for `d(loss)/d(head outputs)`; returns the flat parameter gradient.
pub fn backward(cfg: &StudentConfig, params: &[f64], cache: &ForwardCache, d_out: Array2<f64>) -> Result<Vec<f64>> {
    let ls = layers(cfg, params)?;
    let mut grad = vec![0.0; params.len()];
    let mut dz = d_out;
    for li in (0..ls.len()).rev() {
        let layer = &ls[li];
        let a_prev = if li + 1 == ls.len() { &cache.head_in } else { &cache.acts[li] };
        let dw = a_prev.t().dot(&dz);
        let db = dz.sum_axis(Axis(0));
        let (i, o) = layer.w.dim();
        grad[layer.w_off..layer.w_off + i * o].copy_from_slice(dw.as_slice().expect("standard layout"));
        grad[layer.b_off..layer.b_off + o].copy_from_slice(db.as_slice().expect("standard layout"));
        if li > 0 {
            let mut dh = dz.dot(&layer.w.t());
            if li + 1 == ls.len() && cfg.skips() {
                let width = cache.acts[li].ncols();
                dh = dh.slice(ndarray::s![.., ..width]).to_owned();
            }
            let z = &cache.pre[li - 1];
            let h = &cache.acts[li];
            ndarray::Zip::from(&mut dh)
                .and(z)
                .and(h)
                .for_each(|d, &zv, &hv| *d *= cfg.activation.grad(zv, hv));
            dz = dh;
        }
    }
    Ok(grad)
}

fn input_matrix(cfg: &StudentConfig, rows: &[Vec<f64>]) -> Array2<f64> {
    let flat: Vec<f64> = rows.concat();
    Array2::from_shape_vec((rows.len(), cfg.input_size()), flat).expect("input shape")
}

/// Raw head outputs for a single origin.
pub fn raw_head(cfg: &StudentConfig, params: &[f64], x_src: &[f64], t_src: f64, c: u32) -> Result<Vec<f64>> {
    let row = cfg.features(x_src, t_src, c)?;
    let (out, _) = head_outputs(cfg, params, input_matrix(cfg, &[row]))?;
    Ok(out.row(0).to_vec())
}

/// Generate the policy for segment `[tau_dst, tau_src]` at origin `x_src`.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    cfg: &StudentConfig,
    params: &[f64],
    x_src: &[f64],
    tau_src: f64,
    tau_dst: f64,
    c: u32,
    shift: TimeShift,
) -> Result<PolicyHandle> {
    if !all_finite(x_src) {
        return Err(Error::non_finite("student input state"));
    }
    let raw = raw_head(cfg, params, x_src, shift.apply(tau_src)?, c)?;
    PolicyHandle::from_head(cfg.head, &raw, x_src, tau_src, tau_dst, shift)
}

/// Batched policy generation; rows share nothing but the parameters.
pub fn forward_batch(
    cfg: &StudentConfig,
    params: &[f64],
    origins: &[(Vec<f64>, f64, f64, u32)],
    shift: TimeShift,
) -> Result<Vec<PolicyHandle>> {
    if origins.is_empty() {
        return Ok(Vec::new());
    }
    let rows = origins
        .iter()
        .map(|(x, tau_src, _, c)| cfg.features(x, shift.apply_unchecked(*tau_src), *c))
        .collect::<Result<Vec<_>>>()?;
    let (out, _) = head_outputs(cfg, params, input_matrix(cfg, &rows))?;
    origins
        .iter()
        .zip(out.rows())
        .map(|((x, tau_src, tau_dst, _), raw)| {
            PolicyHandle::from_head(cfg.head, raw.as_slice().expect("row"), x, *tau_src, *tau_dst, shift)
        })
        .collect()
}

/// A trained student seen as a policy source for sampling.
pub struct StudentPolicy<'a> {
    pub cfg: &'a StudentConfig,
    pub params: &'a [f64],
    pub shift: TimeShift,
}

impl PolicyProvider for StudentPolicy<'_> {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn generate(&self, x_src: &[f64], tau_src: f64, tau_dst: f64, condition: u32) -> Result<PolicyHandle> {
        forward(self.cfg, self.params, x_src, tau_src, tau_dst, condition, self.shift)
    }
}

/// One matching term: the teacher velocity at `points[0]` against the
/// (window-averaged) learner velocity over `points`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchTerm {
    pub points: Vec<WindowPoint>,
    pub target: Vec<f64>,
    pub weight: f64,
}

/// All matching terms that share one policy generation.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingTarget {
    pub x_src: Vec<f64>,
    pub tau_src: f64,
    pub tau_dst: f64,
    pub condition: u32,
    pub terms: Vec<MatchTerm>,
}

/// Loss and gradient for a batch of detached matching targets.
///
/// `loss = (1 / batch_size) * sum_terms weight * 0.5 * |target - sum_j w_j pi(x_j, t_j)|^2`.
pub fn loss_and_grad(
    cfg: &StudentConfig,
    shift: TimeShift,
    params: &[f64],
    targets: &[MatchingTarget],
    batch_size: usize,
) -> Result<(f64, Vec<f64>)> {
    if targets.is_empty() {
        return Ok((0.0, vec![0.0; params.len()]));
    }
    let rows = targets
        .iter()
        .map(|tg| cfg.features(&tg.x_src, shift.apply_unchecked(tg.tau_src), tg.condition))
        .collect::<Result<Vec<_>>>()?;
    let (out, cache) = head_outputs(cfg, params, input_matrix(cfg, &rows))?;
    let norm = 1.0 / batch_size.max(1) as f64;
    let mut d_out = Array2::<f64>::zeros(out.dim());
    let mut loss = 0.0;
    for (r, tg) in targets.iter().enumerate() {
        let raw = out.row(r);
        let policy = PolicyHandle::from_head(cfg.head, raw.as_slice().expect("row"), &tg.x_src, tg.tau_src, tg.tau_dst, shift)?;
        let mut acc = policy.zero_grad();
        for term in &tg.terms {
            let mut avg = vec![0.0; cfg.dim];
            for p in &term.points {
                let v = policy.velocity(&p.x, p.t)?;
                for (a, vi) in avg.iter_mut().zip(&v) {
                    *a += p.weight * vi;
                }
            }
            let resid: Vec<f64> = avg.iter().zip(&term.target).map(|(a, u)| a - u).collect();
            loss += norm * term.weight * 0.5 * resid.iter().map(|r| r * r).sum::<f64>();
            for p in &term.points {
                let cot: Vec<f64> = resid.iter().map(|r| norm * term.weight * p.weight * r).collect();
                policy.velocity_vjp(&p.x, p.t, &cot, &mut acc)?;
            }
        }
        let mut row = d_out.row_mut(r);
        acc.write_raw(row.as_slice_mut().expect("row"));
    }
    if !loss.is_finite() {
        return Err(Error::non_finite("matching loss"));
    }
    let grad = backward(cfg, params, &cache, d_out)?;
    if !all_finite(&grad) {
        return Err(Error::non_finite("parameter gradient"));
    }
    Ok((loss, grad))
}

/// Full-precision Adam without weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

pub const EMA_GAMMA: f64 = 7.0;

/// `beta = (1 - 1/iteration)^(gamma + 1)`.
pub fn ema_beta(iteration: u64, gamma: f64) -> f64 {
    (1.0 - 1.0 / iteration.max(1) as f64).powf(gamma + 1.0)
}

pub fn ema_update(shadow: &mut [f64], params: &[f64], iteration: u64, gamma: f64) {
    let beta = ema_beta(iteration, gamma);
    for (s, &p) in shadow.iter_mut().zip(params) {
        *s = beta * *s + (1.0 - beta) * p;
    }
}

/// Parameters, optimizer moments and EMA shadow of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Vec<f64>,
    pub ema_params: Vec<f64>,
    pub adam: Adam,
    pub iteration: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(cfg: &StudentConfig, seed: u64) -> Self {
        let params = init_params(cfg, seed);
        TrainState {
            ema_params: params.clone(),
            adam: Adam::new(params.len()),
            params,
            iteration: 0,
            seed,
        }
    }

    /// One Adam step followed by the EMA update.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) {
        self.iteration += 1;
        self.adam.step(&mut self.params, grad, lr);
        ema_update(&mut self.ema_params, &self.params, self.iteration, EMA_GAMMA);
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Sampling settings stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingMeta {
    pub shift: TimeShift,
    pub nfe: usize,
    pub final_step_scale: f64,
    pub rollout: RolloutConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub student_config: StudentConfig,
    pub params: Vec<f64>,
    pub ema_params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub adam_step: u64,
    pub iteration: u64,
    pub seed: u64,
    pub sampling: SamplingMeta,
}

impl Checkpoint {
    pub fn from_state(cfg: &StudentConfig, state: &TrainState, sampling: SamplingMeta) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            student_config: cfg.clone(),
            params: state.params.clone(),
            ema_params: state.ema_params.clone(),
            adam_m: state.adam.m.clone(),
            adam_v: state.adam.v.clone(),
            adam_step: state.adam.step,
            iteration: state.iteration,
            seed: state.seed,
            sampling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", self.version)));
        }
        self.student_config.validate()?;
        let n = self.student_config.param_count();
        for (name, v) in [
            ("params", &self.params),
            ("ema_params", &self.ema_params),
            ("adam_m", &self.adam_m),
            ("adam_v", &self.adam_v),
        ] {
            if v.len() != n {
                return Err(Error::Config(format!("checkpoint {name} has {} entries, expected {n}", v.len())));
            }
            if !all_finite(v) {
                return Err(Error::Config(format!("checkpoint {name} is not finite")));
            }
        }
        Ok(())
    }

    pub fn to_state(&self) -> TrainState {
        let mut adam = Adam::new(self.params.len());
        adam.m = self.adam_m.clone();
        adam.v = self.adam_v.clone();
        adam.step = self.adam_step;
        TrainState {
            params: self.params.clone(),
            ema_params: self.ema_params.clone(),
            adam,
            iteration: self.iteration,
            seed: self.seed,
        }
    }
}
