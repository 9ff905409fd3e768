//! On-policy imitation distillation.
//!
//! Every batch element draws from its own keyed random streams, so a step is
//! reproducible regardless of evaluation order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{micro_window_points, rollout_state};
use crate::policy::PolicyHandle;
use crate::rng::{keyed, normal_vec, streams, StreamRng};
use crate::schedule::{forward_diffuse, make_step_grid, StepGrid, TimeShift};
use crate::student::{forward_batch, loss_and_grad, MatchTerm, MatchingTarget, StudentConfig, TrainState};
use crate::teacher::{Teacher, ToyDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One segment per element; the origin comes from a detached rollout from noise.
    Simple,
    /// Origin from forward diffusion of a data draw.
    DataDependent,
    /// Full multi-segment sweep from noise.
    DataFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Mixing {
    Off,
    /// Teacher ratio decays linearly from 1 to 0.
    Scheduled { decay_iterations: u64 },
    /// Constant teacher ratio; 1 is pure behavior cloning.
    Fixed { ratio: f64 },
}

impl Mixing {
    /// Teacher ratio at a 0-based iteration, or `None` when mixing is off.
    pub fn ratio(&self, iteration: u64) -> Option<f64> {
        match *self {
            Mixing::Off => None,
            Mixing::Scheduled { decay_iterations } => {
                if decay_iterations == 0 {
                    Some(0.0)
                } else {
                    Some((1.0 - iteration as f64 / decay_iterations as f64).max(0.0))
                }
            }
            Mixing::Fixed { ratio } => Some(ratio),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub nfe: usize,
    pub shift: TimeShift,
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub n_intermediate: usize,
    pub window_dtau: f64,
    pub substep: f64,
    pub dropout_rate: f64,
    pub mode: Mode,
    pub mixing: Mixing,
    pub n_teacher_steps: usize,
    /// Iterations of pure behavior cloning before the regular schedule.
    pub warmup_bc_iterations: u64,
    pub final_step_scale: f64,
    /// Smallest raw time at which matching terms are placed. `0` keeps the
    /// schedule floor. The DX loss scales like `1 / t^2` near zero, so DX
    /// students need a value around 0.05 to train stably.
    pub match_tau_floor: f64,
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            nfe: 1,
            shift: TimeShift::default(),
            lr: 1e-3,
            batch_size: 64,
            iterations: 10_000,
            n_intermediate: 2,
            window_dtau: 3.0 / 128.0,
            substep: 1.0 / 128.0,
            dropout_rate: 0.05,
            mode: Mode::DataDependent,
            mixing: Mixing::Off,
            n_teacher_steps: 4,
            warmup_bc_iterations: 0,
            final_step_scale: 1.0,
            match_tau_floor: 0.0,
            eval_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.nfe == 0 {
            return bad("nfe must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.n_intermediate == 0 {
            return bad("n_intermediate must be at least 1".into());
        }
        if self.n_teacher_steps == 0 {
            return bad("n_teacher_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.window_dtau >= 0.0 && self.window_dtau <= 1.0) {
            return bad(format!("window_dtau must lie in [0, 1], got {}", self.window_dtau));
        }
        if !(self.substep > 0.0 && self.substep <= 1.0) {
            return bad(format!("substep must lie in (0, 1], got {}", self.substep));
        }
        if !(0.0..0.5).contains(&self.match_tau_floor) {
            return bad(format!("match_tau_floor must lie in [0, 0.5), got {}", self.match_tau_floor));
        }
        if !(self.final_step_scale > 0.0 && self.final_step_scale <= 1.0) {
            return bad(format!("final_step_scale must lie in (0, 1], got {}", self.final_step_scale));
        }
        match self.mixing {
            Mixing::Scheduled { decay_iterations } if decay_iterations > self.iterations => {
                bad(format!(
                    "decay_iterations ({decay_iterations}) exceeds iterations ({})",
                    self.iterations
                ))
            }
            Mixing::Fixed { ratio } if !(0.0..=1.0).contains(&ratio) => bad(format!("mix ratio {ratio} outside [0, 1]")),
            _ => Ok(()),
        }
    }

    /// Teacher ratio used at `iteration`, or `None` for plain on-policy steps.
    pub fn teacher_ratio(&self, iteration: u64) -> Option<f64> {
        if iteration < self.warmup_bc_iterations {
            Some(1.0)
        } else {
            self.mixing.ratio(iteration)
        }
    }

    pub fn grid(&self) -> Result<StepGrid> {
        make_step_grid(self.nfe, self.final_step_scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tag {
    Teacher,
    Policy,
}

/// One teacher step `[b, a]` in raw time, `a >= b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherStep {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub hi: f64,
    pub lo: f64,
    pub tag: Tag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub teacher_ratio: f64,
    pub tau_src: f64,
    pub tau_dst: f64,
    /// Ordered from `tau_src` down to `tau_dst`.
    pub steps: Vec<TeacherStep>,
}

impl MixPlan {
    pub fn teacher_length(&self) -> f64 {
        self.steps.iter().map(|s| s.a - s.b).sum()
    }

    /// Ordered, merged partition of `[tau_dst, tau_src]` into tagged pieces.
    pub fn partition(&self) -> Vec<Piece> {
        let mut out: Vec<Piece> = Vec::new();
        let mut push = |hi: f64, lo: f64, tag: Tag| {
            if hi <= lo {
                return;
            }
            match out.last_mut() {
                Some(p) if p.tag == tag => p.lo = lo,
                _ => out.push(Piece { hi, lo, tag }),
            }
        };
        let mut cur = self.tau_src;
        for s in &self.steps {
            push(cur, s.a, Tag::Policy);
            push(s.a.min(cur), s.b, Tag::Teacher);
            cur = s.b;
        }
        push(cur, self.tau_dst, Tag::Policy);
        if out.is_empty() {
            out.push(Piece {
                hi: self.tau_src,
                lo: self.tau_dst,
                tag: Tag::Policy,
            });
        }
        out
    }
}

/// Place `n_teacher_steps` teacher steps of total length `ratio * (tau_src - tau_dst)`.
///
/// Start offsets use the uniforms `us` (one per step, drawn by the caller so that
/// ratio 0 reproduces plain on-policy sampling); lengths split the teacher budget
/// at uniform cut points drawn from `rng`.
pub fn make_mix_plan_with<R: Rng + ?Sized>(ratio: f64, tau_src: f64, tau_dst: f64, us: &[f64], rng: &mut R) -> Result<MixPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::domain(format!("teacher ratio {ratio} outside [0, 1]")));
    }
    if us.is_empty() {
        return Err(Error::domain("mix plan needs at least one teacher step"));
    }
    let delta = tau_src - tau_dst;
    let lt = ratio * delta;
    let lp = delta - lt;
    let n = us.len();
    let mut cuts: Vec<f64> = (0..n - 1).map(|_| rng.random::<f64>() * lt).collect();
    cuts.sort_by(f64::total_cmp);
    let mut lengths = Vec::with_capacity(n);
    let mut prev = 0.0;
    for &c in &cuts {
        lengths.push(c - prev);
        prev = c;
    }
    lengths.push(lt - prev);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| us[i].total_cmp(&us[j]).then(i.cmp(&j)));
    let mut above = 0.0;
    let mut steps = Vec::with_capacity(n);
    for (rank, &i) in order.iter().enumerate() {
        let a = tau_src - lp * us[i] - above;
        let b = (a - lengths[rank]).max(tau_dst);
        above += lengths[rank];
        steps.push(TeacherStep { a, b });
    }
    Ok(MixPlan {
        teacher_ratio: ratio,
        tau_src,
        tau_dst,
        steps,
    })
}

pub fn make_mix_plan<R: Rng + ?Sized>(
    ratio: f64,
    tau_src: f64,
    tau_dst: f64,
    n_teacher_steps: usize,
    rng: &mut R,
) -> Result<MixPlan> {
    let us: Vec<f64> = (0..n_teacher_steps).map(|_| rng.random::<f64>()).collect();
    make_mix_plan_with(ratio, tau_src, tau_dst, &us, rng)
}

struct ElementRngs {
    noise: StreamRng,
    data: StreamRng,
    segment: StreamRng,
    intermediate: StreamRng,
    dropout: StreamRng,
    mix: StreamRng,
    condition: StreamRng,
}

impl ElementRngs {
    fn new(seed: u64, iteration: u64, element: u64) -> Self {
        let k = |s| keyed(seed, iteration, element, s);
        ElementRngs {
            noise: k(streams::NOISE),
            data: k(streams::DATA),
            segment: k(streams::SEGMENT),
            intermediate: k(streams::INTERMEDIATE),
            dropout: k(streams::DROPOUT),
            mix: k(streams::MIX_LENGTHS),
            condition: k(streams::CONDITION),
        }
    }
}

/// Detached matching targets of one step plus bookkeeping.
#[derive(Debug, Clone)]
pub struct StepTargets {
    pub targets: Vec<MatchingTarget>,
    pub teacher_queries: usize,
    pub teacher_ratio: Option<f64>,
    /// Dropout masks applied to the detached rollout policies, one per generated policy.
    pub dropout_masks: Vec<Vec<bool>>,
    /// Segment weight of every target.
    pub segment_weights: Vec<f64>,
}

struct Ctx<'a, T: Teacher + ?Sized> {
    teacher: &'a T,
    cfg: &'a TrainConfig,
    tau_floor: f64,
    queries: usize,
}

impl<T: Teacher + ?Sized> Ctx<'_, T> {
    fn query(&mut self, x: &[f64], tau: f64, c: u32) -> Result<Vec<f64>> {
        self.queries += 1;
        self.teacher.velocity(x, self.cfg.shift.apply_unchecked(tau), c)
    }

    /// On-policy terms: independent detached rollouts from the origin.
    fn on_policy_terms(
        &mut self,
        pi: &PolicyHandle,
        pi_d: &PolicyHandle,
        c: u32,
        weight: f64,
        rngs: &mut ElementRngs,
    ) -> Result<Vec<MatchTerm>> {
        let (src, dst) = (pi.tau_src, pi.tau_dst);
        let floor = self.tau_floor.min(src);
        let mut terms = Vec::with_capacity(self.cfg.n_intermediate);
        for _ in 0..self.cfg.n_intermediate {
            let u: f64 = rngs.intermediate.random();
            let tau = (src - (src - dst) * u).max(floor);
            let x = rollout_state(pi_d, &pi.x_src, src, tau, self.cfg.substep)?;
            let target = self.query(&x, tau, c)?;
            let points = micro_window_points(pi, &x, tau, self.cfg.window_dtau, self.cfg.substep)?;
            terms.push(MatchTerm { points, target, weight });
        }
        Ok(terms)
    }

    /// Mixed terms: teacher steps interleaved with detached policy segments.
    fn mixed_terms(
        &mut self,
        pi: &PolicyHandle,
        pi_d: &PolicyHandle,
        c: u32,
        weight: f64,
        ratio: f64,
        rngs: &mut ElementRngs,
    ) -> Result<Vec<MatchTerm>> {
        let n = self.cfg.n_teacher_steps;
        let us: Vec<f64> = (0..n).map(|_| rngs.intermediate.random::<f64>()).collect();
        let plan = make_mix_plan_with(ratio, pi.tau_src, pi.tau_dst, &us, &mut rngs.mix)?;
        let mut anchor_x = pi.x_src.clone();
        let mut anchor_tau = pi.tau_src;
        let floor = self.tau_floor.min(pi.tau_src);
        let mut terms = Vec::with_capacity(n);
        for step in &plan.steps {
            let a = step.a.min(anchor_tau).max(floor);
            let x_a = if a < anchor_tau {
                rollout_state(pi_d, &anchor_x, anchor_tau, a, self.cfg.substep)?
            } else {
                anchor_x.clone()
            };
            let target = self.query(&x_a, a, c)?;
            // the anchor never drops below the time floor
            let b = step.b.max(floor).min(a);
            let len = a - b;
            let window = (step.a - step.b).max(self.cfg.window_dtau);
            let points = micro_window_points(pi, &x_a, a, window, self.cfg.substep)?;
            if len > 0.0 {
                let h = self.cfg.shift.apply_unchecked(a) - self.cfg.shift.apply_unchecked(b);
                anchor_x = x_a.iter().zip(&target).map(|(x, u)| x - h * u).collect();
                anchor_tau = b;
            }
            terms.push(MatchTerm { points, target, weight });
        }
        Ok(terms)
    }
}

/// Build the detached matching targets of training step `iteration` (0-based).
pub fn build_targets<T: Teacher + ?Sized>(
    scfg: &StudentConfig,
    params: &[f64],
    teacher: &T,
    cfg: &TrainConfig,
    data: Option<&ToyDataset>,
    iteration: u64,
) -> Result<StepTargets> {
    let grid = cfg.grid()?;
    let ratio = cfg.teacher_ratio(iteration);
    let dim = scfg.dim;
    if teacher.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: teacher.dim(),
        });
    }
    let class_ids: Vec<u32> = if scfg.conditions == 0 {
        vec![0]
    } else {
        (0..scfg.conditions as u32).collect()
    };
    if cfg.mode == Mode::DataDependent {
        let ds = data.ok_or_else(|| Error::Config("data-dependent training needs a dataset".into()))?;
        if ds.is_empty() || ds.dim() != dim {
            return Err(Error::Config(format!(
                "dataset has dimension {}, student expects {dim}",
                ds.dim()
            )));
        }
    }

    let b = cfg.batch_size;
    let mut rngs: Vec<ElementRngs> = (0..b as u64).map(|e| ElementRngs::new(cfg.seed, iteration, e)).collect();
    let mut conds = Vec::with_capacity(b);
    let mut segs = Vec::with_capacity(b);
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(b);
    for r in rngs.iter_mut() {
        let mut c = class_ids[r.condition.random_range(0..class_ids.len())];
        let (seg, x) = match cfg.mode {
            Mode::Simple => (r.segment.random_range(0..grid.nfe), normal_vec(&mut r.noise, dim)),
            Mode::DataFree => (usize::MAX, normal_vec(&mut r.noise, dim)),
            Mode::DataDependent => {
                let ds = data.expect("checked above");
                let seg = grid.snap_up(r.segment.random::<f64>());
                let row = r.data.random_range(0..ds.len());
                if class_ids.len() > 1 {
                    if let Some(labels) = &ds.labels {
                        c = labels[row];
                        if !class_ids.contains(&c) {
                            return Err(Error::UnknownCondition(c));
                        }
                    }
                }
                let eps = normal_vec(&mut r.noise, dim);
                let t_src = cfg.shift.apply_unchecked(grid.segment(seg).0);
                (seg, forward_diffuse(&ds.samples[row], &eps, t_src)?)
            }
        };
        conds.push(c);
        segs.push(seg);
        xs.push(x);
    }

    let mut ctx = Ctx {
        teacher,
        cfg,
        tau_floor: cfg.shift.tau_floor().max(cfg.match_tau_floor),
        queries: 0,
    };
    let mut out = StepTargets {
        targets: Vec::new(),
        teacher_queries: 0,
        teacher_ratio: ratio,
        dropout_masks: Vec::new(),
        segment_weights: Vec::new(),
    };
    for (k, (tau_src, tau_dst)) in grid.segments().enumerate() {
        let active: Vec<usize> = (0..b)
            .filter(|&e| match cfg.mode {
                Mode::Simple => segs[e] >= k,
                Mode::DataDependent => segs[e] == k,
                Mode::DataFree => true,
            })
            .collect();
        if active.is_empty() {
            continue;
        }
        let origins: Vec<(Vec<f64>, f64, f64, u32)> =
            active.iter().map(|&e| (xs[e].clone(), tau_src, tau_dst, conds[e])).collect();
        let policies = forward_batch(scfg, params, &origins, cfg.shift)?;
        for (&e, pi) in active.iter().zip(&policies) {
            let r = &mut rngs[e];
            let pi_d = if cfg.dropout_rate > 0.0 {
                let (d, mask) = pi.with_dropout(cfg.dropout_rate, &mut r.dropout)?;
                out.dropout_masks.push(mask);
                d
            } else {
                pi.clone()
            };
            let is_target = cfg.mode == Mode::DataFree || segs[e] == k;
            if is_target {
                let weight = if cfg.mode == Mode::DataFree { tau_src - tau_dst } else { 1.0 };
                let terms = match ratio {
                    Some(rt) => ctx.mixed_terms(pi, &pi_d, conds[e], weight, rt, r)?,
                    None => ctx.on_policy_terms(pi, &pi_d, conds[e], weight, r)?,
                };
                out.segment_weights.push(weight);
                out.targets.push(MatchingTarget {
                    x_src: xs[e].clone(),
                    tau_src,
                    tau_dst,
                    condition: conds[e],
                    terms,
                });
            }
            let continues = match cfg.mode {
                Mode::Simple => segs[e] > k,
                Mode::DataFree => k + 1 < grid.nfe,
                Mode::DataDependent => false,
            };
            if continues {
                xs[e] = rollout_state(&pi_d, &xs[e], tau_src, tau_dst, cfg.substep)?;
            }
        }
    }
    out.teacher_queries = ctx.queries;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// 1-based iteration after the update.
    pub iteration: u64,
    pub loss: f64,
    pub teacher_queries: usize,
    pub teacher_ratio: Option<f64>,
}

fn tag_iteration(e: Error, iteration: u64) -> Error {
    match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("iteration {iteration}: {context}"),
        },
        other => other,
    }
}

/// One optimizer step.
pub fn train_step<T: Teacher + ?Sized>(
    scfg: &StudentConfig,
    state: &mut TrainState,
    teacher: &T,
    cfg: &TrainConfig,
    data: Option<&ToyDataset>,
) -> Result<StepReport> {
    let it = state.iteration;
    let step = build_targets(scfg, &state.params, teacher, cfg, data, it).map_err(|e| tag_iteration(e, it + 1))?;
    let (loss, grad) =
        loss_and_grad(scfg, cfg.shift, &state.params, &step.targets, cfg.batch_size).map_err(|e| tag_iteration(e, it + 1))?;
    state.apply_gradient(&grad, cfg.lr);
    Ok(StepReport {
        iteration: state.iteration,
        loss,
        teacher_queries: step.teacher_queries,
        teacher_ratio: step.teacher_ratio,
    })
}

/// Matching loss on a fixed, seed-keyed batch without updating anything.
pub fn heldout_loss<T: Teacher + ?Sized>(
    scfg: &StudentConfig,
    params: &[f64],
    teacher: &T,
    cfg: &TrainConfig,
    data: Option<&ToyDataset>,
    seed: u64,
) -> Result<f64> {
    let eval_cfg = TrainConfig {
        seed,
        dropout_rate: 0.0,
        mixing: Mixing::Off,
        warmup_bc_iterations: 0,
        ..cfg.clone()
    };
    let step = build_targets(scfg, params, teacher, &eval_cfg, data, u64::MAX)?;
    Ok(loss_and_grad(scfg, cfg.shift, params, &step.targets, cfg.batch_size)?.0)
}

/// Run `state` forward until `cfg.iterations`, calling `on_step` after each update.
pub fn train<T, F>(
    scfg: &StudentConfig,
    state: &mut TrainState,
    teacher: &T,
    cfg: &TrainConfig,
    data: Option<&ToyDataset>,
    mut on_step: F,
) -> Result<()>
where
    T: Teacher + ?Sized,
    F: FnMut(&StepReport, &TrainState) -> Result<()>,
{
    cfg.validate()?;
    while state.iteration < cfg.iterations {
        let report = train_step(scfg, state, teacher, cfg, data)?;
        on_step(&report, state)?;
    }
    Ok(())
}
