//! `policyflow` command-line front end: train, sample, evaluate, fit and plot.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use policyflow::config::RunConfig;
use policyflow::distill::train_step;
use policyflow::io::{read_json, read_samples_csv, write_json, write_samples_csv, write_trajectory_csv};
use policyflow::metrics::{evaluate, EvalRequest, DEFAULT_PROJECTIONS};
use policyflow::policy::{random_smooth_targets, toyfit};
use policyflow::sampling::{evaluate_student, student_batch, teacher_batch};
use policyflow::schedule::make_step_grid;
use policyflow::student::{Checkpoint, SamplingMeta, TrainState};

const ARTIFACT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "policyflow", version, about = "Policy-based few-step flow distillation on toy densities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distill a student from the configured teacher.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw samples from a trained student.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of policy generations; defaults to the training value.
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write one trajectory CSV per sample into this directory.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        /// Use the raw weights instead of the EMA weights.
        #[arg(long)]
        raw: bool,
    },
    /// Reference samples from the teacher ODE.
    TeacherSample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        substeps: Option<usize>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a sample file against a reference file.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Inputs were drawn from the same seeds; adds endpoint alignment.
        #[arg(long)]
        paired: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PROJECTIONS)]
        projections: usize,
        #[arg(long, default_value_t = 0)]
        projection_seed: u64,
    },
    /// Fit a mixture policy directly to random smooth trajectory constraints.
    Toyfit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// 2D scatter plot as SVG.
    Plot {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn meta_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn read_meta(csv: &Path) -> Option<Value> {
    let p = meta_path(csv);
    p.exists().then(|| read_json::<Value>(&p).ok()).flatten()
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let out = &cfg.io.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.write_resolved(&out.join("resolved_config.json"))?;

    let teacher = cfg.teacher_spec()?;
    let data = cfg.dataset(&teacher)?;
    let scfg = &cfg.student;
    let tcfg = &cfg.train;
    let mut state = match resume {
        Some(p) => {
            let ck: Checkpoint = read_json(p).with_context(|| format!("reading checkpoint {}", p.display()))?;
            ck.validate()?;
            if &ck.student_config != scfg {
                bail!("checkpoint student config differs from the run config");
            }
            ck.to_state()
        }
        None => TrainState::new(scfg, cfg.seed),
    };
    let sampling = SamplingMeta {
        shift: tcfg.shift,
        nfe: tcfg.nfe,
        final_step_scale: tcfg.final_step_scale,
        rollout: cfg.rollout,
    };
    let grid = tcfg.grid()?;
    let reference = if tcfg.eval_every > 0 {
        let (r, _) = teacher_batch(
            &teacher,
            cfg.eval.reference.teacher_substeps,
            tcfg.shift,
            cfg.eval.sample_seed,
            cfg.eval.n_samples,
        )?;
        Some(r)
    } else {
        None
    };

    let mut log = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
    let mut loss_sum = 0.0;
    let mut loss_count = 0u64;
    while state.iteration < tcfg.iterations {
        let rep = train_step(scfg, &mut state, &teacher, tcfg, data.as_ref())?;
        loss_sum += rep.loss;
        loss_count += 1;
        let at_cadence = tcfg.eval_every > 0 && rep.iteration % tcfg.eval_every == 0;
        if at_cadence || rep.iteration == tcfg.iterations {
            let metrics = match &reference {
                Some(r) => serde_json::to_value(evaluate_student(
                    scfg,
                    &state.ema_params,
                    tcfg.shift,
                    &grid,
                    &cfg.rollout,
                    r,
                    cfg.eval.sample_seed,
                    cfg.eval.n_projections,
                    cfg.seed,
                )?)?,
                None => Value::Null,
            };
            let line = json!({
                "version": ARTIFACT_VERSION,
                "iteration": rep.iteration,
                "loss": loss_sum / loss_count as f64,
                "teacher_ratio": rep.teacher_ratio,
                "metrics": metrics,
            });
            writeln!(log, "{line}")?;
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    log.flush()?;
    let ck = Checkpoint::from_state(scfg, &state, sampling);
    write_json(&out.join("checkpoint.json"), &ck)?;
    println!("trained {} iterations; artifacts in {}", state.iteration, out.display());
    Ok(())
}

fn sample(
    ckpt: &Path,
    nfe: Option<usize>,
    n: usize,
    seed: u64,
    out: &Path,
    trajectories: Option<&Path>,
    raw: bool,
) -> Result<()> {
    let ck: Checkpoint = read_json(ckpt).with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
    ck.validate()?;
    let nfe = nfe.unwrap_or(ck.sampling.nfe);
    let grid = make_step_grid(nfe, ck.sampling.final_step_scale)?;
    let mut rollout = ck.sampling.rollout.clone();
    rollout.record_trajectory = trajectories.is_some();
    let params = if raw { &ck.params } else { &ck.ema_params };
    let batch = student_batch(&ck.student_config, params, ck.sampling.shift, &grid, &rollout, seed, n)?;
    ensure_parent(out)?;
    let labels = (ck.student_config.conditions > 0).then_some(batch.labels.as_slice());
    write_samples_csv(out, &batch.samples, labels)?;
    write_json(
        &meta_path(out),
        &json!({"version": ARTIFACT_VERSION, "source": "student", "seed": seed, "n": n, "nfe": nfe}),
    )?;
    if let Some(dir) = trajectories {
        fs::create_dir_all(dir)?;
        for (i, o) in batch.outputs.iter().enumerate() {
            let traj = o.trajectory.as_ref().context("trajectory was not recorded")?;
            write_trajectory_csv(&dir.join(format!("traj_{i:05}.csv")), traj)?;
        }
    }
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn teacher_sample(config: &Path, substeps: Option<usize>, n: usize, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let teacher = cfg.teacher_spec()?;
    let substeps = substeps.unwrap_or(cfg.eval.reference.teacher_substeps);
    let (samples, labels) = teacher_batch(&teacher, substeps, cfg.train.shift, seed, n)?;
    ensure_parent(out)?;
    let labels = (teacher.class_ids().len() > 1).then_some(labels.as_slice());
    write_samples_csv(out, &samples, labels)?;
    write_json(
        &meta_path(out),
        &json!({"version": ARTIFACT_VERSION, "source": "teacher", "seed": seed, "n": n, "substeps": substeps}),
    )?;
    println!("wrote {n} teacher samples to {}", out.display());
    Ok(())
}

fn eval(samples: &Path, reference: &Path, paired: bool, out: &Path, projections: usize, projection_seed: u64) -> Result<()> {
    let (a, la) = read_samples_csv(samples).with_context(|| format!("reading {}", samples.display()))?;
    let (b, lb) = read_samples_csv(reference).with_context(|| format!("reading {}", reference.display()))?;
    let (ma, mb) = (read_meta(samples), read_meta(reference));
    let seed_of = |m: &Option<Value>| m.as_ref().and_then(|v| v["seed"].as_u64());
    if paired {
        if let (Some(x), Some(y)) = (&la, &lb) {
            if x != y {
                bail!("unpaired inputs: condition labels differ");
            }
        }
    }
    let nfe = ma.as_ref().and_then(|v| v["nfe"].as_u64()).map(|v| v as usize);
    let report = evaluate(&EvalRequest {
        samples: &a,
        reference: &b,
        paired,
        n_projections: projections,
        projection_seed,
        nfe_used: nfe,
        seeds: (seed_of(&ma), seed_of(&mb)),
    })?;
    ensure_parent(out)?;
    write_json(out, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn run_toyfit(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let tf = &cfg.toyfit;
    let targets = random_smooth_targets(tf.target_seed, tf.n_targets, tf.l * tf.c);
    let report = toyfit(&targets, &tf.fit_config(cfg.seed))?;
    ensure_parent(out)?;
    write_json(
        out,
        &json!({
            "version": ARTIFACT_VERSION,
            "residual": report.residual,
            "iterations": report.iterations,
            "history": report.history,
            "targets": targets,
            "policy": report.policy,
        }),
    )?;
    println!("toyfit residual {:.3e} after {} iterations", report.residual, report.iterations);
    Ok(())
}

fn plot(samples: &Path, overlay: Option<&Path>, out: &Path) -> Result<()> {
    let (a, _) = read_samples_csv(samples)?;
    let b = overlay.map(read_samples_csv).transpose()?.map(|(s, _)| s);
    let svg = policyflow::plot::scatter_svg(&a, b.as_deref())?;
    ensure_parent(out)?;
    fs::write(out, svg)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Sample {
            ckpt,
            nfe,
            n,
            seed,
            out,
            trajectories,
            raw,
        } => sample(&ckpt, nfe, n, seed, &out, trajectories.as_deref(), raw),
        Command::TeacherSample {
            config,
            substeps,
            n,
            seed,
            out,
        } => teacher_sample(&config, substeps, n, seed, &out),
        Command::Eval {
            samples,
            reference,
            paired,
            out,
            projections,
            projection_seed,
        } => eval(&samples, &reference, paired, &out, projections, projection_seed),
        Command::Toyfit { config, out } => run_toyfit(&config, &out),
        Command::Plot { samples, overlay, out } => plot(&samples, overlay.as_deref(), &out),
    }
}

/// Exit status 2 for numerical failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<policyflow::Error>())
        .any(policyflow::Error::is_numerical);
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
