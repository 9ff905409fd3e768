//! Seed-paired batch sampling for students and teachers.
//!
//! Sample `i` of a batch starts from `initial_noise(seed, i)` and uses condition
//! `class_ids[i % len]`, so student and teacher batches line up pairwise.

use crate::error::Result;
use crate::metrics::{evaluate, EvalRequest, MetricsReport};
use crate::ode::{sample, RolloutConfig, SampleOutput};
use crate::schedule::{StepGrid, TimeShift};
use crate::student::{StudentConfig, StudentPolicy};
use crate::teacher::{teacher_sample, TeacherSpec};

/// Condition of sample `index` when `n_conditions` classes are cycled.
pub fn condition_for(index: u64, class_ids: &[u32]) -> u32 {
    if class_ids.is_empty() {
        0
    } else {
        class_ids[(index % class_ids.len() as u64) as usize]
    }
}

/// Condition ids a student was trained with.
pub fn student_class_ids(cfg: &StudentConfig) -> Vec<u32> {
    if cfg.conditions == 0 {
        vec![0]
    } else {
        (0..cfg.conditions as u32).collect()
    }
}

#[derive(Debug, Clone)]
pub struct StudentBatch {
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    pub outputs: Vec<SampleOutput>,
}

pub fn student_batch(
    cfg: &StudentConfig,
    params: &[f64],
    shift: TimeShift,
    grid: &StepGrid,
    rollout: &RolloutConfig,
    seed: u64,
    n: usize,
) -> Result<StudentBatch> {
    let provider = StudentPolicy { cfg, params, shift };
    let ids = student_class_ids(cfg);
    let mut batch = StudentBatch {
        samples: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        outputs: Vec::with_capacity(n),
    };
    for i in 0..n as u64 {
        let c = condition_for(i, &ids);
        let out = sample(&provider, grid, rollout, seed, i, c)?;
        batch.samples.push(out.x.clone());
        batch.labels.push(c);
        batch.outputs.push(out);
    }
    Ok(batch)
}

pub fn teacher_batch(
    teacher: &TeacherSpec,
    substeps: usize,
    shift: TimeShift,
    seed: u64,
    n: usize,
) -> Result<(Vec<Vec<f64>>, Vec<u32>)> {
    let ids = teacher.class_ids();
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let c = condition_for(i, &ids);
        samples.push(teacher_sample(teacher, c, substeps, seed, i, shift)?);
        labels.push(c);
    }
    Ok((samples, labels))
}

/// Metrics of a student batch against a seed-paired teacher reference drawn
/// with the same `sample_seed`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_student(
    cfg: &StudentConfig,
    params: &[f64],
    shift: TimeShift,
    grid: &StepGrid,
    rollout: &RolloutConfig,
    reference: &[Vec<f64>],
    sample_seed: u64,
    n_projections: usize,
    projection_seed: u64,
) -> Result<MetricsReport> {
    let batch = student_batch(cfg, params, shift, grid, rollout, sample_seed, reference.len())?;
    evaluate(&EvalRequest {
        samples: &batch.samples,
        reference,
        paired: true,
        n_projections,
        projection_seed,
        nfe_used: Some(grid.nfe),
        seeds: (Some(sample_seed), Some(sample_seed)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyHead;
    use crate::schedule::make_step_grid;
    use crate::student::init_params;

    #[test]
    fn conditions_cycle() {
        assert_eq!(condition_for(5, &[0, 1]), 1);
        assert_eq!(condition_for(5, &[]), 0);
        assert_eq!(condition_for(4, &[3, 7, 9]), 7);
    }

    #[test]
    fn batches_are_deterministic_and_paired() {
        let t = TeacherSpec::two_rings(4, 6, 1.0, 2.0, 0.1, 1.0).unwrap();
        let (a, la) = teacher_batch(&t, 16, TimeShift::default(), 3, 6).unwrap();
        let (b, lb) = teacher_batch(&t, 16, TimeShift::default(), 3, 6).unwrap();
        assert_eq!((a, la.clone()), (b, lb));
        assert_eq!(la, vec![0, 1, 0, 1, 0, 1]);
        let mut cfg = StudentConfig::new(2, PolicyHead::Gm { l: 1, k: 2, c: 2 });
        cfg.hidden = vec![8];
        cfg.conditions = 2;
        let params = init_params(&cfg, 1);
        let grid = make_step_grid(2, 1.0).unwrap();
        let s = student_batch(&cfg, &params, TimeShift::default(), &grid, &RolloutConfig::default(), 3, 6).unwrap();
        assert_eq!(s.labels, vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(s.samples.len(), 6);
    }
}
