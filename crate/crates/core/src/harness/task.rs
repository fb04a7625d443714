//! Synthetic pretrain / fine-tune tasks.
//!
//! A fine-tune task is its pretrain task with a perturbed generator: some
//! teacher weights (regression) or class-mean coordinates (classification)
//! are shifted, so a model pretrained on the original task is a good seed.

use std::fmt;
use std::str::FromStr;

use crate::error::{DstError, Result};
use crate::rng::Xoshiro256;

use super::mlp::{Activation, MlpSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    TeacherRegression,
    BlobClassification,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::TeacherRegression => "teacher_regression",
            TaskKind::BlobClassification => "blob_classification",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_regression" => Ok(TaskKind::TeacherRegression),
            "blob_classification" => Ok(TaskKind::BlobClassification),
            _ => Err(DstError::UnknownTask(s.to_string())),
        }
    }
}

/// Perturbation turning a pretrain task into its fine-tune variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskShift {
    /// Fraction of generator coordinates that move.
    pub fraction: f64,
    /// Standard deviation of the added noise.
    pub scale: f64,
    pub seed: u64,
}

impl TaskShift {
    pub const NONE: TaskShift = TaskShift {
        fraction: 0.0,
        scale: 0.0,
        seed: 0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub samples: usize,
    /// Target noise (regression) or input noise around class means (blobs).
    pub noise: f64,
    pub seed: u64,
    /// Hidden width of the regression teacher.
    pub teacher_hidden: usize,
    pub shift: TaskShift,
}

impl TaskSpec {
    pub fn with_shift(&self, shift: TaskShift) -> Self {
        Self {
            shift,
            ..self.clone()
        }
    }

    pub fn with_samples(&self, samples: usize) -> Self {
        Self {
            samples,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(DstError::InvalidArgument("task needs at least one sample".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(DstError::Shape("task dimensions must be positive".into()));
        }
        if self.kind == TaskKind::TeacherRegression && self.teacher_hidden == 0 {
            return Err(DstError::Shape("teacher_hidden must be positive".into()));
        }
        if self.kind == TaskKind::BlobClassification && self.output_dim < 2 {
            return Err(DstError::Shape("classification needs at least two classes".into()));
        }
        if !(0.0..=1.0).contains(&self.shift.fraction) || !self.shift.scale.is_finite() {
            return Err(DstError::InvalidArgument(format!(
                "invalid shift {:?}",
                self.shift
            )));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(DstError::InvalidArgument(format!("invalid noise {}", self.noise)));
        }
        Ok(())
    }

    fn teacher_spec(&self) -> MlpSpec {
        MlpSpec::new(
            vec![self.input_dim, self.teacher_hidden, self.output_dim],
            Activation::Tanh,
            self.seed ^ 0x7465_6163_6865_7200,
        )
        .expect("validated dimensions")
    }

    /// Generator parameters after the shift: teacher weights or flattened
    /// class means.
    fn generator(&self) -> Vec<f32> {
        let mut g = match self.kind {
            TaskKind::TeacherRegression => self.teacher_spec().init().into_values(),
            TaskKind::BlobClassification => {
                let mut rng = Xoshiro256::seed_from_u64(self.seed ^ 0x626c_6f62_0000_0000);
                (0..self.output_dim * self.input_dim)
                    .map(|_| (rng.normal() * 2.0) as f32)
                    .collect()
            }
        };
        let moved = (self.shift.fraction * g.len() as f64).round() as usize;
        if moved > 0 && self.shift.scale != 0.0 {
            let mut rng = Xoshiro256::seed_from_u64(self.shift.seed);
            for i in rng.sample_indices(g.len(), moved) {
                g[i] += (rng.normal() * self.shift.scale) as f32;
            }
        }
        g
    }

    /// The (possibly shifted) regression teacher.
    pub fn teacher(&self) -> Result<(MlpSpec, Vec<f32>)> {
        if self.kind != TaskKind::TeacherRegression {
            return Err(DstError::InvalidArgument(format!("{} has no teacher", self.kind)));
        }
        self.validate()?;
        Ok((self.teacher_spec(), self.generator()))
    }
}

/// Row-major inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<f32>,
    pub targets: Vec<f32>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn target(&self, i: usize) -> &[f32] {
        &self.targets[i * self.output_dim..(i + 1) * self.output_dim]
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            inputs: self.inputs[range.start * self.input_dim..range.end * self.input_dim].to_vec(),
            targets: self.targets[range.start * self.output_dim..range.end * self.output_dim]
                .to_vec(),
            input_dim: self.input_dim,
            output_dim: self.output_dim,
        }
    }

    /// Gather the rows `rows` into flat input and target buffers.
    pub fn gather(&self, rows: &[usize]) -> (Vec<f32>, Vec<f32>) {
        let mut x = Vec::with_capacity(rows.len() * self.input_dim);
        let mut y = Vec::with_capacity(rows.len() * self.output_dim);
        for &r in rows {
            x.extend_from_slice(self.input(r));
            y.extend_from_slice(self.target(r));
        }
        (x, y)
    }

    /// Train / held-out split keeping the last `holdout_fraction` of rows.
    pub fn split(&self, holdout_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&holdout_fraction) || holdout_fraction == 0.0 {
            return Err(DstError::InvalidArgument(format!(
                "holdout fraction {holdout_fraction} must be in (0, 1)"
            )));
        }
        let n = self.len();
        let held = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n.saturating_sub(1));
        if n < 2 {
            return Err(DstError::InvalidArgument("need two samples to split".into()));
        }
        Ok((self.slice(0..n - held), self.slice(n - held..n)))
    }
}

/// Generate the dataset described by `spec`.
pub fn gen_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let (d, k, n) = (spec.input_dim, spec.output_dim, spec.samples);
    // Inputs, labels and noise come from a stream independent of the shift,
    // so a zero shift reproduces the pretrain data exactly.
    let mut rng = Xoshiro256::seed_from_u64(spec.seed);
    let generator = spec.generator();
    let mut inputs = Vec::with_capacity(n * d);
    let mut targets = Vec::with_capacity(n * k);
    match spec.kind {
        TaskKind::TeacherRegression => {
            for _ in 0..n * d {
                inputs.push(rng.normal() as f32);
            }
            let teacher = spec.teacher_spec();
            let out = teacher.forward(&generator[..], &inputs)?;
            for &y in out.output() {
                let noise = if spec.noise > 0.0 {
                    (rng.normal() * spec.noise) as f32
                } else {
                    0.0
                };
                targets.push(y + noise);
            }
        }
        TaskKind::BlobClassification => {
            for _ in 0..n {
                let label = rng.below(k);
                let mean = &generator[label * d..(label + 1) * d];
                for &m in mean {
                    inputs.push(m + (rng.normal() * spec.noise) as f32);
                }
                targets.extend((0..k).map(|c| if c == label { 1.0 } else { 0.0 }));
            }
        }
    }
    Ok(Dataset {
        inputs,
        targets,
        input_dim: d,
        output_dim: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::mlp::Loss;

    fn regression(noise: f64) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::TeacherRegression,
            input_dim: 4,
            output_dim: 2,
            samples: 50,
            noise,
            seed: 9,
            teacher_hidden: 6,
            shift: TaskShift::NONE,
        }
    }

    #[test]
    fn deterministic() {
        let spec = regression(0.1);
        assert_eq!(gen_task(&spec).unwrap(), gen_task(&spec).unwrap());
        let blobs = TaskSpec {
            kind: TaskKind::BlobClassification,
            ..spec
        };
        assert_eq!(gen_task(&blobs).unwrap(), gen_task(&blobs).unwrap());
    }

    #[test]
    fn zero_shift_is_pretrain_task() {
        let spec = regression(0.1);
        let shifted = spec.with_shift(TaskShift {
            fraction: 0.0,
            scale: 1.0,
            seed: 3,
        });
        assert_eq!(gen_task(&spec).unwrap(), gen_task(&shifted).unwrap());
    }

    #[test]
    fn shift_changes_targets_not_inputs() {
        let spec = regression(0.0);
        let shifted = spec.with_shift(TaskShift {
            fraction: 0.1,
            scale: 0.5,
            seed: 3,
        });
        let (a, b) = (gen_task(&spec).unwrap(), gen_task(&shifted).unwrap());
        assert_eq!(a.inputs, b.inputs);
        assert_ne!(a.targets, b.targets);
    }

    #[test]
    fn noiseless_teacher_fits_exactly() {
        let spec = regression(0.0);
        let data = gen_task(&spec).unwrap();
        let (teacher, weights) = spec.teacher().unwrap();
        let loss = teacher
            .loss(&weights[..], &data.inputs, &data.targets, Loss::Mse)
            .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn blobs_are_one_hot() {
        let spec = TaskSpec {
            kind: TaskKind::BlobClassification,
            output_dim: 3,
            ..regression(0.5)
        };
        let data = gen_task(&spec).unwrap();
        for i in 0..data.len() {
            let t = data.target(i);
            assert_eq!(t.iter().sum::<f32>(), 1.0);
            assert!(t.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(gen_task(&regression(0.0).with_samples(0)).is_err());
    }

    #[test]
    fn split_keeps_tail() {
        let data = gen_task(&regression(0.0)).unwrap();
        let (train, held) = data.split(0.2).unwrap();
        assert_eq!(train.len(), 40);
        assert_eq!(held.len(), 10);
        assert_eq!(held.input(0), data.input(40));
        assert!(data.split(0.0).is_err());
    }
}
