//! `key=value` run configuration files.
//!
//! One setting per line, `#` starts a comment, keys are dotted
//! (`dst.epsilon=1e-4`). Overrides given on the command line replace file
//! values. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use dst_core::distance::{DistanceKind, Normalization, NormalizationMode};
use dst_core::harness::{
    Activation, Experiment, Loss, Method, MlpSpec, PretrainConfig, SweepGrid, TaskKind, TaskShift,
    TaskSpec, TrainConfig,
};
use dst_core::optimizer::{DstConfig, InnerOptimizer, OptimizerKind};
use dst_core::partition::SiloScheme;
use dst_core::selection::SelectionMode;
use dst_core::{DstError, Result};

pub const KNOWN_KEYS: &[&str] = &[
    "task.kind",
    "task.samples",
    "task.finetune_samples",
    "task.noise",
    "task.seed",
    "task.finetune_seed",
    "task.teacher_hidden",
    "task.shift_fraction",
    "task.shift_scale",
    "task.shift_seed",
    "model.widths",
    "model.activation",
    "model.seed",
    "pretrain.steps",
    "pretrain.optimizer",
    "pretrain.lr",
    "pretrain.batch_size",
    "pretrain.seed",
    "train.method",
    "train.steps",
    "train.batch_size",
    "train.loss",
    "train.checkpoint_interval",
    "train.seed",
    "train.mask_fraction",
    "train.mask_seed",
    "train.holdout_fraction",
    "dst.epsilon",
    "dst.distance",
    "dst.scheme",
    "dst.selection",
    "dst.m",
    "dst.r",
    "dst.churn",
    "dst.normalization",
    "dst.normalization_granularity",
    "opt.kind",
    "opt.lr",
    "opt.momentum",
    "opt.beta1",
    "opt.beta2",
    "opt.eps",
    "sweep.lrs",
    "sweep.epsilons",
    "sweep.seeds",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn parse_line(line: &str, lineno: usize) -> Result<Option<(String, String)>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Ok(None);
    }
    let (key, value) = line
        .split_once('=')
        .ok_or_else(|| DstError::Config(format!("line {lineno}: expected key=value, got '{line}'")))?;
    let key = key.trim();
    if !KNOWN_KEYS.contains(&key) {
        return Err(DstError::Config(format!("line {lineno}: unknown key '{key}'")));
    }
    Ok(Some((key.to_string(), value.trim().to_string())))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if let Some((k, v)) = parse_line(line, i + 1)? {
                values.insert(k, v);
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            DstError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Apply a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        match parse_line(assignment, 0)? {
            Some((k, v)) => {
                self.values.insert(k, v);
                Ok(())
            }
            None => Err(DstError::Config(format!("empty override '{assignment}'"))),
        }
    }

    pub fn require(&self, keys: &[&str]) -> Result<()> {
        match keys.iter().find(|k| !self.values.contains_key(**k)) {
            Some(k) => Err(DstError::Config(format!("missing required key '{k}'"))),
            None => Ok(()),
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| DstError::Config(format!("invalid value '{v}' for {key}"))),
        }
    }

    fn parsed<T: FromStr<Err = DstError>>(&self, key: &str, default: &str) -> Result<T> {
        self.raw(key)
            .unwrap_or(default)
            .parse()
            .map_err(|e: DstError| DstError::Config(format!("{key}: {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self
            .raw(key)
            .ok_or_else(|| DstError::Config(format!("missing required key '{key}'")))?;
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| DstError::Config(format!("invalid list item '{s}' in {key}")))
            })
            .collect()
    }

    pub fn task_kind(&self) -> Result<TaskKind> {
        let raw = self
            .raw("task.kind")
            .ok_or_else(|| DstError::Config("missing required key 'task.kind'".into()))?;
        raw.parse()
            .map_err(|_| DstError::Config(format!("unknown task kind '{raw}'")))
    }

    pub fn mlp(&self) -> Result<MlpSpec> {
        let widths = self.list("model.widths")?;
        let activation: Activation = self.parsed("model.activation", "tanh")?;
        if activation == Activation::Linear {
            return Err(DstError::Config("model.activation must be tanh or relu".into()));
        }
        MlpSpec::new(widths, activation, self.get("model.seed", 3)?)
            .map_err(|e| DstError::Config(format!("model.widths: {e}")))
    }

    pub fn loss(&self) -> Result<Loss> {
        let default = match self.task_kind()? {
            TaskKind::TeacherRegression => "mse",
            TaskKind::BlobClassification => "cross_entropy",
        };
        self.parsed("train.loss", default)
    }

    /// The experiment with every seed shifted by `offset`.
    pub fn experiment(&self, offset: u64) -> Result<Experiment> {
        let mut mlp = self.mlp()?;
        let task_seed: u64 = self.get("task.seed", 0)?;
        let pretrain_task = TaskSpec {
            kind: self.task_kind()?,
            input_dim: mlp.input_dim(),
            output_dim: mlp.output_dim(),
            samples: self.get("task.samples", 4096)?,
            noise: self.get("task.noise", 0.05)?,
            seed: task_seed.wrapping_add(offset),
            teacher_hidden: self.get("task.teacher_hidden", 32)?,
            shift: TaskShift::NONE,
        };
        let finetune_task = TaskSpec {
            samples: self.get("task.finetune_samples", 1024)?,
            seed: self
                .get("task.finetune_seed", task_seed.wrapping_add(1))?
                .wrapping_add(offset),
            shift: TaskShift {
                fraction: self.get("task.shift_fraction", 0.1)?,
                scale: self.get("task.shift_scale", 0.5)?,
                seed: self
                    .get("task.shift_seed", task_seed.wrapping_add(2))?
                    .wrapping_add(offset),
            },
            ..pretrain_task.clone()
        };
        if offset != 0 {
            let seed: u64 = self.get("model.seed", 3)?;
            mlp = MlpSpec::new(mlp.widths().to_vec(), mlp.activation(), seed.wrapping_add(offset))?;
        }
        let pretrain = PretrainConfig {
            optimizer: InnerOptimizer::new(
                self.parsed("pretrain.optimizer", "adam")?,
                self.get("pretrain.lr", 2e-3)?,
            )
            .map_err(|e| DstError::Config(format!("pretrain: {e}")))?,
            steps: self.get("pretrain.steps", 3000)?,
            batch_size: self.get("pretrain.batch_size", 64)?,
            loss: self.loss()?,
            seed: self.get::<u64>("pretrain.seed", 4)?.wrapping_add(offset),
        };
        Ok(Experiment {
            mlp,
            pretrain_task,
            finetune_task,
            pretrain,
        })
    }

    pub fn optimizer(&self) -> Result<InnerOptimizer> {
        let kind = match self.raw("opt.kind").unwrap_or("adam") {
            "sgd" => OptimizerKind::Sgd,
            "momentum" => OptimizerKind::Momentum {
                beta: self.get("opt.momentum", 0.9)?,
            },
            "adam" => OptimizerKind::Adam {
                beta1: self.get("opt.beta1", 0.9)?,
                beta2: self.get("opt.beta2", 0.999)?,
                eps: self.get("opt.eps", 1e-8)?,
            },
            other => return Err(DstError::Config(format!("unknown optimizer '{other}'"))),
        };
        InnerOptimizer::new(kind, self.get("opt.lr", 1e-3)?)
            .map_err(|e| DstError::Config(format!("opt: {e}")))
    }

    pub fn dst(&self) -> Result<DstConfig> {
        let selection = match self.raw("dst.selection").unwrap_or("exact") {
            "exact" => SelectionMode::ExactTopK,
            "iterative" => SelectionMode::Iterative {
                m: self.get("dst.m", 3)?,
                r: self.get("dst.r", 2.0)?,
            },
            other => return Err(DstError::Config(format!("unknown selection '{other}'"))),
        };
        let distance: DistanceKind = self.parsed("dst.distance", "inverse_relative")?;
        let normalization = NormalizationMode {
            kind: self.parsed::<Normalization>("dst.normalization", "none")?,
            granularity: self.parsed("dst.normalization_granularity", "per_module_and_layer")?,
        };
        let cfg = DstConfig {
            epsilon: self.get("dst.epsilon", 0.01)?,
            distance,
            normalization,
            scheme: self.parsed::<SiloScheme>("dst.scheme", "per_module_and_layer")?,
            selection,
            churn: self.get("dst.churn", true)?,
        };
        cfg.validate()
            .map_err(|e| DstError::Config(format!("dst: {e}")))?;
        Ok(cfg)
    }

    /// Fine-tuning settings with every seed shifted by `offset`.
    pub fn train(&self, offset: u64) -> Result<TrainConfig> {
        let method: Method = self.parsed("train.method", "dst")?;
        let dst = self.dst()?;
        let cfg = TrainConfig {
            method,
            dst,
            mask_fraction: self.get("train.mask_fraction", dst.epsilon)?,
            mask_seed: self.get::<u64>("train.mask_seed", 5)?.wrapping_add(offset),
            optimizer: self.optimizer()?,
            steps: self.get("train.steps", 2000)?,
            batch_size: self.get("train.batch_size", 32)?,
            loss: self.loss()?,
            checkpoint_interval: self.get("train.checkpoint_interval", 100)?,
            seed: self.get::<u64>("train.seed", 6)?.wrapping_add(offset),
            holdout_fraction: self.get("train.holdout_fraction", 0.2)?,
        };
        cfg.validate()
            .map_err(|e| DstError::Config(format!("train: {e}")))?;
        Ok(cfg)
    }

    pub fn sweep(&self) -> Result<SweepGrid> {
        let seeds = if self.raw("sweep.seeds").is_some() {
            self.list("sweep.seeds")?
        } else {
            vec![0]
        };
        Ok(SweepGrid {
            learning_rates: self.list("sweep.lrs")?,
            epsilons: self.list("sweep.epsilons")?,
            seeds,
        })
    }
}
