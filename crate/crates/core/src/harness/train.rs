//! Pretraining and fine-tuning loops.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{DstError, Result};
use crate::optimizer::{DstConfig, DstOptimizer, DstStepRecord, InnerOptimizer, OptimizerKind};
use crate::param_store::{save_checkpoint, save_checkpoint_with_seed, subset_indices, ParamVector, SeedSnapshot};
use crate::partition::{build_partition, silo_budget, SiloScheme};
use crate::rng::Xoshiro256;
use crate::subset_delta::{diff_with_meta, save_delta, DeltaMeta, SubsetDelta};

use super::mlp::{Activation, Loss, MlpSpec};
use super::task::{gen_task, Dataset, TaskKind, TaskShift, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Full,
    Dst,
    /// A subset drawn uniformly per silo before the first step and never changed.
    RandomMask,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Dst => "dst",
            Method::RandomMask => "random_mask",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Method::Full),
            "dst" => Ok(Method::Dst),
            "random_mask" => Ok(Method::RandomMask),
            _ => Err(DstError::Config(format!("unknown method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub optimizer: InnerOptimizer,
    pub steps: usize,
    pub batch_size: usize,
    pub loss: Loss,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub dst: DstConfig,
    /// Per-silo fraction of the random mask.
    pub mask_fraction: f64,
    pub mask_seed: u64,
    pub optimizer: InnerOptimizer,
    pub steps: usize,
    pub batch_size: usize,
    pub loss: Loss,
    pub checkpoint_interval: usize,
    /// Batch sampling seed.
    pub seed: u64,
    pub holdout_fraction: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(DstError::Config("batch size must be positive".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(DstError::Config("checkpoint interval must be positive".into()));
        }
        match self.method {
            Method::Full => Ok(()),
            Method::Dst => self.dst.validate(),
            Method::RandomMask => crate::partition::check_epsilon(self.mask_fraction),
        }
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    /// Mean batch loss since the previous row.
    pub train_loss: f64,
    pub heldout_loss: f64,
    /// Parameters differing from the seed.
    pub free_params: usize,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub seed: SeedSnapshot,
    pub final_params: ParamVector,
    pub metrics: Vec<MetricRow>,
    /// One record per step; subsets are kept at checkpoint steps only.
    pub records: Vec<DstStepRecord>,
    pub delta: SubsetDelta,
}

impl RunArtifacts {
    pub fn final_heldout_loss(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.heldout_loss)
    }

    /// Records that still carry their subset.
    pub fn checkpoint_records(&self) -> Vec<DstStepRecord> {
        self.records
            .iter()
            .filter(|r| r.subset.is_some())
            .cloned()
            .collect()
    }

    /// Write seed.dstc, final.dstc, delta.dstd, metrics.csv and records.csv.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| DstError::io(dir, e))?;
        save_checkpoint(&self.seed.to_params(), dir.join("seed.dstc"))?;
        save_checkpoint_with_seed(&self.final_params, self.seed.checksum(), dir.join("final.dstc"))?;
        save_delta(&self.delta, dir.join("delta.dstd"))?;
        let metrics = dir.join("metrics.csv");
        fs::write(&metrics, metrics_csv(&self.metrics)).map_err(|e| DstError::io(&metrics, e))?;
        let records = dir.join("records.csv");
        fs::write(&records, records_csv(&self.records)).map_err(|e| DstError::io(&records, e))?;
        Ok(())
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,train_loss,heldout_loss,free_params\n");
    for r in rows {
        out += &format!(
            "{},{},{},{}\n",
            r.step, r.train_loss, r.heldout_loss, r.free_params
        );
    }
    out
}

pub fn records_csv(records: &[DstStepRecord]) -> String {
    let mut out = String::from("step,silo,budget,selected,realized_eps,threshold\n");
    for r in records {
        for s in &r.per_silo {
            let threshold = s.threshold.map(|t| t.to_string()).unwrap_or_default();
            out += &format!(
                "{},{},{},{},{},{}\n",
                r.step,
                s.silo_id,
                s.budget,
                s.selected,
                s.realized_fraction(),
                threshold
            );
        }
    }
    out
}

fn heldout_loss(mlp: &MlpSpec, params: &ParamVector, data: &Dataset, loss: Loss) -> Result<f64> {
    Ok(mlp.loss(params.values(), &data.inputs, &data.targets, loss)? as f64)
}

fn sample_batch(rng: &mut Xoshiro256, data: &Dataset, batch: usize) -> (Vec<f32>, Vec<f32>) {
    let rows: Vec<usize> = (0..batch).map(|_| rng.below(data.len())).collect();
    data.gather(&rows)
}

fn apply_full_update(params: &mut ParamVector, update: &[f32], step: usize, loss: f32) -> Result<()> {
    for (p, u) in params.values_mut().iter_mut().zip(update) {
        *p += u;
    }
    if params.values().iter().any(|v| !v.is_finite()) {
        return Err(DstError::Divergence {
            step,
            loss: loss as f64,
        });
    }
    Ok(())
}

/// Plain full training from the MLP's initialization. Returns the trained
/// parameters and the loss over all of `data`.
pub fn pretrain(mlp: &MlpSpec, data: &Dataset, cfg: &PretrainConfig) -> Result<(ParamVector, f64)> {
    cfg.optimizer.validate()?;
    if cfg.batch_size == 0 {
        return Err(DstError::Config("batch size must be positive".into()));
    }
    let mut params = mlp.init();
    let mut state = cfg.optimizer.init_state(params.len());
    let mut rng = Xoshiro256::seed_from_u64(cfg.seed);
    for step in 1..=cfg.steps {
        let (x, y) = sample_batch(&mut rng, data, cfg.batch_size);
        let (loss, grads) = mlp.loss_and_grad(params.values(), &x, &y, cfg.loss)?;
        if !loss.is_finite() {
            return Err(DstError::Divergence {
                step,
                loss: loss as f64,
            });
        }
        let (update, next) = cfg.optimizer.update(&state, &grads)?;
        state = next;
        apply_full_update(&mut params, &update, step, loss)?;
    }
    let loss = mlp.loss(params.values(), &data.inputs, &data.targets, cfg.loss)? as f64;
    Ok((params, loss))
}

/// Uniform random subset with `silo_budget(len, fraction)` entries per silo.
pub fn random_mask(seed: &SeedSnapshot, scheme: SiloScheme, fraction: f64, mask_seed: u64) -> Result<Vec<usize>> {
    let partition = build_partition(seed.layout(), scheme);
    let mut rng = Xoshiro256::seed_from_u64(mask_seed);
    let mut indices = Vec::new();
    for silo in &partition.silos {
        let k = silo_budget(silo.len(), fraction)?;
        indices.extend(
            rng.sample_indices(silo.len(), k)
                .into_iter()
                .map(|local| silo.global_index(local)),
        );
    }
    indices.sort_unstable();
    Ok(indices)
}

/// Fine-tune `seed` on `data` (split into train and held-out rows).
pub fn finetune(mlp: &MlpSpec, seed: &SeedSnapshot, data: &Dataset, cfg: &TrainConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    if seed.len() != mlp.param_count() {
        return Err(DstError::LengthMismatch {
            expected: mlp.param_count(),
            actual: seed.len(),
        });
    }
    let (train_set, held_set) = data.split(cfg.holdout_fraction)?;
    let mut params = seed.to_params();
    let mut rng = Xoshiro256::seed_from_u64(cfg.seed);

    let mut dst = match cfg.method {
        Method::Full => None,
        Method::Dst => Some(DstOptimizer::new(cfg.dst, cfg.optimizer, seed)?),
        Method::RandomMask => {
            let mask = random_mask(seed, cfg.dst.scheme, cfg.mask_fraction, cfg.mask_seed)?;
            let mut dcfg = cfg.dst;
            dcfg.epsilon = cfg.mask_fraction;
            Some(DstOptimizer::with_fixed_subset(dcfg, cfg.optimizer, seed, mask)?)
        }
    };
    let mut full_state = cfg.optimizer.init_state(params.len());

    let mut metrics = Vec::new();
    let mut records = Vec::new();
    let mut loss_sum = 0.0f64;
    let mut loss_count = 0usize;
    for step in 1..=cfg.steps {
        let (x, y) = sample_batch(&mut rng, &train_set, cfg.batch_size);
        let (loss, grads) = mlp.loss_and_grad(params.values(), &x, &y, cfg.loss)?;
        if !loss.is_finite() {
            return Err(DstError::Divergence {
                step,
                loss: loss as f64,
            });
        }
        loss_sum += loss as f64;
        loss_count += 1;
        let checkpoint = step % cfg.checkpoint_interval == 0 || step == cfg.steps;
        match dst.as_mut() {
            None => {
                let (update, next) = cfg.optimizer.update(&full_state, &grads)?;
                full_state = next;
                apply_full_update(&mut params, &update, step, loss)?;
            }
            Some(opt) => {
                let mut record = opt.step(&mut params, seed, &grads).map_err(|e| match e {
                    DstError::NonFinite { .. } => DstError::Divergence {
                        step,
                        loss: loss as f64,
                    },
                    other => other,
                })?;
                if !checkpoint {
                    record.subset = None;
                }
                records.push(record);
            }
        }
        if checkpoint {
            metrics.push(MetricRow {
                step,
                train_loss: loss_sum / loss_count as f64,
                heldout_loss: heldout_loss(mlp, &params, &held_set, cfg.loss)?,
                free_params: subset_indices(&params, seed)?.len(),
            });
            loss_sum = 0.0;
            loss_count = 0;
        }
    }

    let meta = match cfg.method {
        Method::Full => DeltaMeta::default(),
        Method::Dst => DeltaMeta::new(cfg.dst.epsilon, Some(cfg.dst.distance), Some(cfg.dst.scheme)),
        Method::RandomMask => DeltaMeta::new(cfg.mask_fraction, None, Some(cfg.dst.scheme)),
    };
    let delta = diff_with_meta(seed, &params, meta)?;
    Ok(RunArtifacts {
        seed: seed.clone(),
        final_params: params,
        metrics,
        records,
        delta,
    })
}

/// Model, tasks and pretraining settings shared by the runs of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub mlp: MlpSpec,
    pub pretrain_task: TaskSpec,
    pub finetune_task: TaskSpec,
    pub pretrain: PretrainConfig,
}

impl Experiment {
    /// MLP [16, 64, 64, 8] with tanh on a teacher regression whose fine-tune
    /// variant moves 10% of the teacher weights. All seeds derive from `seed`.
    pub fn reference(seed: u64) -> Self {
        let pretrain_task = TaskSpec {
            kind: TaskKind::TeacherRegression,
            input_dim: 16,
            output_dim: 8,
            samples: 4096,
            noise: 0.05,
            seed,
            teacher_hidden: 32,
            shift: TaskShift::NONE,
        };
        let finetune_task = TaskSpec {
            samples: 1024,
            seed: seed.wrapping_add(1),
            shift: TaskShift {
                fraction: 0.1,
                scale: 0.5,
                seed: seed.wrapping_add(2),
            },
            ..pretrain_task.clone()
        };
        Self {
            mlp: MlpSpec::new(vec![16, 64, 64, 8], Activation::Tanh, seed.wrapping_add(3))
                .expect("valid widths"),
            pretrain_task,
            finetune_task,
            pretrain: PretrainConfig {
                optimizer: InnerOptimizer::new(OptimizerKind::adam(), 2e-3).expect("valid"),
                steps: 3000,
                batch_size: 64,
                loss: Loss::Mse,
                seed: seed.wrapping_add(4),
            },
        }
    }

    /// Reference fine-tuning settings: 2000 steps of batch 32.
    pub fn reference_train(seed: u64, method: Method, dst: DstConfig, optimizer: InnerOptimizer) -> TrainConfig {
        TrainConfig {
            method,
            dst,
            mask_fraction: dst.epsilon,
            mask_seed: seed.wrapping_add(5),
            optimizer,
            steps: 2000,
            batch_size: 32,
            loss: Loss::Mse,
            checkpoint_interval: 100,
            seed: seed.wrapping_add(6),
            holdout_fraction: 0.2,
        }
    }

    /// Pretrain on the pretrain task and snapshot the result.
    pub fn pretrain_seed(&self) -> Result<(SeedSnapshot, f64)> {
        let data = gen_task(&self.pretrain_task)?;
        let (params, loss) = pretrain(&self.mlp, &data, &self.pretrain)?;
        Ok((SeedSnapshot::new(&params), loss))
    }

    pub fn finetune_data(&self) -> Result<Dataset> {
        gen_task(&self.finetune_task)
    }
}

/// Pretrain a seed, then fine-tune it with `cfg`.
pub fn train(exp: &Experiment, cfg: &TrainConfig) -> Result<RunArtifacts> {
    let (seed, _) = exp.pretrain_seed()?;
    finetune(&exp.mlp, &seed, &exp.finetune_data()?, cfg)
}
