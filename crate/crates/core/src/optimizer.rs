//! Inner optimizers and the subset-tuning step that wraps them.
//!
//! The inner optimizer state only ever sees gradients, so it evolves exactly
//! as it would under unconstrained training; the seed reset touches the
//! parameters alone.

use std::fmt;
use std::str::FromStr;

use crate::distance::{normalize_scores, score, DistanceKind, NormalizationMode};
use crate::error::{DstError, Result};
use crate::param_store::{ParamVector, SeedSnapshot};
use crate::partition::{build_partition, check_epsilon, validate_partition, SiloPartition, SiloScheme};
use crate::selection::{select, SelectionMode, SiloSelection, ThresholdState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    /// Heavy-ball: `v ← βv + g`, `u = −lr·v`.
    Momentum { beta: f32 },
    /// Bias-corrected Adam.
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum { .. } => "momentum",
            OptimizerKind::Adam { .. } => "adam",
        }
    }

    pub fn momentum() -> Self {
        OptimizerKind::Momentum { beta: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = DstError;

    /// Parses the kind with default coefficients.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" => Ok(OptimizerKind::momentum()),
            "adam" => Ok(OptimizerKind::adam()),
            _ => Err(DstError::Config(format!("unknown optimizer '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOptimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
}

/// Moment buffers and step counter. Buffers stay empty for plain SGD.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptState {
    pub step: u64,
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

impl InnerOptimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f32) -> Result<Self> {
        let opt = Self {
            kind,
            learning_rate,
        };
        opt.validate()?;
        Ok(opt)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DstError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        let in_unit = |b: f32| (0.0..1.0).contains(&b);
        let ok = match self.kind {
            OptimizerKind::Sgd => true,
            OptimizerKind::Momentum { beta } => in_unit(beta),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                in_unit(beta1) && in_unit(beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(DstError::InvalidArgument(format!(
                "invalid coefficients for {:?}",
                self.kind
            )))
        }
    }

    pub fn init_state(&self, n: usize) -> OptState {
        match self.kind {
            OptimizerKind::Sgd => OptState::default(),
            OptimizerKind::Momentum { .. } => OptState {
                step: 0,
                first: vec![0.0; n],
                second: Vec::new(),
            },
            OptimizerKind::Adam { .. } => OptState {
                step: 0,
                first: vec![0.0; n],
                second: vec![0.0; n],
            },
        }
    }

    /// Compute the full update `u` and the next optimizer state from `grads`.
    pub fn update(&self, state: &OptState, grads: &[f32]) -> Result<(Vec<f32>, OptState)> {
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(DstError::NonFiniteGradient(i));
        }
        let lr = self.learning_rate;
        let n = grads.len();
        let check = |buf: &Vec<f32>| {
            if buf.len() == n {
                Ok(())
            } else {
                Err(DstError::LengthMismatch {
                    expected: buf.len(),
                    actual: n,
                })
            }
        };
        let step = state.step + 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let u = grads.iter().map(|g| -lr * g).collect();
                Ok((
                    u,
                    OptState {
                        step,
                        ..OptState::default()
                    },
                ))
            }
            OptimizerKind::Momentum { beta } => {
                check(&state.first)?;
                let velocity: Vec<f32> = state
                    .first
                    .iter()
                    .zip(grads)
                    .map(|(v, g)| beta * v + g)
                    .collect();
                let u = velocity.iter().map(|v| -lr * v).collect();
                Ok((
                    u,
                    OptState {
                        step,
                        first: velocity,
                        second: Vec::new(),
                    },
                ))
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                check(&state.first)?;
                check(&state.second)?;
                let t = i32::try_from(step).unwrap_or(i32::MAX);
                let c1 = (1.0 - f64::from(beta1).powi(t)) as f32;
                let c2 = (1.0 - f64::from(beta2).powi(t)) as f32;
                let mut first = Vec::with_capacity(n);
                let mut second = Vec::with_capacity(n);
                let mut u = Vec::with_capacity(n);
                for ((&m, &v), &g) in state.first.iter().zip(&state.second).zip(grads) {
                    let m = beta1 * m + (1.0 - beta1) * g;
                    let v = beta2 * v + (1.0 - beta2) * g * g;
                    let m_hat = m / c1;
                    let v_hat = v / c2;
                    u.push(-lr * m_hat / (v_hat.sqrt() + eps));
                    first.push(m);
                    second.push(v);
                }
                Ok((
                    u,
                    OptState {
                        step,
                        first,
                        second,
                    },
                ))
            }
        }
    }
}

/// Settings of the subset-tuning wrapper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DstConfig {
    /// Fraction of free parameters per silo, in (0, 1].
    pub epsilon: f64,
    pub distance: DistanceKind,
    pub normalization: NormalizationMode,
    pub scheme: SiloScheme,
    pub selection: SelectionMode,
    /// Re-select every step; when false the first step's subset is kept.
    pub churn: bool,
}

impl Default for DstConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            distance: DistanceKind::InverseRelative,
            normalization: NormalizationMode::default(),
            scheme: SiloScheme::PerModuleAndLayer,
            selection: SelectionMode::ExactTopK,
            churn: true,
        }
    }
}

impl DstConfig {
    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon)?;
        self.selection.validate()
    }
}

/// A subset fixed once and reused on every later step.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenSubset {
    pub indices: Vec<usize>,
    pub per_silo: Vec<SiloSelection>,
}

/// Everything that carries over between subset-tuning steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DstState {
    pub opt: OptState,
    pub thresholds: ThresholdState,
    pub frozen: Option<FrozenSubset>,
    /// Completed steps.
    pub step: usize,
}

impl DstState {
    pub fn new(inner: &InnerOptimizer, n: usize) -> Self {
        Self {
            opt: inner.init_state(n),
            thresholds: ThresholdState::new(),
            frozen: None,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DstStepRecord {
    /// 1-based step number.
    pub step: usize,
    pub per_silo: Vec<SiloSelection>,
    pub selected_count: usize,
    /// Selected entries whose updated value equals the seed bitwise.
    pub coincident: usize,
    /// The selected subset, sorted. Callers may drop it to save memory.
    pub subset: Option<Vec<usize>>,
}

impl DstStepRecord {
    /// Global realized fraction.
    pub fn realized_fraction(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.selected_count as f64 / n as f64
        }
    }
}

/// One subset-tuning update.
///
/// Computes the full inner update, scores it against the seed, selects the
/// free parameters per silo (or reuses the frozen subset) and resets every
/// other parameter to its seed value. Inputs are not modified; on error no
/// state has advanced.
#[allow(clippy::too_many_arguments)]
pub fn dst_step(
    params: &ParamVector,
    seed: &SeedSnapshot,
    grads: &[f32],
    inner: &InnerOptimizer,
    cfg: &DstConfig,
    partition: &SiloPartition,
    state: &DstState,
) -> Result<(ParamVector, DstState, DstStepRecord)> {
    let n = seed.len();
    for len in [params.len(), grads.len(), partition.len()] {
        if len != n {
            return Err(DstError::LengthMismatch {
                expected: n,
                actual: len,
            });
        }
    }

    let (u, opt) = inner.update(&state.opt, grads)?;
    let theta_hat: Vec<f32> = params.values().iter().zip(&u).map(|(p, u)| p + u).collect();
    crate::param_store::check_finite(&theta_hat, params.layout())?;

    let mut thresholds = state.thresholds.clone();
    let mut frozen = state.frozen.clone();
    let (indices, per_silo) = match (&state.frozen, cfg.churn) {
        (Some(f), false) => (f.indices.clone(), f.per_silo.clone()),
        _ => {
            let delta = score(cfg.distance, &theta_hat, seed)?;
            let delta = normalize_scores(delta, params.layout(), seed, cfg.normalization)?;
            let (sel, next) = select(&delta, partition, cfg.epsilon, cfg.selection, &state.thresholds)?;
            thresholds = next;
            if !cfg.churn {
                frozen = Some(FrozenSubset {
                    indices: sel.indices.clone(),
                    per_silo: sel.per_silo.clone(),
                });
            }
            (sel.indices, sel.per_silo)
        }
    };

    let seed_values = seed.values();
    let mut next = seed_values.to_vec();
    let mut coincident = 0;
    for &i in &indices {
        next[i] = theta_hat[i];
        if theta_hat[i].to_bits() == seed_values[i].to_bits() {
            coincident += 1;
        }
    }
    let next = ParamVector::new(params.shared_layout(), next)?;

    let step = state.step + 1;
    let record = DstStepRecord {
        step,
        per_silo,
        selected_count: indices.len(),
        coincident,
        subset: Some(indices),
    };
    let state = DstState {
        opt,
        thresholds,
        frozen,
        step,
    };
    Ok((next, state, record))
}

/// Stateful wrapper around [`dst_step`].
#[derive(Debug, Clone)]
pub struct DstOptimizer {
    config: DstConfig,
    inner: InnerOptimizer,
    partition: SiloPartition,
    state: DstState,
}

impl DstOptimizer {
    pub fn new(config: DstConfig, inner: InnerOptimizer, seed: &SeedSnapshot) -> Result<Self> {
        config.validate()?;
        inner.validate()?;
        let partition = build_partition(seed.layout(), config.scheme);
        validate_partition(&partition, seed.len())?;
        Ok(Self {
            config,
            inner,
            partition,
            state: DstState::new(&inner, seed.len()),
        })
    }

    /// A wrapper whose subset is fixed up front (churn disabled).
    pub fn with_fixed_subset(
        mut config: DstConfig,
        inner: InnerOptimizer,
        seed: &SeedSnapshot,
        mut indices: Vec<usize>,
    ) -> Result<Self> {
        config.churn = false;
        let mut opt = Self::new(config, inner, seed)?;
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= seed.len() {
                return Err(DstError::InvalidArgument(format!(
                    "fixed subset index {last} out of range"
                )));
            }
        }
        let per_silo = opt
            .partition
            .silos
            .iter()
            .map(|s| SiloSelection {
                silo_id: s.id.clone(),
                silo_len: s.len(),
                budget: crate::partition::silo_budget(s.len(), config.epsilon).unwrap_or(0),
                selected: indices.iter().filter(|&&i| s.contains(i)).count(),
                threshold: None,
            })
            .collect();
        opt.state.frozen = Some(FrozenSubset { indices, per_silo });
        Ok(opt)
    }

    pub fn config(&self) -> &DstConfig {
        &self.config
    }

    pub fn partition(&self) -> &SiloPartition {
        &self.partition
    }

    pub fn state(&self) -> &DstState {
        &self.state
    }

    pub fn step(
        &mut self,
        params: &mut ParamVector,
        seed: &SeedSnapshot,
        grads: &[f32],
    ) -> Result<DstStepRecord> {
        let (next, state, record) = dst_step(
            params,
            seed,
            grads,
            &self.inner,
            &self.config,
            &self.partition,
            &self.state,
        )?;
        *params = next;
        self.state = state;
        Ok(record)
    }
}
