//! Learning-rate × ε grid over several seeds.

use rayon::prelude::*;

use crate::error::{DstError, Result};
use crate::optimizer::InnerOptimizer;

use super::train::{finetune, Experiment, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub learning_rates: Vec<f32>,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub seed: u64,
    pub learning_rate: f32,
    pub epsilon: f64,
    /// Final held-out loss; infinite if the run diverged.
    pub heldout_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,lr,epsilon,heldout_loss\n");
        for c in &self.cells {
            out += &format!("{},{},{},{}\n", c.seed, c.learning_rate, c.epsilon, c.heldout_loss);
        }
        out
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut seeds: Vec<u64> = Vec::new();
        for c in &self.cells {
            if !seeds.contains(&c.seed) {
                seeds.push(c.seed);
            }
        }
        seeds
    }

    fn epsilons(&self) -> Vec<f64> {
        let mut eps: Vec<f64> = Vec::new();
        for c in &self.cells {
            if !eps.contains(&c.epsilon) {
                eps.push(c.epsilon);
            }
        }
        eps.sort_by(f64::total_cmp);
        eps
    }

    /// Best learning rate per ε for one seed, ε ascending. Ties go to the
    /// smaller learning rate.
    pub fn best_lr(&self, seed: u64) -> Vec<(f64, f32)> {
        self.epsilons()
            .into_iter()
            .filter_map(|eps| {
                self.cells
                    .iter()
                    .filter(|c| c.seed == seed && c.epsilon == eps)
                    .min_by(|a, b| {
                        a.heldout_loss
                            .total_cmp(&b.heldout_loss)
                            .then(a.learning_rate.total_cmp(&b.learning_rate))
                    })
                    .map(|c| (eps, c.learning_rate))
            })
            .collect()
    }

    /// Best learning rate per ε for the loss averaged over seeds.
    pub fn best_lr_mean(&self) -> Vec<(f64, f32)> {
        let mut lrs: Vec<f32> = Vec::new();
        for c in &self.cells {
            if !lrs.contains(&c.learning_rate) {
                lrs.push(c.learning_rate);
            }
        }
        lrs.sort_by(f32::total_cmp);
        self.epsilons()
            .into_iter()
            .filter_map(|eps| {
                lrs.iter()
                    .map(|&lr| {
                        let losses: Vec<f64> = self
                            .cells
                            .iter()
                            .filter(|c| c.epsilon == eps && c.learning_rate == lr)
                            .map(|c| c.heldout_loss)
                            .collect();
                        (lr, losses.iter().sum::<f64>() / losses.len() as f64)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(lr, _)| (eps, lr))
            })
            .collect()
    }

    pub fn best_lr_csv(&self) -> String {
        let mut out = String::from("seed,epsilon,best_lr\n");
        for seed in self.seeds() {
            for (eps, lr) in self.best_lr(seed) {
                out += &format!("{seed},{eps},{lr}\n");
            }
        }
        out
    }
}

/// Run every (seed, lr, ε) cell of the grid in parallel.
///
/// `experiment(seed)` and `base(seed)` provide the per-seed setup; each seed
/// pretrains once. Diverged runs are recorded with an infinite loss, other
/// errors abort the sweep.
pub fn lr_epsilon_sweep<E, B>(grid: &SweepGrid, experiment: E, base: B) -> Result<SweepTable>
where
    E: Fn(u64) -> Experiment + Sync,
    B: Fn(u64) -> TrainConfig + Sync,
{
    if grid.learning_rates.is_empty() || grid.epsilons.is_empty() || grid.seeds.is_empty() {
        return Err(DstError::InvalidArgument("sweep grid is empty".into()));
    }
    let seeded: Vec<_> = grid
        .seeds
        .par_iter()
        .map(|&seed| {
            let exp = experiment(seed);
            let (snapshot, _) = exp.pretrain_seed()?;
            let data = exp.finetune_data()?;
            Ok((seed, exp, snapshot, data))
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<_> = seeded
        .iter()
        .flat_map(|s| {
            grid.learning_rates
                .iter()
                .flat_map(move |&lr| grid.epsilons.iter().map(move |&eps| (s, lr, eps)))
        })
        .collect();

    let cells = jobs
        .into_par_iter()
        .map(|((seed, exp, snapshot, data), lr, eps)| {
            let mut cfg = base(*seed);
            cfg.optimizer = InnerOptimizer::new(cfg.optimizer.kind, lr)?;
            cfg.dst.epsilon = eps;
            cfg.mask_fraction = eps;
            let heldout_loss = match finetune(&exp.mlp, snapshot, data, &cfg) {
                Ok(run) => run.final_heldout_loss(),
                Err(DstError::Divergence { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            Ok(SweepCell {
                seed: *seed,
                learning_rate: lr,
                epsilon: eps,
                heldout_loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { cells })
}
