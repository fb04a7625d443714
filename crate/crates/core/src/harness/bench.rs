//! Latency of dense merging versus on-the-fly delta lookup.

use std::hint::black_box;
use std::time::Instant;

use crate::error::{DstError, Result};
use crate::param_store::SeedSnapshot;
use crate::rng::Xoshiro256;
use crate::subset_delta::{apply, DeltaMeta, DeltaView, SubsetDelta};

use super::mlp::MlpSpec;

/// Timings in nanoseconds, each the minimum over the repetitions.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub label: String,
    pub entries: usize,
    /// Copying the seed and writing the delta over it.
    pub dense_apply_ns: f64,
    pub seed_forward_ns: f64,
    /// Forward pass reading parameters through the on-the-fly view.
    pub view_forward_ns: f64,
    /// Forward pass on the merged dense model.
    pub merged_forward_ns: f64,
}

impl BenchRow {
    /// Relative slowdown of the on-the-fly forward over the plain seed forward.
    pub fn overhead(&self) -> f64 {
        self.view_forward_ns / self.seed_forward_ns - 1.0
    }
}

fn min_time<R>(repetitions: usize, mut f: impl FnMut() -> R) -> f64 {
    (0..repetitions)
        .map(|_| {
            let start = Instant::now();
            black_box(f());
            start.elapsed().as_nanos() as f64
        })
        .fold(f64::INFINITY, f64::min)
}

/// Delta with `entries` random positions set to perturbed seed values.
pub fn synthetic_delta(seed: &SeedSnapshot, entries: usize, rng_seed: u64) -> Result<SubsetDelta> {
    if entries > seed.len() {
        return Err(DstError::InvalidArgument(format!(
            "{entries} entries requested from a model of {}",
            seed.len()
        )));
    }
    let mut rng = Xoshiro256::seed_from_u64(rng_seed);
    let indices = rng.sample_indices(seed.len(), entries);
    let entries = indices
        .into_iter()
        .map(|i| (i as u64, seed.values()[i] + 1e-3 * (1.0 + rng.next_f64() as f32)))
        .collect();
    SubsetDelta::from_entries(
        seed.len() as u64,
        entries,
        seed.checksum(),
        DeltaMeta::default(),
    )
}

/// Time each delta against the shared seed on the batch `inputs`.
pub fn bench_deltas(
    mlp: &MlpSpec,
    seed: &SeedSnapshot,
    deltas: &[(String, SubsetDelta)],
    inputs: &[f32],
    repetitions: usize,
) -> Result<Vec<BenchRow>> {
    if repetitions == 0 {
        return Err(DstError::InvalidArgument("repetitions must be positive".into()));
    }
    mlp.forward(seed.values(), inputs)?;
    let mut rows = Vec::with_capacity(deltas.len());
    for (label, delta) in deltas {
        let view = DeltaView::new(seed, delta)?;
        let merged = apply(seed, delta)?;
        // Interleave the measurements so drift in machine load hits all of them.
        let mut best = [f64::INFINITY; 4];
        for _ in 0..repetitions {
            let times = [
                min_time(1, || apply(seed, delta).map(|p| p.len())),
                min_time(1, || mlp.forward(seed.values(), inputs).map(|c| c.batch())),
                min_time(1, || mlp.forward(&view, inputs).map(|c| c.batch())),
                min_time(1, || mlp.forward(merged.values(), inputs).map(|c| c.batch())),
            ];
            for (b, t) in best.iter_mut().zip(times) {
                *b = b.min(t);
            }
        }
        rows.push(BenchRow {
            label: label.clone(),
            entries: delta.len(),
            dense_apply_ns: best[0],
            seed_forward_ns: best[1],
            view_forward_ns: best[2],
            merged_forward_ns: best[3],
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "delta,entries,dense_apply_ns,seed_forward_ns,view_forward_ns,merged_forward_ns,overhead\n",
    );
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{},{}\n",
            r.label,
            r.entries,
            r.dense_apply_ns,
            r.seed_forward_ns,
            r.view_forward_ns,
            r.merged_forward_ns,
            r.overhead()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::mlp::Activation;

    #[test]
    fn rows_and_csv_shape() {
        let mlp = MlpSpec::new(vec![4, 8, 2], Activation::Tanh, 1).unwrap();
        let seed = SeedSnapshot::new(&mlp.init());
        let deltas = vec![
            ("empty".to_string(), synthetic_delta(&seed, 0, 1).unwrap()),
            ("ten".to_string(), synthetic_delta(&seed, 10, 1).unwrap()),
        ];
        let rows = bench_deltas(&mlp, &seed, &deltas, &[0.5; 8], 3).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].entries, 10);
        let csv = bench_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(bench_deltas(&mlp, &seed, &deltas, &[0.5; 8], 0).is_err());
    }

    #[test]
    fn synthetic_delta_changes_every_entry() {
        let mlp = MlpSpec::new(vec![4, 8, 2], Activation::Tanh, 1).unwrap();
        let seed = SeedSnapshot::new(&mlp.init());
        let delta = synthetic_delta(&seed, 20, 5).unwrap();
        let merged = apply(&seed, &delta).unwrap();
        assert_eq!(crate::subset_delta::diff(&seed, &merged).unwrap().len(), 20);
    }
}
