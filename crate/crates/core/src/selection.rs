//! Per-silo subset selection: exact top-k, or tracking the threshold from the
//! previous step with a few bisection iterations.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{DstError, Result};
use crate::partition::{silo_budget, SiloPartition};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionMode {
    ExactTopK,
    /// Bisection refinement of the previous threshold: `m` iterations inside
    /// `[q'/r, r·q']`.
    Iterative { m: u32, r: f64 },
}

impl SelectionMode {
    pub const DEFAULT_ITERATIONS: u32 = 3;
    pub const DEFAULT_FLUCTUATION: f64 = 2.0;

    pub fn iterative_default() -> Self {
        SelectionMode::Iterative {
            m: Self::DEFAULT_ITERATIONS,
            r: Self::DEFAULT_FLUCTUATION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SelectionMode::ExactTopK => Ok(()),
            SelectionMode::Iterative { m, r } => {
                if m == 0 {
                    return Err(DstError::InvalidArgument(
                        "iterative selection needs m >= 1".into(),
                    ));
                }
                if !(r > 1.0 && r.is_finite()) {
                    return Err(DstError::InvalidArgument(format!(
                        "fluctuation factor r must be > 1, got {r}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectionMode::ExactTopK => "exact_topk",
            SelectionMode::Iterative { .. } => "iterative",
        }
    }
}

/// Last threshold per silo id. A missing entry means "not yet initialized".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThresholdState {
    thresholds: BTreeMap<String, f64>,
}

impl ThresholdState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, silo_id: &str) -> Option<f64> {
        self.thresholds.get(silo_id).copied()
    }

    pub fn is_initialized(&self, silo_id: &str) -> bool {
        self.thresholds.contains_key(silo_id)
    }

    pub fn set(&mut self, silo_id: impl Into<String>, q: f64) {
        debug_assert!(q > 0.0 && q.is_finite());
        self.thresholds.insert(silo_id.into(), q);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.thresholds.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Descending by score, ascending by index on ties.
#[inline]
fn rank_order(delta: &[f32], a: usize, b: usize) -> Ordering {
    delta[b].total_cmp(&delta[a]).then(a.cmp(&b))
}

/// Exact top-k with its boundary value (largest unselected score).
fn topk_with_boundary(delta: &[f32], k: usize) -> Result<(Vec<usize>, Option<f32>)> {
    let len = delta.len();
    if k > len {
        return Err(DstError::InvalidArgument(format!(
            "top-k with k = {k} on a silo of {len}"
        )));
    }
    if k == 0 {
        let boundary = delta.iter().copied().max_by(f32::total_cmp);
        return Ok((Vec::new(), boundary));
    }
    if k == len {
        return Ok(((0..len).collect(), None));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(delta, a, b));
    let boundary = idx[k..]
        .iter()
        .map(|&i| delta[i])
        .max_by(f32::total_cmp);
    idx.truncate(k);
    idx.sort_unstable();
    Ok((idx, boundary))
}

/// The `k` silo-local indices with the largest scores, ascending. Ties at the
/// boundary go to the smaller index.
pub fn topk_exact(delta: &[f32], k: usize) -> Result<Vec<usize>> {
    topk_with_boundary(delta, k).map(|(idx, _)| idx)
}

/// Fraction of scores strictly greater than `q`.
pub fn count_above(delta: &[f32], q: f64) -> Result<f64> {
    if delta.is_empty() {
        return Err(DstError::InvalidArgument(
            "count_above on an empty score vector".into(),
        ));
    }
    Ok(count_above_unchecked(delta, q))
}

#[inline]
fn count_above_unchecked(delta: &[f32], q: f64) -> f64 {
    let above = delta.iter().filter(|&&d| f64::from(d) > q).count();
    above as f64 / delta.len() as f64
}

/// Bisection refinement of the previous step's threshold.
///
/// The bracket starts at `[q_prev / r, r · q_prev]` with the midpoint at
/// `q_prev`; after `m` halvings the bound whose realized fraction is closer to
/// `epsilon` is returned (the upper one on a tie).
pub fn refine_threshold(q_prev: f64, delta: &[f32], epsilon: f64, m: u32, r: f64) -> Result<f64> {
    if !(q_prev > 0.0 && q_prev.is_finite()) {
        return Err(DstError::InvalidArgument(format!(
            "previous threshold must be positive, got {q_prev}"
        )));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(DstError::InvalidEpsilon(epsilon));
    }
    SelectionMode::Iterative { m, r }.validate()?;
    if delta.is_empty() {
        return Err(DstError::InvalidArgument(
            "threshold refinement on an empty silo".into(),
        ));
    }
    let mut lo = q_prev / r;
    let mut mid = q_prev;
    let mut hi = q_prev * r;
    for _ in 0..m {
        if count_above_unchecked(delta, mid) > epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
        mid = 0.5 * (lo + hi);
    }
    let err_lo = (count_above_unchecked(delta, lo) - epsilon).abs();
    let err_hi = (count_above_unchecked(delta, hi) - epsilon).abs();
    Ok(if err_lo < err_hi { lo } else { hi })
}

/// Outcome for one silo.
#[derive(Debug, Clone, PartialEq)]
pub struct SiloSelection {
    pub silo_id: String,
    pub silo_len: usize,
    pub budget: usize,
    pub selected: usize,
    /// Threshold separating selected from reset scores, when one exists.
    pub threshold: Option<f64>,
}

impl SiloSelection {
    /// Realized free fraction ε̃.
    pub fn realized_fraction(&self) -> f64 {
        if self.silo_len == 0 {
            0.0
        } else {
            self.selected as f64 / self.silo_len as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Sorted global indices.
    pub indices: Vec<usize>,
    pub per_silo: Vec<SiloSelection>,
}

/// Select the free parameters of every silo.
///
/// Returns the selection together with the updated threshold state; the input
/// state is left untouched.
pub fn select(
    delta: &[f32],
    partition: &SiloPartition,
    epsilon: f64,
    mode: SelectionMode,
    state: &ThresholdState,
) -> Result<(Selection, ThresholdState)> {
    mode.validate()?;
    silo_budget(0, epsilon)?;
    if partition.len() != delta.len() {
        return Err(DstError::LengthMismatch {
            expected: partition.len(),
            actual: delta.len(),
        });
    }
    let mut new_state = state.clone();
    let mut indices = Vec::new();
    let mut per_silo = Vec::with_capacity(partition.silos.len());

    for silo in &partition.silos {
        let local = silo.gather(delta);
        let len = local.len();
        let budget = silo_budget(len, epsilon)?;

        let exact = |k| -> Result<(Vec<usize>, Option<f64>)> {
            let (chosen, boundary) = topk_with_boundary(&local, k)?;
            Ok((chosen, boundary.map(f64::from)))
        };
        let (chosen, threshold) = match mode {
            _ if budget == 0 || budget == len => exact(budget)?,
            SelectionMode::ExactTopK => exact(budget)?,
            SelectionMode::Iterative { m, r } => match state.get(&silo.id) {
                Some(q_prev) => {
                    let q = refine_threshold(q_prev, &local, epsilon, m, r)?;
                    new_state.set(silo.id.clone(), q);
                    let chosen = (0..len).filter(|&i| f64::from(local[i]) > q).collect();
                    (chosen, Some(q))
                }
                None => {
                    let (chosen, boundary) = exact(budget)?;
                    if let Some(q) = boundary.filter(|q| *q > 0.0 && q.is_finite()) {
                        new_state.set(silo.id.clone(), q);
                    }
                    (chosen, boundary)
                }
            },
        };

        per_silo.push(SiloSelection {
            silo_id: silo.id.clone(),
            silo_len: len,
            budget,
            selected: chosen.len(),
            threshold,
        });
        indices.extend(chosen.into_iter().map(|i| silo.global_index(i)));
    }
    indices.sort_unstable();
    Ok((Selection { indices, per_silo }, new_state))
}
