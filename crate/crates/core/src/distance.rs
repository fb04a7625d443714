//! Component-wise distance between the fully updated parameters and the seed.

use std::fmt;
use std::str::FromStr;

use crate::error::{DstError, Result};
use crate::param_store::{ParamLayout, SeedSnapshot};
use crate::partition::{build_partition, SiloScheme};

/// Denominator clamp for relative distance and mean normalization.
pub const DENOM_FLOOR: f32 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistanceKind {
    /// `|θ0 − θ̂|`
    Absolute,
    /// `|θ0 − θ̂| / max(|θ0|, δ)`
    Relative,
    /// `|θ0 · (θ0 − θ̂)|`
    InverseRelative,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 3] = [
        DistanceKind::Absolute,
        DistanceKind::Relative,
        DistanceKind::InverseRelative,
    ];

    pub fn tag(self) -> u8 {
        match self {
            DistanceKind::Absolute => 0,
            DistanceKind::Relative => 1,
            DistanceKind::InverseRelative => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::Absolute => "absolute",
            DistanceKind::Relative => "relative",
            DistanceKind::InverseRelative => "inverse_relative",
        }
    }

    #[inline]
    fn apply(self, seed: f32, updated: f32) -> f32 {
        let diff = seed - updated;
        match self {
            DistanceKind::Absolute => diff.abs(),
            DistanceKind::Relative => diff.abs() / seed.abs().max(DENOM_FLOOR),
            DistanceKind::InverseRelative => (seed * diff).abs(),
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceKind {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DstError::Config(format!("unknown distance '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    None,
    /// Divide by the parameter count of the group.
    Size,
    /// Divide by the mean absolute seed value of the group.
    Mean,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::None => "none",
            Normalization::Size => "size",
            Normalization::Mean => "mean",
        }
    }
}

impl FromStr for Normalization {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "size" => Ok(Normalization::Size),
            "mean" => Ok(Normalization::Mean),
            _ => Err(DstError::Config(format!("unknown normalization '{s}'"))),
        }
    }
}

/// Normalization kind plus the grouping it is computed over. The granularity
/// is ignored when the kind is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizationMode {
    pub kind: Normalization,
    pub granularity: SiloScheme,
}

impl Default for NormalizationMode {
    fn default() -> Self {
        Self {
            kind: Normalization::None,
            granularity: SiloScheme::PerModuleAndLayer,
        }
    }
}

/// Δ for every component: `d(θ0_i, θ̂_i, θ0_i)`.
pub fn score(kind: DistanceKind, theta_hat: &[f32], seed: &SeedSnapshot) -> Result<Vec<f32>> {
    score_values(kind, theta_hat, seed.values())
}

pub fn score_values(kind: DistanceKind, theta_hat: &[f32], seed: &[f32]) -> Result<Vec<f32>> {
    if theta_hat.len() != seed.len() {
        return Err(DstError::LengthMismatch {
            expected: seed.len(),
            actual: theta_hat.len(),
        });
    }
    if let Some(i) = theta_hat.iter().chain(seed).position(|v| v.is_nan()) {
        return Err(DstError::InvalidArgument(format!(
            "NaN input to distance at index {}",
            i % seed.len().max(1)
        )));
    }
    let delta: Vec<f32> = seed
        .iter()
        .zip(theta_hat)
        .map(|(&s, &t)| kind.apply(s, t))
        .collect();
    if let Some(i) = delta.iter().position(|d| !d.is_finite()) {
        return Err(DstError::NonFinite {
            group: String::new(),
            index: i,
            value: delta[i],
        });
    }
    Ok(delta)
}

/// Rescale Δ per layout group so scores are comparable across modules.
pub fn normalize_scores(
    mut delta: Vec<f32>,
    layout: &ParamLayout,
    seed: &SeedSnapshot,
    mode: NormalizationMode,
) -> Result<Vec<f32>> {
    if mode.kind == Normalization::None {
        return Ok(delta);
    }
    if delta.len() != layout.len() || seed.len() != layout.len() {
        return Err(DstError::LengthMismatch {
            expected: layout.len(),
            actual: delta.len(),
        });
    }
    let groups = build_partition(layout, mode.granularity);
    for group in &groups.silos {
        let size = group.len();
        if size == 0 {
            continue;
        }
        let denom = match mode.kind {
            Normalization::Size => size as f64,
            Normalization::Mean => {
                let sum: f64 = group
                    .indices()
                    .map(|i| f64::from(seed.values()[i].abs()))
                    .sum();
                (sum / size as f64).max(f64::from(DENOM_FLOOR))
            }
            Normalization::None => unreachable!(),
        };
        for i in group.indices() {
            delta[i] = (f64::from(delta[i]) / denom) as f32;
        }
    }
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param_store::ParamVector;

    fn seed_of(values: Vec<f32>) -> SeedSnapshot {
        let layout = ParamLayout::new()
            .with_group("w", "weight", 0, values.len())
            .unwrap();
        SeedSnapshot::new(&ParamVector::new(layout, values).unwrap())
    }

    #[test]
    fn formulas() {
        let d = score_values(DistanceKind::Absolute, &[1.0], &[1.5]).unwrap();
        assert_eq!(d, vec![0.5]);
        let d = score_values(DistanceKind::Relative, &[1.0], &[2.0]).unwrap();
        assert_eq!(d, vec![0.5]);
        let d = score_values(DistanceKind::InverseRelative, &[123.0], &[0.0]).unwrap();
        assert_eq!(d, vec![0.0]);
        let d = score_values(DistanceKind::InverseRelative, &[1.0], &[-2.0]).unwrap();
        assert_eq!(d, vec![6.0]);
    }

    #[test]
    fn relative_zero_seed_is_finite() {
        let d = score_values(DistanceKind::Relative, &[1e-20], &[0.0]).unwrap();
        assert!(d[0].is_finite());
        assert!(d[0] > 0.0);
    }

    #[test]
    fn zero_update_scores_zero() {
        let seed = [0.3f32, -1.0, 0.0, 7.5];
        for kind in DistanceKind::ALL {
            let d = score_values(kind, &seed, &seed).unwrap();
            assert!(d.iter().all(|&x| x == 0.0), "{kind}");
        }
    }

    #[test]
    fn nan_and_length_errors() {
        assert!(score_values(DistanceKind::Absolute, &[f32::NAN], &[1.0]).is_err());
        assert!(matches!(
            score_values(DistanceKind::Absolute, &[1.0, 2.0], &[1.0]),
            Err(DstError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn size_normalization() {
        let seed = seed_of(vec![1.0; 4]);
        let mode = NormalizationMode {
            kind: Normalization::Size,
            granularity: SiloScheme::PerModuleAndLayer,
        };
        let out = normalize_scores(vec![4.0, 8.0, 0.0, 4.0], seed.layout(), &seed, mode).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_normalization() {
        let seed = seed_of(vec![1.0, -3.0]);
        let mode = NormalizationMode {
            kind: Normalization::Mean,
            granularity: SiloScheme::PerModule,
        };
        let out = normalize_scores(vec![2.0, 2.0], seed.layout(), &seed, mode).unwrap();
        assert_eq!(out, vec![1.0, 1.0]);
    }

    #[test]
    fn none_normalization_is_identity() {
        let seed = seed_of(vec![1.0, -3.0]);
        let out = normalize_scores(
            vec![0.25, 9.0],
            seed.layout(),
            &seed,
            NormalizationMode::default(),
        )
        .unwrap();
        assert_eq!(out, vec![0.25, 9.0]);
    }

    #[test]
    fn normalization_is_per_group() {
        let layout = ParamLayout::new()
            .with_group("weight@0", "weight", 0, 2)
            .unwrap()
            .with_group("bias@0", "bias", 0, 1)
            .unwrap();
        let seed = SeedSnapshot::new(&ParamVector::new(layout, vec![2.0, 2.0, 0.0]).unwrap());
        let mode = NormalizationMode {
            kind: Normalization::Mean,
            granularity: SiloScheme::PerModuleAndLayer,
        };
        let out = normalize_scores(vec![4.0, 1.0, 1e-12], seed.layout(), &seed, mode).unwrap();
        assert_eq!(out[0], 2.0);
        assert_eq!(out[1], 0.5);
        // all-zero seed group: clamped denominator
        assert!((out[2] - 1.0).abs() < 1e-6);
    }
}
