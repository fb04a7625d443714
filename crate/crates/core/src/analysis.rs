//! Subset overlap and distribution statistics.

use std::fmt::Write as _;

use crate::error::{DstError, Result};
use crate::optimizer::DstStepRecord;
use crate::param_store::ParamLayout;
use crate::partition::{build_partition, SiloScheme};

/// Sorted, deduplicated flat indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn intersection_len(&self, other: &IndexSet) -> usize {
        let (mut a, mut b) = (self.0.iter().peekable(), other.0.iter().peekable());
        let mut count = 0;
        while let (Some(&&x), Some(&&y)) = (a.peek(), b.peek()) {
            match x.cmp(&y) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    count += 1;
                    a.next();
                    b.next();
                }
            }
        }
        count
    }
}

impl From<Vec<usize>> for IndexSet {
    fn from(v: Vec<usize>) -> Self {
        IndexSet::new(v)
    }
}

impl FromIterator<usize> for IndexSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        IndexSet::new(iter.into_iter().collect())
    }
}

/// `|a ∩ b| / |a|`. Not symmetric when the sizes differ.
pub fn overlap(a: &IndexSet, b: &IndexSet) -> Result<f64> {
    if a.is_empty() {
        return Err(DstError::InvalidArgument(
            "overlap is undefined for an empty first subset".into(),
        ));
    }
    Ok(a.intersection_len(b) as f64 / a.len() as f64)
}

/// `M[i][j] = overlap(subsets[i], subsets[j])`.
pub fn overlap_matrix(subsets: &[IndexSet]) -> Result<Vec<Vec<f64>>> {
    if let Some(pos) = subsets.iter().position(IndexSet::is_empty) {
        return Err(DstError::InvalidArgument(format!(
            "subset at position {pos} is empty"
        )));
    }
    subsets
        .iter()
        .map(|a| subsets.iter().map(|b| overlap(a, b)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupShare {
    pub silo_id: String,
    pub size: usize,
    pub free: usize,
    pub fraction: f64,
}

/// Fraction of each group (at `granularity`) that lies in `subset`.
pub fn module_distribution(
    subset: &IndexSet,
    layout: &ParamLayout,
    granularity: SiloScheme,
) -> Vec<GroupShare> {
    let partition = build_partition(layout, granularity);
    partition
        .silos
        .iter()
        .map(|silo| {
            let free = silo
                .ranges
                .iter()
                .map(|r| {
                    let s = subset.as_slice();
                    s.partition_point(|&i| i < r.end) - s.partition_point(|&i| i < r.start)
                })
                .sum();
            let size = silo.len();
            GroupShare {
                silo_id: silo.id.clone(),
                size,
                free,
                fraction: if size == 0 { 0.0 } else { free as f64 / size as f64 },
            }
        })
        .collect()
}

/// Overlap of each checkpoint's subset with the first and with the previous one.
#[derive(Debug, Clone, PartialEq)]
pub struct ChurnSeries {
    pub steps: Vec<usize>,
    pub vs_first: Vec<f64>,
    pub vs_previous: Vec<f64>,
}

impl ChurnSeries {
    /// Tab-separated, one row per checkpoint.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\toverlap_vs_first\toverlap_vs_previous\n");
        for ((s, f), p) in self.steps.iter().zip(&self.vs_first).zip(&self.vs_previous) {
            let _ = writeln!(out, "{s}\t{f}\t{p}");
        }
        out
    }
}

/// The first entry of `vs_previous` compares the first subset with itself.
pub fn churn_series(records: &[DstStepRecord]) -> Result<ChurnSeries> {
    let mut sets = Vec::with_capacity(records.len());
    for r in records {
        let subset = r.subset.as_ref().ok_or_else(|| {
            DstError::InvalidArgument(format!("record for step {} carries no subset", r.step))
        })?;
        sets.push(IndexSet::new(subset.clone()));
    }
    let Some(first) = sets.first() else {
        return Ok(ChurnSeries {
            steps: Vec::new(),
            vs_first: Vec::new(),
            vs_previous: Vec::new(),
        });
    };
    let mut vs_first = Vec::with_capacity(sets.len());
    let mut vs_previous = Vec::with_capacity(sets.len());
    for (i, s) in sets.iter().enumerate() {
        vs_first.push(overlap(first, s)?);
        let prev = if i == 0 { first } else { &sets[i - 1] };
        vs_previous.push(overlap(prev, s)?);
    }
    Ok(ChurnSeries {
        steps: records.iter().map(|r| r.step).collect(),
        vs_first,
        vs_previous,
    })
}

/// CSV with a header row and a label column.
pub fn matrix_csv(labels: &[String], matrix: &[Vec<f64>]) -> String {
    let mut out = String::from("label");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (l, row) in labels.iter().zip(matrix) {
        out.push_str(l);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn distribution_csv(granularity: SiloScheme, shares: &[GroupShare]) -> String {
    let mut out = String::from("granularity,silo,size,free,fraction\n");
    for s in shares {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            granularity, s.silo_id, s.size, s.free, s.fraction
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> IndexSet {
        IndexSet::new(v.to_vec())
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(overlap(&set(&[1, 2, 3]), &set(&[1, 2, 3])).unwrap(), 1.0);
        assert_eq!(overlap(&set(&[1, 2, 3]), &set(&[2, 3, 4])).unwrap(), 2.0 / 3.0);
        assert_eq!(overlap(&set(&[1, 2]), &set(&[3, 4])).unwrap(), 0.0);
        assert!(overlap(&set(&[]), &set(&[1])).is_err());
    }

    #[test]
    fn overlap_is_asymmetric_for_unequal_sizes() {
        let a = set(&[1, 2]);
        let b = set(&[1, 2, 3, 4]);
        assert_eq!(overlap(&a, &b).unwrap(), 1.0);
        assert_eq!(overlap(&b, &a).unwrap(), 0.5);
    }

    #[test]
    fn matrix_examples() {
        assert_eq!(overlap_matrix(&[set(&[7])]).unwrap(), vec![vec![1.0]]);
        assert_eq!(
            overlap_matrix(&[set(&[1, 2]), set(&[3, 4])]).unwrap(),
            vec![vec![1.0, 0.0], vec![0.0, 1.0]]
        );
        let m = overlap_matrix(&[set(&[1, 2, 3]), set(&[2, 3, 9]), set(&[3, 8, 9])]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[i][j], m[j][i]);
            }
        }
        match overlap_matrix(&[set(&[1]), set(&[])]) {
            Err(DstError::InvalidArgument(msg)) => assert!(msg.contains("position 1")),
            other => panic!("{other:?}"),
        }
    }

    fn layout() -> ParamLayout {
        ParamLayout::new()
            .with_group("weight@0", "weight", 0, 4)
            .unwrap()
            .with_group("bias@0", "bias", 0, 2)
            .unwrap()
            .with_group("weight@1", "weight", 1, 4)
            .unwrap()
    }

    #[test]
    fn distribution_extremes() {
        let l = layout();
        let all: IndexSet = (0..10).collect();
        for g in module_distribution(&all, &l, SiloScheme::PerModuleAndLayer) {
            assert_eq!(g.fraction, 1.0);
        }
        for g in module_distribution(&IndexSet::default(), &l, SiloScheme::PerModule) {
            assert_eq!(g.fraction, 0.0);
        }
    }

    #[test]
    fn distribution_counts_ranges() {
        let l = layout();
        let s = set(&[0, 5, 6, 7]);
        let d = module_distribution(&s, &l, SiloScheme::PerModule);
        assert_eq!(d[0].silo_id, "weight");
        assert_eq!(d[0].free, 3);
        assert_eq!(d[0].fraction, 3.0 / 8.0);
        assert_eq!(d[1].free, 1);
        // size-weighted average equals |subset| / n
        let avg: f64 = d.iter().map(|g| g.fraction * g.size as f64).sum::<f64>() / 10.0;
        assert!((avg - 0.4).abs() < 1e-12);
    }

    fn record(step: usize, subset: Option<Vec<usize>>) -> DstStepRecord {
        DstStepRecord {
            step,
            per_silo: Vec::new(),
            selected_count: subset.as_ref().map_or(0, Vec::len),
            coincident: 0,
            subset,
        }
    }

    #[test]
    fn churn_series_on_rotating_sets() {
        // each checkpoint shifts a window of 4 indices by one
        let recs: Vec<_> = (0..4)
            .map(|k| record(k * 50, Some((k..k + 4).collect())))
            .collect();
        let s = churn_series(&recs).unwrap();
        assert_eq!(s.vs_first, vec![1.0, 0.75, 0.5, 0.25]);
        assert_eq!(s.vs_previous, vec![1.0, 0.75, 0.75, 0.75]);
        assert!(s.to_tsv().starts_with("step\toverlap_vs_first"));
    }

    #[test]
    fn churn_series_constant_and_missing() {
        let recs: Vec<_> = (0..3).map(|k| record(k, Some(vec![1, 5]))).collect();
        let s = churn_series(&recs).unwrap();
        assert!(s.vs_first.iter().chain(&s.vs_previous).all(|&v| v == 1.0));
        assert!(churn_series(&[record(1, None)]).is_err());
    }

    #[test]
    fn csv_helpers() {
        let csv = matrix_csv(&["a".into(), "b".into()], &[vec![1.0, 0.5], vec![0.5, 1.0]]);
        assert_eq!(csv, "label,a,b\na,1,0.5\nb,0.5,1\n");
        let shares = [GroupShare {
            silo_id: "weight@0".into(),
            size: 4,
            free: 1,
            fraction: 0.25,
        }];
        assert_eq!(
            distribution_csv(SiloScheme::PerModuleAndLayer, &shares),
            "granularity,silo,size,free,fraction\nper_module_and_layer,weight@0,4,1,0.25\n"
        );
    }
}
