//! Silo partitions over the flat parameter space.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{DstError, Result};
use crate::param_store::ParamLayout;

/// How parameters are grouped into silos that each get their own budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SiloScheme {
    /// One silo over the whole model.
    None,
    /// One silo per module kind, spanning all layers.
    PerModule,
    /// One silo per (module kind, layer).
    PerModuleAndLayer,
}

impl SiloScheme {
    pub const ALL: [SiloScheme; 3] = [
        SiloScheme::None,
        SiloScheme::PerModule,
        SiloScheme::PerModuleAndLayer,
    ];

    /// Tag byte used in the DSTD header.
    pub fn tag(self) -> u8 {
        match self {
            SiloScheme::None => 0,
            SiloScheme::PerModule => 1,
            SiloScheme::PerModuleAndLayer => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            SiloScheme::None => "none",
            SiloScheme::PerModule => "per_module",
            SiloScheme::PerModuleAndLayer => "per_module_and_layer",
        }
    }
}

impl fmt::Display for SiloScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SiloScheme {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| DstError::Config(format!("unknown siloing scheme '{s}'")))
    }
}

/// One cell of a partition, stored as a list of index ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Silo {
    pub id: String,
    pub ranges: Vec<Range<usize>>,
}

impl Silo {
    pub fn new(id: impl Into<String>, ranges: Vec<Range<usize>>) -> Self {
        Self {
            id: id.into(),
            ranges,
        }
    }

    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat indices in range order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|r| r.clone())
    }

    /// Flat index of the `local`-th element of this silo.
    pub fn global_index(&self, mut local: usize) -> usize {
        for r in &self.ranges {
            if local < r.len() {
                return r.start + local;
            }
            local -= r.len();
        }
        panic!("silo-local index out of range");
    }

    pub fn gather<T: Copy>(&self, values: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len());
        for r in &self.ranges {
            out.extend_from_slice(&values[r.clone()]);
        }
        out
    }

    pub fn contains(&self, i: usize) -> bool {
        self.ranges.iter().any(|r| r.contains(&i))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiloPartition {
    pub scheme: SiloScheme,
    pub silos: Vec<Silo>,
}

impl SiloPartition {
    /// Total number of indices covered.
    pub fn len(&self) -> usize {
        self.silos.iter().map(Silo::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn silo(&self, id: &str) -> Option<&Silo> {
        self.silos.iter().find(|s| s.id == id)
    }

    /// Silo position for every flat index (`n` = covered length).
    pub fn assignment(&self) -> Vec<usize> {
        let n = self
            .silos
            .iter()
            .flat_map(|s| s.ranges.iter().map(|r| r.end))
            .max()
            .unwrap_or(0);
        let mut out = vec![usize::MAX; n];
        for (pos, s) in self.silos.iter().enumerate() {
            for r in &s.ranges {
                out[r.clone()].fill(pos);
            }
        }
        out
    }
}

pub fn silo_id(scheme: SiloScheme, module_kind: &str, layer_index: u32) -> String {
    match scheme {
        SiloScheme::None => "ALL".to_string(),
        SiloScheme::PerModule => module_kind.to_string(),
        SiloScheme::PerModuleAndLayer => format!("{module_kind}@{layer_index}"),
    }
}

/// Build the partition for `scheme`. Silos appear in order of first occurrence
/// in the layout; adjacent ranges are merged.
pub fn build_partition(layout: &ParamLayout, scheme: SiloScheme) -> SiloPartition {
    let mut silos: Vec<Silo> = Vec::new();
    if scheme == SiloScheme::None {
        let ranges = if layout.is_empty() {
            Vec::new()
        } else {
            std::iter::once(0..layout.len()).collect()
        };
        silos.push(Silo::new("ALL", ranges));
        return SiloPartition { scheme, silos };
    }
    for e in layout.entries() {
        let id = silo_id(scheme, &e.module_kind, e.layer_index);
        let range = e.offset..e.offset + e.length;
        let silo = match silos.iter_mut().position(|s| s.id == id) {
            Some(pos) => &mut silos[pos],
            None => {
                silos.push(Silo::new(id, Vec::new()));
                silos.last_mut().expect("just pushed")
            }
        };
        if range.is_empty() {
            continue;
        }
        match silo.ranges.last_mut() {
            Some(last) if last.end == range.start => last.end = range.end,
            _ => silo.ranges.push(range),
        }
    }
    SiloPartition { scheme, silos }
}

/// Succeeds iff the silos are pairwise disjoint and cover exactly `[0, n)`.
pub fn validate_partition(partition: &SiloPartition, n: usize) -> Result<()> {
    let mut ranges: Vec<Range<usize>> = partition
        .silos
        .iter()
        .flat_map(|s| s.ranges.iter().cloned())
        .filter(|r| !r.is_empty())
        .collect();
    ranges.sort_by_key(|r| (r.start, r.end));
    let mut covered = 0usize;
    for r in ranges {
        if r.start < covered {
            return Err(DstError::PartitionOverlap(r.start));
        }
        if r.start > covered {
            return Err(DstError::PartitionGap(covered));
        }
        if r.end > n {
            return Err(DstError::InvalidArgument(format!(
                "partition index {} beyond n = {n}",
                n
            )));
        }
        covered = r.end;
    }
    if covered < n {
        return Err(DstError::PartitionGap(covered));
    }
    Ok(())
}

pub fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon <= 1.0 {
        Ok(())
    } else {
        Err(DstError::InvalidEpsilon(epsilon))
    }
}

/// Number of free parameters allowed in a silo of `silo_len` elements:
/// `ε·|S|` rounded half-to-even.
pub fn silo_budget(silo_len: usize, epsilon: f64) -> Result<usize> {
    check_epsilon(epsilon)?;
    if epsilon == 1.0 {
        return Ok(silo_len);
    }
    let k = (epsilon * silo_len as f64).round_ties_even() as usize;
    Ok(k.min(silo_len))
}
