//! Sparse deltas against a seed model, the DSTD file format, and serving
//! several task deltas from one shared seed.
//!
//! DSTD layout (little-endian):
//!
//! ```text
//! "DSTD" | version u32 = 1 | n u64 | entry count u64 | seed checksum u64
//! epsilon f64 | distance tag u8 | scheme tag u8
//! entries: (index u64, value f32), strictly ascending by index
//! ```
//!
//! Entries hold the absolute new values, not differences, so applying a delta
//! restores the fine-tuned model bitwise.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::distance::DistanceKind;
use crate::error::{DstError, Result};
use crate::param_store::{ParamSource, ParamVector, SeedSnapshot};
use crate::partition::SiloScheme;

pub const DELTA_MAGIC: &[u8; 4] = b"DSTD";
pub const DELTA_VERSION: u32 = 1;
/// Tag byte for "not applicable" (e.g. a full fine-tuning delta has no distance).
pub const NO_TAG: u8 = 0xff;

const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 8 + 8 + 1 + 1;
const ENTRY_LEN: usize = 8 + 4;

/// How the delta was produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaMeta {
    pub epsilon: f64,
    pub distance_tag: u8,
    pub scheme_tag: u8,
}

impl DeltaMeta {
    pub fn new(epsilon: f64, distance: Option<DistanceKind>, scheme: Option<SiloScheme>) -> Self {
        Self {
            epsilon,
            distance_tag: distance.map_or(NO_TAG, DistanceKind::tag),
            scheme_tag: scheme.map_or(NO_TAG, SiloScheme::tag),
        }
    }

    pub fn distance(&self) -> Option<DistanceKind> {
        DistanceKind::from_tag(self.distance_tag)
    }

    pub fn scheme(&self) -> Option<SiloScheme> {
        SiloScheme::from_tag(self.scheme_tag)
    }
}

impl Default for DeltaMeta {
    fn default() -> Self {
        Self::new(1.0, None, None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetDelta {
    n: u64,
    indices: Vec<u64>,
    values: Vec<f32>,
    seed_checksum: u64,
    pub meta: DeltaMeta,
}

impl SubsetDelta {
    /// Build from explicit entries; indices must be strictly increasing and `< n`.
    pub fn from_entries(
        n: u64,
        entries: Vec<(u64, f32)>,
        seed_checksum: u64,
        meta: DeltaMeta,
    ) -> Result<Self> {
        let (indices, values): (Vec<u64>, Vec<f32>) = entries.into_iter().unzip();
        check_indices(&indices, n)?;
        Ok(Self {
            n,
            indices,
            values,
            seed_checksum,
            meta,
        })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn seed_checksum(&self) -> u64 {
        self.seed_checksum
    }

    pub fn indices(&self) -> &[u64] {
        &self.indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, f32)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    /// Value stored for flat index `i`, if any.
    #[inline]
    pub fn lookup(&self, i: u64) -> Option<f32> {
        self.indices.binary_search(&i).ok().map(|pos| self.values[pos])
    }
}

fn check_indices(indices: &[u64], n: u64) -> Result<()> {
    if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
        return Err(DstError::Corrupt(format!(
            "delta indices not strictly increasing: {} then {}",
            w[0], w[1]
        )));
    }
    if let Some(&last) = indices.last() {
        if last >= n {
            return Err(DstError::Corrupt(format!(
                "delta index {last} out of range for n = {n}"
            )));
        }
    }
    Ok(())
}

/// Entries where `model` differs bitwise from the seed.
pub fn diff(seed: &SeedSnapshot, model: &ParamVector) -> Result<SubsetDelta> {
    diff_with_meta(seed, model, DeltaMeta::default())
}

pub fn diff_with_meta(seed: &SeedSnapshot, model: &ParamVector, meta: DeltaMeta) -> Result<SubsetDelta> {
    let changed = crate::param_store::subset_indices(model, seed)?;
    let values = changed.iter().map(|&i| model.values()[i]).collect();
    Ok(SubsetDelta {
        n: seed.len() as u64,
        indices: changed.into_iter().map(|i| i as u64).collect(),
        values,
        seed_checksum: seed.checksum(),
        meta,
    })
}

fn check_compatible(seed: &SeedSnapshot, delta: &SubsetDelta) -> Result<()> {
    if delta.seed_checksum != seed.checksum() {
        return Err(DstError::ChecksumMismatch {
            expected: seed.checksum(),
            found: delta.seed_checksum,
        });
    }
    if delta.n != seed.len() as u64 {
        return Err(DstError::LengthMismatch {
            expected: seed.len(),
            actual: delta.n as usize,
        });
    }
    Ok(())
}

/// Materialize `seed` with the delta's entries written over it.
pub fn apply(seed: &SeedSnapshot, delta: &SubsetDelta) -> Result<ParamVector> {
    check_compatible(seed, delta)?;
    let mut params = seed.to_params();
    let values = params.values_mut();
    for (i, v) in delta.entries() {
        let slot = values.get_mut(i as usize).ok_or_else(|| {
            DstError::Corrupt(format!("delta index {i} out of range"))
        })?;
        *slot = v;
    }
    Ok(params)
}

/// Read-only view of seed + delta without a dense copy.
#[derive(Debug, Clone, Copy)]
pub struct DeltaView<'a> {
    seed: &'a SeedSnapshot,
    delta: &'a SubsetDelta,
}

impl<'a> DeltaView<'a> {
    pub fn new(seed: &'a SeedSnapshot, delta: &'a SubsetDelta) -> Result<Self> {
        check_compatible(seed, delta)?;
        Ok(Self { seed, delta })
    }

    #[inline]
    pub fn get(&self, i: usize) -> f32 {
        self.delta
            .lookup(i as u64)
            .unwrap_or_else(|| self.seed.values()[i])
    }

    pub fn len(&self) -> usize {
        self.seed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seed.is_empty()
    }
}

impl ParamSource<f32> for DeltaView<'_> {
    #[inline]
    fn param(&self, index: usize) -> f32 {
        self.get(index)
    }

    fn param_count(&self) -> usize {
        self.len()
    }
}

/// One seed shared by many task deltas.
#[derive(Debug, Clone)]
pub struct TaskDeltas {
    seed: SeedSnapshot,
    deltas: HashMap<String, SubsetDelta>,
}

impl TaskDeltas {
    pub fn new(seed: SeedSnapshot) -> Self {
        Self {
            seed,
            deltas: HashMap::new(),
        }
    }

    /// Register a task; refuses deltas made against another seed.
    pub fn insert(&mut self, task_id: impl Into<String>, delta: SubsetDelta) -> Result<()> {
        check_compatible(&self.seed, &delta)?;
        self.deltas.insert(task_id.into(), delta);
        Ok(())
    }

    pub fn seed(&self) -> &SeedSnapshot {
        &self.seed
    }

    pub fn view(&self, task_id: &str) -> Result<DeltaView<'_>> {
        let delta = self
            .deltas
            .get(task_id)
            .ok_or_else(|| DstError::UnknownTask(task_id.to_string()))?;
        Ok(DeltaView {
            seed: &self.seed,
            delta,
        })
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.deltas.keys().map(String::as_str)
    }
}

/// Run `consumer` against the on-the-fly view for `task_id`.
pub fn apply_onthefly<R>(
    seed: &SeedSnapshot,
    deltas: &HashMap<String, SubsetDelta>,
    task_id: &str,
    consumer: impl FnOnce(&DeltaView<'_>) -> R,
) -> Result<R> {
    let delta = deltas
        .get(task_id)
        .ok_or_else(|| DstError::UnknownTask(task_id.to_string()))?;
    let view = DeltaView::new(seed, delta)?;
    Ok(consumer(&view))
}

pub fn serialize(delta: &SubsetDelta) -> Vec<u8> {
    let mut w = Writer::with_capacity(HEADER_LEN + ENTRY_LEN * delta.len());
    w.bytes(DELTA_MAGIC);
    w.u32(DELTA_VERSION);
    w.u64(delta.n);
    w.u64(delta.len() as u64);
    w.u64(delta.seed_checksum);
    w.f64(delta.meta.epsilon);
    w.u8(delta.meta.distance_tag);
    w.u8(delta.meta.scheme_tag);
    for (i, v) in delta.entries() {
        w.u64(i);
        w.f32(v);
    }
    w.into_bytes()
}

pub fn deserialize(bytes: &[u8]) -> Result<SubsetDelta> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != DELTA_MAGIC {
        return Err(DstError::Format(format!(
            "bad delta magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != DELTA_VERSION {
        return Err(DstError::Format(format!("unsupported delta version {version}")));
    }
    let n = r.u64()?;
    let count = r.u64()?;
    let seed_checksum = r.u64()?;
    let epsilon = r.f64()?;
    let distance_tag = r.u8()?;
    let scheme_tag = r.u8()?;
    if distance_tag != NO_TAG && DistanceKind::from_tag(distance_tag).is_none() {
        return Err(DstError::Format(format!("unknown distance tag {distance_tag}")));
    }
    if scheme_tag != NO_TAG && SiloScheme::from_tag(scheme_tag).is_none() {
        return Err(DstError::Format(format!("unknown scheme tag {scheme_tag}")));
    }
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(ENTRY_LEN))
        .ok_or_else(|| DstError::Corrupt(format!("entry count {count} too large")))?;
    if r.remaining() != expected {
        return Err(DstError::Corrupt(format!(
            "{count} entries need {expected} bytes, found {}",
            r.remaining()
        )));
    }
    let count = count as usize;
    let mut indices = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        indices.push(r.u64()?);
        values.push(r.f32()?);
    }
    r.finish()?;
    check_indices(&indices, n)?;
    Ok(SubsetDelta {
        n,
        indices,
        values,
        seed_checksum,
        meta: DeltaMeta {
            epsilon,
            distance_tag,
            scheme_tag,
        },
    })
}

pub fn save_delta(delta: &SubsetDelta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serialize(delta)).map_err(|e| DstError::io(path, e))
}

pub fn load_delta(path: impl AsRef<Path>) -> Result<SubsetDelta> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DstError::io(path, e))?;
    deserialize(&bytes)
}
