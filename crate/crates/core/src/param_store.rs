//! Flat parameter storage: layout, live parameters, the immutable seed and
//! the DSTC dense checkpoint format.
//!
//! DSTC layout (little-endian):
//!
//! ```text
//! "DSTC" | version u32 = 1 | group count u32
//! per group: name_len u16, name utf-8, kind_len u16, kind utf-8, layer u32, length u64
//! n x f32 values in layout order
//! seed checksum u64 (0 when the file is itself a seed)
//! ```

use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::codec::{Reader, Writer};
use crate::error::{DstError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSTC";
pub const CHECKPOINT_VERSION: u32 = 1;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// One contiguous named group of parameters (for example `weight@1`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub group_name: String,
    pub module_kind: String,
    pub layer_index: u32,
    pub offset: usize,
    pub length: usize,
}

/// Ordered, contiguous, non-overlapping groups covering `[0, n)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a group after the current end. Group names must be unique.
    pub fn push(
        &mut self,
        group_name: impl Into<String>,
        module_kind: impl Into<String>,
        layer_index: u32,
        length: usize,
    ) -> Result<()> {
        let group_name = group_name.into();
        if self.entries.iter().any(|e| e.group_name == group_name) {
            return Err(DstError::InvalidArgument(format!(
                "duplicate group name '{group_name}'"
            )));
        }
        self.entries.push(LayoutEntry {
            group_name,
            module_kind: module_kind.into(),
            layer_index,
            offset: self.total,
            length,
        });
        self.total += length;
        Ok(())
    }

    pub fn with_group(
        mut self,
        group_name: impl Into<String>,
        module_kind: impl Into<String>,
        layer_index: u32,
        length: usize,
    ) -> Result<Self> {
        self.push(group_name, module_kind, layer_index, length)?;
        Ok(self)
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    /// Total parameter count `n`.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn group(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.group_name == name)
    }

    /// Group containing flat index `i`.
    pub fn group_of(&self, i: usize) -> Option<&LayoutEntry> {
        if i >= self.total {
            return None;
        }
        let pos = self.entries.partition_point(|e| e.offset + e.length <= i);
        self.entries.get(pos)
    }
}

/// Anything that can serve parameter values by flat index.
pub trait ParamSource<T> {
    fn param(&self, index: usize) -> T;
    fn param_count(&self) -> usize;
}

impl<T: Copy> ParamSource<T> for [T] {
    #[inline]
    fn param(&self, index: usize) -> T {
        self[index]
    }

    fn param_count(&self) -> usize {
        self.len()
    }
}

impl<T: Copy> ParamSource<T> for Vec<T> {
    #[inline]
    fn param(&self, index: usize) -> T {
        self[index]
    }

    fn param_count(&self) -> usize {
        self.len()
    }
}

/// The live parameter vector together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f32>,
    layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn new(layout: impl Into<Arc<ParamLayout>>, values: Vec<f32>) -> Result<Self> {
        let layout = layout.into();
        if values.len() != layout.len() {
            return Err(DstError::LengthMismatch {
                expected: layout.len(),
                actual: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: impl Into<Arc<ParamLayout>>) -> Self {
        let layout = layout.into();
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn shared_layout(&self) -> Arc<ParamLayout> {
        Arc::clone(&self.layout)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Fails on the first NaN or infinity, naming its group.
    pub fn check_finite(&self) -> Result<()> {
        check_finite(&self.values, &self.layout)
    }

    pub fn group_values(&self, name: &str) -> Option<&[f32]> {
        self.layout
            .group(name)
            .map(|e| &self.values[e.offset..e.offset + e.length])
    }
}

impl ParamSource<f32> for ParamVector {
    #[inline]
    fn param(&self, index: usize) -> f32 {
        self.values[index]
    }

    fn param_count(&self) -> usize {
        self.values.len()
    }
}

pub(crate) fn check_finite(values: &[f32], layout: &ParamLayout) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(index) => Err(DstError::NonFinite {
            group: layout
                .group_of(index)
                .map(|e| e.group_name.clone())
                .unwrap_or_default(),
            index,
            value: values[index],
        }),
    }
}

/// Immutable copy of the seed parameters `Θ^(0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSnapshot {
    values: Arc<[f32]>,
    layout: Arc<ParamLayout>,
    checksum: u64,
}

impl SeedSnapshot {
    pub fn new(params: &ParamVector) -> Self {
        let values: Arc<[f32]> = Arc::from(params.values());
        let checksum = fnv1a_f32(&values);
        Self {
            values,
            layout: params.shared_layout(),
            checksum,
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A fresh, mutable parameter vector equal to the seed.
    pub fn to_params(&self) -> ParamVector {
        ParamVector {
            values: self.values.to_vec(),
            layout: Arc::clone(&self.layout),
        }
    }
}

impl From<ParamVector> for SeedSnapshot {
    fn from(params: ParamVector) -> Self {
        SeedSnapshot::new(&params)
    }
}

impl ParamSource<f32> for SeedSnapshot {
    #[inline]
    fn param(&self, index: usize) -> f32 {
        self.values[index]
    }

    fn param_count(&self) -> usize {
        self.values.len()
    }
}

/// FNV-1a 64 over the little-endian bytes of `values`.
pub fn fnv1a_f32(values: &[f32]) -> u64 {
    let mut hash = FNV_OFFSET_BASIS;
    for v in values {
        for b in v.to_le_bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(FNV_PRIME);
        }
    }
    hash
}

pub fn checksum(seed: &SeedSnapshot) -> u64 {
    seed.checksum()
}

/// Flat indices where `params` differs bitwise from the seed.
pub fn subset_indices(params: &ParamVector, seed: &SeedSnapshot) -> Result<Vec<usize>> {
    differing_indices(params.values(), seed.values())
}

pub(crate) fn differing_indices(values: &[f32], seed: &[f32]) -> Result<Vec<usize>> {
    if values.len() != seed.len() {
        return Err(DstError::LengthMismatch {
            expected: seed.len(),
            actual: values.len(),
        });
    }
    Ok(values
        .iter()
        .zip(seed)
        .enumerate()
        .filter(|(_, (a, b))| a.to_bits() != b.to_bits())
        .map(|(i, _)| i)
        .collect())
}

/// A decoded checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    /// Checksum of the seed this model was derived from; 0 for a seed file.
    pub seed_checksum: u64,
}

pub fn encode_checkpoint(params: &ParamVector, seed_checksum: u64) -> Result<Vec<u8>> {
    params.check_finite()?;
    let layout = params.layout();
    let mut w = Writer::with_capacity(16 + 64 * layout.entries().len() + 4 * params.len());
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(u32::try_from(layout.entries().len()).map_err(|_| {
        DstError::InvalidArgument("too many layout groups for DSTC".into())
    })?);
    for e in layout.entries() {
        w.short_str(&e.group_name)?;
        w.short_str(&e.module_kind)?;
        w.u32(e.layer_index);
        w.u64(e.length as u64);
    }
    for v in params.values() {
        w.f32(*v);
    }
    w.u64(seed_checksum);
    Ok(w.into_bytes())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(DstError::Format(format!(
            "bad checkpoint magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DstError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let groups = r.u32()?;
    let mut layout = ParamLayout::new();
    for _ in 0..groups {
        let name = r.short_str()?;
        let kind = r.short_str()?;
        let layer = r.u32()?;
        let length = usize::try_from(r.u64()?)
            .map_err(|_| DstError::Corrupt("group length overflows usize".into()))?;
        layout
            .push(name, kind, layer, length)
            .map_err(|e| DstError::Corrupt(e.to_string()))?;
    }
    let n = layout.len();
    if r.remaining() < n.saturating_mul(4) {
        return Err(DstError::Corrupt(format!(
            "declared {n} values but only {} bytes of payload remain",
            r.remaining()
        )));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(r.f32()?);
    }
    let seed_checksum = r.u64()?;
    r.finish()?;
    let params = ParamVector::new(layout, values)?;
    params
        .check_finite()
        .map_err(|e| DstError::Corrupt(e.to_string()))?;
    Ok(Checkpoint {
        params,
        seed_checksum,
    })
}

/// Write a seed checkpoint (stored seed checksum 0).
pub fn save_checkpoint(params: &ParamVector, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_with_seed(params, 0, path)
}

pub fn save_checkpoint_with_seed(
    params: &ParamVector,
    seed_checksum: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, seed_checksum)?;
    fs::write(path, bytes).map_err(|e| DstError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamVector> {
    Ok(load_checkpoint_full(path)?.params)
}

pub fn load_checkpoint_full(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DstError::io(path, e))?;
    decode_checkpoint(&bytes)
}
