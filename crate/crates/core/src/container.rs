//! Weight-container data model and the WDC binary format.
//!
//! A [`Checkpoint`] is an ordered dictionary of named, typed tensor
//! entries: the file a training job exports. WDC is the bit-exact
//! native serialization; see the [`crate::npz`] module for the ZIP-of-NPY
//! alternative.
//!
//! WDC layout (all little-endian, no padding, no footer):
//!
//! ```text
//! magic "WDC1" | u32 version=1 | u64 entry_count
//! per entry: u32 key_len | key bytes (UTF-8) | u8 dtype | u8 ndim
//!            | ndim x u64 dims | u64 payload_len | payload bytes
//! ```

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ziparc::ZipError;

pub const WDC_MAGIC: [u8; 4] = *b"WDC1";
pub const WDC_VERSION: u32 = 1;
/// Fixed WDC header size: magic + version + entry count.
pub const WDC_HEADER_BYTES: u64 = 16;
/// Longest accepted key, in bytes.
pub const MAX_KEY_BYTES: usize = 4096;
/// Declared payload lengths above this are rejected as overflow attacks.
pub const MAX_PAYLOAD_BYTES: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        expected: &'static str,
        found: [u8; 4],
    },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("no entry with key {0:?}")]
    MissingKey(String),
    #[error("empty key")]
    EmptyKey,
    #[error("key length {0} exceeds {MAX_KEY_BYTES} bytes")]
    KeyTooLong(usize),
    #[error("key is not valid UTF-8")]
    KeyNotUtf8,
    #[error("unknown dtype code {0}")]
    InvalidDType(u8),
    #[error("declared length overflows sanity limits: {0}")]
    LengthOverflow(String),
    #[error("truncated container: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("{extra} trailing bytes after the last declared entry")]
    TrailingBytes { extra: u64 },
    #[error("entry {key:?}: shape implies {expected} payload bytes, found {actual}")]
    ShapePayloadMismatch {
        key: String,
        expected: u64,
        actual: u64,
    },
    #[error("unsupported NPY member {member:?}: {reason}")]
    UnsupportedNpy { member: String, reason: String },
    #[error(transparent)]
    Zip(#[from] ZipError),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// Element types a checkpoint entry may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
    U8,
    I64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
            DType::I64 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            3 => Some(DType::I64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
            DType::I64 => 8,
        }
    }

    /// Little-endian NPY descr string for this dtype.
    pub fn npy_descr(self) -> &'static str {
        match self {
            DType::F32 => "<f4",
            DType::F64 => "<f8",
            DType::U8 => "|u1",
            DType::I64 => "<i8",
        }
    }

    pub fn from_npy_descr(descr: &str) -> Option<Self> {
        match descr {
            "<f4" => Some(DType::F32),
            "<f8" => Some(DType::F64),
            "|u1" => Some(DType::U8),
            "<i8" => Some(DType::I64),
            _ => None,
        }
    }
}

/// One named tensor: key, dtype, shape and raw little-endian payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    key: String,
    dtype: DType,
    shape: Vec<u64>,
    payload: Vec<u8>,
}

impl TensorEntry {
    pub fn new(
        key: impl Into<String>,
        dtype: DType,
        shape: Vec<u64>,
        payload: Vec<u8>,
    ) -> Result<Self, ContainerError> {
        let key = key.into();
        if key.is_empty() {
            return Err(ContainerError::EmptyKey);
        }
        if key.len() > MAX_KEY_BYTES {
            return Err(ContainerError::KeyTooLong(key.len()));
        }
        let elements = checked_element_count(&shape)
            .ok_or_else(|| ContainerError::LengthOverflow(format!("shape {shape:?}")))?;
        let expected = elements
            .checked_mul(dtype.byte_width())
            .filter(|&b| b <= MAX_PAYLOAD_BYTES)
            .ok_or_else(|| ContainerError::LengthOverflow(format!("shape {shape:?}")))?;
        if payload.len() as u64 != expected {
            return Err(ContainerError::ShapePayloadMismatch {
                key,
                expected,
                actual: payload.len() as u64,
            });
        }
        Ok(Self {
            key,
            dtype,
            shape,
            payload,
        })
    }

    /// 1-D F32 tensor from a float slice.
    pub fn from_f32(key: impl Into<String>, values: &[f32]) -> Result<Self, ContainerError> {
        let mut payload = Vec::with_capacity(values.len() * 4);
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        Self::new(key, DType::F32, vec![values.len() as u64], payload)
    }

    /// 1-D U8 tensor wrapping raw bytes.
    pub fn from_bytes(key: impl Into<String>, bytes: Vec<u8>) -> Result<Self, ContainerError> {
        let len = bytes.len() as u64;
        Self::new(key, DType::U8, vec![len], bytes)
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn element_count(&self) -> u64 {
        checked_element_count(&self.shape).expect("validated at construction")
    }

    /// Exact serialized size of this entry inside a WDC file.
    pub fn wire_size(&self) -> u64 {
        4 + self.key.len() as u64 + 1 + 1 + 8 * self.shape.len() as u64 + 8 + self.payload.len() as u64
    }
}

fn checked_element_count(shape: &[u64]) -> Option<u64> {
    shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

/// Serialization container for a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContainerFormat {
    Wdc,
    Npz,
}

/// Ordered collection of uniquely keyed tensor entries.
///
/// Equality compares the entries only (order-sensitively); the format tag
/// records provenance and the preferred serialization.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    entries: Vec<TensorEntry>,
    pub format: ContainerFormat,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            format: ContainerFormat::Wdc,
        }
    }

    pub fn with_format(format: ContainerFormat) -> Self {
        Self {
            entries: Vec::new(),
            format,
        }
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.entries.iter().any(|e| e.key() == key)
    }

    pub fn add_entry(&mut self, entry: TensorEntry) -> Result<(), ContainerError> {
        if self.contains_key(entry.key()) {
            return Err(ContainerError::DuplicateKey(entry.key().to_owned()));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get_entry(&self, key: &str) -> Result<&TensorEntry, ContainerError> {
        self.entries
            .iter()
            .find(|e| e.key() == key)
            .ok_or_else(|| ContainerError::MissingKey(key.to_owned()))
    }

    pub fn remove_entry(&mut self, key: &str) -> Result<TensorEntry, ContainerError> {
        let idx = self
            .entries
            .iter()
            .position(|e| e.key() == key)
            .ok_or_else(|| ContainerError::MissingKey(key.to_owned()))?;
        Ok(self.entries.remove(idx))
    }

    /// Exact WDC byte size, computed without serializing.
    pub fn total_size(&self) -> u64 {
        WDC_HEADER_BYTES + self.entries.iter().map(TensorEntry::wire_size).sum::<u64>()
    }

    pub fn to_wdc_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_size() as usize);
        out.extend_from_slice(&WDC_MAGIC);
        out.extend_from_slice(&WDC_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.key().len() as u32).to_le_bytes());
            out.extend_from_slice(e.key().as_bytes());
            out.push(e.dtype().code());
            out.push(e.shape().len() as u8);
            for &d in e.shape() {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&(e.payload().len() as u64).to_le_bytes());
            out.extend_from_slice(e.payload());
        }
        out
    }

    pub fn from_wdc_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut cursor = ByteCursor::new(bytes);
        let magic = cursor.take(4)?;
        if magic != WDC_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(magic);
            return Err(ContainerError::BadMagic {
                expected: "WDC1",
                found,
            });
        }
        let version = cursor.read_u32()?;
        if version != WDC_VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let entry_count = cursor.read_u64()?;
        let mut entries = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        for _ in 0..entry_count {
            let key_len = cursor.read_u32()? as usize;
            if key_len == 0 {
                return Err(ContainerError::EmptyKey);
            }
            if key_len > MAX_KEY_BYTES {
                return Err(ContainerError::KeyTooLong(key_len));
            }
            let key = std::str::from_utf8(cursor.take(key_len)?)
                .map_err(|_| ContainerError::KeyNotUtf8)?
                .to_owned();
            let dtype_code = cursor.read_u8()?;
            let dtype =
                DType::from_code(dtype_code).ok_or(ContainerError::InvalidDType(dtype_code))?;
            let ndim = cursor.read_u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cursor.read_u64()?);
            }
            let payload_len = cursor.read_u64()?;
            if payload_len > MAX_PAYLOAD_BYTES {
                return Err(ContainerError::LengthOverflow(format!(
                    "entry {key:?} declares {payload_len} payload bytes"
                )));
            }
            let payload = cursor.take(payload_len as usize)?.to_vec();
            if !seen.insert(key.clone()) {
                return Err(ContainerError::DuplicateKey(key));
            }
            entries.push(TensorEntry::new(key, dtype, shape, payload)?);
        }
        let extra = cursor.remaining();
        if extra > 0 {
            return Err(ContainerError::TrailingBytes { extra: extra as u64 });
        }
        Ok(Self {
            entries,
            format: ContainerFormat::Wdc,
        })
    }
}

/// Writes the checkpoint to a WDC file, returning the byte count written.
pub fn write_wdc(c: &Checkpoint, path: &Path) -> Result<u64, ContainerError> {
    let bytes = c.to_wdc_bytes();
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_wdc(path: &Path) -> Result<Checkpoint, ContainerError> {
    Checkpoint::from_wdc_bytes(&fs::read(path)?)
}

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.remaining() < n {
            return Err(ContainerError::Truncated {
                needed: self.pos as u64 + n as u64,
                available: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn read_u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    pub fn read_u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn read_u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Expected layout of a legitimate model export: the ground truth a
/// defender diffs a checkpoint against.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchitectureManifest {
    pub entries: Vec<ManifestEntry>,
    pub expected_total_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub key: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
}

impl ArchitectureManifest {
    /// Describes an existing (trusted) checkpoint.
    pub fn describing(c: &Checkpoint) -> Self {
        Self {
            entries: c
                .entries()
                .iter()
                .map(|e| ManifestEntry {
                    key: e.key().to_owned(),
                    dtype: e.dtype(),
                    shape: e.shape().to_vec(),
                })
                .collect(),
            expected_total_bytes: c.total_size(),
        }
    }

    pub fn lookup(&self, key: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.key == key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_entry() -> TensorEntry {
        TensorEntry::new("abc", DType::F32, vec![], 1.5f32.to_le_bytes().to_vec()).unwrap()
    }

    #[test]
    fn empty_checkpoint_serializes_to_header_only() {
        let c = Checkpoint::new();
        let bytes = c.to_wdc_bytes();
        assert_eq!(bytes.len(), 16);
        assert_eq!(c.total_size(), 16);
    }

    #[test]
    fn scalar_entry_size_matches_field_sum() {
        let mut c = Checkpoint::new();
        c.add_entry(scalar_entry()).unwrap();
        // 16 header + (4 key_len + 3 key + 1 dtype + 1 ndim + 0 dims
        //             + 8 payload_len + 4 payload)
        let bytes = c.to_wdc_bytes();
        assert_eq!(bytes.len(), 37);
        assert_eq!(c.total_size(), 37);
    }

    #[test]
    fn wdc_roundtrip_preserves_value() {
        let mut c = Checkpoint::new();
        c.add_entry(scalar_entry()).unwrap();
        c.add_entry(TensorEntry::from_f32("layer/w", &[1.0, -2.0, 3.5]).unwrap())
            .unwrap();
        c.add_entry(
            TensorEntry::new("idx", DType::I64, vec![2], vec![1, 0, 0, 0, 0, 0, 0, 0, 255, 255, 255, 255, 255, 255, 255, 255]).unwrap(),
        )
        .unwrap();
        let back = Checkpoint::from_wdc_bytes(&c.to_wdc_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = Checkpoint::new().to_wdc_bytes();
        bytes[3] = b'X';
        assert!(matches!(
            Checkpoint::from_wdc_bytes(&bytes),
            Err(ContainerError::BadMagic { .. })
        ));
    }

    #[test]
    fn duplicate_key_is_rejected_on_parse() {
        let mut c = Checkpoint::new();
        c.add_entry(scalar_entry()).unwrap();
        let mut bytes = c.to_wdc_bytes();
        // Clone the single entry and bump the count to forge a duplicate.
        let entry = bytes[16..].to_vec();
        bytes.extend_from_slice(&entry);
        bytes[8..16].copy_from_slice(&2u64.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_wdc_bytes(&bytes),
            Err(ContainerError::DuplicateKey(k)) if k == "abc"
        ));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut c = Checkpoint::new();
        c.add_entry(scalar_entry()).unwrap();
        let mut bytes = c.to_wdc_bytes();
        bytes.push(0);
        assert!(matches!(
            Checkpoint::from_wdc_bytes(&bytes),
            Err(ContainerError::TrailingBytes { extra: 1 })
        ));
    }

    #[test]
    fn oversized_payload_declaration_is_rejected() {
        let mut c = Checkpoint::new();
        c.add_entry(TensorEntry::from_bytes("b", vec![7; 8]).unwrap())
            .unwrap();
        let mut bytes = c.to_wdc_bytes();
        // payload_len sits after key_len(4) + key(1) + dtype(1) + ndim(1) + dim(8).
        let off = 16 + 4 + 1 + 1 + 1 + 8;
        bytes[off..off + 8].copy_from_slice(&(MAX_PAYLOAD_BYTES + 1).to_le_bytes());
        assert!(matches!(
            Checkpoint::from_wdc_bytes(&bytes),
            Err(ContainerError::LengthOverflow(_))
        ));
    }

    #[test]
    fn add_get_remove_contract() {
        let mut c = Checkpoint::new();
        c.add_entry(scalar_entry()).unwrap();
        assert!(matches!(
            c.add_entry(scalar_entry()),
            Err(ContainerError::DuplicateKey(_))
        ));
        assert_eq!(c.get_entry("abc").unwrap().key(), "abc");
        assert!(matches!(
            c.get_entry("nope"),
            Err(ContainerError::MissingKey(_))
        ));
        c.remove_entry("abc").unwrap();
        assert!(c.is_empty());
        assert!(matches!(
            c.remove_entry("abc"),
            Err(ContainerError::MissingKey(_))
        ));
    }

    #[test]
    fn entry_shape_payload_mismatch_is_rejected() {
        assert!(matches!(
            TensorEntry::new("k", DType::F32, vec![3], vec![0; 11]),
            Err(ContainerError::ShapePayloadMismatch { .. })
        ));
    }

    #[test]
    fn zero_dim_scalar_has_one_element() {
        let e = scalar_entry();
        assert_eq!(e.element_count(), 1);
        assert_eq!(e.payload().len(), 4);
    }
}
