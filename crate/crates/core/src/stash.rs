//! Hiding byte payloads inside checkpoints as extra tensor entries, and
//! getting them back out.
//!
//! Payloads are split into chunks, each stored as its own entry, indexed
//! by a binary manifest with per-chunk CRC32s. Two disguises:
//!
//! * [`DisguiseMode::DedicatedKeys`]: chunks under the overt
//!   `__stash/chunk_NNNNNNNN` names, manifest at `__stash/manifest`.
//!   Trivial to retrieve, trivial to spot.
//! * [`DisguiseMode::MimicKeys`]: chunks as F32 tensors under
//!   optimizer-state-looking names derived from a secret
//!   (`opt_state/<32 hex chars>`), zero-padded to 4-byte multiples.
//!   Without the secret there is no way to tell which entries, if any,
//!   hold a payload; a wrong secret is indistinguishable from no stash.
//!
//! Manifest record layout (little-endian): magic "STSH", u32 version=1,
//! u8 mode, u32 chunk_count, u64 total_bytes, u32 label_len, label bytes,
//! then per chunk: u32 key_len, key bytes, u32 byte_len, u32 crc32.

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::container::{Checkpoint, ContainerError, TensorEntry};

pub const MANIFEST_MAGIC: [u8; 4] = *b"STSH";
pub const MANIFEST_VERSION: u32 = 1;
pub const DEDICATED_CHUNK_PREFIX: &str = "__stash/chunk_";
pub const DEDICATED_MANIFEST_KEY: &str = "__stash/manifest";
pub const MIMIC_KEY_PREFIX: &str = "opt_state/";
/// Smallest permitted chunk size in bytes.
pub const MIN_CHUNK_SIZE: u32 = 64;
/// Default chunk size; the federated simulator overrides this per round.
pub const DEFAULT_CHUNK_SIZE: u32 = 1 << 20;
/// Chunk index reserved for the MimicKeys manifest entry.
const MIMIC_MANIFEST_INDEX: u32 = 0xFFFF_FFFF;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("payload must be non-empty")]
    EmptyPayload,
    #[error("chunk size {0} below minimum {MIN_CHUNK_SIZE}")]
    ChunkSizeTooSmall(u32),
    #[error("MimicKeys secret must be non-empty")]
    EmptySecret,
    #[error("payload of {0} bytes needs more chunks than a manifest can index")]
    TooManyChunks(u64),
    #[error("carrier already contains generated key {0:?}")]
    KeyCollision(String),
    #[error("no payload manifest found for the requested mode")]
    NoManifest,
    #[error("malformed payload manifest: {0}")]
    ManifestMalformed(String),
    #[error("manifest references missing chunk entry {0:?}")]
    MissingChunk(String),
    #[error("chunk {key:?} holds {actual} bytes, manifest declares {expected}")]
    ChunkLengthMismatch {
        key: String,
        expected: u64,
        actual: u64,
    },
    #[error("CRC mismatch on chunk {chunk_index} ({key:?})")]
    CrcMismatch { chunk_index: u32, key: String },
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// How stash entries are named and typed inside the carrier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DisguiseMode {
    DedicatedKeys,
    MimicKeys { secret: String },
}

impl DisguiseMode {
    fn wire_code(&self) -> u8 {
        match self {
            DisguiseMode::DedicatedKeys => 0,
            DisguiseMode::MimicKeys { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkRecord {
    pub key: String,
    pub byte_len: u32,
    pub crc32: u32,
}

/// Hidden index of the embedded chunks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PayloadManifest {
    pub version: u32,
    /// 0 = dedicated keys, 1 = mimic keys.
    pub mode: u8,
    pub total_bytes: u64,
    pub label: String,
    pub chunks: Vec<ChunkRecord>,
}

impl PayloadManifest {
    pub fn chunk_count(&self) -> u32 {
        self.chunks.len() as u32
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MANIFEST_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.mode);
        out.extend_from_slice(&(self.chunks.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.total_bytes.to_le_bytes());
        out.extend_from_slice(&(self.label.len() as u32).to_le_bytes());
        out.extend_from_slice(self.label.as_bytes());
        for c in &self.chunks {
            out.extend_from_slice(&(c.key.len() as u32).to_le_bytes());
            out.extend_from_slice(c.key.as_bytes());
            out.extend_from_slice(&c.byte_len.to_le_bytes());
            out.extend_from_slice(&c.crc32.to_le_bytes());
        }
        out
    }

    /// Parses a manifest record, tolerating trailing zero padding (the
    /// MimicKeys manifest entry is padded to a 4-byte multiple).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedError> {
        let malformed = |m: &str| EmbedError::ManifestMalformed(m.to_owned());
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], EmbedError> {
            if bytes.len() - *pos < n {
                return Err(EmbedError::ManifestMalformed("record truncated".into()));
            }
            let out = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(out)
        };
        if take(&mut pos, 4)? != MANIFEST_MAGIC {
            return Err(malformed("bad manifest magic"));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != MANIFEST_VERSION {
            return Err(malformed(&format!("unsupported manifest version {version}")));
        }
        let mode = take(&mut pos, 1)?[0];
        if mode > 1 {
            return Err(malformed(&format!("unknown disguise mode {mode}")));
        }
        let chunk_count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let total_bytes = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let label_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let label = std::str::from_utf8(take(&mut pos, label_len)?)
            .map_err(|_| malformed("label is not UTF-8"))?
            .to_owned();
        let mut chunks = Vec::new();
        let mut declared_total = 0u64;
        for _ in 0..chunk_count {
            let key_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let key = std::str::from_utf8(take(&mut pos, key_len)?)
                .map_err(|_| malformed("chunk key is not UTF-8"))?
                .to_owned();
            let byte_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            let crc32 = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            declared_total += byte_len as u64;
            chunks.push(ChunkRecord {
                key,
                byte_len,
                crc32,
            });
        }
        if declared_total != total_bytes {
            return Err(malformed("chunk lengths do not sum to total_bytes"));
        }
        if bytes[pos..].iter().any(|&b| b != 0) {
            return Err(malformed("non-zero bytes after manifest record"));
        }
        Ok(Self {
            version,
            mode,
            total_bytes,
            label,
            chunks,
        })
    }
}

/// Result of an embed: the grown checkpoint plus the exact number of WDC
/// bytes the stash added.
#[derive(Debug, Clone)]
pub struct EmbedOutcome {
    pub checkpoint: Checkpoint,
    pub added_bytes: u64,
    pub manifest: PayloadManifest,
}

fn dedicated_chunk_key(i: u32) -> String {
    format!("{DEDICATED_CHUNK_PREFIX}{i:08}")
}

/// Deterministic mimic name: `opt_state/` + first 32 hex chars of
/// SHA-256(secret || little-endian chunk index).
fn mimic_chunk_key(secret: &str, i: u32) -> String {
    let mut hasher = Sha256::new();
    hasher.update(secret.as_bytes());
    hasher.update(i.to_le_bytes());
    let digest = hasher.finalize();
    format!("{MIMIC_KEY_PREFIX}{}", &hex::encode(digest)[..32])
}

fn chunk_key(mode: &DisguiseMode, i: u32) -> String {
    match mode {
        DisguiseMode::DedicatedKeys => dedicated_chunk_key(i),
        DisguiseMode::MimicKeys { secret } => mimic_chunk_key(secret, i),
    }
}

fn manifest_key(mode: &DisguiseMode) -> String {
    match mode {
        DisguiseMode::DedicatedKeys => DEDICATED_MANIFEST_KEY.to_owned(),
        DisguiseMode::MimicKeys { secret } => mimic_chunk_key(secret, MIMIC_MANIFEST_INDEX),
    }
}

fn validate(mode: &DisguiseMode, payload_len: u64, chunk_size: u32) -> Result<u64, EmbedError> {
    if payload_len == 0 {
        return Err(EmbedError::EmptyPayload);
    }
    if chunk_size < MIN_CHUNK_SIZE {
        return Err(EmbedError::ChunkSizeTooSmall(chunk_size));
    }
    if let DisguiseMode::MimicKeys { secret } = mode {
        if secret.is_empty() {
            return Err(EmbedError::EmptySecret);
        }
    }
    let n_chunks = payload_len.div_ceil(chunk_size as u64);
    if n_chunks > (MIMIC_MANIFEST_INDEX - 1) as u64 {
        return Err(EmbedError::TooManyChunks(payload_len));
    }
    Ok(n_chunks)
}

/// Zero-pads to the next 4-byte boundary for storage as an F32 tensor.
fn pad4(len: usize) -> usize {
    len.div_ceil(4) * 4
}

fn stash_entry(mode: &DisguiseMode, key: String, bytes: &[u8]) -> TensorEntry {
    match mode {
        DisguiseMode::DedicatedKeys => {
            TensorEntry::from_bytes(key, bytes.to_vec()).expect("valid stash entry")
        }
        DisguiseMode::MimicKeys { .. } => {
            let mut padded = bytes.to_vec();
            padded.resize(pad4(bytes.len()), 0);
            let elements = (padded.len() / 4) as u64;
            TensorEntry::new(key, crate::container::DType::F32, vec![elements], padded)
                .expect("valid stash entry")
        }
    }
}

/// Appends the payload to the carrier as chunk entries plus a manifest.
/// Pre-existing entries are never touched or reordered.
pub fn embed(
    carrier: &Checkpoint,
    payload: &[u8],
    mode: &DisguiseMode,
    chunk_size: u32,
    label: &str,
) -> Result<EmbedOutcome, EmbedError> {
    let n_chunks = validate(mode, payload.len() as u64, chunk_size)?;

    let mut chunks = Vec::with_capacity(n_chunks as usize);
    let mut keys = Vec::with_capacity(n_chunks as usize + 1);
    for (i, piece) in payload.chunks(chunk_size as usize).enumerate() {
        let key = chunk_key(mode, i as u32);
        chunks.push(ChunkRecord {
            key: key.clone(),
            byte_len: piece.len() as u32,
            crc32: crc32fast::hash(piece),
        });
        keys.push(key);
    }
    let manifest_key = manifest_key(mode);
    keys.push(manifest_key.clone());
    for key in &keys {
        if carrier.contains_key(key) {
            return Err(EmbedError::KeyCollision(key.clone()));
        }
    }

    let manifest = PayloadManifest {
        version: MANIFEST_VERSION,
        mode: mode.wire_code(),
        total_bytes: payload.len() as u64,
        label: label.to_owned(),
        chunks,
    };

    let before = carrier.total_size();
    let mut out = carrier.clone();
    for (i, piece) in payload.chunks(chunk_size as usize).enumerate() {
        out.add_entry(stash_entry(mode, keys[i].clone(), piece))?;
    }
    out.add_entry(stash_entry(mode, manifest_key, &manifest.to_bytes()))?;
    let added_bytes = out.total_size() - before;

    Ok(EmbedOutcome {
        checkpoint: out,
        added_bytes,
        manifest,
    })
}

/// Locates the manifest for `mode`, reassembles the payload and verifies
/// every chunk CRC. A wrong MimicKeys secret surfaces as [`EmbedError::NoManifest`].
pub fn extract(c: &Checkpoint, mode: &DisguiseMode) -> Result<(Vec<u8>, PayloadManifest), EmbedError> {
    let manifest_entry = c
        .get_entry(&manifest_key(mode))
        .map_err(|_| EmbedError::NoManifest)?;
    let manifest = PayloadManifest::from_bytes(manifest_entry.payload())?;
    if manifest.mode != mode.wire_code() {
        return Err(EmbedError::ManifestMalformed(format!(
            "manifest mode {} does not match requested mode {}",
            manifest.mode,
            mode.wire_code()
        )));
    }

    let mut payload = Vec::with_capacity(manifest.total_bytes as usize);
    for (i, chunk) in manifest.chunks.iter().enumerate() {
        let entry = c
            .get_entry(&chunk.key)
            .map_err(|_| EmbedError::MissingChunk(chunk.key.clone()))?;
        let stored = entry.payload();
        let expected = chunk.byte_len as u64;
        // MimicKeys entries carry zero padding past the true length.
        if (stored.len() as u64) < expected
            || (manifest.mode == 0 && stored.len() as u64 != expected)
        {
            return Err(EmbedError::ChunkLengthMismatch {
                key: chunk.key.clone(),
                expected,
                actual: stored.len() as u64,
            });
        }
        let bytes = &stored[..chunk.byte_len as usize];
        if crc32fast::hash(bytes) != chunk.crc32 {
            return Err(EmbedError::CrcMismatch {
                chunk_index: i as u32,
                key: chunk.key.clone(),
            });
        }
        payload.extend_from_slice(bytes);
    }
    payload.truncate(manifest.total_bytes as usize);
    Ok((payload, manifest))
}

/// Exact WDC byte growth [`embed`] would cause, without embedding.
pub fn embedding_overhead(
    payload_len: u64,
    mode: &DisguiseMode,
    chunk_size: u32,
    label_len: u64,
) -> Result<u64, EmbedError> {
    let n_chunks = validate(mode, payload_len, chunk_size)?;
    let last_len = payload_len - (n_chunks - 1) * chunk_size as u64;

    // wire size of one WDC entry: 4 + key + 1 + 1 + 8*ndim + 8 + payload
    let entry_wire = |key_len: u64, payload: u64| 4 + key_len + 1 + 1 + 8 + 8 + payload;

    let manifest_len = |chunk_key_lens: u64| {
        4 + 4 + 1 + 4 + 8 + 4 + label_len + chunk_key_lens + n_chunks * (4 + 4 + 4)
    };

    Ok(match mode {
        DisguiseMode::DedicatedKeys => {
            // Key lengths vary with the printed index width past 8 digits.
            let key_len_for = |i: u64| {
                DEDICATED_CHUNK_PREFIX.len() as u64 + 8.max(i.checked_ilog10().map_or(1, |d| d as u64 + 1))
            };
            let mut chunk_entries = 0u64;
            let mut key_total = 0u64;
            // Sum by ranges of equal digit count instead of per chunk.
            let mut i = 0u64;
            while i < n_chunks {
                let klen = key_len_for(i);
                let next_boundary = if i < 100_000_000 {
                    100_000_000
                } else {
                    10u64.pow(i.checked_ilog10().unwrap() + 1)
                };
                let run = n_chunks.min(next_boundary) - i;
                let full = if i + run == n_chunks { run - 1 } else { run };
                chunk_entries += full * entry_wire(klen, chunk_size as u64);
                if i + run == n_chunks {
                    chunk_entries += entry_wire(klen, last_len);
                }
                key_total += run * klen;
                i += run;
            }
            let m = manifest_len(key_total);
            chunk_entries + entry_wire(DEDICATED_MANIFEST_KEY.len() as u64, m)
        }
        DisguiseMode::MimicKeys { .. } => {
            let klen = MIMIC_KEY_PREFIX.len() as u64 + 32;
            let full_chunks = n_chunks - 1;
            let chunk_entries = full_chunks * entry_wire(klen, pad4(chunk_size as usize) as u64)
                + entry_wire(klen, pad4(last_len as usize) as u64);
            let m = manifest_len(n_chunks * klen);
            chunk_entries + entry_wire(klen, pad4(m as usize) as u64)
        }
    })
}
