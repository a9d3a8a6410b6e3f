//! Volume data model, RVOL/RAW file I/O, synthetic phantoms and minmax
//! intensity normalization.
//!
//! A [`Volume`] is a dense 3-D scalar image stored slice-major, row-major
//! in `f32`. The on-disk formats are deliberately minimal: `RVOL` is a
//! fixed little-endian header followed by raw voxels, `RAW` is the bare
//! voxel payload next to a JSON sidecar carrying the same header fields.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RVOL_MAGIC: [u8; 4] = *b"RVOL";
pub const RVOL_VERSION: u32 = 1;
/// Fixed RVOL header size: magic, version, three dims, min/max, bit width.
pub const RVOL_HEADER_BYTES: usize = 32;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic {found:?}, expected \"RVOL\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported RVOL version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated volume file: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("{extra} trailing bytes after declared voxel payload")]
    TrailingBytes { extra: u64 },
    #[error("header declares {expected} voxels but payload holds {actual}")]
    PayloadMismatch { expected: u64, actual: u64 },
    #[error("voxel buffer length {got} does not match {depth}x{height}x{width}")]
    DimensionMismatch {
        depth: usize,
        height: usize,
        width: usize,
        got: usize,
    },
    #[error("all dimensions must be non-zero, got {depth}x{height}x{width}")]
    EmptyDimension {
        depth: usize,
        height: usize,
        width: usize,
    },
    #[error("intensity range invalid: min {min} > max {max}")]
    InvalidRange { min: f32, max: f32 },
    #[error("phantom dimensions must be >= {min} per axis, got {depth}x{height}x{width}")]
    PhantomTooSmall {
        min: usize,
        depth: usize,
        height: usize,
        width: usize,
    },
    #[error("volume is not in normalized form; original range metadata unavailable")]
    NotNormalized,
    #[error("malformed sidecar {path}: {reason}")]
    MalformedSidecar { path: PathBuf, reason: String },
    #[error("source_bits_per_voxel must be non-zero")]
    ZeroBitWidth,
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// On-disk representation selector for [`Volume::load`] / [`Volume::save`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    /// Self-contained binary file with a 32-byte header.
    Rvol,
    /// Raw little-endian `f32` payload plus a `<path>.json` sidecar.
    RawWithSidecar,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    depth: u32,
    height: u32,
    width: u32,
    intensity_min: f32,
    intensity_max: f32,
    source_bits_per_voxel: u32,
}

/// Dense 3-D scalar image with intensity-range metadata.
///
/// `intensity_min`/`intensity_max` describe the physical range of the
/// original data. After [`Volume::normalize_minmax`] the voxels live in
/// `[0, 1]` and those fields keep the pre-normalization range so
/// [`Volume::denormalize`] can invert the mapping.
#[derive(Debug, Clone)]
pub struct Volume {
    depth: usize,
    height: usize,
    width: usize,
    voxels: Vec<f32>,
    intensity_min: f32,
    intensity_max: f32,
    source_bits_per_voxel: u32,
    normalized: bool,
    degenerate_range: bool,
}

impl PartialEq for Volume {
    fn eq(&self, other: &Self) -> bool {
        self.depth == other.depth
            && self.height == other.height
            && self.width == other.width
            && self.intensity_min.to_bits() == other.intensity_min.to_bits()
            && self.intensity_max.to_bits() == other.intensity_max.to_bits()
            && self.source_bits_per_voxel == other.source_bits_per_voxel
            && self.voxels.len() == other.voxels.len()
            && self
                .voxels
                .iter()
                .zip(&other.voxels)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Volume {
    pub fn new(
        depth: usize,
        height: usize,
        width: usize,
        voxels: Vec<f32>,
        intensity_min: f32,
        intensity_max: f32,
        source_bits_per_voxel: u32,
    ) -> Result<Self, VolumeError> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(VolumeError::EmptyDimension {
                depth,
                height,
                width,
            });
        }
        let expected = depth
            .checked_mul(height)
            .and_then(|p| p.checked_mul(width))
            .ok_or(VolumeError::DimensionMismatch {
                depth,
                height,
                width,
                got: voxels.len(),
            })?;
        if voxels.len() != expected {
            return Err(VolumeError::DimensionMismatch {
                depth,
                height,
                width,
                got: voxels.len(),
            });
        }
        if !(intensity_min <= intensity_max) {
            return Err(VolumeError::InvalidRange {
                min: intensity_min,
                max: intensity_max,
            });
        }
        if source_bits_per_voxel == 0 {
            return Err(VolumeError::ZeroBitWidth);
        }
        Ok(Self {
            depth,
            height,
            width,
            voxels,
            intensity_min,
            intensity_max,
            source_bits_per_voxel,
            normalized: false,
            degenerate_range: false,
        })
    }

    /// Builds a volume whose declared range is the actual data range.
    pub fn from_voxels(
        depth: usize,
        height: usize,
        width: usize,
        voxels: Vec<f32>,
        source_bits_per_voxel: u32,
    ) -> Result<Self, VolumeError> {
        let (min, max) = data_range(&voxels);
        Self::new(
            depth,
            height,
            width,
            voxels,
            min,
            max,
            source_bits_per_voxel,
        )
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn voxel_count(&self) -> u64 {
        self.voxels.len() as u64
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    /// One in-plane slice, `height * width` values.
    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[(z * self.height + y) * self.width + x]
    }

    pub fn intensity_min(&self) -> f32 {
        self.intensity_min
    }

    pub fn intensity_max(&self) -> f32 {
        self.intensity_max
    }

    pub fn intensity_range(&self) -> f32 {
        self.intensity_max - self.intensity_min
    }

    pub fn source_bits_per_voxel(&self) -> u32 {
        self.source_bits_per_voxel
    }

    pub fn with_source_bits(mut self, bits: u32) -> Result<Self, VolumeError> {
        if bits == 0 {
            return Err(VolumeError::ZeroBitWidth);
        }
        self.source_bits_per_voxel = bits;
        Ok(self)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// True when the last normalization hit a constant (min == max) volume.
    pub fn has_degenerate_range(&self) -> bool {
        self.degenerate_range
    }

    /// Maps voxels affinely onto `[0, 1]` using the data's own min/max.
    ///
    /// The pre-normalization range is kept in `intensity_min`/`max` for the
    /// inverse mapping. A constant volume maps to all zeros and sets the
    /// degenerate flag instead of failing.
    pub fn normalize_minmax(&self) -> Volume {
        let (min, max) = data_range(&self.voxels);
        let mut out = self.clone();
        out.intensity_min = min;
        out.intensity_max = max;
        out.normalized = true;
        if min == max {
            out.degenerate_range = true;
            out.voxels.iter_mut().for_each(|v| *v = 0.0);
            return out;
        }
        out.degenerate_range = false;
        let scale = 1.0 / (max - min);
        for v in &mut out.voxels {
            *v = ((*v - min) * scale).clamp(0.0, 1.0);
        }
        out
    }

    /// Inverse of [`Volume::normalize_minmax`].
    pub fn denormalize(&self) -> Result<Volume, VolumeError> {
        if !self.normalized {
            return Err(VolumeError::NotNormalized);
        }
        let mut out = self.clone();
        out.normalized = false;
        out.degenerate_range = false;
        let (min, max) = (self.intensity_min, self.intensity_max);
        let span = max - min;
        for v in &mut out.voxels {
            *v = *v * span + min;
        }
        Ok(out)
    }

    /// Re-tags voxels already in `[0, 1]` as normalized with the given
    /// original range. Used when reconstructing volumes from codec output.
    pub(crate) fn from_normalized_voxels(
        depth: usize,
        height: usize,
        width: usize,
        voxels: Vec<f32>,
        intensity_min: f32,
        intensity_max: f32,
        source_bits_per_voxel: u32,
    ) -> Result<Self, VolumeError> {
        let mut v = Self::new(
            depth,
            height,
            width,
            voxels,
            intensity_min,
            intensity_max,
            source_bits_per_voxel,
        )?;
        v.normalized = true;
        v.degenerate_range = intensity_min == intensity_max;
        Ok(v)
    }

    pub fn load(path: &Path, format: VolumeFormat) -> Result<Volume, VolumeError> {
        match format {
            VolumeFormat::Rvol => Self::from_rvol_bytes(&fs::read(path)?),
            VolumeFormat::RawWithSidecar => {
                let sidecar_path = sidecar_path(path);
                let text = fs::read_to_string(&sidecar_path)?;
                let sc: Sidecar =
                    serde_json::from_str(&text).map_err(|e| VolumeError::MalformedSidecar {
                        path: sidecar_path.clone(),
                        reason: e.to_string(),
                    })?;
                let payload = fs::read(path)?;
                volume_from_header_and_payload(
                    sc.depth,
                    sc.height,
                    sc.width,
                    sc.intensity_min,
                    sc.intensity_max,
                    sc.source_bits_per_voxel,
                    &payload,
                )
            }
        }
    }

    /// Writes the volume, returning the number of payload-file bytes.
    pub fn save(&self, path: &Path, format: VolumeFormat) -> Result<u64, VolumeError> {
        match format {
            VolumeFormat::Rvol => {
                let bytes = self.to_rvol_bytes();
                fs::write(path, &bytes)?;
                Ok(bytes.len() as u64)
            }
            VolumeFormat::RawWithSidecar => {
                let sc = Sidecar {
                    depth: self.depth as u32,
                    height: self.height as u32,
                    width: self.width as u32,
                    intensity_min: self.intensity_min,
                    intensity_max: self.intensity_max,
                    source_bits_per_voxel: self.source_bits_per_voxel,
                };
                let json = serde_json::to_string_pretty(&sc).expect("sidecar serializes");
                fs::write(sidecar_path(path), json)?;
                let payload = voxels_to_le_bytes(&self.voxels);
                fs::write(path, &payload)?;
                Ok(payload.len() as u64)
            }
        }
    }

    /// Serializes to the RVOL byte layout (header + little-endian voxels).
    pub fn to_rvol_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RVOL_HEADER_BYTES + self.voxels.len() * 4);
        out.extend_from_slice(&RVOL_MAGIC);
        out.extend_from_slice(&RVOL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.depth as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.intensity_min.to_le_bytes());
        out.extend_from_slice(&self.intensity_max.to_le_bytes());
        out.extend_from_slice(&self.source_bits_per_voxel.to_le_bytes());
        let mut w = io::Cursor::new(out);
        w.set_position(RVOL_HEADER_BYTES as u64);
        for v in &self.voxels {
            w.write_all(&v.to_le_bytes()).expect("in-memory write");
        }
        w.into_inner()
    }

    pub fn from_rvol_bytes(bytes: &[u8]) -> Result<Volume, VolumeError> {
        if bytes.len() < RVOL_HEADER_BYTES {
            // Distinguish a wrong magic from a short header when possible.
            if bytes.len() >= 4 && bytes[..4] != RVOL_MAGIC {
                let mut found = [0u8; 4];
                found.copy_from_slice(&bytes[..4]);
                return Err(VolumeError::BadMagic { found });
            }
            return Err(VolumeError::Truncated {
                needed: RVOL_HEADER_BYTES as u64,
                available: bytes.len() as u64,
            });
        }
        if bytes[..4] != RVOL_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(VolumeError::BadMagic { found });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != RVOL_VERSION {
            return Err(VolumeError::UnsupportedVersion(version));
        }
        let (depth, height, width) = (u32_at(8), u32_at(12), u32_at(16));
        let (min, max) = (f32_at(20), f32_at(24));
        let bits = u32_at(28);
        let payload = &bytes[RVOL_HEADER_BYTES..];
        volume_from_header_and_payload(depth, height, width, min, max, bits, payload)
    }
}

fn volume_from_header_and_payload(
    depth: u32,
    height: u32,
    width: u32,
    min: f32,
    max: f32,
    bits: u32,
    payload: &[u8],
) -> Result<Volume, VolumeError> {
    let expected = depth as u64 * height as u64 * width as u64;
    let actual_floor = (payload.len() / 4) as u64;
    if payload.len() % 4 != 0 || actual_floor != expected {
        let needed = expected
            .checked_mul(4)
            .ok_or(VolumeError::PayloadMismatch {
                expected,
                actual: actual_floor,
            })?;
        if (payload.len() as u64) < needed {
            return Err(VolumeError::Truncated {
                needed: needed + RVOL_HEADER_BYTES as u64,
                available: payload.len() as u64 + RVOL_HEADER_BYTES as u64,
            });
        }
        return Err(VolumeError::TrailingBytes {
            extra: payload.len() as u64 - needed,
        });
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(
        depth as usize,
        height as usize,
        width as usize,
        voxels,
        min,
        max,
        bits,
    )
}

fn sidecar_path(payload_path: &Path) -> PathBuf {
    let mut s = payload_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn voxels_to_le_bytes(voxels: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(voxels.len() * 4);
    for v in voxels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn data_range(voxels: &[f32]) -> (f32, f32) {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in voxels {
        min = min.min(v);
        max = max.max(v);
    }
    if !min.is_finite() || !max.is_finite() {
        (0.0, 0.0)
    } else {
        (min, max)
    }
}

/// Minimum per-axis extent accepted by [`generate_phantom`].
pub const PHANTOM_MIN_DIM: usize = 8;
/// CT-like default bit width stamped on generated phantoms.
pub const PHANTOM_SOURCE_BITS: u32 = 16;

/// Deterministic synthetic volume: a smooth intensity ramp plus
/// `n_ellipsoids` soft-edged ellipsoids, with the binary union of the
/// ellipsoid interiors as its mask. Same arguments, same bits.
pub fn generate_phantom(
    seed: u64,
    dims: (usize, usize, usize),
    n_ellipsoids: usize,
) -> Result<(Volume, Volume), VolumeError> {
    let (d, h, w) = dims;
    if d < PHANTOM_MIN_DIM || h < PHANTOM_MIN_DIM || w < PHANTOM_MIN_DIM {
        return Err(VolumeError::PhantomTooSmall {
            min: PHANTOM_MIN_DIM,
            depth: d,
            height: h,
            width: w,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    struct Ellipsoid {
        center: [f64; 3],
        semi_axes: [f64; 3],
        amplitude: f64,
    }
    // Draw order is part of the determinism contract: center z/y/x,
    // semi-axes z/y/x, then amplitude, per ellipsoid.
    let ellipsoids: Vec<Ellipsoid> = (0..n_ellipsoids)
        .map(|_| {
            let center = [
                rng.random_range(0.15..0.85) * d as f64,
                rng.random_range(0.15..0.85) * h as f64,
                rng.random_range(0.15..0.85) * w as f64,
            ];
            let semi_axes = [
                (rng.random_range(0.08..0.22) * d as f64).max(2.0),
                (rng.random_range(0.08..0.22) * h as f64).max(2.0),
                (rng.random_range(0.08..0.22) * w as f64).max(2.0),
            ];
            let amplitude = rng.random_range(-0.35..0.55);
            Ellipsoid {
                center,
                semi_axes,
                amplitude,
            }
        })
        .collect();

    // Soft shell half-width in normalized ellipsoid radius units. Keeps
    // edges spread over a few voxels so the phantom stays band-limited.
    const EDGE: f64 = 0.15;
    const TAU: f64 = std::f64::consts::TAU;

    let mut voxels = Vec::with_capacity(d * h * w);
    let mut mask = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let zf = z as f64 / (d - 1) as f64;
        for y in 0..h {
            let yf = y as f64 / (h - 1) as f64;
            for x in 0..w {
                let xf = x as f64 / (w - 1) as f64;
                let mut value = 0.15
                    + 0.18 * zf
                    + 0.22 * yf
                    + 0.15 * xf
                    + 0.08 * (TAU * (0.3 * zf + 0.6 * yf + 0.4 * xf)).cos();
                let mut inside = false;
                for e in &ellipsoids {
                    let dz = (z as f64 - e.center[0]) / e.semi_axes[0];
                    let dy = (y as f64 - e.center[1]) / e.semi_axes[1];
                    let dx = (x as f64 - e.center[2]) / e.semi_axes[2];
                    let r = (dz * dz + dy * dy + dx * dx).sqrt();
                    if r <= 1.0 {
                        inside = true;
                    }
                    if r < 1.0 + EDGE {
                        let t = ((1.0 + EDGE - r) / (2.0 * EDGE)).clamp(0.0, 1.0);
                        let s = t * t * (3.0 - 2.0 * t);
                        value += e.amplitude * s;
                    }
                }
                // Map the abstract [0,1]-ish field onto a CT-like range.
                let physical = value.clamp(0.0, 1.0) * 1400.0 - 200.0;
                voxels.push(physical as f32);
                mask.push(if inside { 1.0 } else { 0.0 });
            }
        }
    }

    let volume = Volume::from_voxels(d, h, w, voxels, PHANTOM_SOURCE_BITS)?;
    let mask = Volume::new(d, h, w, mask, 0.0, 1.0, 8)?;
    Ok((volume, mask))
}
