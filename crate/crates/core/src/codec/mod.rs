//! Deterministic lossy volumetric codec plus the lossless ZIP path.
//!
//! The lossy pipeline per 256x256 patch: 8x8 block DCT -> uniform
//! quantization with a per-frequency step -> zigzag scan -> signed-to-
//! unsigned integer mapping -> LEB128 varints -> DEFLATE. Everything is
//! exactly invertible down to the quantizer, so decode reproduces the
//! quantized coefficients bit-for-bit and all loss is quantization (plus
//! tiling, for `Low`).
//!
//! Bitstreams are self-describing: a [`SliceCode`] decodes from its bytes
//! alone, a [`VolumeCode`] file carries the geometry and intensity range
//! needed to reassemble and denormalize the volume.

mod dct;

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use rayon::prelude::*;
use thiserror::Error;

use crate::tiling::{self, SliceStack, TilingError, TilingMode, TilingPlan, STACK_EXTENT};
use crate::volume::{Volume, VolumeError};
use crate::ziparc::{self, ZipCompression, ZipError, ZipMemberSpec};
use dct::{BLOCK, BLOCK_COEFFS, ZIGZAG};

pub const SLICE_CODE_MAGIC: [u8; 4] = *b"SC01";
pub const VOLUME_CODE_MAGIC: [u8; 4] = *b"VC01";
pub const VOLUME_CODE_VERSION: u32 = 1;
/// Fixed SliceCode header: magic, mode, q, patch index, deflate length.
pub const SLICE_CODE_HEADER_BYTES: u64 = 12;
/// Fixed VolumeCode header preceding the concatenated slice codes.
pub const VOLUME_CODE_HEADER_BYTES: u64 = 34;

const PATCH_PIXELS: usize = STACK_EXTENT * STACK_EXTENT;
const BLOCKS_PER_PATCH: usize = (STACK_EXTENT / BLOCK) * (STACK_EXTENT / BLOCK);
const COEFFS_PER_PATCH: usize = BLOCKS_PER_PATCH * BLOCK_COEFFS;
/// A u32 varint never exceeds five bytes.
const MAX_RAW_STREAM: usize = COEFFS_PER_PATCH * 5;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("quality must lie in [1, 100], got {0}")]
    InvalidQuality(u32),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        expected: &'static str,
        found: [u8; 4],
    },
    #[error("unsupported code version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown tiling mode code {0}")]
    UnknownMode(u8),
    #[error("truncated code: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("{extra} trailing bytes after the declared codes")]
    TrailingBytes { extra: u64 },
    #[error("corrupt compressed stream: {0}")]
    CorruptStream(String),
    #[error("coefficient stream holds {got} values, patch needs {expected}")]
    CoefficientCount { expected: usize, got: usize },
    #[error("volume code declares {declared} slice codes, geometry needs {expected}")]
    CodeCountMismatch { declared: usize, expected: usize },
    #[error("slice code {index} tagged patch {found}, expected {expected}")]
    PatchIndexMismatch {
        index: usize,
        expected: u16,
        found: u16,
    },
    #[error("slice code {index} tagged mode {found:?}, volume code says {expected:?}")]
    ModeMismatch {
        index: usize,
        expected: TilingMode,
        found: TilingMode,
    },
    #[error("volume must be normalized before encoding")]
    NotNormalized,
    #[error("voxel count must be non-zero")]
    ZeroVoxelCount,
    #[error("lossless (ZIP) byte count must be non-zero")]
    ZeroZipBytes,
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Zip(#[from] ZipError),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// Rate-control knob, 1 (coarsest) to 100 (finest).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct QualityParam(u8);

impl QualityParam {
    pub fn new(q: u32) -> Result<Self, CodecError> {
        if (1..=100).contains(&q) {
            Ok(Self(q as u8))
        } else {
            Err(CodecError::InvalidQuality(q))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Quantization step for zigzag index `k`: strictly shrinking in `q`,
    /// mildly growing with frequency.
    pub fn step(self, k: usize) -> f64 {
        (2.0 * (101.0 - self.0 as f64) / 100.0) * (1.0 + k as f64 / 8.0)
    }
}

/// The compressed form of one 256x256 patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceCode {
    pub mode: TilingMode,
    pub q: QualityParam,
    /// Within-slice patch index (0 for `Low`/`Pad`).
    pub patch_index: u16,
    /// Raw-DEFLATE entropy-coded quantized coefficients.
    pub deflate: Vec<u8>,
}

impl SliceCode {
    pub fn byte_len(&self) -> u64 {
        SLICE_CODE_HEADER_BYTES + self.deflate.len() as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len() as usize);
        out.extend_from_slice(&SLICE_CODE_MAGIC);
        out.push(self.mode.code());
        out.push(self.q.get());
        out.extend_from_slice(&self.patch_index.to_le_bytes());
        out.extend_from_slice(&(self.deflate.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.deflate);
        out
    }

    /// Parses one slice code from the front of `bytes`, returning it and
    /// the number of bytes consumed.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize), CodecError> {
        if bytes.len() < SLICE_CODE_HEADER_BYTES as usize {
            return Err(CodecError::Truncated {
                needed: SLICE_CODE_HEADER_BYTES,
                available: bytes.len() as u64,
            });
        }
        if bytes[..4] != SLICE_CODE_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(CodecError::BadMagic {
                expected: "SC01",
                found,
            });
        }
        let mode = TilingMode::from_code(bytes[4]).ok_or(CodecError::UnknownMode(bytes[4]))?;
        let q = QualityParam::new(bytes[5] as u32)?;
        let patch_index = u16::from_le_bytes([bytes[6], bytes[7]]);
        let deflate_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let total = SLICE_CODE_HEADER_BYTES as usize + deflate_len;
        if bytes.len() < total {
            return Err(CodecError::Truncated {
                needed: total as u64,
                available: bytes.len() as u64,
            });
        }
        Ok((
            Self {
                mode,
                q,
                patch_index,
                deflate: bytes[12..total].to_vec(),
            },
            total,
        ))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let (code, used) = Self::parse(bytes)?;
        if used != bytes.len() {
            return Err(CodecError::TrailingBytes {
                extra: (bytes.len() - used) as u64,
            });
        }
        Ok(code)
    }
}

/// The complete code for one volume: geometry, intensity range, and the
/// ordered per-patch codes (slice-major, then patch).
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeCode {
    pub depth: u32,
    pub height: u32,
    pub width: u32,
    pub intensity_min: f32,
    pub intensity_max: f32,
    pub mode: TilingMode,
    pub q: QualityParam,
    pub codes: Vec<SliceCode>,
}

impl VolumeCode {
    /// Exact serialized size: header plus every slice code.
    pub fn total_bytes(&self) -> u64 {
        VOLUME_CODE_HEADER_BYTES + self.codes.iter().map(SliceCode::byte_len).sum::<u64>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_bytes() as usize);
        out.extend_from_slice(&VOLUME_CODE_MAGIC);
        out.extend_from_slice(&VOLUME_CODE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.depth.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.intensity_min.to_le_bytes());
        out.extend_from_slice(&self.intensity_max.to_le_bytes());
        out.push(self.mode.code());
        out.push(self.q.get());
        out.extend_from_slice(&(self.codes.len() as u32).to_le_bytes());
        for code in &self.codes {
            out.extend_from_slice(&code.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let header = VOLUME_CODE_HEADER_BYTES as usize;
        if bytes.len() < header {
            return Err(CodecError::Truncated {
                needed: VOLUME_CODE_HEADER_BYTES,
                available: bytes.len() as u64,
            });
        }
        if bytes[..4] != VOLUME_CODE_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(CodecError::BadMagic {
                expected: "VC01",
                found,
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VOLUME_CODE_VERSION {
            return Err(CodecError::UnsupportedVersion(version));
        }
        let (depth, height, width) = (u32_at(8), u32_at(12), u32_at(16));
        let intensity_min = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
        let intensity_max = f32::from_le_bytes(bytes[24..28].try_into().unwrap());
        let mode = TilingMode::from_code(bytes[28]).ok_or(CodecError::UnknownMode(bytes[28]))?;
        let q = QualityParam::new(bytes[29] as u32)?;
        let code_count = u32_at(30) as usize;
        let mut codes = Vec::new();
        let mut pos = header;
        for _ in 0..code_count {
            let (code, used) = SliceCode::parse(&bytes[pos..])?;
            codes.push(code);
            pos += used;
        }
        if pos != bytes.len() {
            return Err(CodecError::TrailingBytes {
                extra: (bytes.len() - pos) as u64,
            });
        }
        Ok(Self {
            depth,
            height,
            width,
            intensity_min,
            intensity_max,
            mode,
            q,
            codes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<u64, CodecError> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes)?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Aggregated non-fatal warnings from an encode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeStats {
    /// Input samples that fell outside [0, 1] and were clamped.
    pub clamped_samples: u64,
}

fn varint_push(out: &mut Vec<u8>, mut v: u32) {
    loop {
        let byte = (v & 0x7F) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn varint_read(bytes: &[u8], pos: &mut usize) -> Result<u32, CodecError> {
    let mut value: u32 = 0;
    let mut shift = 0;
    loop {
        let &byte = bytes
            .get(*pos)
            .ok_or_else(|| CodecError::CorruptStream("varint runs past stream end".into()))?;
        *pos += 1;
        if shift >= 32 || (shift == 28 && byte & 0x70 != 0 && byte & 0x80 != 0) {
            return Err(CodecError::CorruptStream("varint exceeds 32 bits".into()));
        }
        value |= u32::from(byte & 0x7F) << shift;
        if byte & 0x80 == 0 {
            return Ok(value);
        }
        shift += 7;
    }
}

fn to_unsigned(v: i32) -> u32 {
    if v >= 0 {
        (v as u32) << 1
    } else {
        (((-(v as i64)) as u32) << 1) - 1
    }
}

fn to_signed(u: u32) -> i64 {
    if u & 1 == 0 {
        (u >> 1) as i64
    } else {
        -(((u as i64) + 1) >> 1)
    }
}

/// Quantized zigzag coefficients for every 8x8 block of a patch, plus the
/// count of clamped input samples.
fn quantize_patch(pixels: &[f32], q: QualityParam) -> (Vec<i32>, u32) {
    debug_assert_eq!(pixels.len(), PATCH_PIXELS);
    let mut coeffs = Vec::with_capacity(COEFFS_PER_PATCH);
    let mut clamped = 0u32;
    let mut block = [0.0f64; BLOCK_COEFFS];
    for by in (0..STACK_EXTENT).step_by(BLOCK) {
        for bx in (0..STACK_EXTENT).step_by(BLOCK) {
            for i in 0..BLOCK {
                for j in 0..BLOCK {
                    let v = pixels[(by + i) * STACK_EXTENT + bx + j];
                    let c = f64::from(v).clamp(0.0, 1.0);
                    if !(0.0..=1.0).contains(&f64::from(v)) {
                        clamped += 1;
                    }
                    block[i * BLOCK + j] = c;
                }
            }
            let transformed = dct::forward_8x8(&block);
            for k in 0..BLOCK_COEFFS {
                let value = transformed[ZIGZAG[k]] / q.step(k);
                coeffs.push(value.round() as i32);
            }
        }
    }
    (coeffs, clamped)
}

fn dequantize_patch(coeffs: &[i64], q: QualityParam) -> Vec<f32> {
    debug_assert_eq!(coeffs.len(), COEFFS_PER_PATCH);
    let mut pixels = vec![0.0f32; PATCH_PIXELS];
    let mut block = [0.0f64; BLOCK_COEFFS];
    let mut idx = 0;
    for by in (0..STACK_EXTENT).step_by(BLOCK) {
        for bx in (0..STACK_EXTENT).step_by(BLOCK) {
            block.fill(0.0);
            for k in 0..BLOCK_COEFFS {
                block[ZIGZAG[k]] = coeffs[idx] as f64 * q.step(k);
                idx += 1;
            }
            let spatial = dct::inverse_8x8(&block);
            for i in 0..BLOCK {
                for j in 0..BLOCK {
                    pixels[(by + i) * STACK_EXTENT + bx + j] =
                        (spatial[i * BLOCK + j] as f32).clamp(0.0, 1.0);
                }
            }
        }
    }
    pixels
}

/// Encodes the center channel of one stack. Out-of-range inputs are
/// clamped and counted, not rejected.
pub fn encode_slice(stack: &SliceStack, q: QualityParam) -> (SliceCode, u32) {
    let (coeffs, clamped) = quantize_patch(stack.center(), q);
    let mut raw = Vec::with_capacity(COEFFS_PER_PATCH);
    for &c in &coeffs {
        varint_push(&mut raw, to_unsigned(c));
    }
    let mut encoder = DeflateEncoder::new(Vec::new(), Compression::best());
    encoder.write_all(&raw).expect("in-memory deflate");
    let deflate = encoder.finish().expect("in-memory deflate");
    (
        SliceCode {
            mode: stack.mode(),
            q,
            patch_index: stack.patch_index() as u16,
            deflate,
        },
        clamped,
    )
}

/// Exact inverse of the entropy and quantization indexing; returns the
/// reconstructed 256x256 center channel clamped to [0, 1].
pub fn decode_slice(code: &SliceCode) -> Result<Vec<f32>, CodecError> {
    let mut raw = Vec::with_capacity(COEFFS_PER_PATCH);
    let mut decoder = DeflateDecoder::new(code.deflate.as_slice()).take(MAX_RAW_STREAM as u64 + 1);
    decoder
        .read_to_end(&mut raw)
        .map_err(|e| CodecError::CorruptStream(e.to_string()))?;
    if raw.len() > MAX_RAW_STREAM {
        return Err(CodecError::CorruptStream(
            "coefficient stream longer than any valid patch".into(),
        ));
    }
    let mut coeffs = Vec::with_capacity(COEFFS_PER_PATCH);
    let mut pos = 0;
    while pos < raw.len() {
        if coeffs.len() == COEFFS_PER_PATCH {
            return Err(CodecError::CoefficientCount {
                expected: COEFFS_PER_PATCH,
                got: COEFFS_PER_PATCH + 1,
            });
        }
        coeffs.push(to_signed(varint_read(&raw, &mut pos)?));
    }
    if coeffs.len() != COEFFS_PER_PATCH {
        return Err(CodecError::CoefficientCount {
            expected: COEFFS_PER_PATCH,
            got: coeffs.len(),
        });
    }
    Ok(dequantize_patch(&coeffs, code.q))
}

/// Tiles, encodes every patch (in parallel, order-deterministically) and
/// assembles the volume code.
pub fn encode_volume(
    v: &Volume,
    mode: TilingMode,
    q: QualityParam,
) -> Result<(VolumeCode, EncodeStats), CodecError> {
    if !v.is_normalized() {
        return Err(CodecError::NotNormalized);
    }
    let (stacks, _plan) = tiling::make_slice_stacks(v, mode)?;
    let encoded: Vec<(SliceCode, u32)> = stacks.par_iter().map(|s| encode_slice(s, q)).collect();
    let mut stats = EncodeStats::default();
    let mut codes = Vec::with_capacity(encoded.len());
    for (code, clamped) in encoded {
        stats.clamped_samples += u64::from(clamped);
        codes.push(code);
    }
    Ok((
        VolumeCode {
            depth: v.depth() as u32,
            height: v.height() as u32,
            width: v.width() as u32,
            intensity_min: v.intensity_min(),
            intensity_max: v.intensity_max(),
            mode,
            q,
            codes,
        },
        stats,
    ))
}

/// Decodes every patch, reassembles the slices and maps intensities back
/// to the original range.
pub fn decode_volume(vc: &VolumeCode) -> Result<Volume, CodecError> {
    let plan = TilingPlan::build(
        vc.mode,
        vc.depth as usize,
        vc.height as usize,
        vc.width as usize,
        vc.intensity_min,
        vc.intensity_max,
        32,
    )?;
    let pps = plan.patches_per_slice();
    let expected = plan.stack_count();
    if vc.codes.len() != expected {
        return Err(CodecError::CodeCountMismatch {
            declared: vc.codes.len(),
            expected,
        });
    }
    for (i, code) in vc.codes.iter().enumerate() {
        if code.mode != vc.mode {
            return Err(CodecError::ModeMismatch {
                index: i,
                expected: vc.mode,
                found: code.mode,
            });
        }
        let want = (i % pps) as u16;
        if code.patch_index != want {
            return Err(CodecError::PatchIndexMismatch {
                index: i,
                expected: want,
                found: code.patch_index,
            });
        }
    }
    let stacks: Vec<SliceStack> = vc
        .codes
        .par_iter()
        .enumerate()
        .map(|(i, code)| {
            decode_slice(code).map(|center| {
                SliceStack::from_center(vc.mode, i / pps, i % pps, &center)
            })
        })
        .collect::<Result<_, _>>()?;
    let normalized = tiling::reassemble_slices(&stacks, &plan)?;
    Ok(normalized.denormalize()?)
}

/// Lossless path: a deterministic single-member ZIP archive of the
/// volume's RVOL serialization, DEFLATE at maximum level.
pub fn zip_volume(v: &Volume) -> Result<Vec<u8>, CodecError> {
    let rvol = v.to_rvol_bytes();
    Ok(ziparc::write_zip(&[ZipMemberSpec {
        name: "volume.rvol",
        data: &rvol,
        compression: ZipCompression::Deflate,
    }])?)
}

/// Inverse of [`zip_volume`].
pub fn unzip_volume(bytes: &[u8]) -> Result<Volume, CodecError> {
    let members = ziparc::read_zip(bytes)?;
    let member = members
        .iter()
        .find(|m| m.name == "volume.rvol")
        .ok_or_else(|| CodecError::CorruptStream("archive lacks volume.rvol member".into()))?;
    Ok(Volume::from_rvol_bytes(&member.data)?)
}

/// Bits per pixel of `byte_count` spread over `voxel_count` samples.
pub fn bpp(byte_count: u64, voxel_count: u64) -> Result<f64, CodecError> {
    if voxel_count == 0 {
        return Err(CodecError::ZeroVoxelCount);
    }
    Ok(8.0 * byte_count as f64 / voxel_count as f64)
}

/// Input-side bits per pixel: the declared sample bit width, or the
/// on-disk origin size spread over the voxels when one is supplied.
pub fn bpp_input(v: &Volume, origin_file_bytes: Option<u64>) -> f64 {
    match origin_file_bytes {
        Some(bytes) => 8.0 * bytes as f64 / v.voxel_count() as f64,
        None => f64::from(v.source_bits_per_voxel()),
    }
}

/// Lossy-to-lossless disk ratio for the same volume.
pub fn practical_ratio(lossy_bytes: u64, zip_bytes: u64) -> Result<f64, CodecError> {
    if zip_bytes == 0 {
        return Err(CodecError::ZeroZipBytes);
    }
    Ok(lossy_bytes as f64 / zip_bytes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::generate_phantom;

    fn q(v: u32) -> QualityParam {
        QualityParam::new(v).unwrap()
    }

    fn constant_stack(value: f32) -> SliceStack {
        SliceStack::from_center(TilingMode::Pad, 0, 0, &vec![value; PATCH_PIXELS])
    }

    fn mse(a: &[f32], b: &[f32]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let d = f64::from(x - y);
                d * d
            })
            .sum::<f64>()
            / a.len() as f64
    }

    fn psnr(a: &[f32], b: &[f32]) -> f64 {
        let m = mse(a, b);
        if m == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (1.0 / m).log10()
        }
    }

    #[test]
    fn quality_bounds_are_enforced() {
        assert!(QualityParam::new(0).is_err());
        assert!(QualityParam::new(101).is_err());
        assert!(QualityParam::new(1).is_ok());
        assert!(QualityParam::new(100).is_ok());
    }

    #[test]
    fn quant_step_is_monotone() {
        for k in 0..BLOCK_COEFFS {
            for qa in 1..100u32 {
                assert!(q(qa).step(k) > q(qa + 1).step(k));
            }
        }
        assert!((q(50).step(0) - 1.02).abs() < 1e-12);
    }

    #[test]
    fn constant_slice_quantizes_to_dc_only_and_stays_small() {
        let stack = constant_stack(0.5);
        let (coeffs, clamped) = quantize_patch(stack.center(), q(50));
        assert_eq!(clamped, 0);
        for block in coeffs.chunks_exact(BLOCK_COEFFS) {
            assert_ne!(block[0], 0, "DC must survive quantization");
            assert!(block[1..].iter().all(|&c| c == 0), "ACs must die");
        }
        let (code, _) = encode_slice(&stack, q(50));
        assert!(
            code.byte_len() < 700,
            "constant-slice code took {} bytes",
            code.byte_len()
        );
    }

    #[test]
    fn constant_slice_error_is_within_half_a_dc_step() {
        for value in [0.0f32, 0.27, 0.5, 0.93, 1.0] {
            for quality in [1u32, 10, 50, 90, 100] {
                let stack = constant_stack(value);
                let (code, _) = encode_slice(&stack, q(quality));
                let decoded = decode_slice(&code).unwrap();
                // One coefficient, quantization error <= step/2 in coefficient
                // space, scaled by the 1/8 DC basis amplitude per pixel.
                let bound = q(quality).step(0) / 2.0 + 1e-6;
                for &d in &decoded {
                    assert!(
                        (f64::from(d) - f64::from(value)).abs() <= bound,
                        "value {value} q {quality}: {d}"
                    );
                }
            }
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let (v, _) = generate_phantom(21, (8, 240, 240), 4).unwrap();
        let n = v.normalize_minmax();
        let (stacks, _) = tiling::make_slice_stacks(&n, TilingMode::Pad).unwrap();
        let (a, _) = encode_slice(&stacks[3], q(70));
        let (b, _) = encode_slice(&stacks[3], q(70));
        assert_eq!(a, b);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn out_of_range_samples_are_clamped_and_counted() {
        let mut pixels = vec![0.5f32; PATCH_PIXELS];
        pixels[0] = -0.5;
        pixels[1] = 1.5;
        let stack = SliceStack::from_center(TilingMode::Pad, 0, 0, &pixels);
        let (code, clamped) = encode_slice(&stack, q(80));
        assert_eq!(clamped, 2);
        let decoded = decode_slice(&code).unwrap();
        assert!(decoded.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn higher_quality_never_hurts_psnr() {
        let (v, _) = generate_phantom(22, (8, 240, 240), 4).unwrap();
        let n = v.normalize_minmax();
        let (stacks, _) = tiling::make_slice_stacks(&n, TilingMode::Pad).unwrap();
        let reference = stacks[4].center();
        let (lo, _) = encode_slice(&stacks[4], q(10));
        let (hi, _) = encode_slice(&stacks[4], q(100));
        let p_lo = psnr(reference, &decode_slice(&lo).unwrap());
        let p_hi = psnr(reference, &decode_slice(&hi).unwrap());
        assert!(p_hi >= p_lo, "q=100 {p_hi} dB < q=10 {p_lo} dB");
    }

    #[test]
    fn truncated_stream_is_a_corruption_error() {
        let (code, _) = encode_slice(&constant_stack(0.4), q(60));
        let mut bad = code.clone();
        bad.deflate.truncate(bad.deflate.len() / 2);
        match decode_slice(&bad) {
            Err(CodecError::CorruptStream(_)) | Err(CodecError::CoefficientCount { .. }) => {}
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn slice_code_bytes_roundtrip() {
        let (code, _) = encode_slice(&constant_stack(0.8), q(33));
        let bytes = code.to_bytes();
        assert_eq!(bytes.len() as u64, code.byte_len());
        assert_eq!(SliceCode::from_bytes(&bytes).unwrap(), code);
        assert!(matches!(
            SliceCode::from_bytes(&bytes[..5]),
            Err(CodecError::Truncated { .. })
        ));
    }

    #[test]
    fn volume_code_roundtrip_and_counts() {
        let (v, _) = generate_phantom(23, (8, 512, 512), 3).unwrap();
        let n = v.normalize_minmax();
        let (vc, _) = encode_volume(&n, TilingMode::High, q(40)).unwrap();
        assert_eq!(vc.codes.len(), 8 * 9);
        let bytes = vc.to_bytes();
        assert_eq!(bytes.len() as u64, vc.total_bytes());
        let back = VolumeCode::from_bytes(&bytes).unwrap();
        assert_eq!(back, vc);
    }

    #[test]
    fn low_codes_are_smaller_than_high_codes() {
        let (v, _) = generate_phantom(24, (8, 512, 512), 3).unwrap();
        let n = v.normalize_minmax();
        let (low, _) = encode_volume(&n, TilingMode::Low, q(60)).unwrap();
        let (high, _) = encode_volume(&n, TilingMode::High, q(60)).unwrap();
        assert!(low.total_bytes() < high.total_bytes());
    }

    #[test]
    fn decode_preserves_geometry_and_range_metadata() {
        let (v, _) = generate_phantom(25, (8, 240, 240), 2).unwrap();
        let n = v.normalize_minmax();
        let (vc, _) = encode_volume(&n, TilingMode::Pad, q(85)).unwrap();
        let decoded = decode_volume(&vc).unwrap();
        assert_eq!(decoded.dims(), v.dims());
        assert_eq!(decoded.intensity_min(), n.intensity_min());
        assert_eq!(decoded.intensity_max(), n.intensity_max());
        assert!(!decoded.is_normalized());
    }

    #[test]
    fn encode_requires_normalized_volume() {
        let (v, _) = generate_phantom(26, (8, 240, 240), 2).unwrap();
        assert!(matches!(
            encode_volume(&v, TilingMode::Pad, q(50)),
            Err(CodecError::NotNormalized)
        ));
    }

    #[test]
    fn zip_volume_roundtrip_is_lossless_and_deterministic() {
        let (v, _) = generate_phantom(27, (8, 16, 16), 2).unwrap();
        let a = zip_volume(&v).unwrap();
        let b = zip_volume(&v).unwrap();
        assert_eq!(a, b);
        let back = unzip_volume(&a).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn all_zero_volume_compresses_hard() {
        let v = Volume::new(8, 64, 64, vec![0.0; 8 * 64 * 64], 0.0, 0.0, 16).unwrap();
        let zipped = zip_volume(&v).unwrap();
        let raw = v.to_rvol_bytes().len() as f64;
        assert!((zipped.len() as f64) / raw < 0.01);
    }

    #[test]
    fn bpp_arithmetic() {
        assert_eq!(bpp(8192, 256 * 256).unwrap(), 1.0);
        assert_eq!(bpp(2 * 8192, 256 * 256).unwrap(), 2.0);
        assert!(matches!(bpp(1, 0), Err(CodecError::ZeroVoxelCount)));
        let (v, _) = generate_phantom(28, (8, 8, 8), 0).unwrap();
        assert_eq!(bpp_input(&v, None), 16.0);
        assert_eq!(bpp_input(&v, Some(512 * 4)), 32.0);
    }

    #[test]
    fn practical_ratio_arithmetic() {
        assert_eq!(practical_ratio(100, 100).unwrap(), 1.0);
        let r = practical_ratio(100, 6000).unwrap();
        assert!((r - 1.0 / 60.0).abs() < 1e-12);
        assert!(matches!(
            practical_ratio(1, 0),
            Err(CodecError::ZeroZipBytes)
        ));
    }

    #[test]
    fn varint_roundtrip() {
        let values = [0u32, 1, 127, 128, 300, 16_383, 16_384, u32::MAX];
        let mut buf = Vec::new();
        for &v in &values {
            varint_push(&mut buf, v);
        }
        let mut pos = 0;
        for &v in &values {
            assert_eq!(varint_read(&buf, &mut pos).unwrap(), v);
        }
        assert_eq!(pos, buf.len());
    }

    #[test]
    fn signed_mapping_roundtrip() {
        for v in [-400i32, -3, -1, 0, 1, 2, 399] {
            assert_eq!(to_signed(to_unsigned(v)), i64::from(v));
        }
    }
}
