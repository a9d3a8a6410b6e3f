//! Slice stacking and in-plane tiling between volumes and the codec's
//! fixed 256x256x3 input.
//!
//! Three modes cover the supported slice geometries:
//!
//! * `Low` : 512x512 slices bilinearly downsampled by 2, one stack per
//!   slice. Lossy by construction.
//! * `High`: a cover of 256-pixel patches at stride 128 (3x3 overlapping
//!   patches on 512x512), blended back with triangular ramp weights
//!   normalized to a partition of unity.
//! * `Pad` : slices up to 256x256 (the 240x240 case) edge-padded to 256
//!   and cropped back on reassembly.
//!
//! Every stack carries its slice plus the two neighbouring slices in
//! channels 0 and 2; boundary slices replicate their nearest neighbour.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Volume, VolumeError};

/// In-plane extent of every codec input patch.
pub const STACK_EXTENT: usize = 256;
/// Patch stride of the `High` cover.
pub const HIGH_STRIDE: usize = 128;
const STACK_PIXELS: usize = STACK_EXTENT * STACK_EXTENT;

#[derive(Debug, Error)]
pub enum TilingError {
    #[error("volume must be normalized before tiling")]
    NotNormalized,
    #[error("in-plane size {height}x{width} unsupported for mode {mode:?}")]
    UnsupportedSize {
        mode: TilingMode,
        height: usize,
        width: usize,
    },
    #[error("missing stack for slice {slice}, patch {patch}")]
    MissingPatch { slice: usize, patch: usize },
    #[error("duplicate stack for slice {slice}, patch {patch}")]
    DuplicateStack { slice: usize, patch: usize },
    #[error("stacks inconsistent with plan: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TilingMode {
    Low,
    High,
    Pad,
}

impl TilingMode {
    pub fn code(self) -> u8 {
        match self {
            TilingMode::Low => 0,
            TilingMode::High => 1,
            TilingMode::Pad => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TilingMode::Low),
            1 => Some(TilingMode::High),
            2 => Some(TilingMode::Pad),
            _ => None,
        }
    }
}

/// One 256x256x3 codec input: the slice itself in channel 1, its lower and
/// upper neighbours in channels 0 and 2.
#[derive(Debug, Clone)]
pub struct SliceStack {
    data: Vec<f32>, // channel-major, 3 * 256 * 256
    center_slice_index: usize,
    mode: TilingMode,
    patch_index: usize,
}

impl SliceStack {
    fn new(mode: TilingMode, center_slice_index: usize, patch_index: usize) -> Self {
        Self {
            data: vec![0.0; 3 * STACK_PIXELS],
            center_slice_index,
            mode,
            patch_index,
        }
    }

    /// Builds a stack directly from a decoded center channel; neighbour
    /// channels are filled with copies since reassembly ignores them.
    pub fn from_center(
        mode: TilingMode,
        center_slice_index: usize,
        patch_index: usize,
        center: &[f32],
    ) -> Self {
        assert_eq!(center.len(), STACK_PIXELS, "center channel must be 256x256");
        let mut data = Vec::with_capacity(3 * STACK_PIXELS);
        data.extend_from_slice(center);
        data.extend_from_slice(center);
        data.extend_from_slice(center);
        Self {
            data,
            center_slice_index,
            mode,
            patch_index,
        }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * STACK_PIXELS..(c + 1) * STACK_PIXELS]
    }

    fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        &mut self.data[c * STACK_PIXELS..(c + 1) * STACK_PIXELS]
    }

    pub fn center(&self) -> &[f32] {
        self.channel(1)
    }

    pub fn center_slice_index(&self) -> usize {
        self.center_slice_index
    }

    pub fn mode(&self) -> TilingMode {
        self.mode
    }

    pub fn patch_index(&self) -> usize {
        self.patch_index
    }
}

/// Geometry and blend weights needed to reassemble stacks into a volume.
#[derive(Debug, Clone)]
pub struct TilingPlan {
    mode: TilingMode,
    depth: usize,
    height: usize,
    width: usize,
    intensity_min: f32,
    intensity_max: f32,
    source_bits_per_voxel: u32,
    /// `High`: patch top-left corners. `Pad`: the single (top, left) pad
    /// offset. `Low`: one dummy origin.
    positions: Vec<(usize, usize)>,
    /// `High` only: per-patch 256x256 blend weights, already normalized so
    /// the weights covering any pixel sum to 1.
    weights: Vec<Vec<f64>>,
}

impl TilingPlan {
    pub fn build(
        mode: TilingMode,
        depth: usize,
        height: usize,
        width: usize,
        intensity_min: f32,
        intensity_max: f32,
        source_bits_per_voxel: u32,
    ) -> Result<Self, TilingError> {
        let unsupported = || TilingError::UnsupportedSize {
            mode,
            height,
            width,
        };
        if depth == 0 || height == 0 || width == 0 {
            return Err(unsupported());
        }
        let (positions, weights) = match mode {
            TilingMode::Low => {
                if height != 2 * STACK_EXTENT || width != 2 * STACK_EXTENT {
                    return Err(unsupported());
                }
                (vec![(0, 0)], Vec::new())
            }
            TilingMode::High => {
                if height < STACK_EXTENT || width < STACK_EXTENT {
                    return Err(unsupported());
                }
                let rows = patch_starts(height);
                let cols = patch_starts(width);
                let mut positions = Vec::with_capacity(rows.len() * cols.len());
                for &r in &rows {
                    for &c in &cols {
                        positions.push((r, c));
                    }
                }
                let weights = normalized_blend_weights(&positions, height, width);
                (positions, weights)
            }
            TilingMode::Pad => {
                if height > STACK_EXTENT || width > STACK_EXTENT {
                    return Err(unsupported());
                }
                let top = (STACK_EXTENT - height) / 2;
                let left = (STACK_EXTENT - width) / 2;
                (vec![(top, left)], Vec::new())
            }
        };
        Ok(Self {
            mode,
            depth,
            height,
            width,
            intensity_min,
            intensity_max,
            source_bits_per_voxel,
            positions,
            weights,
        })
    }

    pub fn for_volume(v: &Volume, mode: TilingMode) -> Result<Self, TilingError> {
        Self::build(
            mode,
            v.depth(),
            v.height(),
            v.width(),
            v.intensity_min(),
            v.intensity_max(),
            v.source_bits_per_voxel(),
        )
    }

    pub fn mode(&self) -> TilingMode {
        self.mode
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn intensity_min(&self) -> f32 {
        self.intensity_min
    }

    pub fn intensity_max(&self) -> f32 {
        self.intensity_max
    }

    pub fn source_bits_per_voxel(&self) -> u32 {
        self.source_bits_per_voxel
    }

    pub fn patches_per_slice(&self) -> usize {
        match self.mode {
            TilingMode::High => self.positions.len(),
            _ => 1,
        }
    }

    pub fn stack_count(&self) -> usize {
        self.depth * self.patches_per_slice()
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    pub fn blend_weights(&self) -> &[Vec<f64>] {
        &self.weights
    }
}

/// Patch top-left offsets covering `extent` pixels with 256-wide patches
/// at stride 128, the last patch clamped flush with the edge.
fn patch_starts(extent: usize) -> Vec<usize> {
    debug_assert!(extent >= STACK_EXTENT);
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + STACK_EXTENT >= extent {
            starts.push(extent - STACK_EXTENT);
            break;
        }
        starts.push(s);
        s += HIGH_STRIDE;
    }
    starts
}

/// Separable triangular ramp over a patch axis: maximal at the patch
/// center, decaying linearly to the edges, never zero.
fn triangle(i: usize) -> f64 {
    1.0 - ((2 * i) as f64 - (STACK_EXTENT - 1) as f64).abs() / STACK_EXTENT as f64
}

fn normalized_blend_weights(
    positions: &[(usize, usize)],
    height: usize,
    width: usize,
) -> Vec<Vec<f64>> {
    let tri: Vec<f64> = (0..STACK_EXTENT).map(triangle).collect();
    let mut denom = vec![0.0f64; height * width];
    for &(r0, c0) in positions {
        for i in 0..STACK_EXTENT {
            let row = (r0 + i) * width;
            for j in 0..STACK_EXTENT {
                denom[row + c0 + j] += tri[i] * tri[j];
            }
        }
    }
    positions
        .iter()
        .map(|&(r0, c0)| {
            let mut map = vec![0.0f64; STACK_PIXELS];
            for i in 0..STACK_EXTENT {
                for j in 0..STACK_EXTENT {
                    map[i * STACK_EXTENT + j] = tri[i] * tri[j] / denom[(r0 + i) * width + c0 + j];
                }
            }
            map
        })
        .collect()
}

/// Splits a normalized volume into codec-ready stacks together with the
/// plan that reassembles them.
pub fn make_slice_stacks(
    v: &Volume,
    mode: TilingMode,
) -> Result<(Vec<SliceStack>, TilingPlan), TilingError> {
    if !v.is_normalized() {
        return Err(TilingError::NotNormalized);
    }
    let plan = TilingPlan::for_volume(v, mode)?;
    let depth = v.depth();
    let mut stacks = Vec::with_capacity(plan.stack_count());
    for z in 0..depth {
        // Boundary slices replicate their nearest existing neighbour.
        let below = v.slice(z.saturating_sub(1));
        let here = v.slice(z);
        let above = v.slice((z + 1).min(depth - 1));
        let channels = [below, here, above];
        match mode {
            TilingMode::Low => {
                let mut stack = SliceStack::new(mode, z, 0);
                for (c, src) in channels.iter().enumerate() {
                    let down = downsample_2x(src, v.height(), v.width());
                    stack.channel_mut(c).copy_from_slice(&down);
                }
                stacks.push(stack);
            }
            TilingMode::High => {
                for (p, &(r0, c0)) in plan.positions().iter().enumerate() {
                    let mut stack = SliceStack::new(mode, z, p);
                    for (c, src) in channels.iter().enumerate() {
                        copy_patch(src, v.width(), r0, c0, stack.channel_mut(c));
                    }
                    stacks.push(stack);
                }
            }
            TilingMode::Pad => {
                let (top, left) = plan.positions()[0];
                let mut stack = SliceStack::new(mode, z, 0);
                for (c, src) in channels.iter().enumerate() {
                    edge_pad(src, v.height(), v.width(), top, left, stack.channel_mut(c));
                }
                stacks.push(stack);
            }
        }
    }
    Ok((stacks, plan))
}

/// Rebuilds a normalized volume from stack center channels.
///
/// Only channel 1 of each stack contributes. `High` overlaps are blended
/// with the plan's partition-of-unity weights, `Low` is bilinearly
/// upsampled back to 512, `Pad` is cropped to the original extent.
pub fn reassemble_slices(stacks: &[SliceStack], plan: &TilingPlan) -> Result<Volume, TilingError> {
    let pps = plan.patches_per_slice();
    let expected = plan.stack_count();
    if stacks.len() != expected {
        return Err(TilingError::PlanMismatch(format!(
            "expected {expected} stacks, got {}",
            stacks.len()
        )));
    }
    let mut by_position: Vec<Option<&SliceStack>> = vec![None; expected];
    for s in stacks {
        if s.mode() != plan.mode() {
            return Err(TilingError::PlanMismatch(format!(
                "stack mode {:?} does not match plan mode {:?}",
                s.mode(),
                plan.mode()
            )));
        }
        if s.center_slice_index() >= plan.depth || s.patch_index() >= pps {
            return Err(TilingError::PlanMismatch(format!(
                "stack (slice {}, patch {}) outside plan geometry",
                s.center_slice_index(),
                s.patch_index()
            )));
        }
        let slot = s.center_slice_index() * pps + s.patch_index();
        if by_position[slot].is_some() {
            return Err(TilingError::DuplicateStack {
                slice: s.center_slice_index(),
                patch: s.patch_index(),
            });
        }
        by_position[slot] = Some(s);
    }

    let (depth, height, width) = plan.dims();
    let slice_len = height * width;
    let mut voxels = vec![0.0f32; depth * slice_len];
    for z in 0..depth {
        let out = &mut voxels[z * slice_len..(z + 1) * slice_len];
        match plan.mode() {
            TilingMode::Low => {
                let stack = by_position[z].ok_or(TilingError::MissingPatch { slice: z, patch: 0 })?;
                let up = upsample_bilinear_2x(stack.center(), STACK_EXTENT, STACK_EXTENT);
                for (dst, v) in out.iter_mut().zip(up) {
                    *dst = v.clamp(0.0, 1.0);
                }
            }
            TilingMode::Pad => {
                let stack = by_position[z].ok_or(TilingError::MissingPatch { slice: z, patch: 0 })?;
                let (top, left) = plan.positions()[0];
                let center = stack.center();
                for y in 0..height {
                    for x in 0..width {
                        out[y * width + x] = center[(y + top) * STACK_EXTENT + (x + left)];
                    }
                }
            }
            TilingMode::High => {
                let mut acc = vec![0.0f64; slice_len];
                for p in 0..pps {
                    let stack = by_position[z * pps + p]
                        .ok_or(TilingError::MissingPatch { slice: z, patch: p })?;
                    let (r0, c0) = plan.positions()[p];
                    let wmap = &plan.blend_weights()[p];
                    let center = stack.center();
                    for i in 0..STACK_EXTENT {
                        let dst_row = (r0 + i) * width + c0;
                        let src_row = i * STACK_EXTENT;
                        for j in 0..STACK_EXTENT {
                            acc[dst_row + j] +=
                                wmap[src_row + j] * f64::from(center[src_row + j]);
                        }
                    }
                }
                for (dst, v) in out.iter_mut().zip(acc) {
                    *dst = (v as f32).clamp(0.0, 1.0);
                }
            }
        }
    }

    Ok(Volume::from_normalized_voxels(
        depth,
        height,
        width,
        voxels,
        plan.intensity_min(),
        plan.intensity_max(),
        plan.source_bits_per_voxel(),
    )?)
}

/// 2x2 mean pooling, the bilinear downsample for an exact factor of two.
pub fn downsample_2x(src: &[f32], height: usize, width: usize) -> Vec<f32> {
    debug_assert_eq!(src.len(), height * width);
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * width + 2 * x;
            let sum = f64::from(src[i])
                + f64::from(src[i + 1])
                + f64::from(src[i + width])
                + f64::from(src[i + width + 1]);
            out.push((sum * 0.25) as f32);
        }
    }
    out
}

/// Bilinear 2x upsample, pixel-center aligned, edges clamped.
pub fn upsample_bilinear_2x(src: &[f32], height: usize, width: usize) -> Vec<f32> {
    debug_assert_eq!(src.len(), height * width);
    let (oh, ow) = (height * 2, width * 2);
    let mut out = Vec::with_capacity(oh * ow);
    let sample = |y: isize, x: isize| -> f64 {
        let y = y.clamp(0, height as isize - 1) as usize;
        let x = x.clamp(0, width as isize - 1) as usize;
        f64::from(src[y * width + x])
    };
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let (yi, xi) = (y0 as isize, x0 as isize);
            let v = sample(yi, xi) * (1.0 - fy) * (1.0 - fx)
                + sample(yi, xi + 1) * (1.0 - fy) * fx
                + sample(yi + 1, xi) * fy * (1.0 - fx)
                + sample(yi + 1, xi + 1) * fy * fx;
            out.push(v as f32);
        }
    }
    out
}

fn copy_patch(src: &[f32], width: usize, r0: usize, c0: usize, dst: &mut [f32]) {
    for i in 0..STACK_EXTENT {
        let s = (r0 + i) * width + c0;
        dst[i * STACK_EXTENT..(i + 1) * STACK_EXTENT]
            .copy_from_slice(&src[s..s + STACK_EXTENT]);
    }
}

/// Replicating edge pad of an `height x width` slice into a 256x256 patch
/// whose interior starts at `(top, left)`.
fn edge_pad(src: &[f32], height: usize, width: usize, top: usize, left: usize, dst: &mut [f32]) {
    for y in 0..STACK_EXTENT {
        let sy = y.saturating_sub(top).min(height - 1);
        for x in 0..STACK_EXTENT {
            let sx = x.saturating_sub(left).min(width - 1);
            dst[y * STACK_EXTENT + x] = src[sy * width + sx];
        }
    }
}
