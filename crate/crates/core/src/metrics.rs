//! Fidelity and segmentation metrics: PSNR, multi-scale SSIM, volumetric
//! overlap measures and symmetric surface distances.
//!
//! MS-SSIM runs five dyadic scales with the usual 11-tap Gaussian window
//! (sigma 1.5, K1 0.01, K2 0.03) and scale weights (0.0448, 0.2856,
//! 0.3001, 0.2363, 0.1333). The full SSIM term (luminance times
//! contrast-structure) enters at every scale, so two constant images at
//! opposite ends of the range score near zero.
//!
//! Surface distances use six-connected surface extraction (the volume
//! border counts as background) and exact Euclidean distances between
//! voxel centers under an anisotropic millimeter spacing, computed with a
//! separable squared distance transform.

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::volume::Volume;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("dimension mismatch: {a:?} vs {b:?}")]
    DimMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("voxel spacing mismatch: {a:?} vs {b:?}")]
    SpacingMismatch {
        a: (f64, f64, f64),
        b: (f64, f64, f64),
    },
    #[error("spacing components must be positive, got {0:?}")]
    InvalidSpacing((f64, f64, f64)),
    #[error("mask voxel buffer length {got} does not match {depth}x{height}x{width}")]
    BadMaskBuffer {
        depth: usize,
        height: usize,
        width: usize,
        got: usize,
    },
    #[error("peak/dynamic range must be positive and finite, got {0}")]
    InvalidPeak(f64),
    #[error("input of {height}x{width} too small for {scales} dyadic scales of an 11-tap window")]
    TooSmallForScales {
        height: usize,
        width: usize,
        scales: usize,
    },
    #[error("surface distances are undefined for an empty mask ({which})")]
    EmptyMask { which: &'static str },
}

/// Binary segmentation volume with millimeter voxel spacing (z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    depth: usize,
    height: usize,
    width: usize,
    voxels: Vec<bool>,
    spacing: (f64, f64, f64),
}

impl MaskVolume {
    pub fn new(
        depth: usize,
        height: usize,
        width: usize,
        voxels: Vec<bool>,
        spacing: (f64, f64, f64),
    ) -> Result<Self, MetricError> {
        if voxels.len() != depth * height * width {
            return Err(MetricError::BadMaskBuffer {
                depth,
                height,
                width,
                got: voxels.len(),
            });
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
            return Err(MetricError::InvalidSpacing(spacing));
        }
        Ok(Self {
            depth,
            height,
            width,
            voxels,
            spacing,
        })
    }

    /// Thresholds a scalar volume at 0.5.
    pub fn from_volume(v: &Volume, spacing: (f64, f64, f64)) -> Result<Self, MetricError> {
        Self::new(
            v.depth(),
            v.height(),
            v.width(),
            v.voxels().iter().map(|&x| x >= 0.5).collect(),
            spacing,
        )
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    pub fn count(&self) -> u64 {
        self.voxels.iter().filter(|&&v| v).count() as u64
    }

    fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.voxels[(z * self.height + y) * self.width + x]
    }

    /// Mask voxels with at least one six-connected background neighbour;
    /// the volume border counts as background.
    pub fn surface_voxels(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for z in 0..self.depth {
            for y in 0..self.height {
                for x in 0..self.width {
                    if !self.get(z, y, x) {
                        continue;
                    }
                    let exposed = z == 0
                        || z == self.depth - 1
                        || y == 0
                        || y == self.height - 1
                        || x == 0
                        || x == self.width - 1
                        || !self.get(z - 1, y, x)
                        || !self.get(z + 1, y, x)
                        || !self.get(z, y - 1, x)
                        || !self.get(z, y + 1, x)
                        || !self.get(z, y, x - 1)
                        || !self.get(z, y, x + 1);
                    if exposed {
                        out.push((z, y, x));
                    }
                }
            }
        }
        out
    }
}

/// All the numbers the toolkit reports for a volume/mask pair. `None`
/// means the metric was not computed; infinities serialize as `"inf"`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub psnr: Option<f64>,
    pub ms_ssim: Option<f64>,
    pub dice: Option<f64>,
    pub voe: Option<f64>,
    pub rvd: Option<f64>,
    pub assd: Option<f64>,
    pub msd: Option<f64>,
    pub rmsd: Option<f64>,
}

impl Serialize for MetricReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        fn field<S: Serializer>(
            s: &mut S::SerializeStruct,
            name: &'static str,
            value: &Option<f64>,
        ) -> Result<(), S::Error> {
            match value {
                None => s.serialize_field(name, &Option::<f64>::None),
                Some(v) if v.is_infinite() => {
                    s.serialize_field(name, if *v > 0.0 { "inf" } else { "-inf" })
                }
                Some(v) => s.serialize_field(name, v),
            }
        }
        let mut s = serializer.serialize_struct("MetricReport", 8)?;
        field::<S>(&mut s, "psnr", &self.psnr)?;
        field::<S>(&mut s, "ms_ssim", &self.ms_ssim)?;
        field::<S>(&mut s, "dice", &self.dice)?;
        field::<S>(&mut s, "voe", &self.voe)?;
        field::<S>(&mut s, "rvd", &self.rvd)?;
        field::<S>(&mut s, "assd", &self.assd)?;
        field::<S>(&mut s, "msd", &self.msd)?;
        field::<S>(&mut s, "rmsd", &self.rmsd)?;
        s.end()
    }
}

/// Peak signal-to-noise ratio in dB; +inf when the volumes are identical.
pub fn psnr(a: &Volume, b: &Volume, peak: f64) -> Result<f64, MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::DimMismatch {
            a: a.dims(),
            b: b.dims(),
        });
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(MetricError::InvalidPeak(peak));
    }
    let mse = a
        .voxels()
        .iter()
        .zip(b.voxels())
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        / a.voxel_count() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const MSSSIM_SCALES: usize = 5;
const MSSSIM_WEIGHTS: [f64; MSSSIM_SCALES] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Smallest in-plane extent that still leaves an 11-tap window after four
/// dyadic halvings.
pub const MSSSIM_MIN_EXTENT: usize = 176;

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian filter: output is (h-10) x (w-10).
fn gaussian_filter(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let win = gaussian_window();
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * img[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean SSIM (luminance times contrast-structure) over the valid windows
/// of one scale, clamped to [0, 1].
fn ssim_scale(a: &[f64], b: &[f64], h: usize, w: usize, c1: f64, c2: f64) -> f64 {
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let (mu_a, oh, ow) = gaussian_filter(a, h, w);
    let (mu_b, _, _) = gaussian_filter(b, h, w);
    let (m_aa, _, _) = gaussian_filter(&aa, h, w);
    let (m_bb, _, _) = gaussian_filter(&bb, h, w);
    let (m_ab, _, _) = gaussian_filter(&ab, h, w);
    let mut sum = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let ssim = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        sum += ssim;
    }
    (sum / (oh * ow) as f64).clamp(0.0, 1.0)
}

fn downsample_mean_2x(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (img[i] + img[i + 1] + img[i + w] + img[i + w + 1]);
        }
    }
    (out, oh, ow)
}

/// Five-scale MS-SSIM between two equally sized 2-D slices whose values
/// span `dynamic_range`.
pub fn ms_ssim_slice(
    a: &[f32],
    b: &[f32],
    height: usize,
    width: usize,
    dynamic_range: f64,
) -> Result<f64, MetricError> {
    if a.len() != height * width || b.len() != height * width {
        return Err(MetricError::DimMismatch {
            a: (1, height, width),
            b: (1, height, width),
        });
    }
    if height < MSSSIM_MIN_EXTENT || width < MSSSIM_MIN_EXTENT {
        return Err(MetricError::TooSmallForScales {
            height,
            width,
            scales: MSSSIM_SCALES,
        });
    }
    if !(dynamic_range > 0.0 && dynamic_range.is_finite()) {
        return Err(MetricError::InvalidPeak(dynamic_range));
    }
    let c1 = (K1 * dynamic_range) * (K1 * dynamic_range);
    let c2 = (K2 * dynamic_range) * (K2 * dynamic_range);
    let mut cur_a: Vec<f64> = a.iter().map(|&v| f64::from(v)).collect();
    let mut cur_b: Vec<f64> = b.iter().map(|&v| f64::from(v)).collect();
    let (mut h, mut w) = (height, width);
    let mut value = 1.0f64;
    for (scale, weight) in MSSSIM_WEIGHTS.iter().enumerate() {
        let s = ssim_scale(&cur_a, &cur_b, h, w, c1, c2);
        value *= s.powf(*weight);
        if scale + 1 < MSSSIM_SCALES {
            let (da, nh, nw) = downsample_mean_2x(&cur_a, h, w);
            let (db, _, _) = downsample_mean_2x(&cur_b, h, w);
            cur_a = da;
            cur_b = db;
            h = nh;
            w = nw;
        }
    }
    Ok(value)
}

/// Per-volume MS-SSIM: the mean over in-plane slices.
pub fn ms_ssim_volume(a: &Volume, b: &Volume, dynamic_range: f64) -> Result<f64, MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::DimMismatch {
            a: a.dims(),
            b: b.dims(),
        });
    }
    let mut sum = 0.0;
    for z in 0..a.depth() {
        sum += ms_ssim_slice(a.slice(z), b.slice(z), a.height(), a.width(), dynamic_range)?;
    }
    Ok(sum / a.depth() as f64)
}

/// Dice, volumetric overlap error and relative volume difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapMetrics {
    pub dice: f64,
    pub voe: f64,
    pub rvd: f64,
}

pub fn overlap_metrics(p: &MaskVolume, g: &MaskVolume) -> Result<OverlapMetrics, MetricError> {
    if p.dims() != g.dims() {
        return Err(MetricError::DimMismatch {
            a: p.dims(),
            b: g.dims(),
        });
    }
    let mut np = 0u64;
    let mut ng = 0u64;
    let mut intersection = 0u64;
    for (a, b) in p.voxels().iter().zip(g.voxels()) {
        np += u64::from(*a);
        ng += u64::from(*b);
        intersection += u64::from(*a && *b);
    }
    let union = np + ng - intersection;
    let dice = if np + ng == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / (np + ng) as f64
    };
    let voe = if union == 0 {
        0.0
    } else {
        1.0 - intersection as f64 / union as f64
    };
    let rvd = if ng == 0 {
        if np == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (np as f64 - ng as f64) / ng as f64
    };
    Ok(OverlapMetrics { dice, voe, rvd })
}

/// Average, maximum and root-mean-square symmetric surface distance, in
/// millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceMetrics {
    pub assd: f64,
    pub msd: f64,
    pub rmsd: f64,
}

pub fn surface_metrics(p: &MaskVolume, g: &MaskVolume) -> Result<SurfaceMetrics, MetricError> {
    if p.dims() != g.dims() {
        return Err(MetricError::DimMismatch {
            a: p.dims(),
            b: g.dims(),
        });
    }
    if p.spacing() != g.spacing() {
        return Err(MetricError::SpacingMismatch {
            a: p.spacing(),
            b: g.spacing(),
        });
    }
    let sp = p.surface_voxels();
    let sg = g.surface_voxels();
    if sp.is_empty() {
        return Err(MetricError::EmptyMask {
            which: "prediction",
        });
    }
    if sg.is_empty() {
        return Err(MetricError::EmptyMask { which: "reference" });
    }

    let dims = p.dims();
    let spacing = p.spacing();
    let dist_to_g = squared_distance_field(&sg, dims, spacing);
    let dist_to_p = squared_distance_field(&sp, dims, spacing);

    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut max = 0.0f64;
    let mut n = 0u64;
    let mut accumulate = |surface: &[(usize, usize, usize)], field: &[f64]| {
        for &(z, y, x) in surface {
            let d2 = field[(z * dims.1 + y) * dims.2 + x];
            let d = d2.sqrt();
            sum += d;
            sum_sq += d2;
            max = max.max(d);
            n += 1;
        }
    };
    accumulate(&sp, &dist_to_g);
    accumulate(&sg, &dist_to_p);

    Ok(SurfaceMetrics {
        assd: sum / n as f64,
        msd: max,
        rmsd: (sum_sq / n as f64).sqrt(),
    })
}

/// Exact squared Euclidean distance from every voxel center to the
/// nearest site, under anisotropic spacing, via the separable
/// lower-envelope-of-parabolas transform along each axis.
fn squared_distance_field(
    sites: &[(usize, usize, usize)],
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
) -> Vec<f64> {
    let (d, h, w) = dims;
    let mut field = vec![f64::INFINITY; d * h * w];
    for &(z, y, x) in sites {
        field[(z * h + y) * w + x] = 0.0;
    }
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;

    let mut line = vec![0.0f64; w.max(h).max(d)];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                line[x] = field[idx(z, y, x)];
            }
            let t = dt_1d(&line[..w], spacing.2);
            for x in 0..w {
                field[idx(z, y, x)] = t[x];
            }
        }
    }
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                line[y] = field[idx(z, y, x)];
            }
            let t = dt_1d(&line[..h], spacing.1);
            for y in 0..h {
                field[idx(z, y, x)] = t[y];
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                line[z] = field[idx(z, y, x)];
            }
            let t = dt_1d(&line[..d], spacing.0);
            for z in 0..d {
                field[idx(z, y, x)] = t[z];
            }
        }
    }
    field
}

/// One-dimensional squared distance transform with sample pitch `s`:
/// `out[i] = min_j (f[j] + ((i-j)*s)^2)`. Infinite inputs (no site on the
/// line yet) are skipped as parabola sources.
fn dt_1d(f: &[f64], s: f64) -> Vec<f64> {
    let n = f.len();
    let s2 = s * s;
    let mut out = vec![f64::INFINITY; n];
    // Hull of parabola source indices and boundaries between them.
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
            z.push(f64::INFINITY);
            continue;
        }
        loop {
            let p = *v.last().unwrap();
            let intersection =
                ((f[q] - f[p]) + s2 * ((q * q) as f64 - (p * p) as f64)) / (2.0 * s2 * (q - p) as f64);
            if intersection <= z[v.len() - 1] {
                v.pop();
                z.pop();
                if v.is_empty() {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    z.push(f64::INFINITY);
                    break;
                }
            } else {
                *z.last_mut().unwrap() = intersection;
                v.push(q);
                z.push(f64::INFINITY);
                break;
            }
        }
    }
    if v.is_empty() {
        return out;
    }
    let mut k = 0usize;
    for (i, o) in out.iter_mut().enumerate() {
        while z[k + 1] < i as f64 {
            k += 1;
        }
        let p = v[k];
        let dx = (i as f64 - p as f64) * s;
        *o = f[p] + dx * dx;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn volume_from(voxels: Vec<f32>, d: usize, h: usize, w: usize) -> Volume {
        Volume::new(d, h, w, voxels, 0.0, 1.0, 32).unwrap()
    }

    fn mask_from(bits: &[u8], d: usize, h: usize, w: usize, sp: (f64, f64, f64)) -> MaskVolume {
        MaskVolume::new(d, h, w, bits.iter().map(|&b| b != 0).collect(), sp).unwrap()
    }

    #[test]
    fn psnr_identity_is_infinite() {
        let v = volume_from(vec![0.3; 8], 2, 2, 2);
        assert!(psnr(&v, &v, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn psnr_closed_form() {
        // MSE 1e-4 at peak 1 -> 40 dB: half the voxels +0.01, half -0.01.
        let a = volume_from(vec![0.5; 8], 2, 2, 2);
        let mut shifted = vec![0.51f32; 4];
        shifted.extend_from_slice(&[0.49; 4]);
        let b = volume_from(shifted, 2, 2, 2);
        let db = psnr(&a, &b, 1.0).unwrap();
        assert!((db - 40.0).abs() < 1e-3, "{db}");
    }

    #[test]
    fn psnr_matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let n = 16 * 16 * 16;
        let a: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let va = volume_from(a.clone(), 16, 16, 16);
        let vb = volume_from(b.clone(), 16, 16, 16);
        let mut acc = 0.0f64;
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let i = (z * 16 + y) * 16 + x;
                    let d = f64::from(a[i]) - f64::from(b[i]);
                    acc += d * d;
                }
            }
        }
        let expected = 10.0 * (1.0 / (acc / n as f64)).log10();
        assert!((psnr(&va, &vb, 1.0).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_along_a_noise_ladder() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let base: Vec<f32> = (0..4096).map(|_| rng.random_range(0.2..0.8)).collect();
        let a = volume_from(base.clone(), 16, 16, 16);
        let mut last = f64::INFINITY;
        for amplitude in [0.001f32, 0.004, 0.016, 0.064] {
            let noisy: Vec<f32> = base
                .iter()
                .map(|&v| v + rng.random_range(-amplitude..amplitude))
                .collect();
            let b = volume_from(noisy, 16, 16, 16);
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p < last, "noise {amplitude}: {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn ms_ssim_identity_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let img: Vec<f32> = (0..200 * 200).map(|_| rng.random_range(0.0..1.0)).collect();
        assert_eq!(ms_ssim_slice(&img, &img, 200, 200, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn ms_ssim_of_opposite_constants_is_tiny() {
        let a = vec![0.0f32; 176 * 176];
        let b = vec![1.0f32; 176 * 176];
        let v = ms_ssim_slice(&a, &b, 176, 176, 1.0).unwrap();
        assert!(v < 0.05, "{v}");
    }

    #[test]
    fn ms_ssim_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let a: Vec<f32> = (0..180 * 180).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f32> = a
            .iter()
            .map(|&v| (v + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0))
            .collect();
        let ab = ms_ssim_slice(&a, &b, 180, 180, 1.0).unwrap();
        let ba = ms_ssim_slice(&b, &a, 180, 180, 1.0).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn ms_ssim_rejects_small_inputs() {
        let a = vec![0.0f32; 128 * 128];
        assert!(matches!(
            ms_ssim_slice(&a, &a, 128, 128, 1.0),
            Err(MetricError::TooSmallForScales { .. })
        ));
    }

    /// Direct nested-loop MS-SSIM oracle: non-separable 11x11 windows.
    fn ms_ssim_oracle(a: &[f32], b: &[f32], h: usize, w: usize, range: f64) -> f64 {
        let c1 = (K1 * range) * (K1 * range);
        let c2 = (K2 * range) * (K2 * range);
        let win = gaussian_window();
        let mut ka: Vec<f64> = a.iter().map(|&v| f64::from(v)).collect();
        let mut kb: Vec<f64> = b.iter().map(|&v| f64::from(v)).collect();
        let (mut h, mut w) = (h, w);
        let mut value = 1.0;
        for (scale, weight) in MSSSIM_WEIGHTS.iter().enumerate() {
            let mut sum = 0.0;
            let mut count = 0u64;
            for y0 in 0..h - WINDOW + 1 {
                for x0 in 0..w - WINDOW + 1 {
                    let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..WINDOW {
                        for dx in 0..WINDOW {
                            let wgt = win[dy] * win[dx];
                            let pa = ka[(y0 + dy) * w + x0 + dx];
                            let pb = kb[(y0 + dy) * w + x0 + dx];
                            ma += wgt * pa;
                            mb += wgt * pb;
                            maa += wgt * pa * pa;
                            mbb += wgt * pb * pb;
                            mab += wgt * pa * pb;
                        }
                    }
                    let va = maa - ma * ma;
                    let vb = mbb - mb * mb;
                    let cov = mab - ma * mb;
                    sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
            let s = (sum / count as f64).clamp(0.0, 1.0);
            value *= s.powf(*weight);
            if scale + 1 < MSSSIM_SCALES {
                let (da, nh, nw) = downsample_mean_2x(&ka, h, w);
                let (db, _, _) = downsample_mean_2x(&kb, h, w);
                ka = da;
                kb = db;
                h = nh;
                w = nw;
            }
        }
        value
    }

    #[test]
    fn ms_ssim_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (h, w) = (176, 176);
        let a: Vec<f32> = (0..h * w)
            .map(|i| {
                let y = (i / w) as f32 / 176.0;
                let x = (i % w) as f32 / 176.0;
                0.4 + 0.3 * y + 0.2 * x + rng.random_range(-0.05..0.05)
            })
            .collect();
        let b: Vec<f32> = a
            .iter()
            .map(|&v| (v + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0))
            .collect();
        let fast = ms_ssim_slice(&a, &b, h, w, 1.0).unwrap();
        let slow = ms_ssim_oracle(&a, &b, h, w, 1.0);
        assert!((fast - slow).abs() < 1e-6, "fast {fast} vs oracle {slow}");
    }

    #[test]
    fn overlap_on_identical_masks() {
        let m = mask_from(&[1, 1, 0, 0, 1, 0, 0, 0], 2, 2, 2, (1.0, 1.0, 1.0));
        let o = overlap_metrics(&m, &m).unwrap();
        assert_eq!((o.dice, o.voe, o.rvd), (1.0, 0.0, 0.0));
    }

    #[test]
    fn overlap_on_disjoint_masks() {
        let p = mask_from(&[1, 1, 0, 0, 0, 0, 0, 0], 2, 2, 2, (1.0, 1.0, 1.0));
        let g = mask_from(&[0, 0, 1, 1, 0, 0, 0, 0], 2, 2, 2, (1.0, 1.0, 1.0));
        let o = overlap_metrics(&p, &g).unwrap();
        assert_eq!(o.dice, 0.0);
        assert_eq!(o.voe, 1.0);
    }

    #[test]
    fn overlap_hand_counted_fixture() {
        // |P| = 3, |G| = 4, |P n G| = 2 on a 2x2x2 grid.
        let p = mask_from(&[1, 1, 1, 0, 0, 0, 0, 0], 2, 2, 2, (1.0, 1.0, 1.0));
        let g = mask_from(&[1, 1, 0, 1, 1, 0, 0, 0], 2, 2, 2, (1.0, 1.0, 1.0));
        let o = overlap_metrics(&p, &g).unwrap();
        assert!((o.dice - 4.0 / 7.0).abs() < 1e-15);
        assert!((o.voe - (1.0 - 2.0 / 5.0)).abs() < 1e-15);
        assert!((o.rvd - (-0.25)).abs() < 1e-15);
    }

    #[test]
    fn overlap_degenerate_cases() {
        let empty = mask_from(&[0; 8], 2, 2, 2, (1.0, 1.0, 1.0));
        let some = mask_from(&[1, 0, 0, 0, 0, 0, 0, 0], 2, 2, 2, (1.0, 1.0, 1.0));
        let o = overlap_metrics(&empty, &empty).unwrap();
        assert_eq!((o.dice, o.voe, o.rvd), (1.0, 0.0, 0.0));
        let o = overlap_metrics(&some, &empty).unwrap();
        assert!(o.rvd.is_infinite() && o.rvd > 0.0);
        let o = overlap_metrics(&empty, &some).unwrap();
        assert_eq!(o.rvd, -1.0);
    }

    #[test]
    fn dice_voe_algebraic_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..200 {
            let bits_p: Vec<u8> = (0..64).map(|_| u8::from(rng.random_bool(0.4))).collect();
            let bits_g: Vec<u8> = (0..64).map(|_| u8::from(rng.random_bool(0.4))).collect();
            let p = mask_from(&bits_p, 4, 4, 4, (1.0, 1.0, 1.0));
            let g = mask_from(&bits_g, 4, 4, 4, (1.0, 1.0, 1.0));
            let o = overlap_metrics(&p, &g).unwrap();
            let expected_voe = 2.0 * (1.0 - o.dice) / (2.0 - o.dice);
            assert!((o.voe - expected_voe).abs() < 1e-12);
        }
    }

    #[test]
    fn surface_identity_is_zero() {
        let m = mask_from(&[0, 1, 1, 0, 0, 1, 0, 0], 2, 2, 2, (1.0, 1.0, 1.0));
        let s = surface_metrics(&m, &m).unwrap();
        assert_eq!((s.assd, s.msd, s.rmsd), (0.0, 0.0, 0.0));
    }

    #[test]
    fn single_voxel_pair_hand_computed() {
        // Two single-voxel masks 3 voxels apart along z, spacing (2,1,1):
        // the only distance is 3 * 2 mm = 6 mm, so all three metrics are 6.
        let mut bits_p = vec![0u8; 8 * 4 * 4];
        let mut bits_g = vec![0u8; 8 * 4 * 4];
        bits_p[(4 + 2) * 4 + 2] = 1; // z=1, y=2, x=2
        bits_g[(4 * 4 + 2) * 4 + 2] = 1; // z=4, y=2, x=2
        let p = mask_from(&bits_p, 8, 4, 4, (2.0, 1.0, 1.0));
        let g = mask_from(&bits_g, 8, 4, 4, (2.0, 1.0, 1.0));
        let s = surface_metrics(&p, &g).unwrap();
        assert!((s.assd - 6.0).abs() < 1e-12);
        assert!((s.msd - 6.0).abs() < 1e-12);
        assert!((s.rmsd - 6.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_a_defined_error() {
        let empty = mask_from(&[0; 8], 2, 2, 2, (1.0, 1.0, 1.0));
        let some = mask_from(&[1, 0, 0, 0, 0, 0, 0, 0], 2, 2, 2, (1.0, 1.0, 1.0));
        assert!(matches!(
            surface_metrics(&empty, &some),
            Err(MetricError::EmptyMask { .. })
        ));
        assert!(matches!(
            surface_metrics(&some, &empty),
            Err(MetricError::EmptyMask { .. })
        ));
    }

    /// Brute-force all-pairs oracle for the symmetric surface distances.
    fn surface_oracle(p: &MaskVolume, g: &MaskVolume) -> SurfaceMetrics {
        let sp = p.surface_voxels();
        let sg = g.surface_voxels();
        let spacing = p.spacing();
        let dist = |a: (usize, usize, usize), b: (usize, usize, usize)| {
            let dz = (a.0 as f64 - b.0 as f64) * spacing.0;
            let dy = (a.1 as f64 - b.1 as f64) * spacing.1;
            let dx = (a.2 as f64 - b.2 as f64) * spacing.2;
            (dz * dz + dy * dy + dx * dx).sqrt()
        };
        let mut all = Vec::new();
        for &a in &sp {
            all.push(
                sg.iter()
                    .map(|&b| dist(a, b))
                    .fold(f64::INFINITY, f64::min),
            );
        }
        for &b in &sg {
            all.push(
                sp.iter()
                    .map(|&a| dist(a, b))
                    .fold(f64::INFINITY, f64::min),
            );
        }
        let n = all.len() as f64;
        SurfaceMetrics {
            assd: all.iter().sum::<f64>() / n,
            msd: all.iter().cloned().fold(0.0, f64::max),
            rmsd: (all.iter().map(|d| d * d).sum::<f64>() / n).sqrt(),
        }
    }

    #[test]
    fn surface_metrics_match_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        for trial in 0..25 {
            let (d, h, w) = (
                rng.random_range(3..=16),
                rng.random_range(3..=16),
                rng.random_range(3..=16),
            );
            let spacing = (
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
            );
            let make = |rng: &mut ChaCha8Rng| {
                let mut bits = vec![0u8; d * h * w];
                loop {
                    for b in bits.iter_mut() {
                        *b = u8::from(rng.random_bool(0.3));
                    }
                    if bits.iter().any(|&b| b != 0) {
                        break;
                    }
                }
                bits
            };
            let p = mask_from(&make(&mut rng), d, h, w, spacing);
            let g = mask_from(&make(&mut rng), d, h, w, spacing);
            let fast = surface_metrics(&p, &g).unwrap();
            let slow = surface_oracle(&p, &g);
            assert!(
                (fast.assd - slow.assd).abs() < 1e-9
                    && (fast.msd - slow.msd).abs() < 1e-9
                    && (fast.rmsd - slow.rmsd).abs() < 1e-9,
                "trial {trial}: fast {fast:?} vs oracle {slow:?}"
            );
        }
    }

    #[test]
    fn report_serializes_infinity_as_string() {
        let report = MetricReport {
            psnr: Some(f64::INFINITY),
            dice: Some(1.0),
            ..Default::default()
        };
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["psnr"], "inf");
        assert_eq!(json["dice"], 1.0);
        assert_eq!(json["ms_ssim"], serde_json::Value::Null);
    }
}
