//! Orthonormal 8x8 DCT-II, its inverse, and the zigzag scan order.

use std::sync::OnceLock;

pub const BLOCK: usize = 8;
pub const BLOCK_COEFFS: usize = BLOCK * BLOCK;

/// Orthonormal DCT-II basis: `M[u][x] = c(u) * cos(pi*(2x+1)*u / 16)` with
/// `c(0) = sqrt(1/8)` and `c(u>0) = 1/2`. Forward is `M X M^T`, inverse is
/// the transpose sandwich, so round trips are exact up to f64 rounding.
fn basis() -> &'static [[f64; BLOCK]; BLOCK] {
    static BASIS: OnceLock<[[f64; BLOCK]; BLOCK]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut m = [[0.0; BLOCK]; BLOCK];
        for (u, row) in m.iter_mut().enumerate() {
            let c = if u == 0 {
                (1.0 / BLOCK as f64).sqrt()
            } else {
                (2.0 / BLOCK as f64).sqrt()
            };
            for (x, v) in row.iter_mut().enumerate() {
                *v = c * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64
                    / (2 * BLOCK) as f64)
                    .cos();
            }
        }
        m
    })
}

pub fn forward_8x8(block: &[f64; BLOCK_COEFFS]) -> [f64; BLOCK_COEFFS] {
    let m = basis();
    // tmp = M * block
    let mut tmp = [0.0; BLOCK_COEFFS];
    for u in 0..BLOCK {
        for x in 0..BLOCK {
            let mut acc = 0.0;
            for k in 0..BLOCK {
                acc += m[u][k] * block[k * BLOCK + x];
            }
            tmp[u * BLOCK + x] = acc;
        }
    }
    // out = tmp * M^T
    let mut out = [0.0; BLOCK_COEFFS];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            let mut acc = 0.0;
            for k in 0..BLOCK {
                acc += tmp[u * BLOCK + k] * m[v][k];
            }
            out[u * BLOCK + v] = acc;
        }
    }
    out
}

pub fn inverse_8x8(coeffs: &[f64; BLOCK_COEFFS]) -> [f64; BLOCK_COEFFS] {
    let m = basis();
    // tmp = M^T * coeffs
    let mut tmp = [0.0; BLOCK_COEFFS];
    for x in 0..BLOCK {
        for v in 0..BLOCK {
            let mut acc = 0.0;
            for k in 0..BLOCK {
                acc += m[k][x] * coeffs[k * BLOCK + v];
            }
            tmp[x * BLOCK + v] = acc;
        }
    }
    // out = tmp * M
    let mut out = [0.0; BLOCK_COEFFS];
    for x in 0..BLOCK {
        for y in 0..BLOCK {
            let mut acc = 0.0;
            for k in 0..BLOCK {
                acc += tmp[x * BLOCK + k] * m[k][y];
            }
            out[x * BLOCK + y] = acc;
        }
    }
    out
}

/// JPEG zigzag scan: `ZIGZAG[k]` is the row-major index of the k-th
/// coefficient in ascending spatial frequency.
pub const ZIGZAG: [usize; BLOCK_COEFFS] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27,
    20, 13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58,
    59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zigzag_is_a_permutation() {
        let mut seen = [false; BLOCK_COEFFS];
        for &i in &ZIGZAG {
            assert!(!seen[i]);
            seen[i] = true;
        }
    }

    #[test]
    fn transform_roundtrip_is_exact() {
        let mut block = [0.0f64; BLOCK_COEFFS];
        for (i, v) in block.iter_mut().enumerate() {
            *v = ((i * 37 + 11) % 97) as f64 / 97.0;
        }
        let back = inverse_8x8(&forward_8x8(&block));
        for (a, b) in block.iter().zip(back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_block_is_dc_only() {
        let block = [0.5f64; BLOCK_COEFFS];
        let coeffs = forward_8x8(&block);
        assert!((coeffs[0] - 4.0).abs() < 1e-12, "DC should be 8 * 0.5");
        for &c in &coeffs[1..] {
            assert!(c.abs() < 1e-12);
        }
    }

    #[test]
    fn transform_is_orthonormal() {
        // Parseval: energy is preserved.
        let mut block = [0.0f64; BLOCK_COEFFS];
        for (i, v) in block.iter_mut().enumerate() {
            *v = (i as f64 * 0.7).sin();
        }
        let coeffs = forward_8x8(&block);
        let e_in: f64 = block.iter().map(|v| v * v).sum();
        let e_out: f64 = coeffs.iter().map(|v| v * v).sum();
        assert!((e_in - e_out).abs() < 1e-9);
    }
}
