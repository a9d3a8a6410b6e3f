//! Deterministic synthetic "clean" checkpoints: Gaussian F32 weight
//! tensors under plausible layer names. Used as carriers in simulations,
//! as scanner calibration fixtures, and by the CLI to fabricate a benign
//! model export.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{Checkpoint, TensorEntry};

/// Largest single synthetic tensor, in bytes.
const MAX_TENSOR_BYTES: u64 = 1 << 20;

/// Builds a checkpoint whose tensor payloads total exactly
/// `payload_bytes` rounded up to a multiple of 4 (minimum one f32),
/// split into <= 1 MiB layers. Same seed, same bytes.
pub fn synthetic_checkpoint(seed: u64, payload_bytes: u64) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 0.05).expect("valid sigma");
    let total = payload_bytes.div_ceil(4).max(1) * 4;
    let mut c = Checkpoint::new();
    let mut remaining = total;
    let mut layer = 0usize;
    while remaining > 0 {
        let take = remaining.min(MAX_TENSOR_BYTES);
        let elements = (take / 4) as usize;
        let values: Vec<f32> = (0..elements)
            .map(|_| normal.sample(&mut rng) as f32)
            .collect();
        let name = if layer % 4 == 3 {
            format!("blocks.{:02}.bias", layer / 4)
        } else {
            format!("blocks.{:02}.weight.{}", layer / 4, layer % 4)
        };
        c.add_entry(TensorEntry::from_f32(name, &values).expect("valid synthetic entry"))
            .expect("generated keys are unique");
        remaining -= take;
        layer += 1;
    }
    c
}
