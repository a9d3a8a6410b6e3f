//! Parser robustness smoke test: every binary reader in the crate must
//! return an error, never panic, on arbitrary and on mutated-valid input.
//! The acceptance suite runs the full-size campaign; this keeps the core
//! crate self-guarding.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use weightstash_core::codec::{SliceCode, VolumeCode};
use weightstash_core::container::{Checkpoint, TensorEntry};
use weightstash_core::npz;
use weightstash_core::stash::PayloadManifest;
use weightstash_core::volume::Volume;
use weightstash_core::ziparc;

fn feed_all_parsers(bytes: &[u8]) {
    let _ = Checkpoint::from_wdc_bytes(bytes);
    let _ = npz::read_npz_bytes(bytes);
    let _ = ziparc::read_zip(bytes);
    let _ = Volume::from_rvol_bytes(bytes);
    let _ = VolumeCode::from_bytes(bytes);
    let _ = SliceCode::from_bytes(bytes);
    let _ = PayloadManifest::from_bytes(bytes);
}

fn valid_corpus() -> Vec<Vec<u8>> {
    let mut c = Checkpoint::new();
    c.add_entry(TensorEntry::from_f32("layer.weight", &[0.5; 100]).unwrap())
        .unwrap();
    c.add_entry(TensorEntry::from_bytes("raw", (0u8..=255).collect()).unwrap())
        .unwrap();
    let v = Volume::new(2, 4, 4, (0..32).map(|i| i as f32).collect(), 0.0, 31.0, 16).unwrap();
    vec![
        c.to_wdc_bytes(),
        npz::write_npz_bytes(&c).unwrap(),
        v.to_rvol_bytes(),
    ]
}

#[test]
fn random_bytes_never_panic_parsers() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF022);
    let mut buf = vec![0u8; 512];
    for _ in 0..50_000 {
        let len = rng.random_range(0..buf.len());
        rng.fill_bytes(&mut buf[..len]);
        feed_all_parsers(&buf[..len]);
    }
}

#[test]
fn magic_prefixed_random_bytes_never_panic_parsers() {
    // Prefixing valid magics steers the fuzz past the first check.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let magics: [&[u8]; 5] = [b"WDC1", b"RVOL", b"VC01", b"SC01", b"STSH"];
    let mut buf = vec![0u8; 256];
    for i in 0..50_000 {
        let magic = magics[i % magics.len()];
        buf[..4].copy_from_slice(magic);
        let len = rng.random_range(4..buf.len());
        rng.fill_bytes(&mut buf[4..len]);
        feed_all_parsers(&buf[..len]);
    }
}

#[test]
fn mutated_valid_files_never_panic_parsers() {
    let corpus = valid_corpus();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..30_000 {
        let base = &corpus[rng.random_range(0..corpus.len())];
        let mut mutated = base.clone();
        match rng.random_range(0..3) {
            0 => {
                // flip a handful of bytes
                for _ in 0..rng.random_range(1..8) {
                    let at = rng.random_range(0..mutated.len());
                    mutated[at] ^= 1 << rng.random_range(0..8);
                }
            }
            1 => {
                let keep = rng.random_range(0..mutated.len());
                mutated.truncate(keep);
            }
            _ => {
                let extra = rng.random_range(1..64);
                for _ in 0..extra {
                    mutated.push(rng.random());
                }
            }
        }
        feed_all_parsers(&mutated);
    }
}
