//! Export audit: detect hidden payloads in a checkpoint.
//!
//! Three layers of evidence, weakest to strongest:
//!
//! * statistical tests on every sufficiently large entry: byte entropy
//!   and DEFLATE compressibility. Compressed or encrypted payloads sit
//!   near 8 bits/byte and refuse to shrink; genuine f32 weight tensors
//!   hover around 7.3 bits/byte (the exponent byte is predictable) and
//!   compress below 0.95. These only ever raise warnings.
//! * name heuristics: the overt `__stash` namespace and bare
//!   32-hex-digit keys are treated as hard evidence.
//! * an architecture manifest, when the defender has one: unknown keys,
//!   shape or dtype swaps, and total-size anomalies are hard evidence.
//!
//! Without a manifest, a careful attacker (plausible names, F32 dtype)
//! can only be caught by the statistical layer, so the strongest verdict
//! such a scan can reach is `Suspicious`. That gap is the point: it is
//! measured, not papered over.

use std::io::Write;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{ArchitectureManifest, Checkpoint};

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("entropy of an empty byte string is undefined")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FindingKind {
    UnknownKey,
    ShapeMismatch,
    DTypeMismatch,
    SizeAnomaly,
    HighEntropy,
    Incompressible,
    SuspiciousName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Severity {
    Info,
    Warn,
    Alert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Verdict {
    Clean,
    Suspicious,
    Flagged,
}

/// One piece of evidence against an entry (or `<global>` for totals).
#[derive(Debug, Clone, Serialize)]
pub struct ScanFinding {
    pub key: String,
    pub kind: FindingKind,
    pub severity: Severity,
    pub details: String,
    /// Calibrated confidence in [0, 1]: 1.0 for hard evidence, the
    /// threshold-excess fraction for statistical warnings.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanThresholds {
    /// Warn when byte entropy exceeds this many bits per byte.
    pub entropy_warn_bits: f64,
    /// Warn when DEFLATE(compressed)/raw exceeds this ratio.
    pub incompressible_ratio: f64,
    /// Entries below this size skip the statistical tests.
    pub min_statistical_bytes: usize,
    /// Alert when the total exceeds the expected size by more than this
    /// fraction.
    pub size_tolerance: f64,
}

impl Default for ScanThresholds {
    fn default() -> Self {
        Self {
            entropy_warn_bits: 7.5,
            incompressible_ratio: 0.95,
            min_statistical_bytes: 4096,
            size_tolerance: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScanTotals {
    /// Exact serialized size of the scanned checkpoint.
    pub declared_bytes: u64,
    /// Expected size per the manifest, when one was provided.
    pub expected_bytes: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanReport {
    pub findings: Vec<ScanFinding>,
    pub totals: ScanTotals,
    pub verdict: Verdict,
}

impl ScanReport {
    pub fn alerts(&self) -> impl Iterator<Item = &ScanFinding> {
        self.findings
            .iter()
            .filter(|f| f.severity == Severity::Alert)
    }

    pub fn warns(&self) -> impl Iterator<Item = &ScanFinding> {
        self.findings
            .iter()
            .filter(|f| f.severity == Severity::Warn)
    }

    /// Conventional process exit code: 0 clean, 1 suspicious, 2 flagged.
    pub fn exit_code(&self) -> i32 {
        match self.verdict {
            Verdict::Clean => 0,
            Verdict::Suspicious => 1,
            Verdict::Flagged => 2,
        }
    }
}

/// Shannon entropy of the byte histogram, in bits per byte.
pub fn entropy_bits_per_byte(bytes: &[u8]) -> Result<f64, ScanError> {
    if bytes.is_empty() {
        return Err(ScanError::EmptyInput);
    }
    let mut histogram = [0u64; 256];
    for &b in bytes {
        histogram[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    let mut entropy = 0.0;
    for &count in &histogram {
        if count > 0 {
            let p = count as f64 / n;
            entropy -= p * p.log2();
        }
    }
    Ok(entropy)
}

fn deflate_ratio(bytes: &[u8]) -> f64 {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).expect("in-memory deflate");
    let compressed = enc.finish().expect("in-memory deflate");
    compressed.len() as f64 / bytes.len() as f64
}

/// A bare 32-hex-digit key: the shape hash-named payload entries take.
fn is_hash_shaped(key: &str) -> bool {
    key.len() == 32 && key.chars().all(|c| c.is_ascii_hexdigit())
}

/// Audits a checkpoint. Total and deterministic: never fails, emits
/// per-entry findings in checkpoint order followed by global findings.
pub fn scan(
    c: &Checkpoint,
    manifest: Option<&ArchitectureManifest>,
    thresholds: &ScanThresholds,
) -> ScanReport {
    let mut findings = Vec::new();

    for entry in c.entries() {
        let key = entry.key();
        if let Some(m) = manifest {
            match m.lookup(key) {
                None => findings.push(ScanFinding {
                    key: key.to_owned(),
                    kind: FindingKind::UnknownKey,
                    severity: Severity::Alert,
                    details: "entry absent from the architecture manifest".into(),
                    score: 1.0,
                }),
                Some(expected) => {
                    if expected.shape != entry.shape() {
                        findings.push(ScanFinding {
                            key: key.to_owned(),
                            kind: FindingKind::ShapeMismatch,
                            severity: Severity::Alert,
                            details: format!(
                                "shape {:?} differs from expected {:?}",
                                entry.shape(),
                                expected.shape
                            ),
                            score: 1.0,
                        });
                    }
                    if expected.dtype != entry.dtype() {
                        findings.push(ScanFinding {
                            key: key.to_owned(),
                            kind: FindingKind::DTypeMismatch,
                            severity: Severity::Alert,
                            details: format!(
                                "dtype {:?} differs from expected {:?}",
                                entry.dtype(),
                                expected.dtype
                            ),
                            score: 1.0,
                        });
                    }
                }
            }
        }

        if key.starts_with("__stash") || is_hash_shaped(key) {
            findings.push(ScanFinding {
                key: key.to_owned(),
                kind: FindingKind::SuspiciousName,
                severity: Severity::Alert,
                details: "key matches a known payload naming pattern".into(),
                score: 1.0,
            });
        }

        let payload = entry.payload();
        if payload.len() >= thresholds.min_statistical_bytes {
            let entropy = entropy_bits_per_byte(payload).expect("non-empty payload");
            if entropy > thresholds.entropy_warn_bits {
                findings.push(ScanFinding {
                    key: key.to_owned(),
                    kind: FindingKind::HighEntropy,
                    severity: Severity::Warn,
                    details: format!(
                        "byte entropy {entropy:.3} bits/byte exceeds {:.3}",
                        thresholds.entropy_warn_bits
                    ),
                    score: ((entropy - thresholds.entropy_warn_bits) / 0.5).clamp(0.0, 1.0),
                });
            }
            let ratio = deflate_ratio(payload);
            if ratio > thresholds.incompressible_ratio {
                findings.push(ScanFinding {
                    key: key.to_owned(),
                    kind: FindingKind::Incompressible,
                    severity: Severity::Warn,
                    details: format!(
                        "DEFLATE ratio {ratio:.4} exceeds {:.4}",
                        thresholds.incompressible_ratio
                    ),
                    score: ((ratio - thresholds.incompressible_ratio) / 0.05).clamp(0.0, 1.0),
                });
            }
        }
    }

    let declared_bytes = c.total_size();
    let expected_bytes = manifest.map(|m| m.expected_total_bytes);
    if let Some(expected) = expected_bytes {
        let limit = expected as f64 * (1.0 + thresholds.size_tolerance);
        if declared_bytes as f64 > limit {
            findings.push(ScanFinding {
                key: "<global>".into(),
                kind: FindingKind::SizeAnomaly,
                severity: Severity::Alert,
                details: format!(
                    "total {declared_bytes} bytes exceeds expected {expected} by more than {:.1}%",
                    thresholds.size_tolerance * 100.0
                ),
                score: 1.0,
            });
        } else if declared_bytes != expected {
            findings.push(ScanFinding {
                key: "<global>".into(),
                kind: FindingKind::SizeAnomaly,
                severity: Severity::Info,
                details: format!(
                    "total {declared_bytes} bytes differs from expected {expected}, within tolerance"
                ),
                score: 0.0,
            });
        }
    }

    let worst = findings
        .iter()
        .map(|f| f.severity)
        .max()
        .unwrap_or(Severity::Info);
    let verdict = match worst {
        Severity::Alert => Verdict::Flagged,
        Severity::Warn => Verdict::Suspicious,
        Severity::Info => Verdict::Clean,
    };
    ScanReport {
        findings,
        totals: ScanTotals {
            declared_bytes,
            expected_bytes,
        },
        verdict,
    }
}
