//! Attack- and defense-side toolkit for smuggling byte payloads through
//! neural-network weight containers.
//!
//! The attacker-side pieces turn volumetric images into compact codes
//! ([`codec`]), stash arbitrary bytes inside checkpoint files as extra
//! tensor entries ([`stash`]), plan how many images fit in an export
//! budget ([`planner`]) and replay the whole scheme over federated
//! aggregation rounds ([`flsim`]). The defender side audits exported
//! checkpoints for exactly those payloads ([`scanner`]). [`metrics`]
//! quantifies what the lossy path costs in fidelity.

pub mod codec;
pub mod container;
pub mod flsim;
pub mod metrics;
pub mod npz;
pub mod planner;
pub mod scanner;
pub mod stash;
pub mod synth;
pub mod tiling;
pub mod volume;
pub mod ziparc;

pub use codec::{CodecError, QualityParam, SliceCode, VolumeCode};
pub use container::{
    ArchitectureManifest, Checkpoint, ContainerError, ContainerFormat, DType, TensorEntry,
};
pub use metrics::{MaskVolume, MetricError, MetricReport};
pub use planner::{ExportPlan, PlanError, StrategyCosts};
pub use scanner::{ScanFinding, ScanReport, ScanThresholds, Severity, Verdict};
pub use stash::{DisguiseMode, EmbedError, PayloadManifest};
pub use tiling::{SliceStack, TilingError, TilingMode, TilingPlan};
pub use volume::{Volume, VolumeError, VolumeFormat};
