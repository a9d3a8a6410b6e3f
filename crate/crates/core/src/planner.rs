//! Export-budget arithmetic: how many images fit in a size budget under
//! each exfiltration strategy, and which strategy wins.
//!
//! A strategy is a fixed cost (decoder and/or utility model that must ship
//! inside the export) plus a marginal cost per stolen image. Everything is
//! exact integer byte arithmetic; the reference cost table keeps sizes in
//! hundredths of a megabyte so its cells reproduce without rounding drift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("strategy {0:?} must have per_image_bytes >= 1")]
    ZeroPerImage(String),
    #[error("export size overflows u64 for strategy {0:?}")]
    Overflow(String),
    #[error("strategy list must be non-empty")]
    NoStrategies,
}

/// Cost model of one exfiltration strategy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyCosts {
    pub name: String,
    /// Bytes that ship regardless of image count (decoder + utility model,
    /// or a standalone utility model).
    pub fixed_bytes: u64,
    /// Mean code size per stolen volume.
    pub per_image_bytes: u64,
    /// Whether the decoder itself must ride along in the export.
    pub decoder_required: bool,
}

impl StrategyCosts {
    fn validate(&self) -> Result<(), PlanError> {
        if self.per_image_bytes == 0 {
            return Err(PlanError::ZeroPerImage(self.name.clone()));
        }
        Ok(())
    }
}

/// A concrete export decision: strategy, image count, and the exact size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportPlan {
    pub strategy: String,
    pub n_images: u64,
    pub total_bytes: u64,
    pub budget_bytes: u64,
}

/// Image count achievable within a budget, with an infeasibility marker
/// for budgets too small to even ship the fixed components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ImageCapacity {
    pub images: u64,
    pub feasible: bool,
}

/// Exact export size for `n` images: fixed + n * per_image.
pub fn export_size(s: &StrategyCosts, n: u64) -> Result<u64, PlanError> {
    s.validate()?;
    n.checked_mul(s.per_image_bytes)
        .and_then(|v| v.checked_add(s.fixed_bytes))
        .ok_or_else(|| PlanError::Overflow(s.name.clone()))
}

/// Largest image count whose export fits in `budget`.
pub fn max_images(s: &StrategyCosts, budget: u64) -> Result<ImageCapacity, PlanError> {
    s.validate()?;
    if budget < s.fixed_bytes {
        return Ok(ImageCapacity {
            images: 0,
            feasible: false,
        });
    }
    Ok(ImageCapacity {
        images: (budget - s.fixed_bytes) / s.per_image_bytes,
        feasible: true,
    })
}

/// Picks the strategy that steals the most images within the budget.
/// Ties break toward the smaller export, then list order. `None` when no
/// strategy fits its fixed cost into the budget.
pub fn best_strategy(
    costs: &[StrategyCosts],
    budget: u64,
) -> Result<Option<ExportPlan>, PlanError> {
    if costs.is_empty() {
        return Err(PlanError::NoStrategies);
    }
    let mut best: Option<ExportPlan> = None;
    for s in costs {
        let capacity = max_images(s, budget)?;
        if !capacity.feasible {
            continue;
        }
        let total_bytes = export_size(s, capacity.images)?;
        let candidate = ExportPlan {
            strategy: s.name.clone(),
            n_images: capacity.images,
            total_bytes,
            budget_bytes: budget,
        };
        let wins = match &best {
            None => true,
            Some(b) => {
                candidate.n_images > b.n_images
                    || (candidate.n_images == b.n_images && candidate.total_bytes < b.total_bytes)
            }
        };
        if wins {
            best = Some(candidate);
        }
    }
    Ok(best)
}

// Reference component sizes, in hundredths of a megabyte (cMB) so the
// published cost table reproduces with pure integer arithmetic.
const CMB: u64 = 100;
/// Compression decoder.
pub const DECODER_CMB: u64 = 598 * CMB;
/// Utility branch riding on the encoder.
pub const UTILITY_BRANCH_CMB: u64 = 3 * CMB;
/// Standalone public utility model, CT dataset.
pub const PUBLIC_UTILITY_CT_CMB: u64 = 66 * CMB;
/// Standalone public utility model, MR dataset.
pub const PUBLIC_UTILITY_MR_CMB: u64 = 30 * CMB;
/// Mean per-image code sizes (cMB): CT high/low sampling and ZIP, MR high
/// sampling and ZIP.
pub const PER_IMAGE_CT_HIGH_CMB: u64 = 2199;
pub const PER_IMAGE_CT_LOW_CMB: u64 = 227;
pub const PER_IMAGE_CT_ZIP_CMB: u64 = 134 * CMB;
pub const PER_IMAGE_MR_HIGH_CMB: u64 = 91;
pub const PER_IMAGE_MR_ZIP_CMB: u64 = 230;

const BYTES_PER_CMB: u64 = 10_000;

/// One row of the reference cost table: disk sizes in whole megabytes for
/// stealing 100 images under each strategy. `None` marks a strategy not
/// evaluated for that dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostTableRow {
    pub dataset: String,
    pub decoder_mb: u64,
    pub decoder_plus_utility_mb: u64,
    pub high_100_mb: Option<u64>,
    pub low_100_mb: Option<u64>,
    pub zip_100_mb: Option<u64>,
}

fn row(
    dataset: &str,
    public_utility_cmb: u64,
    high_cmb: Option<u64>,
    low_cmb: Option<u64>,
    zip_cmb: Option<u64>,
) -> CostTableRow {
    let base = DECODER_CMB + UTILITY_BRANCH_CMB;
    let with_100 = |per: Option<u64>, fixed: u64| per.map(|p| (fixed + 100 * p) / CMB);
    CostTableRow {
        dataset: dataset.to_owned(),
        decoder_mb: DECODER_CMB / CMB,
        decoder_plus_utility_mb: base / CMB,
        high_100_mb: with_100(high_cmb, base),
        low_100_mb: with_100(low_cmb, base),
        zip_100_mb: with_100(zip_cmb, public_utility_cmb),
    }
}

/// The built-in 100-image cost table for the CT and MR reference
/// datasets, exact to the megabyte.
pub fn cost_table() -> Vec<CostTableRow> {
    vec![
        row(
            "LiTS",
            PUBLIC_UTILITY_CT_CMB,
            Some(PER_IMAGE_CT_HIGH_CMB),
            Some(PER_IMAGE_CT_LOW_CMB),
            Some(PER_IMAGE_CT_ZIP_CMB),
        ),
        row(
            "BraTS",
            PUBLIC_UTILITY_MR_CMB,
            Some(PER_IMAGE_MR_HIGH_CMB),
            None,
            Some(PER_IMAGE_MR_ZIP_CMB),
        ),
    ]
}

fn strategy(name: &str, fixed_cmb: u64, per_image_cmb: u64, decoder_required: bool) -> StrategyCosts {
    StrategyCosts {
        name: name.to_owned(),
        fixed_bytes: fixed_cmb * BYTES_PER_CMB,
        per_image_bytes: per_image_cmb * BYTES_PER_CMB,
        decoder_required,
    }
}

/// Reference strategies for the CT dataset, in bytes (1 MB = 10^6).
pub fn ct_reference_costs() -> Vec<StrategyCosts> {
    let base = DECODER_CMB + UTILITY_BRANCH_CMB;
    vec![
        strategy("ct_lossy_high", base, PER_IMAGE_CT_HIGH_CMB, true),
        strategy("ct_lossy_low", base, PER_IMAGE_CT_LOW_CMB, true),
        strategy("ct_zip", PUBLIC_UTILITY_CT_CMB, PER_IMAGE_CT_ZIP_CMB, false),
    ]
}

/// Reference strategies for the MR dataset, in bytes (1 MB = 10^6).
pub fn mr_reference_costs() -> Vec<StrategyCosts> {
    let base = DECODER_CMB + UTILITY_BRANCH_CMB;
    vec![
        strategy("mr_lossy_high", base, PER_IMAGE_MR_HIGH_CMB, true),
        strategy("mr_zip", PUBLIC_UTILITY_MR_CMB, PER_IMAGE_MR_ZIP_CMB, false),
    ]
}

/// Federated variant: the decoder is pre-shared, only the 3 MB utility
/// branch ships per export, low-sampling code sizes.
pub fn federated_low_costs() -> StrategyCosts {
    strategy("fl_low_preshared_decoder", UTILITY_BRANCH_CMB, PER_IMAGE_CT_LOW_CMB, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: u64 = 1_000_000;

    #[test]
    fn ct_reference_export_sizes() {
        let costs = ct_reference_costs();
        // 601 MB fixed + 100 * 21.99 MB = 2800 MB
        assert_eq!(export_size(&costs[0], 100).unwrap(), 2800 * MB);
        // 601 MB fixed + 100 * 2.27 MB = 828 MB
        assert_eq!(export_size(&costs[1], 100).unwrap(), 828 * MB);
        // 66 MB fixed + 100 * 134 MB = 13466 MB
        assert_eq!(export_size(&costs[2], 100).unwrap(), 13466 * MB);
        assert_eq!(export_size(&costs[0], 0).unwrap(), 601 * MB);
    }

    #[test]
    fn cost_table_rows_are_exact() {
        let table = cost_table();
        let ct = &table[0];
        assert_eq!(ct.decoder_mb, 598);
        assert_eq!(ct.decoder_plus_utility_mb, 601);
        assert_eq!(ct.high_100_mb, Some(2800));
        assert_eq!(ct.low_100_mb, Some(828));
        assert_eq!(ct.zip_100_mb, Some(13466));
        let mr = &table[1];
        assert_eq!(mr.decoder_mb, 598);
        assert_eq!(mr.decoder_plus_utility_mb, 601);
        assert_eq!(mr.high_100_mb, Some(692));
        assert_eq!(mr.low_100_mb, None);
        assert_eq!(mr.zip_100_mb, Some(260));
    }

    #[test]
    fn max_images_at_exact_fixed_budget_is_zero() {
        let s = &ct_reference_costs()[1];
        let c = max_images(s, s.fixed_bytes).unwrap();
        assert_eq!(c.images, 0);
        assert!(c.feasible);
    }

    #[test]
    fn below_fixed_budget_is_infeasible() {
        let s = &ct_reference_costs()[0];
        let c = max_images(s, s.fixed_bytes - 1).unwrap();
        assert_eq!(c.images, 0);
        assert!(!c.feasible);
    }

    #[test]
    fn federated_scenario_fits_42_images_in_100_mb() {
        // Pre-shared decoder: 3 MB fixed, 2.27 MB per image, 100 MB budget.
        let c = max_images(&federated_low_costs(), 100 * MB).unwrap();
        assert!(c.feasible);
        assert_eq!(c.images, 42);
    }

    #[test]
    fn best_strategy_prefers_low_sampling_at_3000_mb() {
        let plan = best_strategy(&ct_reference_costs(), 3000 * MB)
            .unwrap()
            .unwrap();
        assert_eq!(plan.strategy, "ct_lossy_low");
        assert_eq!(plan.n_images, (3000 - 601) * MB / (227 * BYTES_PER_CMB));
        assert!(plan.total_bytes <= plan.budget_bytes);
    }

    #[test]
    fn mr_crossover_between_zip_and_lossy_high() {
        // ZIP: 30 MB fixed + 2.30 MB per image; High: 601 MB + 0.91 MB.
        // Counts tie first where floor((B-30)/2.3) == floor((B-601)/0.91);
        // equality of the real-valued counts is at B = 974.87 MB. Probe
        // either side of it.
        let costs = mr_reference_costs();
        let below = best_strategy(&costs, 900 * MB).unwrap().unwrap();
        assert_eq!(below.strategy, "mr_zip");
        let above = best_strategy(&costs, 1100 * MB).unwrap().unwrap();
        assert_eq!(above.strategy, "mr_lossy_high");
    }

    #[test]
    fn single_strategy_list_returns_it() {
        let only = vec![ct_reference_costs()[0].clone()];
        let plan = best_strategy(&only, 10_000 * MB).unwrap().unwrap();
        assert_eq!(plan.strategy, "ct_lossy_high");
    }

    #[test]
    fn infeasible_everything_returns_none() {
        let plan = best_strategy(&ct_reference_costs(), MB).unwrap();
        assert!(plan.is_none());
    }

    #[test]
    fn empty_list_is_an_error() {
        assert!(matches!(best_strategy(&[], 100), Err(PlanError::NoStrategies)));
    }

    #[test]
    fn zero_per_image_is_rejected() {
        let s = StrategyCosts {
            name: "bad".into(),
            fixed_bytes: 0,
            per_image_bytes: 0,
            decoder_required: false,
        };
        assert!(matches!(export_size(&s, 1), Err(PlanError::ZeroPerImage(_))));
    }

    #[test]
    fn overflow_is_reported() {
        let s = StrategyCosts {
            name: "huge".into(),
            fixed_bytes: u64::MAX - 1,
            per_image_bytes: 2,
            decoder_required: false,
        };
        assert!(matches!(export_size(&s, 1), Err(PlanError::Overflow(_))));
    }

    #[test]
    fn galois_property_on_reference_strategies() {
        for s in ct_reference_costs().iter().chain(mr_reference_costs().iter()) {
            for budget in [s.fixed_bytes, s.fixed_bytes + 1, 700 * MB, 829 * MB, 5000 * MB] {
                let c = max_images(s, budget).unwrap();
                if !c.feasible {
                    continue;
                }
                assert!(export_size(s, c.images).unwrap() <= budget);
                assert!(export_size(s, c.images + 1).unwrap() > budget);
            }
        }
    }
}
