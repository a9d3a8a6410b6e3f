//! Round-based exfiltration simulator for centralized federated
//! aggregation.
//!
//! Each node holds a FIFO queue of image-code byte lengths and smuggles
//! up to a fixed hidden-payload budget inside every model update it sends
//! to the (attacker-controlled) server. The default chunking is
//! byte-level, so a code may straddle rounds; a whole-image mode exists
//! for comparison. Optionally every sent update is materialized as a real
//! carrier checkpoint (synthetic base weights plus embedded chunk) and
//! run through the defense scanner; the verdicts are recorded without
//! altering the attack.
//!
//! Everything is a pure function of the config: same seed, byte-identical
//! report.

use std::num::NonZeroU64;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::ArchitectureManifest;
use crate::scanner::{self, ScanThresholds, Verdict};
use crate::stash::{self, DisguiseMode, DEFAULT_CHUNK_SIZE};
use crate::synth::synthetic_checkpoint;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

/// Where the per-node image code sizes come from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum CodeSizes {
    /// One explicit byte-length list per node.
    Explicit(Vec<Vec<u64>>),
    /// Log-normal sizes drawn deterministically from the config seed:
    /// `exp(mu + sigma * N(0,1))` bytes, rounded, floored at 1.
    Lognormal {
        mu: f64,
        sigma: f64,
        images_per_node: u32,
    },
}

/// Naming scheme for the in-loop carrier checkpoints.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum SimDisguise {
    #[default]
    Dedicated,
    Mimic {
        secret: String,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub n_nodes: u32,
    pub rounds: u64,
    /// Hidden-payload capacity per node per round.
    pub per_round_budget_bytes: u64,
    /// Size of the legitimate weights in each update; only materialized
    /// when the in-loop scanner is enabled.
    pub base_model_bytes: u64,
    pub code_sizes: CodeSizes,
    /// Pack whole images per round instead of splitting across rounds.
    #[serde(default)]
    pub whole_image_chunking: bool,
    /// Run the defense scanner on every sent update (measurement only).
    #[serde(default)]
    pub scanner_enabled: bool,
    /// Give the in-loop scanner the node's architecture manifest.
    #[serde(default = "default_true")]
    pub scan_with_manifest: bool,
    #[serde(default)]
    pub scanner_thresholds: Option<ScanThresholds>,
    #[serde(default)]
    pub disguise: SimDisguise,
}

/// One node's activity in one round. `flagged` is `None` when the in-loop
/// scanner is disabled.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RoundEvent {
    pub round: u64,
    pub node: u32,
    pub bytes_smuggled: u64,
    pub images_completed: u32,
    pub flagged: Option<bool>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct NodeSummary {
    pub node: u32,
    pub images_total: u32,
    pub total_code_bytes: u64,
    pub cumulative_bytes: u64,
    pub images_completed: u32,
    /// Round in which the node's last image completed, if it did.
    pub rounds_to_complete: Option<u64>,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct SimTotals {
    pub bytes_smuggled: u64,
    pub images_completed: u64,
    pub flagged_events: u64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SimReport {
    pub events: Vec<RoundEvent>,
    pub nodes: Vec<NodeSummary>,
    pub totals: SimTotals,
}

/// Closed form the simulator must agree with for a single byte-chunked
/// stream: ceil(total / budget), with 0 bytes taking 0 rounds.
pub fn rounds_to_exfiltrate(total_bytes: u64, per_round_budget: NonZeroU64) -> u64 {
    total_bytes.div_ceil(per_round_budget.get())
}

fn validate(cfg: &SimConfig) -> Result<(), SimError> {
    let bad = |m: String| Err(SimError::InvalidConfig(m));
    if cfg.n_nodes == 0 {
        return bad("n_nodes must be >= 1".into());
    }
    if cfg.rounds == 0 {
        return bad("rounds must be >= 1".into());
    }
    if cfg.per_round_budget_bytes == 0 {
        return bad("per_round_budget_bytes must be >= 1".into());
    }
    match &cfg.code_sizes {
        CodeSizes::Explicit(lists) => {
            if lists.len() != cfg.n_nodes as usize {
                return bad(format!(
                    "explicit code_sizes has {} lists for {} nodes",
                    lists.len(),
                    cfg.n_nodes
                ));
            }
            for (i, list) in lists.iter().enumerate() {
                if list.is_empty() {
                    return bad(format!("node {i} has an empty code size list"));
                }
                if list.iter().any(|&s| s == 0) {
                    return bad(format!("node {i} has a zero-byte image code"));
                }
            }
        }
        CodeSizes::Lognormal {
            mu,
            sigma,
            images_per_node,
        } => {
            if *images_per_node == 0 {
                return bad("images_per_node must be >= 1".into());
            }
            if !mu.is_finite() || !sigma.is_finite() || *sigma < 0.0 {
                return bad(format!("lognormal parameters invalid: mu {mu}, sigma {sigma}"));
            }
        }
    }
    if let SimDisguise::Mimic { secret } = &cfg.disguise {
        if secret.is_empty() {
            return bad("mimic disguise needs a non-empty secret".into());
        }
    }
    Ok(())
}

fn materialize_sizes(cfg: &SimConfig) -> Vec<Vec<u64>> {
    match &cfg.code_sizes {
        CodeSizes::Explicit(lists) => lists.clone(),
        CodeSizes::Lognormal {
            mu,
            sigma,
            images_per_node,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let dist = LogNormal::new(*mu, *sigma).expect("validated parameters");
            (0..cfg.n_nodes)
                .map(|_| {
                    (0..*images_per_node)
                        .map(|_| (dist.sample(&mut rng).round() as u64).clamp(1, 1 << 40))
                        .collect()
                })
                .collect()
        }
    }
}

fn derived_seed(seed: u64, round: u64, node: u64) -> u64 {
    let mut x = seed
        ^ round.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ node.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^= x >> 33;
    x
}

/// In-loop defense measurement: embed this round's bytes into the node's
/// carrier and scan it.
struct InLoopScanner {
    carriers: Vec<crate::container::Checkpoint>,
    manifests: Option<Vec<ArchitectureManifest>>,
    thresholds: ScanThresholds,
    disguise: SimDisguise,
    seed: u64,
}

impl InLoopScanner {
    fn build(cfg: &SimConfig) -> Self {
        let carriers: Vec<_> = (0..cfg.n_nodes)
            .map(|node| {
                synthetic_checkpoint(derived_seed(cfg.seed, 0, node as u64), cfg.base_model_bytes)
            })
            .collect();
        let manifests = cfg
            .scan_with_manifest
            .then(|| carriers.iter().map(ArchitectureManifest::describing).collect());
        Self {
            carriers,
            manifests,
            thresholds: cfg.scanner_thresholds.unwrap_or_default(),
            disguise: cfg.disguise.clone(),
            seed: cfg.seed,
        }
    }

    fn inspect(&self, round: u64, node: u32, bytes: u64) -> bool {
        // The smuggled bytes stand in for compressed image codes, so they
        // are modeled as uniform random, derived from (seed, round, node).
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(self.seed, round, node as u64 + 1));
        let mut payload = vec![0u8; bytes as usize];
        rand::RngCore::fill_bytes(&mut rng, &mut payload);
        let mode = match &self.disguise {
            SimDisguise::Dedicated => DisguiseMode::DedicatedKeys,
            SimDisguise::Mimic { secret } => DisguiseMode::MimicKeys {
                secret: secret.clone(),
            },
        };
        let out = stash::embed(
            &self.carriers[node as usize],
            &payload,
            &mode,
            DEFAULT_CHUNK_SIZE,
            "",
        )
        .expect("synthetic carrier keys never collide with stash keys");
        let report = scanner::scan(
            &out.checkpoint,
            self.manifests.as_ref().map(|m| &m[node as usize]),
            &self.thresholds,
        );
        report.verdict != Verdict::Clean
    }
}

struct NodeState {
    sizes: Vec<u64>,
    next_image: usize,
    sent_in_current: u64,
    cumulative: u64,
    completed: u32,
    last_completion_round: Option<u64>,
}

impl NodeState {
    fn done(&self) -> bool {
        self.next_image == self.sizes.len()
    }
}

/// Runs the configured exfiltration and returns the full event log.
pub fn run_simulation(cfg: &SimConfig) -> Result<SimReport, SimError> {
    validate(cfg)?;
    let sizes = materialize_sizes(cfg);
    let in_loop = cfg.scanner_enabled.then(|| InLoopScanner::build(cfg));

    let mut nodes: Vec<NodeState> = sizes
        .into_iter()
        .map(|sizes| NodeState {
            sizes,
            next_image: 0,
            sent_in_current: 0,
            cumulative: 0,
            completed: 0,
            last_completion_round: None,
        })
        .collect();

    let mut events = Vec::new();
    for round in 1..=cfg.rounds {
        if nodes.iter().all(NodeState::done) {
            break;
        }
        for (node_id, node) in nodes.iter_mut().enumerate() {
            let mut budget_left = cfg.per_round_budget_bytes;
            let mut sent = 0u64;
            let mut completed_now = 0u32;
            while budget_left > 0 && !node.done() {
                let size = node.sizes[node.next_image];
                let remaining = size - node.sent_in_current;
                if cfg.whole_image_chunking {
                    // Strict FIFO: a code that does not fit whole blocks
                    // the queue until a later round.
                    if size > budget_left {
                        break;
                    }
                    sent += size;
                    budget_left -= size;
                    node.next_image += 1;
                    completed_now += 1;
                } else {
                    let take = remaining.min(budget_left);
                    sent += take;
                    budget_left -= take;
                    node.sent_in_current += take;
                    if node.sent_in_current == size {
                        node.sent_in_current = 0;
                        node.next_image += 1;
                        completed_now += 1;
                    }
                }
            }
            if sent == 0 {
                continue;
            }
            node.cumulative += sent;
            node.completed += completed_now;
            if completed_now > 0 && node.done() {
                node.last_completion_round = Some(round);
            }
            let flagged = in_loop
                .as_ref()
                .map(|s| s.inspect(round, node_id as u32, sent));
            events.push(RoundEvent {
                round,
                node: node_id as u32,
                bytes_smuggled: sent,
                images_completed: completed_now,
                flagged,
            });
        }
    }

    let summaries: Vec<NodeSummary> = nodes
        .iter()
        .enumerate()
        .map(|(node, n)| NodeSummary {
            node: node as u32,
            images_total: n.sizes.len() as u32,
            total_code_bytes: n.sizes.iter().sum(),
            cumulative_bytes: n.cumulative,
            images_completed: n.completed,
            rounds_to_complete: n.last_completion_round,
        })
        .collect();
    let totals = SimTotals {
        bytes_smuggled: summaries.iter().map(|n| n.cumulative_bytes).sum(),
        images_completed: summaries.iter().map(|n| u64::from(n.images_completed)).sum(),
        flagged_events: events
            .iter()
            .filter(|e| e.flagged == Some(true))
            .count() as u64,
    };
    Ok(SimReport {
        events,
        nodes: summaries,
        totals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_node(sizes: Vec<u64>, budget: u64, rounds: u64) -> SimConfig {
        SimConfig {
            seed: 1,
            n_nodes: 1,
            rounds,
            per_round_budget_bytes: budget,
            base_model_bytes: 1024,
            code_sizes: CodeSizes::Explicit(vec![sizes]),
            whole_image_chunking: false,
            scanner_enabled: false,
            scan_with_manifest: true,
            scanner_thresholds: None,
            disguise: SimDisguise::Dedicated,
        }
    }

    #[test]
    fn ten_bytes_at_budget_four_takes_three_rounds() {
        let report = run_simulation(&single_node(vec![10], 4, 10)).unwrap();
        assert_eq!(report.nodes[0].rounds_to_complete, Some(3));
        let bytes: Vec<u64> = report.events.iter().map(|e| e.bytes_smuggled).collect();
        assert_eq!(bytes, vec![4, 4, 2]);
        assert_eq!(report.events[2].images_completed, 1);
    }

    #[test]
    fn ample_budget_finishes_in_round_one() {
        let report = run_simulation(&single_node(vec![10, 20, 30], 1000, 5)).unwrap();
        assert_eq!(report.nodes[0].rounds_to_complete, Some(1));
        assert_eq!(report.nodes[0].images_completed, 3);
        assert_eq!(report.events.len(), 1);
    }

    #[test]
    fn fifty_low_sampled_ct_images_take_six_20mb_rounds() {
        // 50 images x 2.27 MB = 113.5 MB at 20 MB per round.
        let sizes = vec![2_270_000u64; 50];
        let report = run_simulation(&single_node(sizes, 20_000_000, 100)).unwrap();
        assert_eq!(report.nodes[0].rounds_to_complete, Some(6));
        assert_eq!(report.nodes[0].images_completed, 50);
    }

    #[test]
    fn closed_form_matches_arithmetic() {
        let b = |v: u64| NonZeroU64::new(v).unwrap();
        assert_eq!(rounds_to_exfiltrate(0, b(5)), 0);
        assert_eq!(rounds_to_exfiltrate(100, b(100)), 1);
        assert_eq!(rounds_to_exfiltrate(101, b(100)), 2);
    }

    #[test]
    fn simulation_agrees_with_closed_form_on_random_single_nodes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let n_images = rng.random_range(1..=8);
            let sizes: Vec<u64> = (0..n_images).map(|_| rng.random_range(1..=2000)).collect();
            let budget = rng.random_range(1..=500u64);
            let total: u64 = sizes.iter().sum();
            let expected = rounds_to_exfiltrate(total, NonZeroU64::new(budget).unwrap());
            let report = run_simulation(&single_node(sizes, budget, expected + 5)).unwrap();
            assert_eq!(report.nodes[0].rounds_to_complete, Some(expected));
        }
    }

    #[test]
    fn report_serialization_is_byte_identical_across_runs() {
        let cfg = SimConfig {
            seed: 7,
            n_nodes: 3,
            rounds: 20,
            per_round_budget_bytes: 5_000,
            base_model_bytes: 16 * 1024,
            code_sizes: CodeSizes::Lognormal {
                mu: 8.0,
                sigma: 1.0,
                images_per_node: 5,
            },
            whole_image_chunking: false,
            scanner_enabled: true,
            scan_with_manifest: true,
            scanner_thresholds: None,
            disguise: SimDisguise::Dedicated,
        };
        let a = serde_json::to_string(&run_simulation(&cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&run_simulation(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conservation_holds_per_node() {
        let cfg = SimConfig {
            seed: 3,
            n_nodes: 2,
            rounds: 4,
            per_round_budget_bytes: 100,
            base_model_bytes: 1024,
            code_sizes: CodeSizes::Explicit(vec![vec![50, 600], vec![90]]),
            whole_image_chunking: false,
            scanner_enabled: false,
            scan_with_manifest: true,
            scanner_thresholds: None,
            disguise: SimDisguise::Dedicated,
        };
        let report = run_simulation(&cfg).unwrap();
        for n in &report.nodes {
            let expected = n
                .total_code_bytes
                .min(cfg.rounds * cfg.per_round_budget_bytes);
            assert_eq!(n.cumulative_bytes, expected, "node {}", n.node);
            let from_events: u64 = report
                .events
                .iter()
                .filter(|e| e.node == n.node)
                .map(|e| e.bytes_smuggled)
                .sum();
            assert_eq!(from_events, n.cumulative_bytes);
        }
    }

    #[test]
    fn larger_budgets_never_slow_completion() {
        let sizes = vec![123u64, 4567, 89, 1000];
        let mut last = u64::MAX;
        for budget in [100u64, 500, 1000, 5000, 10000] {
            let report = run_simulation(&single_node(sizes.clone(), budget, 100)).unwrap();
            let rounds = report.nodes[0].rounds_to_complete.unwrap();
            assert!(rounds <= last, "budget {budget}: {rounds} > {last}");
            last = rounds;
        }
    }

    #[test]
    fn whole_image_mode_blocks_on_oversized_heads() {
        let mut cfg = single_node(vec![50, 10], 20, 5);
        cfg.whole_image_chunking = true;
        let report = run_simulation(&cfg).unwrap();
        // The 50-byte head never fits a 20-byte round; strict FIFO means
        // nothing moves at all.
        assert_eq!(report.nodes[0].images_completed, 0);
        assert_eq!(report.nodes[0].rounds_to_complete, None);
        assert!(report.events.is_empty());
    }

    #[test]
    fn whole_image_mode_packs_what_fits() {
        let mut cfg = single_node(vec![8, 8, 8], 20, 5);
        cfg.whole_image_chunking = true;
        let report = run_simulation(&cfg).unwrap();
        assert_eq!(report.events[0].bytes_smuggled, 16);
        assert_eq!(report.events[0].images_completed, 2);
        assert_eq!(report.nodes[0].rounds_to_complete, Some(2));
    }

    #[test]
    fn in_loop_scanner_flags_dedicated_chunks() {
        let mut cfg = single_node(vec![10_000], 6_000, 5);
        cfg.scanner_enabled = true;
        let report = run_simulation(&cfg).unwrap();
        assert!(!report.events.is_empty());
        for e in &report.events {
            assert_eq!(e.flagged, Some(true));
        }
        assert_eq!(report.totals.flagged_events, report.events.len() as u64);
    }

    #[test]
    fn scanner_disabled_leaves_flags_unset() {
        let report = run_simulation(&single_node(vec![100], 50, 5)).unwrap();
        assert!(report.events.iter().all(|e| e.flagged.is_none()));
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut cfg = single_node(vec![10], 4, 10);
        cfg.n_nodes = 2; // explicit list still has one node
        assert!(matches!(
            run_simulation(&cfg),
            Err(SimError::InvalidConfig(_))
        ));
        let mut cfg = single_node(vec![], 4, 10);
        cfg.code_sizes = CodeSizes::Explicit(vec![vec![]]);
        assert!(run_simulation(&cfg).is_err());
        let mut cfg = single_node(vec![10], 0, 10);
        cfg.per_round_budget_bytes = 0;
        assert!(run_simulation(&cfg).is_err());
    }

    #[test]
    fn lognormal_sampling_is_deterministic_and_positive() {
        let cfg = SimConfig {
            seed: 99,
            n_nodes: 2,
            rounds: 1,
            per_round_budget_bytes: 1,
            base_model_bytes: 0,
            code_sizes: CodeSizes::Lognormal {
                mu: 10.0,
                sigma: 0.8,
                images_per_node: 20,
            },
            whole_image_chunking: false,
            scanner_enabled: false,
            scan_with_manifest: true,
            scanner_thresholds: None,
            disguise: SimDisguise::Dedicated,
        };
        let a = materialize_sizes(&cfg);
        let b = materialize_sizes(&cfg);
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|&s| s >= 1));
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].len(), 20);
    }
}
