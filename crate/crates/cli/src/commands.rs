//! Subcommand implementations. Each returns the process exit code so
//! `scan` can surface its verdict.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde_json::json;

use weightstash_core::codec::{self, QualityParam, VolumeCode};
use weightstash_core::container::{write_wdc, ArchitectureManifest, Checkpoint};
use weightstash_core::flsim::{self, SimConfig};
use weightstash_core::metrics::{self, MaskVolume, MetricReport};
use weightstash_core::npz;
use weightstash_core::planner::{self, StrategyCosts};
use weightstash_core::scanner::{self, ScanThresholds};
use weightstash_core::stash::{self, DisguiseMode, DEFAULT_CHUNK_SIZE};
use weightstash_core::synth::synthetic_checkpoint;
use weightstash_core::tiling::TilingMode;
use weightstash_core::volume::{generate_phantom, Volume, VolumeFormat};

use crate::UsageError;

#[derive(Clone, Copy, ValueEnum)]
pub enum VolumeFormatArg {
    Rvol,
    Raw,
}

impl From<VolumeFormatArg> for VolumeFormat {
    fn from(v: VolumeFormatArg) -> Self {
        match v {
            VolumeFormatArg::Rvol => VolumeFormat::Rvol,
            VolumeFormatArg::Raw => VolumeFormat::RawWithSidecar,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Low,
    High,
    Pad,
}

impl From<ModeArg> for TilingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Low => TilingMode::Low,
            ModeArg::High => TilingMode::High,
            ModeArg::Pad => TilingMode::Pad,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DisguiseArg {
    Dedicated,
    Mimic,
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected D,H,W".into());
    }
    let parse = |p: &str| p.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
}

fn parse_spacing(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected SZ,SY,SX in millimeters".into());
    }
    let parse = |p: &str| p.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
}

fn load_volume(path: &Path, format: VolumeFormatArg) -> Result<Volume> {
    Volume::load(path, format.into()).with_context(|| format!("loading volume {}", path.display()))
}

/// Checkpoint container detection is by magic, not extension.
fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(b"WDC1") {
        Ok(Checkpoint::from_wdc_bytes(&bytes)?)
    } else if bytes.starts_with(b"PK") {
        Ok(npz::read_npz_bytes(&bytes)?)
    } else {
        bail!(
            "{}: not a recognized checkpoint container (WDC or NPZ)",
            path.display()
        );
    }
}

/// Output container is chosen by extension: `.npz` writes NPZ, anything
/// else writes WDC.
fn write_checkpoint(c: &Checkpoint, path: &Path) -> Result<u64> {
    let written = if path.extension().is_some_and(|e| e == "npz") {
        npz::write_npz(c, path)?
    } else {
        write_wdc(c, path)?
    };
    Ok(written)
}

fn emit(json_mode: bool, value: serde_json::Value, human: impl FnOnce()) {
    if json_mode {
        println!("{}", serde_json::to_string_pretty(&value).expect("valid json"));
    } else {
        human();
    }
}

// ---------------------------------------------------------------- phantom

#[derive(Args)]
pub struct PhantomArgs {
    /// RNG seed; equal seeds give bit-identical volumes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Voxel dimensions as depth,height,width.
    #[arg(long, value_parser = parse_dims, default_value = "16,256,256")]
    dims: (usize, usize, usize),
    /// Number of soft ellipsoids blended into the background ramp.
    #[arg(long, default_value_t = 4)]
    ellipsoids: usize,
    /// Output volume path.
    #[arg(long)]
    out: PathBuf,
    /// Optional output path for the binary mask.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = VolumeFormatArg::Rvol)]
    format: VolumeFormatArg,
}

pub fn phantom(args: PhantomArgs, json_mode: bool) -> Result<ExitCode> {
    let (volume, mask) = generate_phantom(args.seed, args.dims, args.ellipsoids)?;
    let bytes = volume.save(&args.out, args.format.into())?;
    let mask_bytes = match &args.mask_out {
        Some(path) => Some(mask.save(path, args.format.into())?),
        None => None,
    };
    emit(
        json_mode,
        json!({
            "volume": args.out,
            "mask": args.mask_out,
            "seed": args.seed,
            "depth": volume.depth(),
            "height": volume.height(),
            "width": volume.width(),
            "intensity_min": volume.intensity_min(),
            "intensity_max": volume.intensity_max(),
            "volume_bytes": bytes,
            "mask_bytes": mask_bytes,
        }),
        || {
            println!(
                "phantom {}x{}x{} (seed {}) -> {}",
                volume.depth(),
                volume.height(),
                volume.width(),
                args.seed,
                args.out.display()
            );
            if let Some(mask) = &args.mask_out {
                println!("mask -> {}", mask.display());
            }
        },
    );
    Ok(ExitCode::SUCCESS)
}

// ----------------------------------------------------------- encode/decode

#[derive(Args)]
pub struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = VolumeFormatArg::Rvol)]
    format: VolumeFormatArg,
    /// Slice handling: low (512 downsampled), high (overlapping patches),
    /// pad (<=256 edge-padded).
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Quality 1..=100; higher keeps more detail and more bytes.
    #[arg(long, default_value_t = 90)]
    quality: u32,
    #[arg(long)]
    out: PathBuf,
}

pub fn encode(args: EncodeArgs, json_mode: bool) -> Result<ExitCode> {
    let volume = load_volume(&args.input, args.format)?;
    let normalized = volume.normalize_minmax();
    let q = QualityParam::new(args.quality)?;
    let (code, stats) = codec::encode_volume(&normalized, args.mode.into(), q)?;
    let written = code.save(&args.out)?;
    let bpp = codec::bpp(code.total_bytes(), volume.voxel_count())?;
    emit(
        json_mode,
        json!({
            "out": args.out,
            "mode": format!("{:?}", TilingMode::from(args.mode)),
            "quality": args.quality,
            "slice_codes": code.codes.len(),
            "total_bytes": code.total_bytes(),
            "bytes_written": written,
            "bpp_comp": bpp,
            "clamped_samples": stats.clamped_samples,
        }),
        || {
            println!(
                "encoded {} -> {} ({} codes, {} bytes, {:.4} bpp)",
                args.input.display(),
                args.out.display(),
                code.codes.len(),
                code.total_bytes(),
                bpp
            );
        },
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct DecodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = VolumeFormatArg::Rvol)]
    format: VolumeFormatArg,
}

pub fn decode(args: DecodeArgs, json_mode: bool) -> Result<ExitCode> {
    let code = VolumeCode::load(&args.input)?;
    let volume = codec::decode_volume(&code)?;
    let written = volume.save(&args.out, args.format.into())?;
    emit(
        json_mode,
        json!({
            "out": args.out,
            "depth": volume.depth(),
            "height": volume.height(),
            "width": volume.width(),
            "bytes_written": written,
        }),
        || {
            println!(
                "decoded {} -> {} ({}x{}x{})",
                args.input.display(),
                args.out.display(),
                volume.depth(),
                volume.height(),
                volume.width()
            );
        },
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct ZipvolArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = VolumeFormatArg::Rvol)]
    format: VolumeFormatArg,
    #[arg(long)]
    out: PathBuf,
}

pub fn zipvol(args: ZipvolArgs, json_mode: bool) -> Result<ExitCode> {
    let volume = load_volume(&args.input, args.format)?;
    let zipped = codec::zip_volume(&volume)?;
    let raw = volume.to_rvol_bytes().len() as u64;
    fs::write(&args.out, &zipped)?;
    emit(
        json_mode,
        json!({
            "out": args.out,
            "raw_bytes": raw,
            "zip_bytes": zipped.len(),
            "compression_ratio": zipped.len() as f64 / raw as f64,
        }),
        || {
            println!(
                "zipped {} -> {} ({} -> {} bytes)",
                args.input.display(),
                args.out.display(),
                raw,
                zipped.len()
            );
        },
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------- carrier

#[derive(Args)]
pub struct CarrierArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total tensor payload bytes of the synthetic model.
    #[arg(long, default_value_t = 1 << 20)]
    payload_bytes: u64,
    /// Output checkpoint (.npz extension selects NPZ, otherwise WDC).
    #[arg(long)]
    out: PathBuf,
    /// Also write the architecture manifest describing the clean model.
    #[arg(long)]
    manifest_out: Option<PathBuf>,
}

pub fn carrier(args: CarrierArgs, json_mode: bool) -> Result<ExitCode> {
    let c = synthetic_checkpoint(args.seed, args.payload_bytes);
    let written = write_checkpoint(&c, &args.out)?;
    if let Some(path) = &args.manifest_out {
        let manifest = ArchitectureManifest::describing(&c);
        fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    }
    emit(
        json_mode,
        json!({
            "out": args.out,
            "manifest": args.manifest_out,
            "entries": c.len(),
            "bytes_written": written,
        }),
        || {
            println!(
                "carrier with {} entries ({} bytes) -> {}",
                c.len(),
                written,
                args.out.display()
            );
        },
    );
    Ok(ExitCode::SUCCESS)
}

// ----------------------------------------------------------- embed/extract

fn disguise_from(mode: DisguiseArg, secret: Option<String>) -> Result<DisguiseMode> {
    match (mode, secret) {
        (DisguiseArg::Dedicated, None) => Ok(DisguiseMode::DedicatedKeys),
        (DisguiseArg::Dedicated, Some(_)) => Err(UsageError(
            "--secret only applies to --mode mimic".into(),
        )
        .into()),
        (DisguiseArg::Mimic, Some(secret)) => Ok(DisguiseMode::MimicKeys { secret }),
        (DisguiseArg::Mimic, None) => {
            Err(UsageError("--mode mimic requires --secret".into()).into())
        }
    }
}

#[derive(Args)]
pub struct EmbedArgs {
    /// Carrier checkpoint (WDC or NPZ, detected by magic).
    #[arg(long)]
    carrier: PathBuf,
    /// File whose bytes get hidden.
    #[arg(long)]
    payload: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = DisguiseArg::Dedicated)]
    mode: DisguiseArg,
    /// Key-derivation secret for mimic mode.
    #[arg(long)]
    secret: Option<String>,
    #[arg(long, default_value_t = DEFAULT_CHUNK_SIZE)]
    chunk_size: u32,
    /// Free-form label stored in the hidden manifest; defaults to the
    /// payload file name.
    #[arg(long)]
    label: Option<String>,
}

pub fn embed(args: EmbedArgs, json_mode: bool) -> Result<ExitCode> {
    let disguise = disguise_from(args.mode, args.secret)?;
    let carrier = read_checkpoint(&args.carrier)?;
    let payload = fs::read(&args.payload)
        .with_context(|| format!("reading payload {}", args.payload.display()))?;
    let label = args.label.unwrap_or_else(|| {
        args.payload
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let out = stash::embed(&carrier, &payload, &disguise, args.chunk_size, &label)?;
    let written = write_checkpoint(&out.checkpoint, &args.out)?;
    emit(
        json_mode,
        json!({
            "out": args.out,
            "payload_bytes": payload.len(),
            "chunks": out.manifest.chunk_count(),
            "added_bytes": out.added_bytes,
            "carrier_entries": carrier.len(),
            "output_entries": out.checkpoint.len(),
            "bytes_written": written,
            "label": label,
        }),
        || {
            println!(
                "embedded {} bytes in {} chunks -> {} (+{} bytes)",
                payload.len(),
                out.manifest.chunk_count(),
                args.out.display(),
                out.added_bytes
            );
        },
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Args)]
pub struct ExtractArgs {
    #[arg(long)]
    carrier: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = DisguiseArg::Dedicated)]
    mode: DisguiseArg,
    #[arg(long)]
    secret: Option<String>,
}

pub fn extract(args: ExtractArgs, json_mode: bool) -> Result<ExitCode> {
    let disguise = disguise_from(args.mode, args.secret)?;
    let checkpoint = read_checkpoint(&args.carrier)?;
    let (payload, manifest) = stash::extract(&checkpoint, &disguise)?;
    fs::write(&args.out, &payload)?;
    emit(
        json_mode,
        json!({
            "out": args.out,
            "total_bytes": manifest.total_bytes,
            "chunks": manifest.chunk_count(),
            "label": manifest.label,
        }),
        || {
            println!(
                "extracted {} bytes ({} chunks, label {:?}) -> {}",
                manifest.total_bytes,
                manifest.chunk_count(),
                manifest.label,
                args.out.display()
            );
        },
    );
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------------- scan

#[derive(Args)]
pub struct ScanArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Architecture manifest JSON for ground-truth diffing.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Warn when per-entry byte entropy exceeds this (bits/byte).
    #[arg(long, default_value_t = 7.5)]
    entropy_bits: f64,
    /// Warn when the DEFLATE ratio of an entry exceeds this.
    #[arg(long, default_value_t = 0.95)]
    incompressible_ratio: f64,
    /// Entries smaller than this skip the statistical tests.
    #[arg(long, default_value_t = 4096)]
    min_stat_bytes: usize,
    /// Alert when the total exceeds the expected size by this fraction.
    #[arg(long, default_value_t = 0.01)]
    size_tolerance: f64,
}

pub fn scan(args: ScanArgs, json_mode: bool) -> Result<ExitCode> {
    let checkpoint = read_checkpoint(&args.checkpoint)?;
    let manifest: Option<ArchitectureManifest> = match &args.manifest {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading manifest {}", path.display()))?;
            Some(serde_json::from_str(&text).context("parsing manifest JSON")?)
        }
        None => None,
    };
    let thresholds = ScanThresholds {
        entropy_warn_bits: args.entropy_bits,
        incompressible_ratio: args.incompressible_ratio,
        min_statistical_bytes: args.min_stat_bytes,
        size_tolerance: args.size_tolerance,
    };
    let report = scanner::scan(&checkpoint, manifest.as_ref(), &thresholds);
    if json_mode {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for f in &report.findings {
            println!(
                "{:?}\t{:?}\t{}\tscore {:.2}\t{}",
                f.severity, f.kind, f.key, f.score, f.details
            );
        }
        println!("verdict: {:?}", report.verdict);
    }
    Ok(ExitCode::from(report.exit_code() as u8))
}

// ------------------------------------------------------------------- plan

#[derive(Args)]
pub struct PlanArgs {
    /// Emit the built-in 100-image reference cost table.
    #[arg(long)]
    table4: bool,
    /// JSON file with a list of strategy costs.
    #[arg(long)]
    costs: Option<PathBuf>,
    /// Export size budget in bytes.
    #[arg(long)]
    budget: Option<u64>,
}

pub fn plan(args: PlanArgs, json_mode: bool) -> Result<ExitCode> {
    if args.table4 {
        if args.costs.is_some() || args.budget.is_some() {
            bail!(UsageError(
                "--table4 conflicts with --costs/--budget".into()
            ));
        }
        let rows = planner::cost_table();
        // Federated variant: decoder pre-shared, 3 MB fixed, low-sampling
        // codes; 100 MB of updates carries 42 images.
        let fl = planner::max_images(&planner::federated_low_costs(), 100_000_000)?;
        emit(
            json_mode,
            json!({
                "rows": rows,
                "federated_pre_shared_decoder": {
                    "budget_mb": 100,
                    "fixed_mb": 3,
                    "per_image_mb": 2.27,
                    "images": fl.images,
                },
            }),
            || {
                println!("dataset  D     D+UB  D+UB+100*High  D+UB+100*Low  PU+100*ZIP");
                for r in &rows {
                    let cell = |v: Option<u64>| {
                        v.map(|x| x.to_string()).unwrap_or_else(|| "/".into())
                    };
                    println!(
                        "{:<8} {:<5} {:<5} {:<14} {:<13} {}",
                        r.dataset,
                        r.decoder_mb,
                        r.decoder_plus_utility_mb,
                        cell(r.high_100_mb),
                        cell(r.low_100_mb),
                        cell(r.zip_100_mb)
                    );
                }
                println!("federated (decoder pre-shared): 100 MB budget -> {} images", fl.images);
            },
        );
        return Ok(ExitCode::SUCCESS);
    }

    let (costs_path, budget) = match (&args.costs, args.budget) {
        (Some(c), Some(b)) => (c, b),
        _ => bail!(UsageError(
            "plan needs either --table4 or both --costs and --budget".into()
        )),
    };
    let text = fs::read_to_string(costs_path)
        .with_context(|| format!("reading costs {}", costs_path.display()))?;
    let costs: Vec<StrategyCosts> = serde_json::from_str(&text).context("parsing costs JSON")?;
    let plan = planner::best_strategy(&costs, budget)?;
    emit(
        json_mode,
        json!({
            "budget_bytes": budget,
            "plan": plan,
        }),
        || match &plan {
            Some(p) => println!(
                "best strategy: {} ({} images, {} of {} bytes)",
                p.strategy, p.n_images, p.total_bytes, p.budget_bytes
            ),
            None => println!("no strategy fits the budget of {budget} bytes"),
        },
    );
    Ok(ExitCode::SUCCESS)
}

// --------------------------------------------------------------- simulate

#[derive(Args)]
pub struct SimulateArgs {
    /// Simulation config JSON (see README for the schema).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

pub fn simulate(args: SimulateArgs, json_mode: bool) -> Result<ExitCode> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let mut config: SimConfig = serde_json::from_str(&text).context("parsing sim config")?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let report = flsim::run_simulation(&config)?;
    if json_mode {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for n in &report.nodes {
            let done = n
                .rounds_to_complete
                .map(|r| format!("complete in round {r}"))
                .unwrap_or_else(|| "incomplete".into());
            println!(
                "node {}: {}/{} images, {} bytes, {}",
                n.node, n.images_completed, n.images_total, n.cumulative_bytes, done
            );
        }
        println!(
            "totals: {} bytes smuggled, {} images, {} flagged rounds",
            report.totals.bytes_smuggled,
            report.totals.images_completed,
            report.totals.flagged_events
        );
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------- metrics

#[derive(Args)]
pub struct MetricsArgs {
    #[arg(long, requires = "volume_b")]
    volume_a: Option<PathBuf>,
    #[arg(long, requires = "volume_a")]
    volume_b: Option<PathBuf>,
    #[arg(long, requires = "mask_b")]
    mask_a: Option<PathBuf>,
    #[arg(long, requires = "mask_a")]
    mask_b: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = VolumeFormatArg::Rvol)]
    format: VolumeFormatArg,
    /// PSNR peak; defaults to volume A's declared intensity range.
    #[arg(long)]
    peak: Option<f64>,
    /// Voxel spacing in millimeters, z,y,x.
    #[arg(long, value_parser = parse_spacing, default_value = "1,1,1")]
    spacing: (f64, f64, f64),
}

pub fn metrics(args: MetricsArgs, json_mode: bool) -> Result<ExitCode> {
    let mut report = MetricReport::default();
    if args.volume_a.is_none() && args.mask_a.is_none() {
        bail!(UsageError(
            "metrics needs --volume-a/--volume-b and/or --mask-a/--mask-b".into()
        ));
    }

    if let (Some(pa), Some(pb)) = (&args.volume_a, &args.volume_b) {
        let a = load_volume(pa, args.format)?;
        let b = load_volume(pb, args.format)?;
        let peak = args.peak.unwrap_or_else(|| {
            let range = f64::from(a.intensity_range());
            if range > 0.0 {
                range
            } else {
                1.0
            }
        });
        report.psnr = Some(metrics::psnr(&a, &b, peak)?);
        // MS-SSIM runs on both volumes mapped to [0,1] by A's range.
        let na = a.normalize_minmax();
        let mut nb = b.clone();
        let (min, max) = (a.intensity_min(), a.intensity_max());
        if max > min {
            let scale = 1.0 / (max - min);
            for v in nb.voxels_mut() {
                *v = ((*v - min) * scale).clamp(0.0, 1.0);
            }
        }
        match metrics::ms_ssim_volume(&na, &nb, 1.0) {
            Ok(v) => report.ms_ssim = Some(v),
            Err(e) => eprintln!("ms_ssim skipped: {e}"),
        }
    }

    if let (Some(pa), Some(pb)) = (&args.mask_a, &args.mask_b) {
        let a = MaskVolume::from_volume(&load_volume(pa, args.format)?, args.spacing)?;
        let b = MaskVolume::from_volume(&load_volume(pb, args.format)?, args.spacing)?;
        let overlap = metrics::overlap_metrics(&a, &b)?;
        report.dice = Some(overlap.dice);
        report.voe = Some(overlap.voe);
        report.rvd = Some(overlap.rvd);
        match metrics::surface_metrics(&a, &b) {
            Ok(s) => {
                report.assd = Some(s.assd);
                report.msd = Some(s.msd);
                report.rmsd = Some(s.rmsd);
            }
            Err(e) => eprintln!("surface metrics skipped: {e}"),
        }
    }

    if json_mode {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        let show = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                println!("{name}: {v}");
            }
        };
        show("psnr", report.psnr);
        show("ms_ssim", report.ms_ssim);
        show("dice", report.dice);
        show("voe", report.voe);
        show("rvd", report.rvd);
        show("assd", report.assd);
        show("msd", report.msd);
        show("rmsd", report.rmsd);
    }
    Ok(ExitCode::SUCCESS)
}
