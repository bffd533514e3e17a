//! `gwlz`: error-bounded lossy compression of raw 3D float volumes with
//! group-wise learned residual enhancement.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/format error, 4 I/O error.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gwlz_core::codec::{self, CodecConfig};
use gwlz_core::container::{
    self, QualityRecord, SidecarProvenance, ARCHIVE_MAGIC, FLAG_CLAMP_RECOMMENDED,
    FLAG_HAS_ENHANCER, SIDECAR_MAGIC,
};
use gwlz_core::enhancer::{self, ClampMode, EnhancerBundle};
use gwlz_core::grouping::GroupStrategy;
use gwlz_core::metrics;
use gwlz_core::nn::TrainConfig;
use gwlz_core::volume::{self, ByteOrder, SyntheticKind, SyntheticSpec, Volume};
use gwlz_core::Error;

#[derive(Parser)]
#[command(name = "gwlz", version, about = "Lossy compression for 3D float volumes with learned residual enhancers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a raw volume into a .gwlz archive, training enhancers
    Compress(CompressArgs),
    /// Reconstruct a raw volume from a .gwlz archive
    Decompress(DecompressArgs),
    /// Train an enhancer sidecar for an externally compressed pair
    Enhance(EnhanceArgs),
    /// Apply a .gwe sidecar to a decompressed volume
    Apply(ApplyArgs),
    /// Quality metrics between two raw volumes
    Stats(StatsArgs),
    /// Print the structure of a .gwlz or .gwe file
    Inspect(InspectArgs),
    /// Generate a synthetic raw test volume
    Gen(GenArgs),
    /// Sweep error bounds and group counts, emitting a CSV report
    Bench(BenchArgs),
}

/// Dims triple in NxMxK form.
fn parse_dims(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != 3 {
        return Err(format!("expected NxMxK, got '{s}'"));
    }
    let mut out = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .parse::<usize>()
            .map_err(|_| format!("bad dimension '{p}' in '{s}'"))?;
        if out[i] == 0 {
            return Err(format!("dimensions must be positive in '{s}'"));
        }
    }
    Ok((out[0], out[1], out[2]))
}

fn parse_strategy(s: &str) -> Result<GroupStrategy, String> {
    GroupStrategy::parse(s).map_err(|e| e.to_string())
}

fn parse_kind(s: &str) -> Result<SyntheticKind, String> {
    SyntheticKind::parse(s).map_err(|e| e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum ClampFlag {
    None,
    Bound2e,
}

impl ClampFlag {
    fn mode(self, e_abs: f64) -> ClampMode {
        match self {
            ClampFlag::None => ClampMode::None,
            ClampFlag::Bound2e => ClampMode::Bound2e { e_abs },
        }
    }
}

/// Training knobs shared by compress, enhance and bench.
#[derive(Args, Clone)]
struct TrainFlags {
    /// Number of value-range groups
    #[arg(long, default_value_t = 20)]
    groups: usize,
    /// Training epochs per group
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    /// Slices per SGD batch
    #[arg(long, default_value_t = 10)]
    batch: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Multiplicative learning-rate decay factor
    #[arg(long = "lr-gamma", default_value_t = 0.5)]
    lr_gamma: f64,
    /// Epochs between learning-rate decays
    #[arg(long = "lr-step", default_value_t = 30)]
    lr_step: usize,
    /// Boundary selection: quantile or equal-width
    #[arg(long, default_value = "quantile", value_parser = parse_strategy)]
    strategy: GroupStrategy,
    /// Slicing axis for training images
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=2))]
    axis: u8,
    /// Master RNG seed (per-group seed = seed XOR group id)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Enhancer width in channels
    #[arg(long, default_value_t = 9)]
    channels: usize,
    /// Worker threads for group-level training (output is thread-count independent)
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl TrainFlags {
    fn to_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr0: self.lr,
            lr_gamma: self.lr_gamma,
            lr_step_epochs: self.lr_step,
            seed: self.seed,
            channels: self.channels,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct CompressArgs {
    /// Raw binary32 input volume
    #[arg(long)]
    input: PathBuf,
    /// Volume dimensions NxMxK (d0 outermost)
    #[arg(long, value_parser = parse_dims)]
    dims: (usize, usize, usize),
    /// Relative error bound (absolute bound = reb x value range)
    #[arg(long)]
    reb: f64,
    /// Output .gwlz archive
    #[arg(long)]
    out: PathBuf,
    /// Skip enhancer training; archive the payload alone
    #[arg(long = "no-enhance")]
    no_enhance: bool,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct DecompressArgs {
    /// Input .gwlz archive
    #[arg(long)]
    input: PathBuf,
    /// Output raw binary32 volume
    #[arg(long)]
    out: PathBuf,
    /// Emit the plain codec output even if an enhancer is present
    #[arg(long = "no-enhance")]
    no_enhance: bool,
    /// Residual clamp policy
    #[arg(long, value_enum, default_value_t = ClampFlag::None)]
    clamp: ClampFlag,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Original (uncompressed) raw volume
    #[arg(long)]
    original: PathBuf,
    /// Decompressed raw volume produced by any lossy compressor
    #[arg(long)]
    decompressed: PathBuf,
    /// Volume dimensions NxMxK
    #[arg(long, value_parser = parse_dims)]
    dims: (usize, usize, usize),
    /// Absolute error bound the pair is expected to satisfy
    #[arg(long = "e-abs")]
    e_abs: f64,
    /// Output .gwe sidecar
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct ApplyArgs {
    /// Decompressed raw volume to enhance
    #[arg(long)]
    decompressed: PathBuf,
    /// Enhancer sidecar
    #[arg(long)]
    sidecar: PathBuf,
    /// Output raw binary32 volume
    #[arg(long)]
    out: PathBuf,
    /// Residual clamp policy
    #[arg(long, value_enum, default_value_t = ClampFlag::None)]
    clamp: ClampFlag,
}

#[derive(Args)]
struct StatsArgs {
    /// Reference raw volume
    #[arg(long)]
    original: PathBuf,
    /// Candidate raw volume
    #[arg(long)]
    candidate: PathBuf,
    /// Volume dimensions NxMxK
    #[arg(long, value_parser = parse_dims)]
    dims: (usize, usize, usize),
}

#[derive(Args)]
struct InspectArgs {
    /// .gwlz or .gwe file
    input: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    /// Field kind: constant, cosine-field, gaussian-mixture, skewed-exponential
    #[arg(long, value_parser = parse_kind)]
    kind: SyntheticKind,
    /// Volume dimensions NxMxK
    #[arg(long, value_parser = parse_dims)]
    dims: (usize, usize, usize),
    /// RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Field amplitude
    #[arg(long, default_value_t = 1.0)]
    amplitude: f32,
    /// Output raw binary32 volume
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Raw binary32 input volume
    #[arg(long)]
    input: PathBuf,
    /// Volume dimensions NxMxK
    #[arg(long, value_parser = parse_dims)]
    dims: (usize, usize, usize),
    /// Comma-separated relative error bounds
    #[arg(long, value_delimiter = ',', required = true)]
    rebs: Vec<f64>,
    /// Comma-separated group counts
    #[arg(long = "groups-list", value_delimiter = ',', required = true)]
    groups_list: Vec<usize>,
    /// Output CSV report
    #[arg(long)]
    out: PathBuf,
    /// Directory for per-run loss-curve CSVs
    #[arg(long = "loss-curves")]
    loss_curves: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compress(args) => cmd_compress(args),
        Command::Decompress(args) => cmd_decompress(args),
        Command::Enhance(args) => cmd_enhance(args),
        Command::Apply(args) => cmd_apply(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Gen(args) => cmd_gen(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Io(_) => 4u8,
                _ => 3u8,
            };
            ExitCode::from(code)
        }
    }
}

/// Absolute bound from the relative bound, with a positive fallback for
/// constant inputs (zero range would otherwise be rejected by the codec;
/// constant fields reconstruct within any positive bound).
fn effective_bound(reb: f64, vol: &Volume) -> f64 {
    let e = codec::abs_bound_from_reb(reb, vol.vrange());
    if e > 0.0 {
        e
    } else {
        reb * vol.max().abs().max(1.0) as f64
    }
}

fn cmd_compress(args: CompressArgs) -> Result<(), Error> {
    let vol = volume::load_raw(&args.input, args.dims, ByteOrder::Little)?;
    let e_abs = effective_bound(args.reb, &vol);
    let ccfg = CodecConfig::with_abs_bound(args.reb, e_abs)?;
    let (payload, dec) = codec::compress(&vol, &ccfg)?;
    let psnr_base = metrics::psnr(&vol, &dec)?;

    let (bundle, enhanced) = if args.no_enhance {
        (None, None)
    } else {
        let bundle = enhancer::fit(
            &vol,
            &dec,
            args.train.groups,
            args.train.strategy,
            &args.train.to_config(),
            args.train.axis as usize,
            args.train.threads,
        )?;
        let enhanced = enhancer::enhance(&dec, &bundle, ClampMode::None)?;
        (Some(bundle), Some(enhanced))
    };
    let final_vol = enhanced.as_ref().unwrap_or(&dec);
    let psnr_final = metrics::psnr(&vol, final_vol)?;
    let quality = QualityRecord {
        psnr_base,
        psnr_enhanced: psnr_final,
    };
    let archive_bytes =
        container::write_archive(&args.out, &payload, bundle.as_ref(), &quality, false)?;

    let enhancer_bytes = match &bundle {
        Some(b) => container::enhancer_blob_bytes(b)?,
        None => 0,
    };
    let report = metrics::report(&vol, &dec, final_vol, &payload, enhancer_bytes)?;
    print!("{}", report.render());
    println!("psnr_base_db={psnr_base}");
    println!("archive_bytes={archive_bytes}");
    Ok(())
}

fn cmd_decompress(args: DecompressArgs) -> Result<(), Error> {
    let arch = container::read_archive(&args.input)?;
    let dec = codec::decompress(&arch.payload)?;
    let out_vol = match (&arch.bundle, args.no_enhance) {
        (Some(bundle), false) => {
            let clamp = args.clamp.mode(arch.e_abs);
            let enhanced = enhancer::enhance(&dec, bundle, clamp)?;
            println!("path=enhanced");
            enhanced
        }
        (Some(_), true) => {
            println!("path=base");
            dec
        }
        (None, _) => {
            println!("path=base");
            println!("note=archive carries no enhancer");
            dec
        }
    };
    let bytes = volume::save_raw(&out_vol, &args.out, ByteOrder::Little)?;
    println!("bytes={bytes}");
    Ok(())
}

fn cmd_enhance(args: EnhanceArgs) -> Result<(), Error> {
    let original = volume::load_raw(&args.original, args.dims, ByteOrder::Little)?;
    let decompressed = volume::load_raw(&args.decompressed, args.dims, ByteOrder::Little)?;
    let max_residual = original
        .values()
        .iter()
        .zip(decompressed.values())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .fold(0.0f64, f64::max);
    if max_residual > args.e_abs {
        eprintln!(
            "warning: observed residual {max_residual} exceeds --e-abs {}; proceeding",
            args.e_abs
        );
    }
    let bundle = enhancer::fit(
        &original,
        &decompressed,
        args.train.groups,
        args.train.strategy,
        &args.train.to_config(),
        args.train.axis as usize,
        args.train.threads,
    )?;
    let provenance = SidecarProvenance {
        dims: args.dims,
        e_abs: args.e_abs,
    };
    let bytes = container::write_sidecar(&args.out, &bundle, &provenance)?;
    println!("groups={}", bundle.n_groups());
    println!("trained_models={}", bundle.trained_models());
    println!("max_observed_residual={max_residual}");
    println!("sidecar_bytes={bytes}");
    Ok(())
}

fn cmd_apply(args: ApplyArgs) -> Result<(), Error> {
    let (bundle, provenance) = container::read_sidecar(&args.sidecar)?;
    let decompressed = volume::load_raw(&args.decompressed, provenance.dims, ByteOrder::Little)?;
    container::check_sidecar_dims(&provenance, &decompressed)?;
    let clamp = args.clamp.mode(provenance.e_abs);
    let enhanced = enhancer::enhance(&decompressed, &bundle, clamp)?;
    let bytes = volume::save_raw(&enhanced, &args.out, ByteOrder::Little)?;
    println!("path=enhanced");
    println!("bytes={bytes}");
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<(), Error> {
    let original = volume::load_raw(&args.original, args.dims, ByteOrder::Little)?;
    let candidate = volume::load_raw(&args.candidate, args.dims, ByteOrder::Little)?;
    let mse = metrics::mse(&original, &candidate)?;
    let psnr = metrics::psnr(&original, &candidate)?;
    let max_abs_err = original
        .values()
        .iter()
        .zip(candidate.values())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .fold(0.0f64, f64::max);
    println!("mse={mse}");
    println!("psnr_db={psnr}");
    println!("max_abs_err={max_abs_err}");
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), Error> {
    let bytes = fs::read(&args.input)?;
    if bytes.len() >= 4 && &bytes[..4] == ARCHIVE_MAGIC {
        let arch = container::archive_from_bytes(&bytes)?;
        println!("format=gwlz");
        println!("version={}", arch.version);
        println!("flags={}", arch.flags);
        println!("has_enhancer={}", (arch.flags & FLAG_HAS_ENHANCER != 0) as u8);
        println!(
            "clamp_recommended={}",
            (arch.flags & FLAG_CLAMP_RECOMMENDED != 0) as u8
        );
        println!("dims={}x{}x{}", arch.dims.0, arch.dims.1, arch.dims.2);
        println!("reb={}", arch.reb);
        println!("e_abs={}", arch.e_abs);
        println!("axis={}", arch.axis);
        println!("payload_bytes={}", arch.payload_bytes);
        println!("enhancer_bytes={}", arch.enhancer_bytes);
        println!("overhead={}", container::overhead_ratio(&arch));
        println!("psnr_base_db={}", arch.quality.psnr_base);
        println!("psnr_enhanced_db={}", arch.quality.psnr_enhanced);
        println!("outliers={}", arch.payload.outlier_count());
        if let Some(bundle) = &arch.bundle {
            print_bundle(bundle);
        }
    } else if bytes.len() >= 4 && &bytes[..4] == SIDECAR_MAGIC {
        let (bundle, provenance) = container::sidecar_from_bytes(&bytes)?;
        println!("format=gwe");
        println!(
            "dims={}x{}x{}",
            provenance.dims.0, provenance.dims.1, provenance.dims.2
        );
        println!("e_abs={}", provenance.e_abs);
        println!("axis={}", bundle.axis);
        print_bundle(&bundle);
    } else {
        return Err(Error::Format(format!(
            "{} is neither a .gwlz archive nor a .gwe sidecar",
            args.input.display()
        )));
    }
    Ok(())
}

fn print_bundle(bundle: &EnhancerBundle) {
    println!("groups={}", bundle.n_groups());
    println!("strategy={}", bundle.spec.strategy().name());
    println!("channels={}", bundle.hyper.channels);
    println!("trained_models={}", bundle.trained_models());
    println!("weight_bytes={}", container::enhancer_weight_bytes(bundle));
    for (g, (st, model)) in bundle
        .stats
        .all()
        .iter()
        .zip(&bundle.models)
        .enumerate()
    {
        println!(
            "group={g} count={} in_min={} in_max={} res_scale={} model={}",
            st.count,
            st.in_min,
            st.in_max,
            st.res_scale,
            model.is_some() as u8
        );
    }
}

fn cmd_gen(args: GenArgs) -> Result<(), Error> {
    let spec = SyntheticSpec {
        kind: args.kind,
        dims: args.dims,
        seed: args.seed,
        amplitude: args.amplitude,
    };
    let vol = volume::gen_synthetic(&spec)?;
    let bytes = volume::save_raw(&vol, &args.out, ByteOrder::Little)?;
    println!("kind={}", args.kind.name());
    println!("bytes={bytes}");
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Error> {
    let vol = volume::load_raw(&args.input, args.dims, ByteOrder::Little)?;
    if let Some(dir) = &args.loss_curves {
        fs::create_dir_all(dir)?;
    }
    let mut csv = String::from("reb,groups,psnr_base,psnr_enh,improvement_pct,cr,overhead\n");
    for &reb in &args.rebs {
        let e_abs = effective_bound(reb, &vol);
        let ccfg = CodecConfig::with_abs_bound(reb, e_abs)?;
        let (payload, dec) = codec::compress(&vol, &ccfg)?;
        let psnr_base = metrics::psnr(&vol, &dec)?;
        let cr = codec::ratio(&vol, &payload)?;
        let payload_bytes = codec::compressed_size(&payload)?;
        for &groups in &args.groups_list {
            let bundle = enhancer::fit(
                &vol,
                &dec,
                groups,
                args.train.strategy,
                &args.train.to_config(),
                args.train.axis as usize,
                args.train.threads,
            )?;
            let enhanced = enhancer::enhance(&dec, &bundle, ClampMode::None)?;
            let psnr_enh = metrics::psnr(&vol, &enhanced)?;
            let improvement = if psnr_base.is_finite() && psnr_base > 0.0 {
                metrics::improvement_pct(psnr_base, psnr_enh)?
            } else {
                0.0
            };
            let overhead = container::overhead_from_sizes(
                container::enhancer_blob_bytes(&bundle)?,
                payload_bytes,
            );
            writeln!(
                csv,
                "{reb},{groups},{psnr_base},{psnr_enh},{improvement},{cr},{overhead}"
            )
            .expect("string write");
            if let Some(dir) = &args.loss_curves {
                let meta = bundle.train_meta.as_ref().expect("fit keeps train meta");
                let mut curve = String::from("epoch,group,loss\n");
                for (g, hist) in meta.history.iter().enumerate() {
                    if let Some(hist) = hist {
                        for (epoch, loss) in hist.iter().enumerate() {
                            writeln!(curve, "{epoch},{g},{loss}").expect("string write");
                        }
                    }
                }
                fs::write(dir.join(format!("loss_reb{reb}_g{groups}.csv")), curve)?;
            }
        }
    }
    fs::write(&args.out, csv)?;
    println!("report={}", args.out.display());
    Ok(())
}
