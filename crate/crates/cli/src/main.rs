//! `glvq`: quantize weight tensors into lattice-coded archives, decode them,
//! evaluate reconstructions and run the synthetic ablation suite.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use glvq_core::ablation::{run_ablation, AblationSettings, Preset};
use glvq_core::codebook::Rounding;
use glvq_core::container::{
    overhead_report, read_archive, write_archive, write_atomic, ArchiveReader, REFERENCE_OVERHEAD_TABLE,
};
use glvq_core::pipeline::{evaluate, quantize_layer, RunConfig};
use glvq_core::synthetic::{generate, LayerSpec, Source};
use glvq_core::{FitConfig, GlvqError, TensorFile};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "glvq", version, about = "Grouped lattice vector quantization of weight tensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compress a weight tensor into a .glvq archive.
    Quantize(QuantizeArgs),
    /// Decode a .glvq archive back into an f32 tensor.
    Dequantize(DequantizeArgs),
    /// Compare an archive against the original weights.
    Eval(EvalArgs),
    /// Run a paired ablation on the synthetic suite.
    Ablate(AblateArgs),
    /// Side-information overhead of the FP16 lattice parameters.
    Overhead(OverheadArgs),
    /// Write a synthetic weight/calibration pair.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RoundingArg {
    Babai,
    Gcd,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Lattice dimension d.
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Target mean bits per weight (fractional values mix two widths).
    #[arg(long, default_value_t = 2.0)]
    bits: f64,
    /// Columns per group.
    #[arg(long, default_value_t = 128)]
    group_width: usize,
    /// Give every group the target bit-width.
    #[arg(long)]
    no_bit_alloc: bool,
    /// Disable mu-law companding.
    #[arg(long)]
    no_companding: bool,
    /// Keep a scaled identity basis instead of learning it.
    #[arg(long)]
    fixed_basis: bool,
    #[arg(long, value_enum, default_value = "babai")]
    rounding: RoundingArg,
    /// Coordinate sweeps for --rounding gcd.
    #[arg(long, default_value_t = 1)]
    gcd_sweeps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
}

impl RunArgs {
    fn config(&self) -> RunConfig {
        let fit = FitConfig {
            companding: !self.no_companding,
            fixed_basis: self.fixed_basis,
            rounding: match self.rounding {
                RoundingArg::Babai => Rounding::Babai,
                RoundingArg::Gcd => Rounding::Gcd { sweeps: self.gcd_sweeps },
            },
            max_iters: self.max_iters,
            lambda: self.lambda,
            ..FitConfig::default()
        };
        RunConfig {
            dim: self.dim,
            target_bits: self.bits,
            group_width: self.group_width,
            fit,
            bit_alloc: !self.no_bit_alloc,
            seed: self.seed,
            ..RunConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    /// Weight tensor (.f32 with .json manifest), shape m x n.
    #[arg(long)]
    weights: PathBuf,
    /// Calibration inputs, shape n x T.
    #[arg(long)]
    calib: PathBuf,
    /// Output archive path.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-group CSV report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct DequantizeArgs {
    archive: PathBuf,
    /// Output tensor path (.f32; manifest written alongside).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Also write the metrics as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// bit-alloc, lattice, companding, group-size or rounding.
    preset: String,
    #[arg(long, default_value = "student-t")]
    source: String,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Layer width in units of 64 columns.
    #[arg(long, default_value_t = 2)]
    col_units: usize,
    /// CSV output; the text summary always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 2.0)]
    bits: f64,
    #[arg(long, default_value_t = 64)]
    group_width: usize,
    #[arg(long)]
    no_bit_alloc: bool,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
}

#[derive(Debug, Args)]
struct OverheadArgs {
    #[arg(long, required_unless_present = "reference_table")]
    dim: Option<u64>,
    #[arg(long, required_unless_present = "reference_table")]
    rows: Option<u64>,
    #[arg(long, required_unless_present = "reference_table")]
    cols: Option<u64>,
    #[arg(long, required_unless_present = "reference_table")]
    bits: Option<u64>,
    /// Print the reference table for m = 4096, n in {128, 256}, d in {8, 16, 32}.
    #[arg(long)]
    reference_table: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value = "student-t")]
    source: String,
    #[arg(long, default_value_t = 256)]
    rows: usize,
    #[arg(long, default_value_t = 256)]
    cols: usize,
    #[arg(long, default_value_t = 128)]
    tokens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output weight tensor path.
    #[arg(long)]
    weights: PathBuf,
    /// Output calibration tensor path.
    #[arg(long)]
    calib: PathBuf,
}

/// Failure classified by exit code.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<GlvqError> for CliError {
    fn from(e: GlvqError) -> Self {
        match e {
            GlvqError::InvalidArgument(_) | GlvqError::InfeasibleTarget { .. } => CliError::Usage(e.to_string()),
            GlvqError::Io(_) => CliError::Internal(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn read_tensor(path: &Path) -> Result<TensorFile, CliError> {
    TensorFile::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

fn quantize(args: &QuantizeArgs) -> Result<String, CliError> {
    let config = args.run.config();
    config.validate()?;
    let weights = read_tensor(&args.weights)?;
    let calib = read_tensor(&args.calib)?;
    let start = Instant::now();
    let q = quantize_layer(&weights.to_matrix(), &calib.to_matrix(), &config)?;
    let bytes = write_archive(&q.groups)?;
    write_output(&args.out, &bytes)?;

    if let Some(path) = &args.report {
        let mut csv = String::from("group,col_start,cols,bits,mu,final_loss,final_data_loss,iterations,converged\n");
        for s in &q.summaries {
            let _ = writeln!(
                csv,
                "{},{},{},{},{:.6},{:.9e},{:.9e},{},{}",
                s.index, s.col_start, s.cols, s.bits, s.mu, s.final_loss, s.final_data_loss, s.iterations, s.converged
            );
        }
        write_output(path, csv.as_bytes())?;
    }

    let overhead: f64 = {
        let code_bits: f64 = q.groups.iter().map(|g| (g.codec.rows * g.codec.cols * g.codec.bits as usize) as f64).sum();
        let side: f64 = q.groups.iter().map(|g| (16 * g.codec.dim() * g.codec.dim() + 16) as f64).sum();
        100.0 * side / code_bits
    };
    let mut out = String::new();
    let _ = writeln!(out, "groups: {}", q.groups.len());
    let _ = writeln!(out, "mean bits: {}", q.allocation.mean());
    let _ = writeln!(
        out,
        "bits per group: {}",
        q.allocation.bits.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",")
    );
    let _ = writeln!(out, "side-info overhead: {overhead:.3}%");
    let _ = writeln!(out, "archive bytes: {}", bytes.len());
    let converged = q.summaries.iter().filter(|s| s.converged).count();
    let _ = writeln!(out, "converged groups: {converged}/{}", q.summaries.len());
    let _ = writeln!(out, "wall time: {:.3}s", start.elapsed().as_secs_f64());
    Ok(out)
}

fn dequantize(args: &DequantizeArgs) -> Result<String, CliError> {
    let bytes = fs::read(&args.archive).map_err(|e| CliError::Data(format!("{}: {e}", args.archive.display())))?;
    let reader = ArchiveReader::parse(&bytes)?;
    let w = reader.reconstruct()?;
    TensorFile::from_matrix(&w)
        .write(&args.out)
        .map_err(|e| CliError::Internal(format!("{}: {e}", args.out.display())))?;
    Ok(format!("decoded {} groups into a {}x{} tensor\n", reader.len(), w.nrows(), w.ncols()))
}

fn eval(args: &EvalArgs) -> Result<String, CliError> {
    let original = read_tensor(&args.original)?.to_matrix();
    let calib = read_tensor(&args.calib)?.to_matrix();
    let bytes = fs::read(&args.archive).map_err(|e| CliError::Data(format!("{}: {e}", args.archive.display())))?;
    let groups = read_archive(&bytes)?;
    let w_hat = glvq_core::pipeline::dequantize(&groups)?;
    let m = evaluate(&original, &w_hat, &calib, &groups)?;
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&m).map_err(|e| CliError::Internal(e.to_string()))?;
        write_output(path, format!("{json}\n").as_bytes())?;
    }
    let mut out = String::new();
    let _ = writeln!(out, "weight_mse: {:.9e}", m.weight_mse);
    let _ = writeln!(out, "output_mse: {:.9e}", m.output_mse);
    let _ = writeln!(out, "kl: {:.9e}", m.kl);
    let _ = writeln!(out, "bits_per_weight: {:.6}", m.bits_per_weight);
    let _ = writeln!(out, "overhead_pct: {:.3}", m.overhead_pct);
    let _ = writeln!(out, "actual_overhead_pct: {:.3}", m.actual_overhead_pct);
    let _ = writeln!(out, "archive_bytes: {}", bytes.len());
    Ok(out)
}

fn ablate(args: &AblateArgs) -> Result<String, CliError> {
    let preset: Preset = args.preset.parse()?;
    let source: Source = args.source.parse()?;
    let mut settings = AblationSettings::suite_defaults();
    settings.source = source;
    settings.seeds = args.seeds;
    settings.col_units = args.col_units;
    settings.run.dim = args.dim;
    settings.run.target_bits = args.bits;
    settings.run.group_width = args.group_width;
    settings.run.bit_alloc = !args.no_bit_alloc;
    settings.run.fit.max_iters = args.max_iters;
    let table = run_ablation(preset, &settings)?;
    let csv = table.to_csv();
    match &args.out {
        Some(path) => {
            write_output(path, csv.as_bytes())?;
            Ok(table.summary())
        }
        None => Ok(format!("{csv}\n{}", table.summary())),
    }
}

/// Formats the reference overhead table, one row per (d, m, n).
fn reference_table() -> Result<String, CliError> {
    let mut out = String::from("d,m,n,b=2,b=3,b=4\n");
    for (d, m, n, _) in REFERENCE_OVERHEAD_TABLE {
        let v: Vec<String> = [2u64, 3, 4]
            .iter()
            .map(|&b| overhead_report(d, m, n, b).map(|p| format!("{p:.2}")))
            .collect::<Result<_, _>>()?;
        let _ = writeln!(out, "{d},{m},{n},{}", v.join(","));
    }
    Ok(out)
}

fn overhead(args: &OverheadArgs) -> Result<String, CliError> {
    if args.reference_table {
        return reference_table();
    }
    let (Some(d), Some(m), Some(n), Some(b)) = (args.dim, args.rows, args.cols, args.bits) else {
        return Err(CliError::Usage("--dim, --rows, --cols and --bits are required".into()));
    };
    let p = overhead_report(d, m, n, b)?;
    Ok(format!("overhead: {p:.3}% (rounded {p:.2}%)\n"))
}

fn synth(args: &SynthArgs) -> Result<String, CliError> {
    let source: Source = args.source.parse()?;
    let spec = LayerSpec { source, rows: args.rows, cols: args.cols, calib_tokens: args.tokens };
    let layer = generate(&spec, args.seed);
    TensorFile::from_matrix(&layer.weights).write(&args.weights).map_err(CliError::from)?;
    TensorFile::from_matrix(&layer.calib).write(&args.calib).map_err(CliError::from)?;
    Ok(format!(
        "wrote {}x{} {source} weights and {}x{} calibration inputs\n",
        args.rows, args.cols, args.cols, args.tokens
    ))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Quantize(a) => quantize(a),
        Command::Dequantize(a) => dequantize(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Overhead(a) => overhead(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
