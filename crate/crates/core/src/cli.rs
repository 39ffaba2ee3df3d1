//! `overq` command-line interface.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 runtime failure
//! (I/O, simulator mismatch). Settings resolve as flag, then `--config`
//! JSON file, then built-in default.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::codec::Variant;
use crate::error::{Error, Result};
use crate::harness::{
    gen_activations, gen_two_scale_layer, read_tensor, reorder_experiment, simcheck, sweep,
    write_tensor, Distribution, Tensor, Threshold,
};
use crate::quantizer::{calibrate, dequantize, quantize, CalibrationMethod};
use crate::reorder::{reorder_plan, ChannelProfile};
use crate::simarray::{load_weights, run_matmul, write_trace_csv, ArrayConfig, PeVariant};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "overq", version, about = "Overwrite quantization experiments")]
pub struct Cli {
    /// JSON file with default settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a tensor file and write the dequantized tensor plus stats.
    Quantize(QuantizeArgs),
    /// Sweep clip thresholds and variants, emitting a CSV report.
    Sweep(SweepArgs),
    /// Check the array simulator against the reference dot product.
    Simcheck(SimcheckArgs),
    /// Compute a channel reorder plan and its coverage effect.
    Reorder(ReorderArgs),
    /// Dump a per-cycle CSV trace of a small matmul.
    Trace(TraceArgs),
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stats JSON path; stdout when omitted.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub bits: Option<u32>,
    /// max, mmse or percentile:<p>.
    #[arg(long)]
    pub calib: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Tensor file `[samples x channels]`; generated data when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub bits: Option<u32>,
    /// Comma-separated variants (baseline, split, shift, zr, shift-zr).
    #[arg(long)]
    pub variants: Option<String>,
    /// Comma-separated clip fractions, `max` or `mmse`; `default` is 0.20..0.90.
    #[arg(long)]
    pub thresholds: Option<String>,
    #[arg(long)]
    pub dist: Option<String>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimcheckArgs {
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub bits: Option<u32>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Counterexample dump path on mismatch; stderr when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReorderArgs {
    /// Channel profile JSON; plan only, no coverage.
    #[arg(long, conflicts_with = "input")]
    pub profile: Option<PathBuf>,
    /// Tensor file `[samples x channels]`; generated two-scale layer when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub bits: Option<u32>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Scale factor of the high half of generated channels.
    #[arg(long)]
    pub high_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub bits: Option<u32>,
    #[arg(long)]
    pub variant: Option<String>,
    /// Number of vectors to stream.
    #[arg(long)]
    pub vectors: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Settings readable from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub bits: Option<u32>,
    pub variant: Option<String>,
    pub variants: Option<String>,
    pub thresholds: Option<String>,
    pub calib: Option<String>,
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub trials: Option<usize>,
    pub vectors: Option<usize>,
    pub channels: Option<usize>,
    pub samples: Option<usize>,
    pub dist: Option<String>,
    pub high_scale: Option<f64>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub subcommand: &'static str,
    pub seed: u64,
    pub bits: u32,
    pub variants: Vec<Variant>,
    pub thresholds: Vec<Threshold>,
    pub calib: CalibrationMethod,
    pub rows: usize,
    pub cols: usize,
    pub trials: usize,
    pub vectors: usize,
    pub channels: usize,
    pub samples: usize,
    pub dist: Distribution,
    pub high_scale: f64,
}

pub const DEFAULT_SEED: u64 = 0x0_5EED;
pub const DEFAULT_BITS: u32 = 4;
pub const DEFAULT_CHANNELS: usize = 64;
/// Profiling-sized default: 500 vectors.
pub const DEFAULT_SAMPLES: usize = 500;

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn parse_list<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect()
}

fn parse_thresholds(s: &str) -> Result<Vec<Threshold>> {
    if s.trim() == "default" {
        Ok(Threshold::default_grid())
    } else {
        parse_list(s)
    }
}

fn nonempty<T>(items: Vec<T>, what: &str) -> Result<Vec<T>> {
    if items.is_empty() {
        Err(Error::InvalidConfig(format!("{what} list is empty")))
    } else {
        Ok(items)
    }
}

impl RunConfig {
    fn defaults(subcommand: &'static str, file: &ConfigFile) -> Result<RunConfig> {
        Ok(RunConfig {
            subcommand,
            seed: pick(None, file.seed, DEFAULT_SEED),
            bits: pick(None, file.bits, DEFAULT_BITS),
            variants: match &file.variants {
                Some(v) => parse_list(v)?,
                None => vec![
                    Variant::Baseline,
                    Variant::Shift,
                    Variant::ZeroReuse,
                    Variant::ShiftWithZeroReuse,
                ],
            },
            thresholds: match &file.thresholds {
                Some(t) => parse_thresholds(t)?,
                None => Threshold::default_grid(),
            },
            calib: match &file.calib {
                Some(c) => c.parse()?,
                None => CalibrationMethod::Mmse,
            },
            rows: pick(None, file.rows, 8),
            cols: pick(None, file.cols, 8),
            trials: pick(None, file.trials, 10_000),
            vectors: pick(None, file.vectors, 4),
            channels: pick(None, file.channels, DEFAULT_CHANNELS),
            samples: pick(None, file.samples, DEFAULT_SAMPLES),
            dist: match &file.dist {
                Some(d) => d.parse()?,
                None => Distribution::ReluNormal { sigma: 1.0 },
            },
            high_scale: pick(None, file.high_scale, 10.0),
        })
    }

    fn set_variant(
        &mut self,
        flag: &Option<String>,
        file: &ConfigFile,
        default: Variant,
    ) -> Result<()> {
        self.variants = vec![match flag.as_ref().or(file.variant.as_ref()) {
            Some(v) => v.parse()?,
            None => default,
        }];
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        self.variants[0]
    }

    /// Resolve flags over the config file over defaults.
    pub fn resolve(command: &Command, file: &ConfigFile) -> Result<RunConfig> {
        let rc = match command {
            Command::Quantize(a) => {
                let mut rc = Self::defaults("quantize", file)?;
                rc.bits = pick(a.bits, file.bits, DEFAULT_BITS);
                if let Some(c) = &a.calib {
                    rc.calib = c.parse()?;
                }
                rc
            }
            Command::Sweep(a) => {
                let mut rc = Self::defaults("sweep", file)?;
                rc.bits = pick(a.bits, file.bits, DEFAULT_BITS);
                rc.seed = pick(a.seed, file.seed, DEFAULT_SEED);
                rc.channels = pick(a.channels, file.channels, DEFAULT_CHANNELS);
                rc.samples = pick(a.samples, file.samples, DEFAULT_SAMPLES);
                if let Some(v) = &a.variants {
                    rc.variants = parse_list(v)?;
                }
                if let Some(t) = &a.thresholds {
                    rc.thresholds = parse_thresholds(t)?;
                }
                if let Some(d) = &a.dist {
                    rc.dist = d.parse()?;
                }
                rc.variants = nonempty(rc.variants, "variant")?;
                rc.thresholds = nonempty(rc.thresholds, "threshold")?;
                rc
            }
            Command::Simcheck(a) => {
                let mut rc = Self::defaults("simcheck", file)?;
                rc.rows = pick(a.rows, file.rows, 8);
                rc.cols = pick(a.cols, file.cols, 8);
                rc.bits = pick(a.bits, file.bits, DEFAULT_BITS);
                rc.trials = pick(a.trials, file.trials, 10_000);
                rc.seed = pick(a.seed, file.seed, DEFAULT_SEED);
                rc.set_variant(&a.variant, file, Variant::ShiftWithZeroReuse)?;
                rc
            }
            Command::Reorder(a) => {
                let mut rc = Self::defaults("reorder", file)?;
                rc.bits = pick(a.bits, file.bits, DEFAULT_BITS);
                rc.seed = pick(a.seed, file.seed, DEFAULT_SEED);
                rc.channels = pick(a.channels, file.channels, 32);
                rc.samples = pick(a.samples, file.samples, DEFAULT_SAMPLES);
                rc.high_scale = pick(a.high_scale, file.high_scale, 10.0);
                rc.set_variant(&a.variant, file, Variant::Shift)?;
                rc
            }
            Command::Trace(a) => {
                let mut rc = Self::defaults("trace", file)?;
                rc.rows = pick(a.rows, file.rows, 4);
                rc.cols = pick(a.cols, file.cols, 4);
                rc.bits = pick(a.bits, file.bits, DEFAULT_BITS);
                rc.vectors = pick(a.vectors, file.vectors, 4);
                rc.seed = pick(a.seed, file.seed, DEFAULT_SEED);
                rc.set_variant(&a.variant, file, Variant::ShiftWithZeroReuse)?;
                rc
            }
        };
        crate::quantizer::QuantConfig::new(rc.bits, 1.0)?;
        Ok(rc)
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    let mut w = output(path)?;
    writeln!(w, "{text}").map_err(|e| Error::io(path.unwrap_or(Path::new("<stdout>")), e))?;
    w.flush()
        .map_err(|e| Error::io(path.unwrap_or(Path::new("<stdout>")), e))
}

fn tensor_rows(t: &Tensor) -> Result<usize> {
    if t.shape.len() < 2 || t.channels() == 0 {
        return Err(Error::InvalidConfig(format!(
            "expected a [samples x channels] tensor, got shape {:?}",
            t.shape
        )));
    }
    Ok(t.channels())
}

#[derive(Debug, Serialize)]
struct QuantizeStats {
    mse: f64,
    clip_scale: f64,
    bits: u32,
    elements: usize,
}

fn cmd_quantize(a: &QuantizeArgs, rc: &RunConfig) -> Result<u8> {
    let t = read_tensor(&a.input)?;
    let x = t.to_f64();
    let (cfg, mse, recon) = match calibrate(&x, rc.bits, rc.calib) {
        Ok(cfg) => {
            let recon = dequantize(&quantize(&x, &cfg)?);
            let mse = x
                .iter()
                .zip(&recon)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / x.len() as f64;
            (cfg, mse, recon)
        }
        // An all-zero tensor reconstructs exactly at any scale.
        Err(Error::Calibration(_)) if !x.is_empty() && x.iter().all(|v| *v == 0.0) => (
            crate::quantizer::QuantConfig::new(rc.bits, 1.0)?,
            0.0,
            x.clone(),
        ),
        Err(e) => return Err(e),
    };
    write_tensor(&a.out, &Tensor::from_f64(t.shape.clone(), &recon)?)?;
    let stats = QuantizeStats {
        mse,
        clip_scale: cfg.clip_scale,
        bits: cfg.magnitude_bits,
        elements: x.len(),
    };
    write_text(a.stats.as_deref(), &serde_json::to_string_pretty(&stats)?)?;
    Ok(EXIT_OK)
}

fn load_or_generate(input: Option<&Path>, rc: &RunConfig) -> Result<Tensor> {
    match input {
        Some(p) => read_tensor(p),
        None => gen_activations(&rc.dist, rc.channels, rc.samples, rc.seed),
    }
}

fn cmd_sweep(a: &SweepArgs, rc: &RunConfig) -> Result<u8> {
    let t = load_or_generate(a.input.as_deref(), rc)?;
    let channels = tensor_rows(&t)?;
    let report = sweep(&t.to_f64(), channels, rc.bits, &rc.variants, &rc.thresholds)?;
    let out = output(a.out.as_deref())?;
    report.write_csv(out)?;
    if let Some(j) = &a.json {
        fs::write(j, report.to_json()?).map_err(|e| Error::io(j, e))?;
    }
    Ok(EXIT_OK)
}

fn cmd_simcheck(a: &SimcheckArgs, rc: &RunConfig) -> Result<u8> {
    let outcome =
        simcheck::check_equivalence(rc.rows, rc.cols, rc.bits, rc.variant(), rc.trials, rc.seed)?;
    println!(
        "simcheck {}x{} B={} {}: {} trials ({} flagged) {}",
        rc.rows,
        rc.cols,
        rc.bits,
        rc.variant(),
        outcome.trials,
        outcome.flagged_vectors,
        if outcome.passed() { "PASS" } else { "FAIL" }
    );
    if let Some(c) = &outcome.mismatch {
        let dump = serde_json::to_string_pretty(c)?;
        match &a.out {
            Some(p) => fs::write(p, dump).map_err(|e| Error::io(p, e))?,
            None => eprintln!("{dump}"),
        }
        return Ok(EXIT_RUNTIME);
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct ReorderOutput {
    permutation: crate::reorder::Permutation,
    #[serde(skip_serializing_if = "Option::is_none")]
    clip_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coverage_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coverage_after: Option<f64>,
}

fn cmd_reorder(a: &ReorderArgs, rc: &RunConfig) -> Result<u8> {
    let out = if let Some(p) = &a.profile {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let profile: ChannelProfile = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
        ReorderOutput {
            permutation: reorder_plan(&profile)?,
            clip_scale: None,
            coverage_before: None,
            coverage_after: None,
        }
    } else {
        let t = match &a.input {
            Some(p) => read_tensor(p)?,
            None => gen_two_scale_layer(
                &rc.dist,
                rc.channels,
                rc.samples,
                rc.channels / 2,
                rc.high_scale,
                rc.seed,
            )?,
        };
        let channels = tensor_rows(&t)?;
        let x = t.to_f64();
        let r = reorder_experiment(&x, channels, rc.bits, rc.variant(), x.len() / channels)?;
        ReorderOutput {
            permutation: r.permutation,
            clip_scale: Some(r.clip_scale),
            coverage_before: Some(r.coverage_before),
            coverage_after: Some(r.coverage_after),
        }
    };
    write_text(a.out.as_deref(), &serde_json::to_string_pretty(&out)?)?;
    Ok(EXIT_OK)
}

fn cmd_trace(a: &TraceArgs, rc: &RunConfig) -> Result<u8> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rc.seed);
    let acfg = crate::quantizer::QuantConfig::new(rc.bits, 1.0)?;
    let variant = rc.variant();
    let w = simcheck::random_weights(&mut rng, rc.rows, rc.cols);
    let vs = (0..rc.vectors)
        .map(|_| {
            let x: Vec<f64> = (0..rc.rows)
                .map(|_| simcheck::random_activation(&mut rng))
                .collect();
            crate::codec::encode(&x, &acfg, variant)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut state = load_weights(
        ArrayConfig::new(rc.rows, rc.cols, PeVariant::for_variant(variant), rc.bits)?,
        &w,
    )?;
    state.enable_trace();
    run_matmul(&mut state, &vs)?;
    write_trace_csv(&state.take_trace(), output(a.out.as_deref())?)?;
    Ok(EXIT_OK)
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io { .. }
        | Error::Header(_)
        | Error::AccumulatorOverflow { .. }
        | Error::Csv(_)
        | Error::Json(_) => EXIT_RUNTIME,
        _ => EXIT_VALIDATION,
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<u8> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let rc = RunConfig::resolve(&cli.command, &file)?;
    match &cli.command {
        Command::Quantize(a) => cmd_quantize(a, &rc),
        Command::Sweep(a) => cmd_sweep(a, &rc),
        Command::Simcheck(a) => cmd_simcheck(a, &rc),
        Command::Reorder(a) => cmd_reorder(a, &rc),
        Command::Trace(a) => cmd_trace(a, &rc),
    }
}

pub fn main_exit() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
