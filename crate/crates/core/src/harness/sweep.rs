//! Clip-threshold sweeps and reordering experiments.
//!
//! Every sample row of a `[samples x channels]` tensor is one activation
//! vector over channel positions. For each (variant, threshold) point the
//! rows are encoded, decoded and compared with the original values.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{encode, PairKind, Variant};
use crate::error::{Error, Result};
use crate::quantizer::{calibrate, CalibrationMethod, QuantConfig};
use crate::reorder::{coverage, profile, reorder_plan, Permutation};

/// Clip threshold as a fraction of the largest sampled magnitude, or MMSE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Threshold {
    Fraction(f64),
    Mmse,
}

impl Threshold {
    /// `0.20, 0.25, ..., 0.90`.
    pub fn default_grid() -> Vec<Threshold> {
        (4..=18)
            .map(|k| Threshold::Fraction(k as f64 * 0.05))
            .collect()
    }

    pub fn clip_scale(&self, samples: &[f64], bits: u32) -> Result<QuantConfig> {
        match *self {
            Threshold::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "threshold fraction must be in (0, 1], got {f}"
                    )));
                }
                let max = calibrate(samples, bits, CalibrationMethod::Max)?.clip_scale;
                QuantConfig::new(bits, f * max)
            }
            Threshold::Mmse => calibrate(samples, bits, CalibrationMethod::Mmse),
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Fraction(x) => write!(f, "{x:.2}"),
            Threshold::Mmse => f.write_str("mmse"),
        }
    }
}

impl FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mmse" => Ok(Threshold::Mmse),
            "max" => Ok(Threshold::Fraction(1.0)),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|f| *f > 0.0 && *f <= 1.0)
                .map(Threshold::Fraction)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "threshold {s:?} is not a fraction in (0, 1], max or mmse"
                    ))
                }),
        }
    }
}

/// One sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub variant: Variant,
    pub bits: u32,
    pub threshold: String,
    pub clip_scale: f64,
    pub mse: f64,
    /// Outlier coverage; 0 with `coverage_defined = false` for variants
    /// that never overwrite outliers.
    pub coverage: f64,
    pub coverage_defined: bool,
    pub outlier_fraction: f64,
    pub overwrite_rate: f64,
    pub zero_fraction: f64,
    pub zero_reuse_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub records: Vec<SweepRecord>,
}

impl SweepReport {
    pub fn get(&self, variant: Variant, threshold: &str) -> Option<&SweepRecord> {
        self.records
            .iter()
            .find(|r| r.variant == variant && r.threshold == threshold)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Encode every row and gather error and overwrite statistics.
pub fn evaluate(
    data: &[f64],
    channels: usize,
    cfg: &QuantConfig,
    variant: Variant,
) -> Result<SweepRecord> {
    if channels == 0 || data.is_empty() || !data.len().is_multiple_of(channels) {
        return Err(Error::InvalidConfig(format!(
            "{} values do not form rows of {channels} channels",
            data.len()
        )));
    }
    let mut sse = 0.0;
    let (mut outliers, mut covered, mut zeros, mut reused) = (0u64, 0u64, 0u64, 0u64);
    for row in data.chunks_exact(channels) {
        let v = encode(row, cfg, variant)?;
        let decoded = crate::codec::decode(&v)?;
        sse += row
            .iter()
            .zip(&decoded)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
        outliers += row.iter().filter(|x| x.abs() > cfg.clip_scale).count() as u64;
        zeros += row.iter().filter(|&&x| cfg.quantize_scalar(x) == 0).count() as u64;
        for (_, kind) in v.pairs()? {
            match kind {
                PairKind::Split | PairKind::ShiftMsb => covered += 1,
                PairKind::ShiftLsb => reused += 1,
            }
        }
    }
    let n = data.len() as f64;
    let coverage_defined = variant.outlier_mode() != crate::codec::OutlierMode::None;
    let coverage = if !coverage_defined {
        0.0
    } else if outliers == 0 {
        1.0
    } else {
        covered as f64 / outliers as f64
    };
    Ok(SweepRecord {
        variant,
        bits: cfg.magnitude_bits,
        threshold: String::new(),
        clip_scale: cfg.clip_scale,
        mse: sse / n,
        coverage,
        coverage_defined,
        outlier_fraction: outliers as f64 / n,
        overwrite_rate: covered as f64 / n,
        zero_fraction: zeros as f64 / n,
        zero_reuse_rate: reused as f64 / n,
    })
}

/// Evaluate every (threshold, variant) point; points run in parallel and the
/// report keeps threshold-major, variant-minor order.
pub fn sweep(
    data: &[f64],
    channels: usize,
    bits: u32,
    variants: &[Variant],
    thresholds: &[Threshold],
) -> Result<SweepReport> {
    if variants.is_empty() {
        return Err(Error::InvalidConfig("no variants to sweep".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::InvalidConfig("no thresholds to sweep".into()));
    }
    let configs = thresholds
        .iter()
        .map(|t| Ok((t.to_string(), t.clip_scale(data, bits)?)))
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<(&(String, QuantConfig), Variant)> = configs
        .iter()
        .flat_map(|c| variants.iter().map(move |&v| (c, v)))
        .collect();
    let records = points
        .par_iter()
        .map(|((label, cfg), variant)| {
            let mut r = evaluate(data, channels, cfg, *variant)?;
            r.threshold = label.clone();
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { records })
}

/// Outcome of profiling a layer and reordering its channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReorderReport {
    pub permutation: Permutation,
    pub clip_scale: f64,
    pub outliers: u64,
    pub coverage_before: f64,
    pub coverage_after: f64,
}

impl ReorderReport {
    pub fn delta(&self) -> f64 {
        self.coverage_after - self.coverage_before
    }
}

/// Profile the first `profile_rows` rows, plan a reorder, and measure
/// outlier coverage over all rows before and after it. The clip scale is
/// MMSE-calibrated over the whole layer.
pub fn reorder_experiment(
    data: &[f64],
    channels: usize,
    bits: u32,
    variant: Variant,
    profile_rows: usize,
) -> Result<ReorderReport> {
    let rows = data.len() / channels.max(1);
    let take = profile_rows.clamp(1, rows.max(1)) * channels;
    let prof = profile(&data[..take.min(data.len())], channels)?;
    let permutation = reorder_plan(&prof)?;
    let cfg = calibrate(data, bits, CalibrationMethod::Mmse)?;
    let before = coverage(data, channels, &cfg, variant, None)?;
    let after = coverage(data, channels, &cfg, variant, Some(&permutation))?;
    Ok(ReorderReport {
        permutation,
        clip_scale: cfg.clip_scale,
        outliers: before.outliers,
        coverage_before: before.fraction(),
        coverage_after: after.fraction(),
    })
}
