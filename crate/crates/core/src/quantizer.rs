//! Uniform sign-magnitude fixed-point quantization.
//!
//! A value `x` is mapped to an integer code in `[-(2^B - 1), 2^B - 1]` by
//! scaling with `(2^B - 1) / S`, rounding half away from zero and clipping.
//! The clip scale `S` is the largest representable magnitude. Calibration
//! picks `S` from sample data by max, percentile or MMSE search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest supported magnitude bitwidth. One bit would leave a Shift
/// extension slot without data bits.
pub const MIN_MAGNITUDE_BITS: u32 = 2;
/// Largest supported magnitude bitwidth. Keeps extended Shift codes
/// (`2B - 1` bits) and accumulator products comfortably inside `i64`.
pub const MAX_MAGNITUDE_BITS: u32 = 15;

/// Number of evenly spaced candidates in the MMSE clip search.
pub const MMSE_GRID_SIZE: usize = 512;

/// Bitwidth, clip scale and overwrite eligibility for one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub magnitude_bits: u32,
    pub clip_scale: f64,
    pub overwrite_threshold: f64,
}

impl QuantConfig {
    /// Config with the default overwrite threshold of `S / 4`.
    pub fn new(magnitude_bits: u32, clip_scale: f64) -> Result<Self> {
        Self::with_threshold(magnitude_bits, clip_scale, clip_scale / 4.0)
    }

    pub fn with_threshold(
        magnitude_bits: u32,
        clip_scale: f64,
        overwrite_threshold: f64,
    ) -> Result<Self> {
        let cfg = QuantConfig {
            magnitude_bits,
            clip_scale,
            overwrite_threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_MAGNITUDE_BITS..=MAX_MAGNITUDE_BITS).contains(&self.magnitude_bits) {
            return Err(Error::InvalidConfig(format!(
                "magnitude_bits must be in {MIN_MAGNITUDE_BITS}..={MAX_MAGNITUDE_BITS}, got {}",
                self.magnitude_bits
            )));
        }
        if !(self.clip_scale.is_finite() && self.clip_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "clip_scale must be positive and finite, got {}",
                self.clip_scale
            )));
        }
        if !(self.overwrite_threshold > 0.0 && self.overwrite_threshold <= self.clip_scale) {
            return Err(Error::InvalidConfig(format!(
                "overwrite_threshold must be in (0, clip_scale], got {}",
                self.overwrite_threshold
            )));
        }
        Ok(())
    }

    /// Largest magnitude code, `2^B - 1`.
    #[inline]
    pub fn max_code(&self) -> i64 {
        (1i64 << self.magnitude_bits) - 1
    }

    /// Real value of one code step, `S / (2^B - 1)`.
    #[inline]
    pub fn step(&self) -> f64 {
        self.clip_scale / self.max_code() as f64
    }

    /// `x` expressed in code units, before rounding or clipping.
    #[inline]
    pub fn to_code_units(&self, x: f64) -> f64 {
        x * self.max_code() as f64 / self.clip_scale
    }

    #[inline]
    pub fn quantize_scalar(&self, x: f64) -> i64 {
        let max = self.max_code();
        // f64::round is half away from zero.
        (self.to_code_units(x).round() as i64).clamp(-max, max)
    }

    #[inline]
    pub fn dequantize_scalar(&self, code: i64) -> f64 {
        code as f64 * self.clip_scale / self.max_code() as f64
    }
}

/// Integer codes plus the config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub codes: Vec<i64>,
    pub config: QuantConfig,
    pub shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn from_codes(codes: Vec<i64>, shape: Vec<usize>, config: QuantConfig) -> Result<Self> {
        config.validate()?;
        let expected: usize = shape.iter().product();
        if expected != codes.len() {
            return Err(Error::LengthMismatch {
                expected,
                actual: codes.len(),
            });
        }
        let max = config.max_code();
        if let Some(index) = codes.iter().position(|c| c.abs() > max) {
            return Err(Error::InvalidConfig(format!(
                "code {} at index {index} outside ±{max}",
                codes[index]
            )));
        }
        Ok(QuantizedTensor {
            codes,
            config,
            shape,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Quantize a flat tensor. `shape` defaults to `[x.len()]` via [`quantize`].
pub fn quantize_shaped(x: &[f64], shape: Vec<usize>, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    cfg.validate()?;
    let expected: usize = shape.iter().product();
    if expected != x.len() {
        return Err(Error::LengthMismatch {
            expected,
            actual: x.len(),
        });
    }
    let codes = x
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if value.is_finite() {
                Ok(cfg.quantize_scalar(value))
            } else {
                Err(Error::NonFinite { index, value })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedTensor {
        codes,
        config: *cfg,
        shape,
    })
}

pub fn quantize(x: &[f64], cfg: &QuantConfig) -> Result<QuantizedTensor> {
    quantize_shaped(x, vec![x.len()], cfg)
}

pub fn dequantize(q: &QuantizedTensor) -> Vec<f64> {
    q.codes
        .iter()
        .map(|&c| q.config.dequantize_scalar(c))
        .collect()
}

/// Clip threshold selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    Max,
    /// Nearest-rank percentile of `|x|`, `p` in `(0, 100]`.
    Percentile(f64),
    Mmse,
}

impl std::str::FromStr for CalibrationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "max" => Ok(CalibrationMethod::Max),
            "mmse" => Ok(CalibrationMethod::Mmse),
            _ => {
                let p = lower
                    .strip_prefix("percentile:")
                    .or_else(|| lower.strip_prefix('p'))
                    .and_then(|p| p.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!(
                            "unknown calibration method {s:?} (expected max, mmse or percentile:<p>)"
                        ))
                    })?;
                Ok(CalibrationMethod::Percentile(p))
            }
        }
    }
}

/// Nearest-rank percentile: the smallest sample such that at least `p`% of
/// the samples are less than or equal to it.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Calibration("empty sample".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidConfig(format!(
            "percentile must be in (0, 100], got {p}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((p * n as f64) / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Mean squared error of quantizing `samples` with clip scale `clip_scale`.
pub fn quantization_mse(samples: &[f64], magnitude_bits: u32, clip_scale: f64) -> f64 {
    let max = ((1i64 << magnitude_bits) - 1) as f64;
    let sum: f64 = samples
        .iter()
        .map(|&x| {
            let code = (x * max / clip_scale).round().clamp(-max, max);
            let err = x - code * clip_scale / max;
            err * err
        })
        .sum();
    sum / samples.len() as f64
}

/// Clip scales searched by MMSE calibration: `max|x| * k / 512`, `k = 1..=512`.
pub fn mmse_grid(max_abs: f64) -> impl Iterator<Item = f64> {
    (1..=MMSE_GRID_SIZE).map(move |k| max_abs * k as f64 / MMSE_GRID_SIZE as f64)
}

pub fn calibrate(
    samples: &[f64],
    magnitude_bits: u32,
    method: CalibrationMethod,
) -> Result<QuantConfig> {
    if samples.is_empty() {
        return Err(Error::Calibration("empty sample".into()));
    }
    if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index,
            value: samples[index],
        });
    }
    let abs: Vec<f64> = samples.iter().map(|v| v.abs()).collect();
    let max_abs = abs.iter().copied().fold(0.0, f64::max);
    if max_abs == 0.0 {
        return Err(Error::Calibration(
            "all samples are zero; clip scale would be 0".into(),
        ));
    }
    let clip_scale = match method {
        CalibrationMethod::Max => max_abs,
        CalibrationMethod::Percentile(p) => percentile(&abs, p)?,
        CalibrationMethod::Mmse => {
            let mut best = (f64::INFINITY, max_abs);
            for candidate in mmse_grid(max_abs) {
                let mse = quantization_mse(samples, magnitude_bits, candidate);
                // Strict comparison keeps the smaller S on ties.
                if mse < best.0 {
                    best = (mse, candidate);
                }
            }
            best.1
        }
    };
    if clip_scale <= 0.0 {
        return Err(Error::Calibration(format!(
            "{method:?} selected a zero clip scale"
        )));
    }
    QuantConfig::new(magnitude_bits, clip_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(bits: u32, s: f64) -> QuantConfig {
        QuantConfig::new(bits, s).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&[0.0], &cfg(4, 1.0)).unwrap().codes, vec![0]);
        assert_eq!(quantize(&[1.0], &cfg(4, 1.0)).unwrap().codes, vec![15]);
        assert_eq!(
            quantize(&[0.5, -2.0], &cfg(4, 1.0)).unwrap().codes,
            vec![8, -15]
        );
        assert_eq!(quantize(&[-0.5], &cfg(4, 1.0)).unwrap().codes, vec![-8]);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        let err = quantize(&[0.0, f64::NAN], &cfg(4, 1.0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
        let err = quantize(&[f64::INFINITY], &cfg(4, 1.0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 0, .. }));
    }

    #[test]
    fn dequantize_examples() {
        let q =
            |codes: Vec<i64>, s| QuantizedTensor::from_codes(codes, vec![1], cfg(4, s)).unwrap();
        assert_eq!(dequantize(&q(vec![0], 1.0)), vec![0.0]);
        assert_eq!(dequantize(&q(vec![15], 1.0)), vec![1.0]);
        assert!((dequantize(&q(vec![8], 2.0))[0] - 16.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(QuantConfig::new(1, 1.0).is_err());
        assert!(QuantConfig::new(16, 1.0).is_err());
        assert!(QuantConfig::new(4, 0.0).is_err());
        assert!(QuantConfig::new(4, -1.0).is_err());
        assert!(QuantConfig::new(4, f64::NAN).is_err());
        assert!(QuantConfig::with_threshold(4, 1.0, 1.5).is_err());
        assert!(QuantConfig::with_threshold(4, 1.0, 0.0).is_err());
        assert_eq!(cfg(4, 2.0).overwrite_threshold, 0.5);
    }

    #[test]
    fn calibrate_max_and_percentile() {
        assert_eq!(
            calibrate(&[-1.0, 1.0], 4, CalibrationMethod::Max)
                .unwrap()
                .clip_scale,
            1.0
        );
        let samples: Vec<f64> = (1..=100).map(|k| 0.1 * k as f64).collect();
        let s = calibrate(&samples, 4, CalibrationMethod::Percentile(90.0))
            .unwrap()
            .clip_scale;
        assert!((s - 9.0).abs() < 1e-12, "{s}");
        let c = calibrate(&samples, 4, CalibrationMethod::Percentile(100.0)).unwrap();
        assert!((c.clip_scale - 10.0).abs() < 1e-12);
        assert!((c.overwrite_threshold - c.clip_scale / 4.0).abs() < 1e-15);
    }

    #[test]
    fn calibrate_errors() {
        assert!(calibrate(&[], 4, CalibrationMethod::Max).is_err());
        assert!(calibrate(&[0.0, 0.0], 4, CalibrationMethod::Mmse).is_err());
        assert!(calibrate(&[1.0], 4, CalibrationMethod::Percentile(0.0)).is_err());
        assert!(calibrate(&[1.0], 4, CalibrationMethod::Percentile(101.0)).is_err());
    }

    #[test]
    fn calibration_method_parsing() {
        assert_eq!(
            "max".parse::<CalibrationMethod>().unwrap(),
            CalibrationMethod::Max
        );
        assert_eq!(
            "MMSE".parse::<CalibrationMethod>().unwrap(),
            CalibrationMethod::Mmse
        );
        assert_eq!(
            "percentile:99.9".parse::<CalibrationMethod>().unwrap(),
            CalibrationMethod::Percentile(99.9)
        );
        assert!("median".parse::<CalibrationMethod>().is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_error_bound(bits in 2u32..=8, s in 0.01f64..100.0, t in -2.0f64..2.0) {
            let c = cfg(bits, s);
            let x = t * s;
            let err = (c.dequantize_scalar(c.quantize_scalar(x)) - x).abs();
            if x.abs() <= s {
                prop_assert!(err <= 0.5 * c.step() * (1.0 + 1e-9));
            } else {
                prop_assert!(err <= (x.abs() - s) * (1.0 + 1e-9) + 1e-12);
            }
        }

        #[test]
        fn requantize_is_stable(bits in 2u32..=8, s in 0.01f64..100.0, xs in proptest::collection::vec(-3.0f64..3.0, 1..32)) {
            let c = cfg(bits, s);
            let x: Vec<f64> = xs.iter().map(|v| v * s).collect();
            let q = quantize(&x, &c).unwrap();
            let q2 = quantize(&dequantize(&q), &c).unwrap();
            prop_assert_eq!(q.codes, q2.codes);
        }

        #[test]
        fn monotone_within_range(bits in 2u32..=8, s in 0.01f64..100.0, a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let c = cfg(bits, s);
            let (lo, hi) = if a <= b { (a * s, b * s) } else { (b * s, a * s) };
            prop_assert!(c.quantize_scalar(lo) <= c.quantize_scalar(hi));
        }
    }
}
