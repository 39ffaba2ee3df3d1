//! Overwrite encoding of activation vectors.
//!
//! Each activation occupies one sign-magnitude slot plus a flag bit. An
//! outlier (`|x_i| > S`) may take over its right neighbour's slot when that
//! neighbour is below the overwrite threshold:
//!
//! * **Split** stores `Q(x_i / 2)` in both slots, doubling the range. The
//!   right PE multiplies with the left weight, so the pair sums to
//!   `2 Q(x_i / 2) w_i`.
//! * **Shift** stores the low `B` bits of the extended code in the left slot
//!   and the next `B - 1` bits in the right slot, marked with an MSB shift
//!   direction bit.
//!
//! With zero-reuse, a non-outlier whose right neighbour quantizes to zero
//! stores `B - 1` extra fractional bits there with an LSB direction bit.
//!
//! Pairs are formed greedily left to right and only rightwards. Both members
//! of a pair carry flag 1; the pair structure is recovered by scanning flags
//! from the left. An overwrite is committed only if it strictly lowers the
//! pair's squared error compared with plain quantization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{QuantConfig, QuantizedTensor};

/// Encoding variant. `ZeroReuse` is the Shift datapath with only zero-reuse
/// enabled; it exists to separate the two effects in sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "split")]
    Split,
    #[serde(rename = "shift")]
    Shift,
    #[serde(rename = "zr")]
    ZeroReuse,
    #[serde(rename = "shift-zr")]
    ShiftWithZeroReuse,
}

/// How an outlier uses its neighbour's slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlierMode {
    None,
    Split,
    Shift,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Split,
        Variant::Shift,
        Variant::ZeroReuse,
        Variant::ShiftWithZeroReuse,
    ];

    pub fn from_parts(outliers: OutlierMode, zero_reuse: bool) -> Result<Variant> {
        match (outliers, zero_reuse) {
            (OutlierMode::None, false) => Ok(Variant::Baseline),
            (OutlierMode::None, true) => Ok(Variant::ZeroReuse),
            (OutlierMode::Split, false) => Ok(Variant::Split),
            (OutlierMode::Split, true) => Err(Error::Unsupported(
                "zero-reuse needs a shift direction bit and is not available with Split".into(),
            )),
            (OutlierMode::Shift, false) => Ok(Variant::Shift),
            (OutlierMode::Shift, true) => Ok(Variant::ShiftWithZeroReuse),
        }
    }

    pub fn outlier_mode(self) -> OutlierMode {
        match self {
            Variant::Baseline | Variant::ZeroReuse => OutlierMode::None,
            Variant::Split => OutlierMode::Split,
            Variant::Shift | Variant::ShiftWithZeroReuse => OutlierMode::Shift,
        }
    }

    pub fn zero_reuse(self) -> bool {
        matches!(self, Variant::ZeroReuse | Variant::ShiftWithZeroReuse)
    }

    /// True when pairs use extension slots with a shift direction bit.
    pub fn uses_shift_slots(self) -> bool {
        matches!(
            self,
            Variant::Shift | Variant::ZeroReuse | Variant::ShiftWithZeroReuse
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Split => "split",
            Variant::Shift => "shift",
            Variant::ZeroReuse => "zr",
            Variant::ShiftWithZeroReuse => "shift-zr",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(Variant::Baseline),
            "split" => Ok(Variant::Split),
            "shift" | "ol" => Ok(Variant::Shift),
            "zr" | "zero-reuse" => Ok(Variant::ZeroReuse),
            "shift-zr" | "ol+zr" | "shift-zero-reuse" => Ok(Variant::ShiftWithZeroReuse),
            "split-zr" => Variant::from_parts(OutlierMode::Split, true),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant {other:?} (expected baseline, split, shift, zr or shift-zr)"
            ))),
        }
    }
}

/// Meaning of the extension slot of a Shift pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftDirection {
    /// Data bits sit above the regular slot: positions `2^(2B-2)..2^B`.
    Msb,
    /// Data bits sit below the regular slot: `B - 1` fractional positions.
    Lsb,
}

/// One hardware slot: a sign bit and a `B`-bit magnitude field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Slot {
    pub negative: bool,
    pub magnitude: u32,
}

impl Slot {
    pub fn from_code(code: i64) -> Slot {
        Slot {
            negative: code < 0,
            magnitude: code.unsigned_abs() as u32,
        }
    }

    /// Extension slot of a Shift pair. The direction bit is the top bit of the
    /// magnitude field (0 = MSB, 1 = LSB); `data` fills the low `B - 1` bits.
    pub fn extension(negative: bool, direction: ShiftDirection, data: u32, bits: u32) -> Slot {
        let dir = match direction {
            ShiftDirection::Msb => 0,
            ShiftDirection::Lsb => 1,
        };
        Slot {
            negative,
            magnitude: (dir << (bits - 1)) | (data & data_mask(bits)),
        }
    }

    /// Signed integer view of a regular slot.
    pub fn code(&self) -> i64 {
        let m = self.magnitude as i64;
        if self.negative {
            -m
        } else {
            m
        }
    }

    pub fn direction(&self, bits: u32) -> ShiftDirection {
        if (self.magnitude >> (bits - 1)) & 1 == 1 {
            ShiftDirection::Lsb
        } else {
            ShiftDirection::Msb
        }
    }

    /// The `B - 1` data bits of an extension slot.
    pub fn extension_data(&self, bits: u32) -> u32 {
        self.magnitude & data_mask(bits)
    }
}

#[inline]
fn data_mask(bits: u32) -> u32 {
    (1u32 << (bits - 1)) - 1
}

/// Position of a slot within the pair structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotRole {
    Regular,
    PairLeft,
    PairRight,
}

/// Kind of a committed overwrite pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    Split,
    ShiftMsb,
    ShiftLsb,
}

impl PairKind {
    pub fn is_outlier(self) -> bool {
        matches!(self, PairKind::Split | PairKind::ShiftMsb)
    }
}

/// An overwrite-encoded activation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedVector {
    pub slots: Vec<Slot>,
    pub flags: Vec<bool>,
    pub variant: Variant,
    pub config: QuantConfig,
}

/// A decoded value with its exact fixed-point code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedValue {
    pub value: f64,
    /// Effective code scaled by `2^frac_bits`; exact.
    pub fixed_code: i64,
    pub frac_bits: u32,
}

impl DecodedValue {
    /// Effective code in units of `S / (2^B - 1)`.
    pub fn effective_code(&self) -> f64 {
        self.fixed_code as f64 / (1i64 << self.frac_bits) as f64
    }
}

/// Fractional bits carried by accumulators and fixed-point codes, `B - 1`.
#[inline]
pub fn frac_bits(cfg: &QuantConfig) -> u32 {
    cfg.magnitude_bits - 1
}

/// Largest extended code representable by a Shift MSB pair, `2^(2B-1) - 1`.
/// Real value of a fixed-point code scaled by `2^(B-1)`. Encode and decode
/// both go through here so their floating-point results agree exactly.
#[inline]
pub fn fixed_to_value(fixed: i64, cfg: &QuantConfig) -> f64 {
    fixed as f64 * (cfg.step() / (1i64 << frac_bits(cfg)) as f64)
}

#[inline]
pub fn shift_max_code(cfg: &QuantConfig) -> i64 {
    (1i64 << (2 * cfg.magnitude_bits - 1)) - 1
}

struct Candidate {
    left: Slot,
    right: Slot,
    /// Decoded value of the left member, in real units.
    value: f64,
}

fn split_candidate(x: f64, cfg: &QuantConfig) -> Candidate {
    let code = cfg.quantize_scalar(x / 2.0);
    let slot = Slot::from_code(code);
    Candidate {
        left: slot,
        right: slot,
        value: fixed_to_value((2 * code) << frac_bits(cfg), cfg),
    }
}

fn shift_msb_candidate(x: f64, cfg: &QuantConfig) -> Candidate {
    let bits = cfg.magnitude_bits;
    let r = (cfg.to_code_units(x.abs()).round() as i64).clamp(0, shift_max_code(cfg));
    let low = (r & cfg.max_code()) as u32;
    let ext = (r >> bits) as u32;
    let negative = x < 0.0;
    let signed = if negative { -r } else { r };
    Candidate {
        left: Slot {
            negative,
            magnitude: low,
        },
        right: Slot::extension(negative, ShiftDirection::Msb, ext, bits),
        value: fixed_to_value(signed << frac_bits(cfg), cfg),
    }
}

/// Returns `None` when the extra fractional bits would all be zero.
fn zero_reuse_candidate(x: f64, cfg: &QuantConfig) -> Option<Candidate> {
    let bits = cfg.magnitude_bits;
    let f = frac_bits(cfg);
    let fine = ((cfg.to_code_units(x.abs()) * (1i64 << f) as f64).round() as i64)
        .clamp(0, cfg.max_code() << f);
    let frac = (fine & ((1i64 << f) - 1)) as u32;
    if frac == 0 {
        return None;
    }
    let negative = x < 0.0;
    let signed = if negative { -fine } else { fine };
    Some(Candidate {
        left: Slot {
            negative,
            magnitude: (fine >> f) as u32,
        },
        right: Slot::extension(negative, ShiftDirection::Lsb, frac, bits),
        value: fixed_to_value(signed, cfg),
    })
}

#[inline]
fn sq(v: f64) -> f64 {
    v * v
}

/// Encode `x` under `variant`.
pub fn encode(x: &[f64], cfg: &QuantConfig, variant: Variant) -> Result<EncodedVector> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::InvalidConfig("cannot encode an empty vector".into()));
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index,
            value: x[index],
        });
    }

    let n = x.len();
    let codes: Vec<i64> = x.iter().map(|&v| cfg.quantize_scalar(v)).collect();
    let base_err: Vec<f64> = x
        .iter()
        .zip(&codes)
        .map(|(&v, &c)| sq(v - fixed_to_value(c << frac_bits(cfg), cfg)))
        .collect();
    let mut slots: Vec<Slot> = codes.iter().map(|&c| Slot::from_code(c)).collect();
    let mut flags = vec![false; n];

    let s = cfg.clip_scale;
    let mut i = 0;
    while i + 1 < n {
        let (xi, xj) = (x[i], x[i + 1]);
        let candidate = if xi.abs() > s {
            if xj.abs() < cfg.overwrite_threshold {
                match variant.outlier_mode() {
                    OutlierMode::None => None,
                    OutlierMode::Split => Some(split_candidate(xi, cfg)),
                    OutlierMode::Shift => Some(shift_msb_candidate(xi, cfg)),
                }
            } else {
                None
            }
        } else if variant.zero_reuse() && codes[i + 1] == 0 {
            zero_reuse_candidate(xi, cfg)
        } else {
            None
        };

        if let Some(c) = candidate {
            let pair_err = sq(xi - c.value) + sq(xj);
            if pair_err < base_err[i] + base_err[i + 1] {
                slots[i] = c.left;
                slots[i + 1] = c.right;
                flags[i] = true;
                flags[i + 1] = true;
                i += 2;
                continue;
            }
        }
        i += 1;
    }

    Ok(EncodedVector {
        slots,
        flags,
        variant,
        config: *cfg,
    })
}

impl EncodedVector {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn bits(&self) -> u32 {
        self.config.magnitude_bits
    }

    /// Plain quantization of already-computed codes, all flags clear.
    pub fn from_codes(codes: &[i64], cfg: &QuantConfig, variant: Variant) -> Result<EncodedVector> {
        let v = EncodedVector {
            slots: codes.iter().map(|&c| Slot::from_code(c)).collect(),
            flags: vec![false; codes.len()],
            variant,
            config: *cfg,
        };
        v.roles()?;
        Ok(v)
    }

    /// Resolve the pair structure and check every encoding invariant.
    pub fn roles(&self) -> Result<Vec<SlotRole>> {
        self.config.validate()?;
        let n = self.slots.len();
        if self.flags.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: self.flags.len(),
            });
        }
        let bits = self.bits();
        let limit = 1u32 << bits;
        let malformed = |index: usize, reason: &str| Error::MalformedEncoding {
            index,
            reason: reason.to_string(),
        };
        if let Some(index) = self.slots.iter().position(|s| s.magnitude >= limit) {
            return Err(malformed(index, "magnitude does not fit in B bits"));
        }

        let mut roles = vec![SlotRole::Regular; n];
        let mut i = 0;
        while i < n {
            if !self.flags[i] {
                i += 1;
                continue;
            }
            if i + 1 >= n || !self.flags[i + 1] {
                return Err(malformed(i, "flagged slot without a flagged right partner"));
            }
            self.pair_kind_unchecked(i)
                .ok_or_else(|| malformed(i, "pair not permitted by variant"))?;
            let (left, right) = (self.slots[i], self.slots[i + 1]);
            match self.variant.outlier_mode() {
                OutlierMode::Split if left != right => {
                    return Err(malformed(i, "split pair slots differ"));
                }
                _ if self.variant.uses_shift_slots() && right.negative != left.negative => {
                    return Err(malformed(i + 1, "extension sign differs from its outlier"));
                }
                _ => {}
            }
            roles[i] = SlotRole::PairLeft;
            roles[i + 1] = SlotRole::PairRight;
            i += 2;
        }
        Ok(roles)
    }

    fn pair_kind_unchecked(&self, left: usize) -> Option<PairKind> {
        let bits = self.bits();
        match self.variant {
            Variant::Baseline => None,
            Variant::Split => Some(PairKind::Split),
            _ => match self.slots[left + 1].direction(bits) {
                ShiftDirection::Msb if self.variant.outlier_mode() == OutlierMode::Shift => {
                    Some(PairKind::ShiftMsb)
                }
                ShiftDirection::Lsb if self.variant.zero_reuse() => Some(PairKind::ShiftLsb),
                _ => None,
            },
        }
    }

    /// Committed pairs as `(left index, kind)`.
    pub fn pairs(&self) -> Result<Vec<(usize, PairKind)>> {
        let roles = self.roles()?;
        Ok(roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == SlotRole::PairLeft)
            .filter_map(|(i, _)| self.pair_kind_unchecked(i).map(|k| (i, k)))
            .collect())
    }

    /// Per-slot flag bit as seen by the right member's PE: set only on the
    /// slot whose PE must use the adjacent (left) weight.
    pub fn select_adjacent(&self) -> Result<Vec<bool>> {
        Ok(self
            .roles()?
            .into_iter()
            .map(|r| r == SlotRole::PairRight)
            .collect())
    }

    /// Exact decoded codes scaled by `2^(B-1)`.
    pub fn decode_fixed(&self) -> Result<Vec<i64>> {
        let roles = self.roles()?;
        let bits = self.bits();
        let f = frac_bits(&self.config);
        let mut out = vec![0i64; self.len()];
        for (i, role) in roles.iter().enumerate() {
            let slot = self.slots[i];
            out[i] = match role {
                SlotRole::Regular => slot.code() << f,
                SlotRole::PairRight => 0,
                SlotRole::PairLeft => {
                    let sign = if slot.negative { -1 } else { 1 };
                    let mag = slot.magnitude as i64;
                    let ext = self.slots[i + 1];
                    match self.pair_kind_unchecked(i) {
                        Some(PairKind::Split) => sign * ((2 * mag) << f),
                        Some(PairKind::ShiftMsb) => {
                            sign * ((((ext.extension_data(bits) as i64) << bits) + mag) << f)
                        }
                        Some(PairKind::ShiftLsb) => {
                            sign * ((mag << f) + ext.extension_data(bits) as i64)
                        }
                        None => unreachable!("roles() validated pair kinds"),
                    }
                }
            };
        }
        Ok(out)
    }

    pub fn decode_values(&self) -> Result<Vec<DecodedValue>> {
        let f = frac_bits(&self.config);
        Ok(self
            .decode_fixed()?
            .into_iter()
            .map(|fixed_code| DecodedValue {
                value: fixed_to_value(fixed_code, &self.config),
                fixed_code,
                frac_bits: f,
            })
            .collect())
    }

    /// Pack into the canonical test-vector form: one `B + 2`-bit record per
    /// slot (`flag`, `sign`, `magnitude`), concatenated LSB-first into a
    /// little-endian bit stream and zero-padded to a whole byte.
    pub fn to_packed_bytes(&self) -> Vec<u8> {
        let width = self.bits() + 2;
        let mut out = vec![0u8; (self.len() * width as usize).div_ceil(8)];
        let mut pos = 0usize;
        for (slot, &flag) in self.slots.iter().zip(&self.flags) {
            let record = flag as u64 | (slot.negative as u64) << 1 | (slot.magnitude as u64) << 2;
            for b in 0..width as usize {
                if (record >> b) & 1 == 1 {
                    out[(pos + b) / 8] |= 1 << ((pos + b) % 8);
                }
            }
            pos += width as usize;
        }
        out
    }

    pub fn from_packed_bytes(
        bytes: &[u8],
        len: usize,
        cfg: &QuantConfig,
        variant: Variant,
    ) -> Result<EncodedVector> {
        cfg.validate()?;
        let width = (cfg.magnitude_bits + 2) as usize;
        let needed = (len * width).div_ceil(8);
        if bytes.len() != needed {
            return Err(Error::LengthMismatch {
                expected: needed,
                actual: bytes.len(),
            });
        }
        let bit = |p: usize| (bytes[p / 8] >> (p % 8)) & 1 == 1;
        let mut slots = Vec::with_capacity(len);
        let mut flags = Vec::with_capacity(len);
        for k in 0..len {
            let base = k * width;
            flags.push(bit(base));
            let magnitude = (0..width - 2).fold(0u32, |m, b| m | (bit(base + 2 + b) as u32) << b);
            slots.push(Slot {
                negative: bit(base + 1),
                magnitude,
            });
        }
        let v = EncodedVector {
            slots,
            flags,
            variant,
            config: *cfg,
        };
        v.roles()?;
        Ok(v)
    }
}

pub fn decode(v: &EncodedVector) -> Result<Vec<f64>> {
    Ok(v.decode_values()?.into_iter().map(|d| d.value).collect())
}

/// Integer dot product of an encoded activation vector with weight codes,
/// returned in accumulator units: `2^(B-1)` per activation code step times one
/// weight code step. A flagged right slot multiplies with its left
/// neighbour's weight; Shift extension products are aligned by constant
/// shifts.
pub fn dot_reference(v: &EncodedVector, w: &QuantizedTensor) -> Result<i64> {
    if v.len() != w.len() {
        return Err(Error::LengthMismatch {
            expected: v.len(),
            actual: w.len(),
        });
    }
    let roles = v.roles()?;
    let bits = v.bits();
    let f = frac_bits(&v.config);
    let overflow = || Error::AccumulatorOverflow {
        row: 0,
        col: 0,
        cycle: 0,
    };
    let mut acc: i64 = 0;
    for (i, role) in roles.iter().enumerate() {
        let slot = v.slots[i];
        let sign = if slot.negative { -1i64 } else { 1 };
        let term = match role {
            SlotRole::Regular | SlotRole::PairLeft => (slot.code() * w.codes[i]) << f,
            SlotRole::PairRight => {
                let weight = w.codes[i - 1];
                match v.pair_kind_unchecked(i - 1) {
                    Some(PairKind::Split) => (slot.code() * weight) << f,
                    Some(PairKind::ShiftMsb) => {
                        (sign * slot.extension_data(bits) as i64 * weight) << (bits + f)
                    }
                    Some(PairKind::ShiftLsb) => sign * slot.extension_data(bits) as i64 * weight,
                    None => unreachable!("roles() validated pair kinds"),
                }
            }
        };
        acc = acc.checked_add(term).ok_or_else(overflow)?;
    }
    Ok(acc)
}
