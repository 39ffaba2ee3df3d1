//! Cycle-stepped functional model of a weight-stationary spatial array.
//!
//! Input channel `i` maps to row `i` and output channel `j` to column `j`.
//! Activations enter at the left edge with one cycle of skew per row and move
//! one column per cycle; partial sums move one row down per cycle and leave
//! at the bottom. Every PE latches a copy of the weight held by the PE above
//! it, so an overwritten slot can be multiplied with its left neighbour's
//! weight. Shift PEs additionally align the product with a constant shift
//! selected by the flag and the shift direction bit.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::codec::{frac_bits, EncodedVector, ShiftDirection, Slot, Variant};
use crate::error::{Error, Result};
use crate::quantizer::{QuantConfig, QuantizedTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeVariant {
    /// Plain MAC.
    Baseline,
    /// Weight mux between own and adjacent weight.
    Split,
    /// Weight mux plus a three-way product shift (none, MSB, LSB).
    Shift,
}

impl PeVariant {
    /// PE needed to execute encodings produced by `variant`.
    pub fn for_variant(variant: Variant) -> PeVariant {
        match variant {
            Variant::Baseline => PeVariant::Baseline,
            Variant::Split => PeVariant::Split,
            Variant::Shift | Variant::ZeroReuse | Variant::ShiftWithZeroReuse => PeVariant::Shift,
        }
    }

    /// Whether a flagged `variant` encoding runs on this PE.
    pub fn accepts(self, variant: Variant) -> bool {
        self == PeVariant::for_variant(variant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
    pub pe_variant: PeVariant,
    /// Activation magnitude bits `B`; accumulators carry `B - 1` fractional bits.
    pub activation_bits: u32,
    pub accumulator_bits: u32,
}

impl ArrayConfig {
    pub fn new(
        rows: usize,
        cols: usize,
        pe_variant: PeVariant,
        activation_bits: u32,
    ) -> Result<Self> {
        let cfg = ArrayConfig {
            rows,
            cols,
            pe_variant,
            activation_bits,
            accumulator_bits: 32,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_accumulator_bits(mut self, bits: u32) -> Result<Self> {
        self.accumulator_bits = bits;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidConfig(format!(
                "array must be at least 1x1, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(2..=crate::quantizer::MAX_MAGNITUDE_BITS).contains(&self.activation_bits) {
            return Err(Error::InvalidConfig(format!(
                "activation_bits must be in 2..={}, got {}",
                crate::quantizer::MAX_MAGNITUDE_BITS,
                self.activation_bits
            )));
        }
        if !(32..=64).contains(&self.accumulator_bits) {
            return Err(Error::InvalidConfig(format!(
                "accumulator_bits must be in 32..=64, got {}",
                self.accumulator_bits
            )));
        }
        Ok(())
    }

    fn acc_range(&self) -> (i64, i64) {
        if self.accumulator_bits == 64 {
            (i64::MIN, i64::MAX)
        } else {
            let half = 1i64 << (self.accumulator_bits - 1);
            (-half, half - 1)
        }
    }
}

/// Activation slot in transit, with its 1-bit flag wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActToken {
    pub slot: Slot,
    /// Set on the overwritten slot of a pair: multiply with the adjacent weight.
    pub flag: bool,
    pub vector: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PsumToken {
    pub value: i64,
    pub vector: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeState {
    pub weight: i64,
    /// Latched copy of the weight in the PE one row up; 0 in row 0.
    pub adjacent_weight: i64,
    pub act_reg: Option<ActToken>,
    pub psum_reg: Option<PsumToken>,
}

/// One line of the optional per-cycle trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub cycle: u64,
    pub row: usize,
    pub col: usize,
    pub act_code: Option<i64>,
    pub flag: bool,
    pub psum: Option<i64>,
}

struct Issue {
    first_cycle: u64,
    tokens: Vec<ActToken>,
}

pub struct ArrayState {
    cfg: ArrayConfig,
    pes: Vec<PeState>,
    cycle: u64,
    feed: VecDeque<Issue>,
    next_vector: usize,
    outputs: Vec<Vec<Option<i64>>>,
    trace: Option<Vec<TraceRecord>>,
}

impl std::fmt::Debug for ArrayState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ArrayState")
            .field("cfg", &self.cfg)
            .field("cycle", &self.cycle)
            .field("in_flight", &self.feed.len())
            .finish()
    }
}

/// Load an `M x N` weight matrix (row-major, row = input channel).
pub fn load_weights(cfg: ArrayConfig, w: &QuantizedTensor) -> Result<ArrayState> {
    cfg.validate()?;
    let (m, n) = (cfg.rows, cfg.cols);
    if w.shape != [m, n] || w.codes.len() != m * n {
        return Err(Error::ShapeMismatch {
            expected: vec![m, n],
            actual: w.shape.clone(),
        });
    }
    let pes = (0..m * n)
        .map(|idx| {
            let (r, c) = (idx / n, idx % n);
            PeState {
                weight: w.codes[idx],
                adjacent_weight: if r == 0 { 0 } else { w.codes[(r - 1) * n + c] },
                act_reg: None,
                psum_reg: None,
            }
        })
        .collect();
    Ok(ArrayState {
        cfg,
        pes,
        cycle: 0,
        feed: VecDeque::new(),
        next_vector: 0,
        outputs: Vec::new(),
        trace: None,
    })
}

/// Outputs of a streamed batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatmulResult {
    /// `outputs[t][j]`: accumulator of vector `t` at output channel `j`.
    pub outputs: Vec<Vec<i64>>,
    pub cycles: u64,
}

impl ArrayState {
    pub fn config(&self) -> &ArrayConfig {
        &self.cfg
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn pe(&self, row: usize, col: usize) -> &PeState {
        &self.pes[row * self.cfg.cols + col]
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Collected outputs so far; `None` for columns still in flight.
    pub fn outputs(&self) -> &[Vec<Option<i64>>] {
        &self.outputs
    }

    pub fn is_idle(&self) -> bool {
        self.feed.is_empty()
            && self
                .pes
                .iter()
                .all(|pe| pe.act_reg.is_none() && pe.psum_reg.is_none())
    }

    /// True once every queued vector has produced all of its outputs.
    pub fn outputs_ready(&self) -> bool {
        self.outputs
            .iter()
            .all(|row| row.iter().all(Option::is_some))
    }

    /// Clear registers, queued inputs, outputs and the cycle counter. Weights stay.
    pub fn reset(&mut self) {
        for pe in &mut self.pes {
            pe.act_reg = None;
            pe.psum_reg = None;
        }
        self.cycle = 0;
        self.feed.clear();
        self.next_vector = 0;
        self.outputs.clear();
        if let Some(t) = &mut self.trace {
            t.clear();
        }
    }

    /// Queue one encoded vector. It enters row `r` at `first_cycle + r`,
    /// where `first_cycle` is the earliest cycle after the previous issue.
    pub fn enqueue(&mut self, v: &EncodedVector) -> Result<usize> {
        if v.len() != self.cfg.rows {
            return Err(Error::LengthMismatch {
                expected: self.cfg.rows,
                actual: v.len(),
            });
        }
        if v.bits() != self.cfg.activation_bits {
            return Err(Error::InvalidConfig(format!(
                "vector has {} magnitude bits, array expects {}",
                v.bits(),
                self.cfg.activation_bits
            )));
        }
        let flags = v.select_adjacent()?;
        if v.flags.iter().any(|&f| f) && !self.cfg.pe_variant.accepts(v.variant) {
            return Err(Error::Unsupported(format!(
                "{:?} PEs cannot execute flagged {} encodings",
                self.cfg.pe_variant, v.variant
            )));
        }
        let vector = self.next_vector;
        self.next_vector += 1;
        let first_cycle = self
            .feed
            .back()
            .map_or(self.cycle, |last| (last.first_cycle + 1).max(self.cycle));
        self.feed.push_back(Issue {
            first_cycle,
            tokens: v
                .slots
                .iter()
                .zip(flags)
                .map(|(&slot, flag)| ActToken { slot, flag, vector })
                .collect(),
        });
        self.outputs.push(vec![None; self.cfg.cols]);
        Ok(vector)
    }

    fn feed_token(&self, row: usize) -> Option<ActToken> {
        self.feed
            .iter()
            .find(|issue| issue.first_cycle + row as u64 == self.cycle)
            .map(|issue| issue.tokens[row])
    }

    fn product(&self, pe: &PeState, act: &ActToken) -> i64 {
        let bits = self.cfg.activation_bits;
        let f = bits - 1;
        let slot = act.slot;
        match self.cfg.pe_variant {
            PeVariant::Baseline => (slot.code() * pe.weight) << f,
            PeVariant::Split => {
                let w = if act.flag {
                    pe.adjacent_weight
                } else {
                    pe.weight
                };
                (slot.code() * w) << f
            }
            PeVariant::Shift => {
                if !act.flag {
                    return (slot.code() * pe.weight) << f;
                }
                let data = slot.extension_data(bits) as i64;
                let signed = if slot.negative { -data } else { data };
                let raw = signed * pe.adjacent_weight;
                match slot.direction(bits) {
                    ShiftDirection::Msb => raw << (bits + f),
                    ShiftDirection::Lsb => raw,
                }
            }
        }
    }

    /// Advance one synchronous cycle.
    pub fn step(&mut self) -> Result<()> {
        let (m, n) = (self.cfg.rows, self.cfg.cols);
        let (lo, hi) = self.cfg.acc_range();
        let mut next = self.pes.clone();
        for r in 0..m {
            for c in 0..n {
                let idx = r * n + c;
                let act_in = if c == 0 {
                    self.feed_token(r)
                } else {
                    self.pes[idx - 1].act_reg
                };
                let psum_in = if r == 0 {
                    act_in.map(|a| PsumToken {
                        value: 0,
                        vector: a.vector,
                    })
                } else {
                    self.pes[idx - n].psum_reg
                };
                let psum_out = match (act_in, psum_in) {
                    (Some(act), Some(psum)) => {
                        debug_assert_eq!(act.vector, psum.vector, "skew schedule broken");
                        let value = psum
                            .value
                            .checked_add(self.product(&self.pes[idx], &act))
                            .filter(|v| (lo..=hi).contains(v))
                            .ok_or(Error::AccumulatorOverflow {
                                row: r,
                                col: c,
                                cycle: self.cycle,
                            })?;
                        Some(PsumToken {
                            value,
                            vector: psum.vector,
                        })
                    }
                    (None, None) => None,
                    _ => unreachable!("activation and partial sum out of step at PE ({r}, {c})"),
                };
                next[idx].act_reg = act_in;
                next[idx].psum_reg = psum_out;
            }
        }
        self.pes = next;

        for c in 0..n {
            if let Some(p) = self.pes[(m - 1) * n + c].psum_reg {
                self.outputs[p.vector][c] = Some(p.value);
            }
        }
        if let Some(trace) = &mut self.trace {
            for (idx, pe) in self.pes.iter().enumerate() {
                trace.push(TraceRecord {
                    cycle: self.cycle,
                    row: idx / n,
                    col: idx % n,
                    act_code: pe.act_reg.map(|a| a.slot.code()),
                    flag: pe.act_reg.is_some_and(|a| a.flag),
                    psum: pe.psum_reg.map(|p| p.value),
                });
            }
        }

        self.cycle += 1;
        let last_row = m as u64 - 1;
        while self
            .feed
            .front()
            .is_some_and(|issue| issue.first_cycle + last_row < self.cycle)
        {
            self.feed.pop_front();
        }
        Ok(())
    }
}

/// Stream `acts` through the array from a cleared pipeline and drain it.
pub fn run_matmul(state: &mut ArrayState, acts: &[EncodedVector]) -> Result<MatmulResult> {
    state.reset();
    for v in acts {
        state.enqueue(v)?;
    }
    while !state.outputs_ready() {
        state.step()?;
    }
    let outputs = state
        .outputs
        .iter()
        .map(|row| {
            row.iter()
                .map(|o| o.expect("drained pipeline has every output"))
                .collect()
        })
        .collect();
    Ok(MatmulResult {
        outputs,
        cycles: state.cycle,
    })
}

/// Convert accumulator words back to real values and encode them for the
/// next layer. Accumulators are in units of one activation step times one
/// weight step, with `B - 1` fractional bits.
pub fn rescale_and_requantize(
    psums: &[i64],
    act_cfg: &QuantConfig,
    weight_cfg: &QuantConfig,
    out_cfg: &QuantConfig,
    variant: Variant,
) -> Result<EncodedVector> {
    act_cfg.validate()?;
    weight_cfg.validate()?;
    let denom = (1i64 << frac_bits(act_cfg)) as f64;
    let unit = act_cfg.step() * weight_cfg.step() / denom;
    let values: Vec<f64> = psums.iter().map(|&p| p as f64 * unit).collect();
    crate::codec::encode(&values, out_cfg, variant)
}

pub fn write_trace_csv<W: Write>(records: &[TraceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{dot_reference, encode};
    use crate::quantizer::quantize_shaped;

    fn weights(codes: Vec<i64>, m: usize, n: usize) -> QuantizedTensor {
        QuantizedTensor::from_codes(codes, vec![m, n], QuantConfig::new(7, 1.0).unwrap()).unwrap()
    }

    fn column(w: &QuantizedTensor, n: usize, j: usize) -> QuantizedTensor {
        let m = w.codes.len() / n;
        QuantizedTensor::from_codes(
            (0..m).map(|i| w.codes[i * n + j]).collect(),
            vec![m],
            w.config,
        )
        .unwrap()
    }

    #[test]
    fn load_weights_adjacency() {
        let cfg = ArrayConfig::new(2, 1, PeVariant::Split, 4).unwrap();
        let s = load_weights(cfg, &weights(vec![1, 2], 2, 1)).unwrap();
        assert_eq!(s.pe(1, 0).adjacent_weight, 1);
        assert_eq!(s.pe(1, 0).weight, 2);
        let one = load_weights(
            ArrayConfig::new(1, 1, PeVariant::Baseline, 4).unwrap(),
            &weights(vec![7], 1, 1),
        )
        .unwrap();
        assert_eq!(one.pe(0, 0).weight, 7);
        assert!(load_weights(cfg, &weights(vec![1, 2], 1, 2)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ArrayConfig::new(0, 1, PeVariant::Baseline, 4).is_err());
        assert!(ArrayConfig::new(1, 1, PeVariant::Shift, 1).is_err());
        let c = ArrayConfig::new(1, 1, PeVariant::Shift, 4).unwrap();
        assert!(c.with_accumulator_bits(16).is_err());
        assert!(c.with_accumulator_bits(64).is_ok());
    }

    #[test]
    fn single_mac() {
        let acfg = QuantConfig::new(4, 1.0).unwrap();
        let mut s = load_weights(
            ArrayConfig::new(1, 1, PeVariant::Baseline, 4).unwrap(),
            &weights(vec![-9], 1, 1),
        )
        .unwrap();
        let v = encode(&[0.6], &acfg, Variant::Baseline).unwrap();
        let r = run_matmul(&mut s, &[v]).unwrap();
        assert_eq!(r.outputs, vec![vec![9 * -9 * 8]]);
        assert_eq!(r.cycles, 1);
    }

    #[test]
    fn zero_activations_keep_zero_psums() {
        let acfg = QuantConfig::new(4, 1.0).unwrap();
        let mut s = load_weights(
            ArrayConfig::new(3, 2, PeVariant::Shift, 4).unwrap(),
            &weights(vec![1, -2, 3, 4, -5, 6], 3, 2),
        )
        .unwrap();
        let v = encode(&[0.0; 3], &acfg, Variant::ShiftWithZeroReuse).unwrap();
        s.enqueue(&v).unwrap();
        s.enqueue(&v).unwrap();
        for _ in 0..10 {
            s.step().unwrap();
            for r in 0..3 {
                for c in 0..2 {
                    assert!(s.pe(r, c).psum_reg.is_none_or(|p| p.value == 0));
                }
            }
        }
    }

    #[test]
    fn empty_batch() {
        let mut s = load_weights(
            ArrayConfig::new(2, 2, PeVariant::Split, 4).unwrap(),
            &weights(vec![1, 2, 3, 4], 2, 2),
        )
        .unwrap();
        let r = run_matmul(&mut s, &[]).unwrap();
        assert!(r.outputs.is_empty());
        assert_eq!(r.cycles, 0);
    }

    #[test]
    fn hand_picked_2x2_matches_reference() {
        let acfg = QuantConfig::new(4, 1.0).unwrap();
        let w = weights(vec![10, -3, 7, 5], 2, 2);
        for (variant, x) in [
            (Variant::Split, [1.6, 0.1]),
            (Variant::Shift, [3.0, 0.0]),
            (Variant::ShiftWithZeroReuse, [0.3, 0.0]),
            (Variant::Baseline, [0.4, -0.7]),
        ] {
            let v = encode(&x, &acfg, variant).unwrap();
            let cfg = ArrayConfig::new(2, 2, PeVariant::for_variant(variant), 4).unwrap();
            let mut s = load_weights(cfg, &w).unwrap();
            let r = run_matmul(&mut s, std::slice::from_ref(&v)).unwrap();
            for j in 0..2 {
                assert_eq!(
                    r.outputs[0][j],
                    dot_reference(&v, &column(&w, 2, j)).unwrap(),
                    "{variant} col {j}"
                );
            }
            assert_eq!(r.cycles, 1 + 2 + 2 - 2);
        }
    }

    #[test]
    fn incompatible_pe_rejected() {
        let acfg = QuantConfig::new(4, 1.0).unwrap();
        let v = encode(&[3.0, 0.0], &acfg, Variant::Shift).unwrap();
        let mut s = load_weights(
            ArrayConfig::new(2, 1, PeVariant::Split, 4).unwrap(),
            &weights(vec![1, 2], 2, 1),
        )
        .unwrap();
        assert!(matches!(
            run_matmul(&mut s, std::slice::from_ref(&v)),
            Err(Error::Unsupported(_))
        ));
        let mut b = load_weights(
            ArrayConfig::new(2, 1, PeVariant::Baseline, 4).unwrap(),
            &weights(vec![1, 2], 2, 1),
        )
        .unwrap();
        assert!(run_matmul(&mut b, &[v]).is_err());
        // Unflagged encodings run anywhere.
        let plain = encode(&[0.5, 0.5], &acfg, Variant::Shift).unwrap();
        assert!(run_matmul(&mut b, &[plain]).is_ok());
    }

    #[test]
    fn overflow_is_reported() {
        let acfg = QuantConfig::new(15, 1.0).unwrap();
        let wcfg = QuantConfig::new(15, 1.0).unwrap();
        let m = 8;
        let w = quantize_shaped(&vec![-1.0; m], vec![m, 1], &wcfg).unwrap();
        let mut s =
            load_weights(ArrayConfig::new(m, 1, PeVariant::Baseline, 15).unwrap(), &w).unwrap();
        let v = encode(&vec![1.0; m], &acfg, Variant::Baseline).unwrap();
        match run_matmul(&mut s, &[v]) {
            Err(Error::AccumulatorOverflow { col: 0, .. }) => {}
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn rescale_examples() {
        let acfg = QuantConfig::new(4, 1.0).unwrap();
        let wcfg = QuantConfig::new(7, 1.0).unwrap();
        let v = rescale_and_requantize(&[0, 0, 0], &acfg, &wcfg, &acfg, Variant::Shift).unwrap();
        assert!(v.flags.iter().all(|f| !f));
        assert!(v.slots.iter().all(|s| s.magnitude == 0));

        let three = 3 * 15 * 127 * 8;
        let v = rescale_and_requantize(&[three, 0], &acfg, &wcfg, &acfg, Variant::Shift).unwrap();
        assert_eq!(v, encode(&[3.0, 0.0], &acfg, Variant::Shift).unwrap());

        // Everything inside (S/4, S): nothing to overwrite.
        let mid: Vec<i64> = [0.3, 0.6, 0.9]
            .iter()
            .map(|x| (x * 15.0 * 127.0 * 8.0) as i64)
            .collect();
        let v = rescale_and_requantize(&mid, &acfg, &wcfg, &acfg, Variant::Shift).unwrap();
        assert!(v.flags.iter().all(|f| !f));
    }

    #[test]
    fn trace_csv() {
        let acfg = QuantConfig::new(4, 1.0).unwrap();
        let mut s = load_weights(
            ArrayConfig::new(1, 1, PeVariant::Baseline, 4).unwrap(),
            &weights(vec![2], 1, 1),
        )
        .unwrap();
        s.enable_trace();
        run_matmul(&mut s, &[encode(&[1.0], &acfg, Variant::Baseline).unwrap()]).unwrap();
        let mut out = Vec::new();
        write_trace_csv(&s.take_trace(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "cycle,row,col,act_code,flag,psum\n0,0,0,15,false,240\n"
        );
    }
}
