//! C ABI over the `overq` codec and array simulator.
//!
//! Encoded vectors and arrays are opaque handles created and released by
//! this library. Every fallible call returns an [`OverqStatus`]; on failure
//! the message is kept per thread and can be read with
//! [`overq_last_error_message`]. Panics never cross the boundary.
//!
//! The generated header lives at `include/overq.h`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use overq::codec::{self, EncodedVector, Variant};
use overq::quantizer::{self, CalibrationMethod, QuantConfig, QuantizedTensor};
use overq::simarray::{self, ArrayConfig, ArrayState, PeVariant};
use overq::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverqStatus {
    Ok = 0,
    InvalidArgument = 1,
    NullPointer = 2,
    MalformedEncoding = 3,
    LengthMismatch = 4,
    Overflow = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverqVariant {
    Baseline = 0,
    Split = 1,
    Shift = 2,
    ZeroReuse = 3,
    ShiftZeroReuse = 4,
}

impl From<OverqVariant> for Variant {
    fn from(v: OverqVariant) -> Variant {
        match v {
            OverqVariant::Baseline => Variant::Baseline,
            OverqVariant::Split => Variant::Split,
            OverqVariant::Shift => Variant::Shift,
            OverqVariant::ZeroReuse => Variant::ZeroReuse,
            OverqVariant::ShiftZeroReuse => Variant::ShiftWithZeroReuse,
        }
    }
}

impl From<Variant> for OverqVariant {
    fn from(v: Variant) -> OverqVariant {
        match v {
            Variant::Baseline => OverqVariant::Baseline,
            Variant::Split => OverqVariant::Split,
            Variant::Shift => OverqVariant::Shift,
            Variant::ZeroReuse => OverqVariant::ZeroReuse,
            Variant::ShiftWithZeroReuse => OverqVariant::ShiftZeroReuse,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverqCalibration {
    Max = 0,
    Percentile = 1,
    Mmse = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverqPeVariant {
    Baseline = 0,
    Split = 1,
    Shift = 2,
}

/// Mirror of the quantizer config.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverqQuantConfig {
    pub magnitude_bits: u32,
    pub clip_scale: f64,
    pub overwrite_threshold: f64,
}

impl From<QuantConfig> for OverqQuantConfig {
    fn from(c: QuantConfig) -> Self {
        OverqQuantConfig {
            magnitude_bits: c.magnitude_bits,
            clip_scale: c.clip_scale,
            overwrite_threshold: c.overwrite_threshold,
        }
    }
}

impl OverqQuantConfig {
    fn to_config(self) -> Result<QuantConfig, Error> {
        QuantConfig::with_threshold(
            self.magnitude_bits,
            self.clip_scale,
            self.overwrite_threshold,
        )
    }
}

/// Opaque encoded activation vector.
pub struct OverqEncoded {
    inner: EncodedVector,
}

/// Opaque weight-stationary array with loaded weights.
pub struct OverqArray {
    inner: ArrayState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_for(e: &Error) -> OverqStatus {
    match e {
        Error::MalformedEncoding { .. } => OverqStatus::MalformedEncoding,
        Error::LengthMismatch { .. } | Error::ShapeMismatch { .. } => OverqStatus::LengthMismatch,
        Error::AccumulatorOverflow { .. } => OverqStatus::Overflow,
        _ => OverqStatus::InvalidArgument,
    }
}

struct Failure(OverqStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_for(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(OverqStatus::NullPointer, format!("{what} is null"))
}

fn guard<F>(f: F) -> OverqStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OverqStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside overq".into());
            OverqStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn ref_in<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn ref_out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Length in bytes of the last error message on this thread, including the
/// terminating NUL; 0 when there is none.
#[no_mangle]
pub extern "C" fn overq_last_error_length() -> usize {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(0, |c| c.as_bytes_with_nul().len())
    })
}

/// Copy the last error message (NUL-terminated, truncated to `cap`) into
/// `buf`. Returns the number of bytes written including the NUL.
#[no_mangle]
pub unsafe extern "C" fn overq_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    if buf.is_null() || cap == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |c| c.as_bytes());
        let n = bytes.len().min(cap - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
        *buf.add(n) = 0;
        n + 1
    })
}

/// NUL-terminated library version; static storage.
#[no_mangle]
pub extern "C" fn overq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Validated config with the default `S / 4` overwrite threshold.
#[no_mangle]
pub unsafe extern "C" fn overq_quant_config_new(
    magnitude_bits: u32,
    clip_scale: f64,
    out: *mut OverqQuantConfig,
) -> OverqStatus {
    guard(|| {
        let out = ref_out(out, "out")?;
        *out = QuantConfig::new(magnitude_bits, clip_scale)?.into();
        Ok(())
    })
}

/// Pick a clip scale from `len` samples. `percentile` is only read for
/// `OverqCalibration::Percentile`.
#[no_mangle]
pub unsafe extern "C" fn overq_calibrate(
    samples: *const f64,
    len: usize,
    magnitude_bits: u32,
    method: OverqCalibration,
    percentile: f64,
    out: *mut OverqQuantConfig,
) -> OverqStatus {
    guard(|| {
        let samples = slice_in(samples, len, "samples")?;
        let out = ref_out(out, "out")?;
        let method = match method {
            OverqCalibration::Max => CalibrationMethod::Max,
            OverqCalibration::Percentile => CalibrationMethod::Percentile(percentile),
            OverqCalibration::Mmse => CalibrationMethod::Mmse,
        };
        *out = quantizer::calibrate(samples, magnitude_bits, method)?.into();
        Ok(())
    })
}

/// Quantize `len` values into `codes_out` (length `len`).
#[no_mangle]
pub unsafe extern "C" fn overq_quantize(
    x: *const f64,
    len: usize,
    config: *const OverqQuantConfig,
    codes_out: *mut i64,
) -> OverqStatus {
    guard(|| {
        let x = slice_in(x, len, "x")?;
        let cfg = ref_in(config, "config")?.to_config()?;
        let out = slice_out(codes_out, len, "codes_out")?;
        out.copy_from_slice(&quantizer::quantize(x, &cfg)?.codes);
        Ok(())
    })
}

/// Encode `len` activations. On success `*out` owns a new handle that must
/// be released with [`overq_encoded_free`].
#[no_mangle]
pub unsafe extern "C" fn overq_encode(
    x: *const f64,
    len: usize,
    config: *const OverqQuantConfig,
    variant: OverqVariant,
    out: *mut *mut OverqEncoded,
) -> OverqStatus {
    guard(|| {
        let x = slice_in(x, len, "x")?;
        let cfg = ref_in(config, "config")?.to_config()?;
        let out = ref_out(out, "out")?;
        let inner = codec::encode(x, &cfg, variant.into())?;
        *out = Box::into_raw(Box::new(OverqEncoded { inner }));
        Ok(())
    })
}

/// Rebuild a handle from the packed test-vector form.
#[no_mangle]
pub unsafe extern "C" fn overq_encoded_from_packed(
    bytes: *const u8,
    nbytes: usize,
    len: usize,
    config: *const OverqQuantConfig,
    variant: OverqVariant,
    out: *mut *mut OverqEncoded,
) -> OverqStatus {
    guard(|| {
        let bytes = slice_in(bytes, nbytes, "bytes")?;
        let cfg = ref_in(config, "config")?.to_config()?;
        let out = ref_out(out, "out")?;
        let inner = EncodedVector::from_packed_bytes(bytes, len, &cfg, variant.into())?;
        *out = Box::into_raw(Box::new(OverqEncoded { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn overq_encoded_free(handle: *mut OverqEncoded) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of slots; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn overq_encoded_len(handle: *const OverqEncoded) -> usize {
    handle.as_ref().map_or(0, |h| h.inner.len())
}

/// Copy flag bits (0/1), slot signs (0/1) and magnitudes. Any output pointer
/// may be null to skip it; non-null outputs must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn overq_encoded_slots(
    handle: *const OverqEncoded,
    flags: *mut u8,
    negative: *mut u8,
    magnitude: *mut u32,
    len: usize,
) -> OverqStatus {
    guard(|| {
        let v = &ref_in(handle, "handle")?.inner;
        if len != v.len() {
            return Err(Error::LengthMismatch {
                expected: v.len(),
                actual: len,
            }
            .into());
        }
        if !flags.is_null() {
            for (o, &f) in slice_out(flags, len, "flags")?.iter_mut().zip(&v.flags) {
                *o = f as u8;
            }
        }
        if !negative.is_null() {
            for (o, s) in slice_out(negative, len, "negative")?
                .iter_mut()
                .zip(&v.slots)
            {
                *o = s.negative as u8;
            }
        }
        if !magnitude.is_null() {
            for (o, s) in slice_out(magnitude, len, "magnitude")?
                .iter_mut()
                .zip(&v.slots)
            {
                *o = s.magnitude;
            }
        }
        Ok(())
    })
}

/// Write the packed form into `buf`. `*written` always receives the
/// required size; `BufferTooSmall` is returned when `cap` is short.
#[no_mangle]
pub unsafe extern "C" fn overq_encoded_packed(
    handle: *const OverqEncoded,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> OverqStatus {
    guard(|| {
        let v = &ref_in(handle, "handle")?.inner;
        let written = ref_out(written, "written")?;
        let bytes = v.to_packed_bytes();
        *written = bytes.len();
        if cap < bytes.len() {
            return Err(Failure(
                OverqStatus::BufferTooSmall,
                format!("need {} bytes, have {cap}", bytes.len()),
            ));
        }
        slice_out(buf, bytes.len(), "buf")?.copy_from_slice(&bytes);
        Ok(())
    })
}

/// Decode into `out` (length `len`, which must equal the slot count).
#[no_mangle]
pub unsafe extern "C" fn overq_decode(
    handle: *const OverqEncoded,
    out: *mut f64,
    len: usize,
) -> OverqStatus {
    guard(|| {
        let v = &ref_in(handle, "handle")?.inner;
        if len != v.len() {
            return Err(Error::LengthMismatch {
                expected: v.len(),
                actual: len,
            }
            .into());
        }
        slice_out(out, len, "out")?.copy_from_slice(&codec::decode(v)?);
        Ok(())
    })
}

/// Reference dot product against `len` weight codes of `weight_bits`
/// magnitude bits. The result is in accumulator units.
#[no_mangle]
pub unsafe extern "C" fn overq_dot_reference(
    handle: *const OverqEncoded,
    weights: *const i64,
    len: usize,
    weight_bits: u32,
    out: *mut i64,
) -> OverqStatus {
    guard(|| {
        let v = &ref_in(handle, "handle")?.inner;
        let codes = slice_in(weights, len, "weights")?.to_vec();
        let out = ref_out(out, "out")?;
        let w = QuantizedTensor::from_codes(codes, vec![len], QuantConfig::new(weight_bits, 1.0)?)?;
        *out = codec::dot_reference(v, &w)?;
        Ok(())
    })
}

/// Create a `rows x cols` array holding row-major weight codes.
#[no_mangle]
pub unsafe extern "C" fn overq_array_new(
    rows: usize,
    cols: usize,
    pe_variant: OverqPeVariant,
    activation_bits: u32,
    weights: *const i64,
    weight_bits: u32,
    out: *mut *mut OverqArray,
) -> OverqStatus {
    guard(|| {
        let out = ref_out(out, "out")?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure(OverqStatus::InvalidArgument, "rows * cols overflows".into()))?;
        let codes = slice_in(weights, n, "weights")?.to_vec();
        let pe = match pe_variant {
            OverqPeVariant::Baseline => PeVariant::Baseline,
            OverqPeVariant::Split => PeVariant::Split,
            OverqPeVariant::Shift => PeVariant::Shift,
        };
        let cfg = ArrayConfig::new(rows, cols, pe, activation_bits)?.with_accumulator_bits(64)?;
        let w = QuantizedTensor::from_codes(
            codes,
            vec![rows, cols],
            QuantConfig::new(weight_bits, 1.0)?,
        )?;
        let inner = simarray::load_weights(cfg, &w)?;
        *out = Box::into_raw(Box::new(OverqArray { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn overq_array_free(handle: *mut OverqArray) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Stream `count` encoded vectors through the array. `outputs` receives
/// `count * cols` accumulators, vector-major; `cycles` may be null.
#[no_mangle]
pub unsafe extern "C" fn overq_array_run(
    handle: *mut OverqArray,
    vectors: *const *const OverqEncoded,
    count: usize,
    outputs: *mut i64,
    cycles: *mut u64,
) -> OverqStatus {
    guard(|| {
        let array = ref_out(handle, "handle")?;
        let handles = slice_in(vectors, count, "vectors")?;
        let acts = handles
            .iter()
            .map(|&h| ref_in(h, "vector").map(|h| h.inner.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let cols = array.inner.config().cols;
        let out = slice_out(outputs, count * cols, "outputs")?;
        let r = simarray::run_matmul(&mut array.inner, &acts)?;
        for (dst, src) in out.chunks_exact_mut(cols.max(1)).zip(&r.outputs) {
            dst.copy_from_slice(src);
        }
        if let Some(c) = cycles.as_mut() {
            *c = r.cycles;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_mapping_roundtrips() {
        for v in Variant::ALL {
            assert_eq!(Variant::from(OverqVariant::from(v)), v);
        }
    }
}
