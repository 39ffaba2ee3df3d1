//! Overwrite quantization toolkit.
//!
//! Low-magnitude activation slots are opportunistically reallocated to a
//! neighbouring value: outliers borrow the slot for extra range, values next
//! to zeros borrow it for extra precision. The crate provides the quantizer
//! and calibration, the slot codec with a bit-exact reference dot product,
//! channel reordering, a weight-stationary array simulator, and the sweep
//! harness behind the `overq` binary.

pub mod cli;
pub mod codec;
pub mod error;
pub mod harness;
pub mod quantizer;
pub mod reorder;
pub mod simarray;

pub use codec::{decode, dot_reference, encode, EncodedVector, Slot, Variant};
pub use error::{Error, Result};
pub use quantizer::{
    calibrate, dequantize, quantize, CalibrationMethod, QuantConfig, QuantizedTensor,
};
