//! Experiment driver: synthetic data, tensor files and sweeps.

pub mod generate;
pub mod simcheck;
pub mod sweep;
pub mod tensor_file;

pub use generate::{gen_activations, gen_two_scale_layer, Distribution};
pub use sweep::{
    evaluate, reorder_experiment, sweep, ReorderReport, SweepRecord, SweepReport, Threshold,
};
pub use tensor_file::{read_tensor, write_tensor, Tensor};
