//! Randomized equivalence check between the array simulator and the codec's
//! reference dot product.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codec::{dot_reference, encode, EncodedVector, Variant};
use crate::error::Result;
use crate::quantizer::{QuantConfig, QuantizedTensor};
use crate::simarray::{load_weights, run_matmul, ArrayConfig, PeVariant};

/// Weight bitwidth used by the check: 8-bit sign-magnitude.
pub const WEIGHT_MAGNITUDE_BITS: u32 = 7;
/// Vectors streamed per weight matrix.
const BATCH: usize = 250;

/// Activation in units of `S = 1`: zeros, sub-threshold values, in-range
/// values and outliers, each with a random sign.
pub fn random_activation<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    let mag = if u < 0.3 {
        0.0
    } else if u < 0.5 {
        rng.gen_range(0.0..0.25)
    } else if u < 0.85 {
        rng.gen_range(0.0..=1.0)
    } else {
        rng.gen_range(1.0..9.0)
    };
    if rng.gen_bool(0.5) {
        -mag
    } else {
        mag
    }
}

pub fn random_weights<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> QuantizedTensor {
    let cfg = QuantConfig::new(WEIGHT_MAGNITUDE_BITS, 1.0).expect("valid weight config");
    let max = cfg.max_code();
    let codes = (0..rows * cols)
        .map(|_| rng.gen_range(-max..=max))
        .collect();
    QuantizedTensor::from_codes(codes, vec![rows, cols], cfg).expect("codes within range")
}

/// Column `j` of a row-major `[rows x cols]` weight matrix.
pub fn weight_column(w: &QuantizedTensor, j: usize) -> QuantizedTensor {
    let cols = w.shape[1];
    let codes = w
        .codes
        .iter()
        .skip(j)
        .step_by(cols)
        .copied()
        .collect::<Vec<_>>();
    let n = codes.len();
    QuantizedTensor::from_codes(codes, vec![n], w.config).expect("column of valid tensor")
}

#[derive(Debug, Clone, Serialize)]
pub struct Counterexample {
    pub activations: Vec<f64>,
    pub encoded: EncodedVector,
    pub weights: Vec<i64>,
    pub column: usize,
    pub expected: i64,
    pub simulated: i64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimcheckOutcome {
    pub rows: usize,
    pub cols: usize,
    pub bits: u32,
    pub variant: Variant,
    pub trials: usize,
    pub flagged_vectors: usize,
    pub mismatch: Option<Counterexample>,
}

impl SimcheckOutcome {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none()
    }
}

fn first_mismatch(
    x: &[f64],
    w: &QuantizedTensor,
    acfg: &QuantConfig,
    variant: Variant,
    array: ArrayConfig,
) -> Result<Option<Counterexample>> {
    let v = encode(x, acfg, variant)?;
    let mut state = load_weights(array, w)?;
    let out = run_matmul(&mut state, std::slice::from_ref(&v))?;
    for j in 0..array.cols {
        let expected = dot_reference(&v, &weight_column(w, j))?;
        if out.outputs[0][j] != expected {
            return Ok(Some(Counterexample {
                activations: x.to_vec(),
                encoded: v,
                weights: w.codes.clone(),
                column: j,
                expected,
                simulated: out.outputs[0][j],
            }));
        }
    }
    Ok(None)
}

/// Zero out activations one at a time while the mismatch persists.
fn minimize(
    mut x: Vec<f64>,
    w: &QuantizedTensor,
    acfg: &QuantConfig,
    variant: Variant,
    array: ArrayConfig,
    mut found: Counterexample,
) -> Result<Counterexample> {
    for i in 0..x.len() {
        if x[i] == 0.0 {
            continue;
        }
        let saved = std::mem::replace(&mut x[i], 0.0);
        match first_mismatch(&x, w, acfg, variant, array)? {
            Some(c) => found = c,
            None => x[i] = saved,
        }
    }
    Ok(found)
}

/// Stream `trials` random vectors through an `rows x cols` array and compare
/// every column output against `dot_reference`.
pub fn check_equivalence(
    rows: usize,
    cols: usize,
    bits: u32,
    variant: Variant,
    trials: usize,
    seed: u64,
) -> Result<SimcheckOutcome> {
    let acfg = QuantConfig::new(bits, 1.0)?;
    let array = ArrayConfig::new(rows, cols, PeVariant::for_variant(variant), bits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcome = SimcheckOutcome {
        rows,
        cols,
        bits,
        variant,
        trials,
        flagged_vectors: 0,
        mismatch: None,
    };
    let mut done = 0;
    while done < trials {
        let batch = BATCH.min(trials - done);
        let w = random_weights(&mut rng, rows, cols);
        let xs: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..rows).map(|_| random_activation(&mut rng)).collect())
            .collect();
        let vs = xs
            .iter()
            .map(|x| encode(x, &acfg, variant))
            .collect::<Result<Vec<_>>>()?;
        outcome.flagged_vectors += vs.iter().filter(|v| v.flags.iter().any(|&f| f)).count();
        let mut state = load_weights(array, &w)?;
        let out = run_matmul(&mut state, &vs)?;
        let columns: Vec<QuantizedTensor> = (0..cols).map(|j| weight_column(&w, j)).collect();
        for (t, v) in vs.iter().enumerate() {
            for (j, col) in columns.iter().enumerate() {
                if out.outputs[t][j] != dot_reference(v, col)? {
                    let found = first_mismatch(&xs[t], &w, &acfg, variant, array)?
                        .expect("mismatch reproduces in isolation");
                    outcome.mismatch =
                        Some(minimize(xs[t].clone(), &w, &acfg, variant, array, found)?);
                    return Ok(outcome);
                }
            }
        }
        done += batch;
    }
    Ok(outcome)
}
