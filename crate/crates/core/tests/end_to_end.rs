use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use overq::codec::{decode, dot_reference, encode, EncodedVector, Variant};
use overq::harness::simcheck::{random_weights, weight_column};
use overq::quantizer::{calibrate, quantize, CalibrationMethod, QuantConfig};
use overq::reorder::{coverage, profile, reorder_plan};
use overq::simarray::{load_weights, rescale_and_requantize, run_matmul, ArrayConfig, PeVariant};

fn relu_normalish(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            if v < 0.0 {
                0.0
            } else {
                v * v * 6.0
            }
        })
        .collect()
}

#[test]
fn packed_encodings_drive_the_array() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (m, n, bits) = (6, 5, 4);
    let w = random_weights(&mut rng, m, n);
    let samples = relu_normalish(&mut rng, 600);
    let cfg = calibrate(&samples, bits, CalibrationMethod::Mmse).unwrap();

    for variant in [
        Variant::Baseline,
        Variant::Split,
        Variant::Shift,
        Variant::ShiftWithZeroReuse,
    ] {
        let vs: Vec<EncodedVector> = samples
            .chunks(m)
            .map(|x| {
                let v = encode(x, &cfg, variant).unwrap();
                let bytes = v.to_packed_bytes();
                EncodedVector::from_packed_bytes(&bytes, m, &cfg, variant).unwrap()
            })
            .collect();
        let mut state = load_weights(
            ArrayConfig::new(m, n, PeVariant::for_variant(variant), bits).unwrap(),
            &w,
        )
        .unwrap();
        let r = run_matmul(&mut state, &vs).unwrap();
        assert_eq!(r.cycles, (vs.len() + m + n - 2) as u64);
        for (t, v) in vs.iter().enumerate() {
            for j in 0..n {
                assert_eq!(
                    r.outputs[t][j],
                    dot_reference(v, &weight_column(&w, j)).unwrap()
                );
            }
        }
    }
}

#[test]
fn overwrite_lowers_output_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (m, n, bits) = (8, 4, 4);
    let w = random_weights(&mut rng, m, n);
    let wcfg = w.config;
    let samples = relu_normalish(&mut rng, 8 * 400);
    let cfg = QuantConfig::new(bits, 6.0 * 0.3).unwrap();

    let exact: Vec<Vec<f64>> = samples
        .chunks(m)
        .map(|x| {
            (0..n)
                .map(|j| {
                    (0..m)
                        .map(|i| x[i] * wcfg.dequantize_scalar(w.codes[i * n + j]))
                        .sum()
                })
                .collect()
        })
        .collect();
    let out_cfg = QuantConfig::new(15, 64.0).unwrap();

    let mut errs = Vec::new();
    for variant in [Variant::Baseline, Variant::ShiftWithZeroReuse] {
        let vs: Vec<_> = samples
            .chunks(m)
            .map(|x| encode(x, &cfg, variant).unwrap())
            .collect();
        let mut state = load_weights(
            ArrayConfig::new(m, n, PeVariant::for_variant(variant), bits).unwrap(),
            &w,
        )
        .unwrap();
        let r = run_matmul(&mut state, &vs).unwrap();
        let mut err = 0.0;
        for (t, row) in r.outputs.iter().enumerate() {
            let q = rescale_and_requantize(row, &cfg, &wcfg, &out_cfg, Variant::Baseline).unwrap();
            for (j, y) in decode(&q).unwrap().iter().enumerate() {
                let d = y - exact[t][j];
                err += d * d;
            }
        }
        errs.push(err);
    }
    assert!(errs[1] < errs[0], "{errs:?}");
}

#[test]
fn reorder_then_encode_covers_more_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let channels = 8;
    // Outlier-heavy channels sit next to each other.
    let data: Vec<f64> = (0..400 * channels)
        .map(|k| {
            let c = k % channels;
            let v: f64 = rng.gen_range(0.0..1.0);
            if c < 4 {
                v * 10.0
            } else {
                v
            }
        })
        .collect();
    let cfg = QuantConfig::new(4, 1.0).unwrap();
    let prof = profile(&data, channels).unwrap();
    let perm = reorder_plan(&prof).unwrap();
    let before = coverage(&data, channels, &cfg, Variant::Shift, None).unwrap();
    let after = coverage(&data, channels, &cfg, Variant::Shift, Some(&perm)).unwrap();
    assert!(
        after.fraction() > before.fraction(),
        "{before:?} -> {after:?}"
    );
    assert_eq!(before.outliers, after.outliers);
    // Quantized tensor of the reordered layer has the same code multiset per row.
    let q = quantize(&data, &cfg).unwrap();
    let q2 = quantize(&perm.apply_rows(&data).unwrap(), &cfg).unwrap();
    let mut a = q.codes.clone();
    let mut b = q2.codes.clone();
    a.sort();
    b.sort();
    assert_eq!(a, b);
}
