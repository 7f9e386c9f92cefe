mod common;

use flexsim_core::config::{Granularity, QuantBits, QuantMode, QuantSpec, Symmetry};
use flexsim_core::quant::tensorfile::{read_tensor, write_tensor, Tensor};
use flexsim_core::quant::{self, WeightSidecar};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn round_trip_within_half_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let worst = common::round_trip_suite(&mut rng, 1200).unwrap();
    assert!(worst <= 1.0 + 1e-9, "{worst}");
}

#[test]
fn fused_matches_rational_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    common::fused_suite(&mut rng, 200).unwrap();
}

#[test]
fn fht_matches_dense_hadamard() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    common::fht_suite(&mut rng).unwrap();
}

#[test]
fn fht_spreads_an_outlier() {
    let mut x = vec![0.01; 64];
    x[7] = 8.0;
    let y = quant::fht(&x, quant::Normalization::Orthonormal).unwrap();
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(peak < 1.2, "{peak}");
}

fn spec() -> impl Strategy<Value = QuantSpec> {
    (any::<bool>(), any::<bool>(), 0usize..3).prop_map(|(b8, sym, g)| {
        QuantSpec::new(
            if b8 { QuantBits::Int8 } else { QuantBits::Int4 },
            if sym {
                Symmetry::Symmetric
            } else {
                Symmetry::Asymmetric
            },
            common::ALL_GRANULARITY[g],
            QuantMode::Dynamic,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn tensor_file_round_trip(spec in spec(), rows in 2usize..6, cols in 2usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::random_matrix(&mut rng, rows, cols);
        let qt = quant::quantize_dynamic(&x, &spec).unwrap();
        let sidecar = (spec.symmetry == Symmetry::Symmetric && spec.granularity == Granularity::PerChannel)
            .then(|| WeightSidecar::from_weights(&qt).unwrap());
        for t in [Tensor::Quantized { tensor: qt, sidecar }, Tensor::real(x.clone()), Tensor::Real { data: x.mapv(|v| v as f32 as f64), f32: true }] {
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            prop_assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
        }
    }

    #[test]
    fn int4_pack_round_trip(values in proptest::collection::vec(-8i32..=7, 0..40)) {
        let packed = quant::pack_int4(&values);
        prop_assert_eq!(packed.len(), values.len().div_ceil(2));
        prop_assert_eq!(quant::unpack_int4(&packed, values.len(), true), values.clone());
        let unsigned: Vec<i32> = values.iter().map(|v| v + 8).collect();
        prop_assert_eq!(quant::unpack_int4(&quant::pack_int4(&unsigned), values.len(), false), unsigned);
    }

    #[test]
    fn quantize_is_idempotent_on_the_grid(spec in spec(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::random_matrix(&mut rng, 4, 4);
        let qt = quant::quantize_dynamic(&x, &spec).unwrap();
        let again = quant::quantize(&quant::dequantize(&qt), &qt.params).unwrap();
        prop_assert_eq!(again.q, qt.q);
    }
}

#[test]
fn truncated_file_is_rejected() {
    let x = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut buf = Vec::new();
    write_tensor(&mut buf, &Tensor::real(x)).unwrap();
    buf.truncate(buf.len() - 3);
    assert!(read_tensor(&mut buf.as_slice()).is_err());
}
