use proptest::prelude::*;

use sparq_core::bounds::check_bounds;
use sparq_core::packer::decode;
use sparq_core::quantizer::{round_half_even, SUPPORTED_BITS};
use sparq_core::sparsifier::{sparsify_oracle, sparsify_with};
use sparq_core::{encode, quantize, sparsify, BlockAxis, Execution, Matrix, QuantSpec, SparsitySpec};

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
    })
}

fn preset() -> impl Strategy<Value = SparsitySpec> {
    (0usize..3, any::<bool>()).prop_map(|(i, flat)| {
        let axis = if flat {
            BlockAxis::FlatRowMajor
        } else {
            BlockAxis::InputDim
        };
        SparsitySpec::presets()[i].with_axis(axis).with_padding(true)
    })
}

proptest! {
    #[test]
    fn rounding_matches_std(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(round_half_even(v).to_bits(), v.round_ties_even().to_bits());
    }

    #[test]
    fn quantize_codes_in_range_and_idempotent(
        w in matrix(12, 12),
        bits_idx in 0usize..SUPPORTED_BITS.len(),
        scale in 1e-3f64..2.0,
    ) {
        let q = QuantSpec::weight(SUPPORTED_BITS[bits_idx], scale).unwrap();
        let r = quantize(&w, &q);
        for (i, &c) in r.codes.data().iter().enumerate() {
            prop_assert!((c as i64) >= q.q_n() && (c as i64) <= q.q_p());
            prop_assert_eq!(r.values.data()[i], scale * c as f64);
            let x = w.data()[i];
            if !r.clamp_mask.bits()[i] {
                prop_assert!((x - r.values.data()[i]).abs() <= scale / 2.0 * (1.0 + 1e-12));
            }
        }
        prop_assert_eq!(quantize(&r.values, &q).values, r.values);
    }

    #[test]
    fn sparsify_keeps_largest_n_per_block(w in matrix(20, 6), spec in preset()) {
        let s = sparsify(&w, &spec).unwrap();
        let cursor = spec.cursor(w.rows(), w.cols()).unwrap();
        for b in cursor.iter() {
            let real = cursor.real_slots(b);
            let idx: Vec<usize> = (0..real).map(|k| cursor.slot(b, k).unwrap()).collect();
            let kept: Vec<usize> = idx.iter().copied().filter(|&i| s.mask.bits()[i]).collect();
            prop_assert_eq!(kept.len(), spec.n().min(real));
            let min_kept = kept.iter().map(|&i| w.data()[i].abs()).fold(f64::INFINITY, f64::min);
            for &i in &idx {
                if !s.mask.bits()[i] {
                    prop_assert!(w.data()[i].abs() <= min_kept);
                    prop_assert_eq!(s.values.data()[i], 0.0);
                } else {
                    prop_assert_eq!(s.values.data()[i], w.data()[i]);
                }
            }
        }
        prop_assert_eq!(&sparsify(&s.values, &spec).unwrap().values, &s.values);
        prop_assert_eq!(sparsify_with(&w, &spec, Execution::Sequential).unwrap(), s);
    }

    #[test]
    fn sparsify_matches_oracle_on_tied_blocks(
        block in prop::collection::vec(-3i8..=3, 16),
        p in 0usize..3,
    ) {
        let spec = SparsitySpec::presets()[p];
        let block: Vec<f64> = block[..spec.m()].iter().map(|&v| f64::from(v)).collect();
        let got = sparsify(&Matrix::column_vector(&block).unwrap(), &spec).unwrap().mask;
        let oracle = sparsify_oracle(&block, spec.n());
        prop_assert_eq!(got.bits(), oracle.as_slice());
    }

    #[test]
    fn codec_round_trips(
        w in matrix(24, 8),
        spec in preset(),
        bits_idx in 0usize..SUPPORTED_BITS.len(),
        scale in 1e-3f32..1.0,
    ) {
        let q = QuantSpec::weight(SUPPORTED_BITS[bits_idx], f64::from(scale)).unwrap();
        let s = sparsify(&w, &spec).unwrap();
        let r = quantize(&s.values, &q);
        let packed = encode(&r.codes, &s.mask, &spec, &q).unwrap();
        let d = decode(&packed).unwrap();
        prop_assert_eq!(&d.codes, &r.codes);
        prop_assert_eq!(&d.mask, &s.mask);
        prop_assert_eq!(d.dequantize(), r.values);
    }

    #[test]
    fn two_four_bounds_hold(
        v in (1..8usize).prop_flat_map(|k| prop::collection::vec(-100.0f64..100.0, 4 * k)),
    ) {
        if v.iter().any(|&x| x != 0.0) {
            let c = check_bounds(&v, &SparsitySpec::two_four()).unwrap();
            prop_assert!(c.lower_holds() && c.upper_holds() && c.angle_holds());
        }
    }
}
