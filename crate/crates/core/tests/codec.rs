mod common;

use common::{blockwise_tensor, decode_oracle, rng};
use proptest::prelude::*;
use sparsekit_core::codec::{
    choose_storage_format, compression_ratio, decode_blockwise_rle, encode_blockwise_rle, EncodedWeights, MAX_DISTANCE,
};
use sparsekit_core::{Error, SparseConfig, StoredWeights};

fn cfg(rho: f64, b: usize) -> SparseConfig {
    SparseConfig::new(rho, b).unwrap()
}

fn distances(enc: &EncodedWeights) -> Vec<u8> {
    enc.stream().chunks(1 + enc.block_size()).map(|r| r[0]).collect()
}

#[test]
fn two_block_example_encodes_to_six_bytes() {
    let w = [5i8, 7, 0, 0, 0, 0, 3, 1];
    let enc = encode_blockwise_rle(&w, &cfg(0.5, 2)).unwrap();
    assert_eq!(enc.stream(), &[0, 5, 7, 4, 3, 1]);
    assert_eq!(enc.n_records(), 2);
    assert_eq!(enc.stored_bytes(), 6);
    assert_eq!(decode_oracle(enc.stream(), 2, 8, enc.trailer()), w);
    // 8 dense bytes over 6 sparse bytes equals the analytic ratio at rho=0.5, b=2.
    assert!((8.0 / 6.0 - compression_ratio(&cfg(0.5, 2))).abs() < 1e-12);
}

#[test]
fn six_byte_stream_decodes_to_the_example() {
    let enc = EncodedWeights::from_parts(vec![0, 5, 7, 4, 3, 1], 2, 8, 2, vec![]).unwrap();
    assert_eq!(decode_blockwise_rle(&enc).unwrap(), vec![5, 7, 0, 0, 0, 0, 3, 1]);
}

#[test]
fn all_nonzero_array_has_zero_gaps() {
    let w: Vec<i8> = (1..=8).collect();
    let enc = encode_blockwise_rle(&w, &cfg(0.0, 4)).unwrap();
    assert_eq!(enc.n_records(), 2);
    assert_eq!(enc.stored_bytes(), 10);
    assert_eq!(distances(&enc), vec![0, 0]);
    assert_eq!(decode_blockwise_rle(&enc).unwrap(), w);
}

#[test]
fn long_gap_is_bridged_by_padding_records() {
    let mut w = vec![0i8; 602];
    w[600] = 9;
    w[601] = -4;
    let enc = encode_blockwise_rle(&w, &cfg(0.5, 2)).unwrap();
    assert!(enc.padding_records() >= 2);
    assert!(distances(&enc).iter().all(|&d| d as usize <= MAX_DISTANCE));
    assert_eq!(decode_oracle(enc.stream(), 2, w.len(), enc.trailer()), w);
    assert_eq!(decode_blockwise_rle(&enc).unwrap(), w);
    assert_eq!(enc.raw_bytes() + enc.padding_records() * 3, enc.stored_bytes());
}

#[test]
fn empty_stream_is_all_zeros() {
    let enc = EncodedWeights::from_parts(vec![], 2, 8, 0, vec![]).unwrap();
    assert_eq!(decode_blockwise_rle(&enc).unwrap(), vec![0; 8]);
}

#[test]
fn partially_zero_block_is_unaligned() {
    let err = encode_blockwise_rle(&[1, 0, 2, 3], &cfg(0.0, 2)).unwrap_err();
    assert!(matches!(err, Error::UnalignedSparsity { index: 0 }));
    assert!(matches!(choose_storage_format(&[1, 2, 0, 3], &cfg(0.0, 2)), Err(Error::UnalignedSparsity { index: 2 })));
}

#[test]
fn overrunning_stream_is_corrupt() {
    // A gap of 7 puts the record past an 8-element tensor.
    assert!(matches!(
        EncodedWeights::from_parts(vec![7, 1, 1], 2, 8, 1, vec![]),
        Err(Error::CorruptStream(_))
    ));
}

#[test]
fn compression_ratio_examples() {
    assert!((compression_ratio(&cfg(0.75, 4)) - 3.2).abs() < 1e-12);
    assert!((compression_ratio(&cfg(0.5, 2)) - 4.0 / 3.0).abs() < 1e-12);
    assert!((compression_ratio(&cfg(0.0, 4)) - 0.8).abs() < 1e-12);
}

#[test]
fn dense_tensor_stays_dense() {
    let mut r = rng(1);
    let w = blockwise_tensor(&mut r, 256, 4, 0.0);
    assert!(matches!(choose_storage_format(&w, &cfg(0.0, 4)).unwrap(), StoredWeights::Dense(_)));
}

#[test]
fn ninety_percent_sparse_beats_a_third_of_dense() {
    let mut r = rng(2);
    let w = blockwise_tensor(&mut r, 1024, 4, 0.9);
    let stored = choose_storage_format(&w, &cfg(0.9, 4)).unwrap();
    assert!(stored.is_sparse());
    assert!(stored.byte_len() * 3 <= w.len(), "{} bytes", stored.byte_len());
}

#[test]
fn break_even_goes_to_dense() {
    // b = 4, 4 of 5 blocks kept: 4 * 5 = 20 encoded bytes, 20 dense bytes.
    let mut w: Vec<i8> = (1..=20).collect();
    w[8..12].fill(0);
    let enc = encode_blockwise_rle(&w, &cfg(0.2, 4)).unwrap();
    assert_eq!(enc.stored_bytes(), w.len());
    assert!(matches!(choose_storage_format(&w, &cfg(0.2, 4)).unwrap(), StoredWeights::Dense(_)));
}

#[test]
fn ragged_tail_survives_round_trip() {
    let w = [3i8, 4, 0, 0, 0, 0, 9];
    let enc = encode_blockwise_rle(&w, &cfg(0.5, 2)).unwrap();
    assert_eq!(enc.trailer(), &[9]);
    assert_eq!(decode_blockwise_rle(&enc).unwrap(), w);
}

#[test]
fn measured_ratio_tracks_formula_on_large_tensors() {
    let mut r = rng(3);
    for (rho, b) in [(0.75, 4), (0.5, 2), (0.9, 4), (0.6, 2), (2.0 / 3.0, 3)] {
        let n_blocks = 12_000;
        let w = blockwise_tensor(&mut r, n_blocks, b, rho);
        let enc = encode_blockwise_rle(&w, &cfg(rho, b)).unwrap();
        if enc.padding_records() > 0 {
            continue;
        }
        let measured = w.len() as f64 / enc.stored_bytes() as f64;
        let eta = compression_ratio(&cfg(rho, b));
        assert!((measured / eta - 1.0).abs() <= 0.02, "rho {rho} b {b}: {measured} vs {eta}");
    }
}

fn pruned_tensor() -> impl Strategy<Value = (Vec<i8>, usize, f64)> {
    (prop::sample::select(vec![2usize, 3, 4]), prop::sample::select(vec![0.0, 0.25, 0.5, 0.75, 0.9]), 0usize..400, any::<u64>())
        .prop_map(|(b, rho, n_blocks, seed)| {
            let mut r = rng(seed);
            (blockwise_tensor(&mut r, n_blocks, b, rho), b, rho)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn round_trip_is_identity((w, b, rho) in pruned_tensor()) {
        let enc = encode_blockwise_rle(&w, &cfg(rho, b)).unwrap();
        prop_assert_eq!(enc.stream().len(), enc.n_records() * (1 + b));
        prop_assert_eq!(decode_blockwise_rle(&enc).unwrap(), w.clone());
        prop_assert_eq!(decode_oracle(enc.stream(), b, w.len(), enc.trailer()), w);
    }

    #[test]
    fn sparse_gaps_are_bounded_and_round_trip(b in 2usize..=4, gaps in prop::collection::vec(0usize..1200, 1..6), seed in any::<u64>()) {
        // Explicit long runs of zero blocks force padding records.
        let mut r = rng(seed);
        let mut w = Vec::new();
        for g in gaps {
            w.extend(std::iter::repeat(0i8).take(g * b));
            w.extend((0..b).map(|_| common::nonzero(&mut r)));
        }
        let enc = encode_blockwise_rle(&w, &cfg(0.5, b)).unwrap();
        prop_assert!(distances(&enc).iter().all(|&d| d as usize <= MAX_DISTANCE));
        prop_assert_eq!(decode_blockwise_rle(&enc).unwrap(), w);
    }

    #[test]
    fn adaptive_storage_is_the_smaller_form((w, b, rho) in pruned_tensor()) {
        let enc = encode_blockwise_rle(&w, &cfg(rho, b)).unwrap();
        let stored = choose_storage_format(&w, &cfg(rho, b)).unwrap();
        prop_assert_eq!(stored.byte_len(), enc.stored_bytes().min(w.len()));
        prop_assert!(stored.byte_len() <= w.len());
        prop_assert_eq!(stored.to_dense(), w);
    }

    #[test]
    fn ratio_formula_matches_closed_form(rho in 0.0f64..0.99, b in 2usize..=4) {
        let eta = compression_ratio(&cfg(rho, b));
        prop_assert!((eta * (1.0 - rho) * (1.0 + 1.0 / b as f64) - 1.0).abs() < 1e-12);
    }
}
