mod common;

use otvc_core::embio::{
    load_csv, load_embeddings, read_csv, save_csv, save_embeddings, write_csv, EmbeddingMatrix,
    HEADER_LEN,
};
use proptest::prelude::*;

fn arb_matrix() -> impl Strategy<Value = EmbeddingMatrix> {
    (1usize..12, 1usize..12).prop_flat_map(|(r, d)| {
        proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), r * d)
            .prop_map(move |data| EmbeddingMatrix::new(r, d, data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn binary_round_trip_is_bit_exact(m in arb_matrix()) {
        let bytes = m.to_emb1_bytes().unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + 4 * m.rows() * m.dims());
        let back = EmbeddingMatrix::from_emb1_bytes(&bytes).unwrap();
        let a: Vec<u32> = m.as_slice().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.as_slice().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
        prop_assert_eq!((back.rows(), back.dims()), (m.rows(), m.dims()));
    }

    #[test]
    fn csv_then_binary_then_csv_preserves_values(m in arb_matrix()) {
        let mut text = Vec::new();
        write_csv(&m, &mut text).unwrap();
        let parsed = read_csv(text.as_slice()).unwrap();
        let bin = EmbeddingMatrix::from_emb1_bytes(&parsed.to_emb1_bytes().unwrap()).unwrap();
        let mut text2 = Vec::new();
        write_csv(&bin, &mut text2).unwrap();
        let again = read_csv(text2.as_slice()).unwrap();
        for (a, b) in m.as_slice().iter().zip(again.as_slice()) {
            let scale = a.abs().max(f32::MIN_POSITIVE);
            prop_assert!(((a - b).abs() / scale) <= 1e-6);
        }
    }

    /// Whatever bytes we hand the parser, it either errors or yields a matrix
    /// that satisfies every invariant.
    #[test]
    fn arbitrary_bytes_never_yield_invalid_matrix(bytes in proptest::collection::vec(any::<u8>(), 0..96)) {
        if let Ok(m) = EmbeddingMatrix::from_emb1_bytes(&bytes) {
            prop_assert!(m.rows() >= 1 && m.dims() >= 1);
            prop_assert_eq!(m.as_slice().len(), m.rows() * m.dims());
            prop_assert!(m.as_slice().iter().all(|v| v.is_finite()));
            prop_assert_eq!(bytes.len(), HEADER_LEN + 4 * m.rows() * m.dims());
        }
    }
}

#[test]
fn file_round_trip_over_many_random_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = common::rng(11);
    for i in 0..100 {
        let rows = 1 + i % 7;
        let dims = 1 + (i * 3) % 11;
        let m = common::random_matrix(&mut rng, rows, dims);
        let path = dir.path().join(format!("m{i}.emb"));
        save_embeddings(&m, &path).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back, m);
        assert!(m
            .as_slice()
            .iter()
            .zip(back.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn five_by_four_survives_disk_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::random_matrix(&mut common::rng(3), 5, 4);
    let bin = dir.path().join("x.emb");
    let csv = dir.path().join("x.csv");
    save_embeddings(&m, &bin).unwrap();
    save_csv(&load_embeddings(&bin).unwrap(), &csv).unwrap();
    assert_eq!(load_csv(&csv).unwrap(), m);
    assert_eq!(
        std::fs::metadata(&bin).unwrap().len(),
        (HEADER_LEN + 5 * 4 * 4) as u64
    );
}
