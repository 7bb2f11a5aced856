use owseg_core::data::{
    read_labels, read_scan, write_labels, write_scan, LABEL_RECORD_BYTES, SCAN_RECORD_BYTES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_finite_f32(rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let v = f32::from_bits(rng.random());
        if v.is_finite() {
            return v;
        }
    }
}

#[test]
fn thousand_random_files_round_trip_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..1000 {
        let m = rng.random_range(1..300);
        let scan_bytes: Vec<u8> = (0..m)
            .flat_map(|_| {
                let remission: f32 = rng.random();
                [
                    random_finite_f32(&mut rng),
                    random_finite_f32(&mut rng),
                    random_finite_f32(&mut rng),
                    remission,
                ]
            })
            .flat_map(f32::to_le_bytes)
            .collect();
        assert_eq!(scan_bytes.len(), m * SCAN_RECORD_BYTES);
        let scan = read_scan(&scan_bytes).unwrap();
        assert_eq!(scan.len(), m);
        assert_eq!(write_scan(&scan), scan_bytes);

        let label_bytes: Vec<u8> = (0..m)
            .flat_map(|_| rng.random::<u32>().to_le_bytes())
            .collect();
        assert_eq!(label_bytes.len(), m * LABEL_RECORD_BYTES);
        let (labels, instances) = read_labels(&label_bytes, m).unwrap();
        assert_eq!(write_labels(&labels, &instances).unwrap(), label_bytes);
    }
}

#[test]
fn packed_word_splits_into_semantic_and_instance() {
    let (labels, instances) = read_labels(&0x0002_0001u32.to_le_bytes(), 1).unwrap();
    assert_eq!(labels.get(0), Some(1));
    assert_eq!(instances, vec![2]);
}
