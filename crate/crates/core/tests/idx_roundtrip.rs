use horkd::data::idx::{load_idx, write_idx};
use horkd::models::ImageBatch;
use horkd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_batch_round_trips_bit_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, h, w) = (7, 5, 3);
    // values on the byte grid so quantization is lossless
    let data: Vec<f64> = (0..n * h * w).map(|_| rng.random_range(0..=255u32) as f64 / 255.0).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let batch = ImageBatch::new(Tensor::new(vec![n, h, w, 1], data).unwrap(), labels).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    write_idx(&batch, &img, &lab).unwrap();
    let back: ImageBatch<f64> = load_idx(&img, &lab).unwrap();
    assert_eq!(back, batch);
}
