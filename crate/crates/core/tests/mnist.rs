mod common;

use specbp::mnist_io::{self, PIXELS, TEST_LEN, TRAIN_LEN};
use specbp::network::{evaluate, Layout, NetworkParams};

#[test]
fn canonical_files_load_with_valid_samples() {
    let data = common::load_mnist();
    assert_eq!(data.train.len(), TRAIN_LEN);
    assert_eq!(data.test.len(), TEST_LEN);
    for s in data.train.iter().chain(&data.test) {
        assert_eq!(s.pixels.len(), PIXELS);
        assert!(s.label < 10);
        assert!(s.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn zero_network_accuracy_is_class_zero_frequency() {
    let data = common::load_mnist();
    let zeros = data.test.iter().filter(|s| s.label == 0).count();
    assert_eq!(zeros, 980);
    let acc = evaluate(&NetworkParams::zeros(Layout::MNIST), &data.test).unwrap();
    assert_eq!(acc, 0.098);
}

#[test]
fn image_payload_round_trips() {
    let path = common::mnist_dir().join(mnist_io::TEST_IMAGES);
    let bytes = std::fs::read(path).unwrap();
    let grids = mnist_io::parse_idx_images(&bytes).unwrap();
    assert_eq!(mnist_io::encode_idx_images(&grids), bytes);
}
