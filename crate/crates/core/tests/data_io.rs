use std::path::PathBuf;

use bmrs::data::{dataset_from_idx, dataset_to_idx, encode_idx_images, encode_idx_labels, load_mnist_dir, parse_idx_images, parse_idx_labels, split, synth_blobs, Split};
use bmrs::experiment::{resolve_dataset_dir, DatasetKind};
use bmrs::Error;
use proptest::prelude::*;

fn mnist_dir() -> PathBuf {
    let root = std::env::var_os("BMRS_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    resolve_dataset_dir(Some(&root), DatasetKind::Mnist).expect("MNIST IDX files (set BMRS_DATA_DIR)")
}

#[test]
fn mnist_loads_with_known_shapes_and_class_histograms() {
    let (train, test) = load_mnist_dir(&mnist_dir()).unwrap();
    assert_eq!(train.images.shape(), &[60000, 1, 28, 28]);
    assert_eq!(test.images.shape(), &[10000, 1, 28, 28]);
    assert_eq!(train.class_counts(), vec![5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]);
    assert_eq!(test.class_counts(), vec![980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]);
    assert!(train.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn mnist_reserializes_byte_for_byte() {
    let dir = mnist_dir();
    let images = std::fs::read(dir.join("t10k-images-idx3-ubyte")).unwrap();
    let labels = std::fs::read(dir.join("t10k-labels-idx1-ubyte")).unwrap();
    let ds = dataset_from_idx(&images, &labels, Split::Test).unwrap();
    let (i2, l2) = dataset_to_idx(&ds).unwrap();
    assert!(i2 == images, "image bytes differ after a round trip");
    assert!(l2 == labels, "label bytes differ after a round trip");
}

#[test]
fn single_pixel_file_maps_255_to_one() {
    let mut px = vec![0u8; 4];
    px[0] = 255;
    let ds = dataset_from_idx(&encode_idx_images(&px, [1, 2, 2]), &encode_idx_labels(&[7]), Split::Full).unwrap();
    assert_eq!(ds.images.data(), &[1.0, 0.0, 0.0, 0.0]);
    assert_eq!(ds.labels, vec![7]);
}

#[test]
fn corrupt_files_report_the_offset() {
    let good = encode_idx_images(&[1, 2, 3, 4], [1, 2, 2]);
    let mut bad_magic = good.clone();
    bad_magic[3] = 0x01;
    assert!(matches!(parse_idx_images(&bad_magic), Err(Error::Parse { offset: 0, .. })));
    assert!(matches!(parse_idx_images(&good[..18]), Err(Error::Parse { offset: 18, .. })));
    assert!(matches!(parse_idx_images(&good[..10]), Err(Error::Parse { offset: 8, .. })));
    let mut long = encode_idx_labels(&[1, 2]);
    long.push(9);
    assert!(matches!(parse_idx_labels(&long), Err(Error::Parse { offset: 10, .. })));
}

#[test]
fn missing_directory_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(resolve_dataset_dir(Some(tmp.path()), DatasetKind::Mnist), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn idx_round_trips(pixels in proptest::collection::vec(any::<u8>(), 0..200), cols in 1usize..5) {
        let n = pixels.len() / cols;
        let px = &pixels[..n * cols];
        let enc = encode_idx_images(px, [n, 1, cols]);
        let (back, dims) = parse_idx_images(&enc).unwrap();
        prop_assert_eq!(back, px.to_vec());
        prop_assert_eq!(dims, [n, 1, cols]);
    }

    #[test]
    fn split_is_a_seeded_partition(n in 2usize..200, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let ds = synth_blobs(n, 2, 2, 1.0, 0).unwrap();
        let (a, b) = split(&ds, frac, seed).unwrap();
        prop_assert_eq!(a.len() + b.len(), n);
        prop_assert_eq!(a.len(), (frac * n as f64).round() as usize);
        let (a2, _) = split(&ds, frac, seed).unwrap();
        prop_assert_eq!(a.images.data(), a2.images.data());
    }
}
