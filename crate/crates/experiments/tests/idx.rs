use std::path::PathBuf;

use sha2::{Digest, Sha256};

use kronflow_experiments::data::{load_idx, parse_idx_images, parse_idx_labels};
use kronflow_experiments::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn fixture_loads_as_four_scaled_images() {
    let h = load_idx(&fixture("images.idx"), &fixture("labels.idx"), None).unwrap();
    assert_eq!(h.features.shape(), &[4, 784]);
    assert!(h.features.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(h.labels, vec![7, 2, 1, 0]);
    assert_eq!(h.classes, 8);
}

#[test]
fn fixture_checksum_matches_reference() {
    let h = load_idx(&fixture("images.idx"), &fixture("labels.idx"), None).unwrap();
    let mut hasher = Sha256::new();
    for v in h.features.data() {
        hasher.update(v.to_le_bytes());
    }
    for &l in &h.labels {
        hasher.update((l as u64).to_le_bytes());
    }
    let got: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let want = std::fs::read_to_string(fixture("fixture.sha256")).unwrap();
    assert_eq!(got, want.trim());
}

#[test]
fn subset_keeps_the_first_examples() {
    let full = load_idx(&fixture("images.idx"), &fixture("labels.idx"), None).unwrap();
    let h = load_idx(&fixture("images.idx"), &fixture("labels.idx"), Some(2)).unwrap();
    assert_eq!(h.features.shape(), &[2, 784]);
    assert_eq!(h.features.data(), &full.features.data()[..2 * 784]);
    assert_eq!(h.labels, vec![7, 2]);
}

#[test]
fn label_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.idx");
    let mut bytes = std::fs::read(fixture("labels.idx")).unwrap();
    bytes[7] = 3;
    bytes.pop();
    std::fs::write(&labels, bytes).unwrap();
    match load_idx(&fixture("images.idx"), &labels, None) {
        Err(Error::Idx { offset, message }) => {
            assert_eq!(offset, 4);
            assert!(message.contains("4 images but 3 labels"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn truncation_and_magic_errors_name_offsets() {
    let bytes = std::fs::read(fixture("images.idx")).unwrap();
    let err = parse_idx_images(&bytes[..1000], None).unwrap_err().to_string();
    assert!(err.contains("byte 1000") && err.contains("offset 16"), "{err}");
    let err = parse_idx_labels(&bytes, None).unwrap_err().to_string();
    assert!(err.contains("bad magic 0x00000803"), "{err}");
}
