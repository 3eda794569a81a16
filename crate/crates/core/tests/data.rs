use std::path::Path;

use trilevel_core::data::{load_cifar_batches, load_dataset, load_mnist_split, CIFAR_RECORD};
use trilevel_core::{CoreError, DatasetKind};

fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn mnist_idx_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..3 * 4 * 4).map(|i| i as u8).collect();
    let imgs = write(dir.path(), "i", &idx(0x803, &[3, 4, 4], &pixels));
    let labs = write(dir.path(), "l", &idx(0x801, &[3], &[7, 0, 9]));
    let d = load_mnist_split(&imgs, &labs).unwrap();
    assert_eq!((d.len(), d.channels, d.size), (3, 1, 4));
    assert_eq!(d.image(1), &pixels[16..32]);
    assert_eq!(d.labels(), &[7, 0, 9]);
}

#[test]
fn mnist_errors_carry_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let labs = write(dir.path(), "l", &idx(0x801, &[2], &[1, 2]));
    let bad_magic = write(dir.path(), "a", &idx(0x802, &[2, 2, 2], &[0; 8]));
    match load_mnist_split(&bad_magic, &labs) {
        Err(CoreError::Format { offset: 0, msg, .. }) => assert!(msg.contains("magic")),
        other => panic!("{other:?}"),
    }
    let short = write(dir.path(), "b", &idx(0x803, &[2, 2, 2], &[0; 5]));
    match load_mnist_split(&short, &labs) {
        Err(CoreError::Format { offset, .. }) => assert_eq!(offset, 16 + 5),
        other => panic!("{other:?}"),
    }
    let bad_label = write(dir.path(), "c", &idx(0x801, &[2], &[1, 12]));
    let ok = write(dir.path(), "d", &idx(0x803, &[2, 2, 2], &[0; 8]));
    match load_mnist_split(&ok, &bad_label) {
        Err(CoreError::Format { offset, .. }) => assert_eq!(offset, 9),
        other => panic!("{other:?}"),
    }
}

#[test]
fn cifar_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for label in [3u8, 9] {
        bytes.push(label);
        bytes.extend((0..3072).map(|i| (i % 251) as u8));
    }
    let p = write(dir.path(), "data_batch_1.bin", &bytes);
    let d = load_cifar_batches(&[p.clone(), p]).unwrap();
    assert_eq!((d.len(), d.channels, d.size), (4, 3, 32));
    assert_eq!(d.labels(), &[3, 9, 3, 9]);
    assert_eq!(d.image(1)[1024], (1024 % 251) as u8);

    let t = write(dir.path(), "t.bin", &bytes[..CIFAR_RECORD + 10]);
    match load_cifar_batches(&[t]) {
        Err(CoreError::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
        other => panic!("{other:?}"),
    }
    let mut bad = bytes.clone();
    bad[CIFAR_RECORD] = 10;
    let b = write(dir.path(), "b.bin", &bad);
    match load_cifar_batches(&[b]) {
        Err(CoreError::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [DatasetKind::Mnist, DatasetKind::Cifar10] {
        assert!(matches!(
            load_dataset(&kind, dir.path(), 1, 28),
            Err(CoreError::Format { .. })
        ));
    }
}

#[test]
fn synthetic_splits_are_reproducible() {
    let kind = DatasetKind::Synthetic { train: 100, test: 40 };
    let a = load_dataset(&kind, Path::new("unused"), 3, 16).unwrap();
    let b = load_dataset(&kind, Path::new("unused"), 3, 16).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.0.len(), a.1.len(), a.0.channels, a.0.size), (100, 40, 3, 16));
    assert_ne!(a.0.image(0), a.1.image(0));
}
