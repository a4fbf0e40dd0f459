use ensembench::formats::checkpoint;
use ensembench::formats::dataset::{load_cifar, load_portable, save_portable, CifarVariant};
use ensembench::Error;
use ensembench_core::data::synth_clusters;
use ensembench_core::zoo::{ArchitectureSpec, Head, ModelInstance};
use ensembench_core::RngStream;

const PLANE: usize = 1024;

/// Record `r` has label `labels[r]`; channel `c` of pixel `p` holds
/// `(p + 37 * c + 101 * r) % 256`.
fn crafted_cifar10(labels: &[u8]) -> Vec<u8> {
    let mut bytes = Vec::new();
    for (r, &l) in labels.iter().enumerate() {
        bytes.push(l);
        for c in 0..3 {
            bytes.extend((0..PLANE).map(|p| ((p + 37 * c + 101 * r) % 256) as u8));
        }
    }
    bytes
}

#[test]
fn cifar_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch_1.bin");
    std::fs::write(&path, crafted_cifar10(&[0, 7, 9])).unwrap();
    let split = load_cifar(std::slice::from_ref(&path), CifarVariant::Cifar10).unwrap();
    assert_eq!(split.len(), 3);
    assert_eq!(split.labels(), &[0, 7, 9]);
    assert_eq!(split.shape(), [32, 32, 3]);
    for r in 0..3 {
        let img = split.image(r);
        for p in [0usize, 1, 31, 32, 500, 1023] {
            for c in 0..3 {
                assert_eq!(
                    img[p * 3 + c],
                    ((p + 37 * c + 101 * r) % 256) as u8,
                    "record {} pixel {} channel {}",
                    r,
                    p,
                    c
                );
            }
        }
    }

    let mut bad = crafted_cifar10(&[1, 2, 3]);
    bad[2 * 3073] = 10;
    std::fs::write(&path, &bad).unwrap();
    match load_cifar(std::slice::from_ref(&path), CifarVariant::Cifar10) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 2 * 3073),
        other => panic!("{:?}", other),
    }
    std::fs::write(&path, &bad[..3073 + 5]).unwrap();
    assert!(matches!(
        load_cifar(&[path], CifarVariant::Cifar10),
        Err(Error::Format { .. })
    ));
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for spec in [
        ArchitectureSpec::resnet(8, 3, 4).with_input(8, 8, 3),
        ArchitectureSpec::densenet_bc(16, 2, 3)
            .with_input(8, 8, 3)
            .with_head(Head::Cosine),
    ] {
        let m = ModelInstance::<f32>::build(&spec, &mut RngStream::new(4, 1)).unwrap();
        let path = dir.path().join(format!("{}.ckpt", spec.name()));
        checkpoint::write(&path, &m).unwrap();
        let back = checkpoint::read(&path).unwrap();
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.state(), m.state());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(checkpoint::read(&path).is_err());
    }
    assert!(matches!(
        checkpoint::read(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn portable_dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth_clusters(4, 3, [5, 5, 3], 2.0, 8).unwrap();
    let path = dir.path().join("train.sds");
    save_portable(&path, &d).unwrap();
    assert_eq!(load_portable(&path).unwrap(), d);
}
