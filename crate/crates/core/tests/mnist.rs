use std::path::PathBuf;

use xkfac::data::{data_dir, load_mnist_train, permute_task, split, DATA_DIR_ENV};

fn dir() -> PathBuf {
    if std::env::var_os(DATA_DIR_ENV).is_some() {
        data_dir(None)
    } else {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
    }
}

#[test]
fn official_training_set_loads() {
    let ds = load_mnist_train(&dir()).expect("MNIST training files under data/ or $XKFAC_DATA_DIR");
    assert_eq!((ds.len(), ds.features(), ds.classes), (60_000, 784, 10));
    assert!(ds.images.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(ds.class_counts().iter().all(|&c| c > 5000));

    let (train, val) = split(&ds, 0.1, 0).unwrap();
    assert_eq!((train.len(), val.len()), (54_000, 6_000));

    assert_eq!(permute_task(&val, 0).images, val.images);
    let a = permute_task(&val, 3);
    assert_eq!(a.images, permute_task(&val, 3).images);
    assert_ne!(a.images, val.images);
}
