#![allow(dead_code)]

use std::path::PathBuf;

use kakurenbo::harness::{DatasetSpec, ModelSpec, RunConfig, Strategy};
use kakurenbo::model::Arch;

/// MNIST IDX directory: `$KAKU_MNIST_DIR`, else `data/mnist` at the
/// workspace root.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("KAKU_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn mnist_available() -> bool {
    mnist_dir().join("train-images-idx3-ubyte").is_file()
}

/// Small synthetic blobs run.
pub fn blobs(strategy: Strategy, n: usize, epochs: usize) -> RunConfig {
    RunConfig {
        strategy,
        epochs,
        batch_size: 64,
        dataset: DatasetSpec {
            n,
            test_n: n / 4,
            dim: 8,
            classes: 4,
            ..Default::default()
        },
        model: ModelSpec {
            arch: Arch::Mlp1,
            hidden: 16,
        },
        ..Default::default()
    }
}
