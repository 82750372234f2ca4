//! Shared fixtures for the benchmarks.

use feddq_core::federation::{Execution, FederationConfig, Partition};
use feddq_core::numerics::{make_synthetic, BatchSize, DatasetShard, ModelSpec, SgdConfig, SyntheticTask};
use feddq_core::rng::{Purpose, RandomStream};

/// A `d`-coordinate vector drawn uniformly from `[-1, 1)`.
pub fn update_vector(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = RandomStream::keyed(seed, 0, 0, Purpose::Aux);
    (0..d).map(|_| 2.0 * rng.next_unit() - 1.0).collect()
}

/// Logistic-regression task with train and eval splits.
pub fn blobs_task(input_dim: usize, n_train: usize) -> (ModelSpec, DatasetShard, DatasetShard) {
    let data = make_synthetic(SyntheticTask::LogregBlobs { separation: 10.0 }, input_dim, n_train + n_train / 2, 1.0, 0).unwrap();
    let (train, eval) = data.shard.split_at(n_train);
    (ModelSpec::logistic_regression(input_dim), train, eval)
}

pub fn federation(n_clients: usize, rounds: usize, execution: Execution) -> FederationConfig {
    FederationConfig {
        n_clients,
        r_selected: n_clients,
        rounds,
        sgd: SgdConfig {
            eta: 0.1,
            tau: 5,
            batch_size: BatchSize::Full,
        },
        seed: 0,
        partition: Partition::Iid,
        execution,
        verification: false,
    }
}
