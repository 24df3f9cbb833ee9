//! Shared fixtures for the kernel benchmarks.

use aia_core::model::build_model;
use aia_core::tasks::{sample_from_seed, sample_seed, task_model_config, SampleOptions, Split};
use aia_core::{Checkpoint, Task, TokenSequence};

/// Freshly initialized task-sized model.
pub fn model() -> Checkpoint {
    build_model(&task_model_config()).expect("default task config is valid")
}

/// `n` samples alternating between the two tasks, deterministic in `seed`.
pub fn mixed_samples(n: usize, seed: u64) -> Vec<TokenSequence> {
    (0..n as u64)
        .map(|i| {
            let task = if i % 2 == 0 { Task::Generation } else { Task::Understanding };
            sample_from_seed(task, sample_seed(Split::Train, seed, i), SampleOptions::default())
        })
        .collect()
}
