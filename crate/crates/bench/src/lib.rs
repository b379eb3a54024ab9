//! Fixtures shared by the benchmarks.

use cgr::harness::RunConfig;
use cgr::scene::SceneSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default run configuration over a handful of scenes.
pub fn small_run(iterations: usize) -> RunConfig {
    let mut cfg = RunConfig {
        iterations,
        ..RunConfig::default()
    };
    cfg.data.n_train = 8;
    cfg.data.n_eval = 4;
    cfg
}

pub fn held_out_scene(cfg: &RunConfig) -> SceneSample {
    cfg.data.eval_split().expect("default data generates").swap_remove(0)
}

/// `rows × cols` matrix of uniform costs in `[0, 1)`.
pub fn random_cost(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows).map(|_| (0..cols).map(|_| rng.random()).collect()).collect()
}
