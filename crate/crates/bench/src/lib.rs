//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use warpformer::dataio::{Batch, Grid, TaskKind};
use warpformer::harness::gradsuite::toy_grid;
use warpformer::model::{ModelConfig, ModelDims, Warpformer};
use warpformer::warp::WarpMode;
use warpformer::ParamStore;

pub fn batch(size: usize, k: usize, len: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grids: Vec<Grid> = (0..size).map(|_| toy_grid(&mut rng, k, len)).collect();
    let refs: Vec<&Grid> = grids.iter().collect();
    Batch::new(&refs, None).expect("equal-variate grids")
}

pub fn model(warp: WarpMode, d: usize, k: usize, len: usize) -> (Warpformer, ParamStore) {
    let config = ModelConfig {
        d_model: d,
        heads: 1,
        depth: 1,
        scales: vec![1.0, 0.2],
        warp,
        ..ModelConfig::default()
    };
    let dims = ModelDims {
        num_variates: k,
        num_classes: 2,
        task: TaskKind::Sequence,
        median_length: len as f64,
    };
    let mut store = ParamStore::new();
    let m = Warpformer::new(config, dims, &mut store, 0).expect("valid config");
    (m, store)
}

pub fn scores(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (rng.random::<f64>(), rng.random_bool(0.3))).unzip()
}
