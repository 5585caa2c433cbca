//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vastsum_core::data::generate_synthetic;
use vastsum_core::decoder::SegmentKnapsackInstance;
use vastsum_core::{ModelConfig, SyntheticConfig, VideoRecord};

/// `m` segments with weights in `1..=max_weight` and budget 15% of the total.
pub fn knapsack_instance(m: usize, max_weight: usize, seed: u64) -> SegmentKnapsackInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
    let weights: Vec<usize> = (0..m).map(|_| rng.gen_range(1..=max_weight)).collect();
    let capacity = weights.iter().sum::<usize>() * 15 / 100;
    SegmentKnapsackInstance::new(values, weights, capacity).expect("valid instance")
}

/// Two length-`n` vectors over `levels` values, so ties are frequent.
pub fn tied_pair(n: usize, levels: u32, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || (0..n).map(|_| f64::from(rng.gen_range(0..levels))).collect::<Vec<_>>();
    (draw(), draw())
}

/// One synthetic video of `steps` timesteps and a default-shaped model of width `d`.
pub fn model_and_video(d: usize, steps: usize) -> (ModelConfig, VideoRecord) {
    let data = generate_synthetic(&SyntheticConfig {
        n_videos: 1,
        steps,
        segments: (steps / 10).max(1),
        ..SyntheticConfig::default()
    })
    .expect("synthetic video");
    let mut model = ModelConfig::default();
    model.scorer.input_dim = data.feature_dim();
    model.scorer.model_dim = d;
    model.scorer.max_len = steps;
    model.head.hidden_dim = d;
    let video = data.videos.into_iter().next().expect("one video");
    (model, video)
}
