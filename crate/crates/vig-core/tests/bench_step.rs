// Rough training-step throughput probe; run manually with --ignored.
use ndarray::Array2;
use vig_core::model::{Crf, ModelConfig};
use vig_core::rng::rng_from;
use rand::Rng;
use std::time::Instant;

fn step_time(base: usize, crop: usize, clip: usize, iters: usize) -> f64 {
    let cfg = ModelConfig { base_channels: base, ..ModelConfig::default() };
    let mut model: Crf<f32> = Crf::new(cfg, 1).unwrap();
    let mut rng = rng_from(2);
    let frames: Vec<Array2<f32>> = (0..clip)
        .map(|_| Array2::from_shape_fn((crop, crop), |_| rng.gen_range(0.0..1.0f32)))
        .collect();
    let coeffs: Vec<Array2<f32>> = frames.clone();
    let t0 = Instant::now();
    for _ in 0..iters {
        model.params_mut().zero_grads();
        let (_, cache) = model.enhance_sequence_cached(&frames).unwrap();
        model.backward_sequence(&cache, &coeffs).unwrap();
    }
    t0.elapsed().as_secs_f64() / iters as f64
}

#[test]
#[ignore]
fn bench() {
    for (base, crop, clip) in [(8, 64, 7), (8, 64, 5), (8, 48, 5), (8, 32, 5), (4, 32, 5), (4, 32, 4)] {
        let dt = step_time(base, crop, clip, 5);
        println!("base={base} crop={crop} clip={clip}: {:.1} ms/iter -> 500 iters = {:.0}s, x20 seeds = {:.0}s", dt * 1e3, dt * 500.0, dt * 10000.0);
    }
}
