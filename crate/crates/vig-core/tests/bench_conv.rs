use ndarray::{Array1, Array4, Array5};
use vig_core::ops::{conv3d, conv3d_backward};
use std::time::Instant;

fn bench_one(t: usize, ci: usize, co: usize, h: usize, kt: usize, k: usize, pad: usize, label: &str) {
    let x = Array4::<f32>::from_elem((t, ci, h, h), 0.3);
    let w = Array5::<f32>::from_elem((co, ci, kt, k, k), 0.01);
    let b = Array1::<f32>::zeros(co);
    let iters = 50;
    let t0 = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..iters {
        let y = conv3d(x.view(), w.view(), b.view(), pad).unwrap();
        sink += y[[0, 0, 0, 0]];
    }
    let fwd = t0.elapsed().as_secs_f64() / iters as f64;
    let y = conv3d(x.view(), w.view(), b.view(), pad).unwrap();
    let t1 = Instant::now();
    for _ in 0..iters {
        let (gx, _, _) = conv3d_backward(x.view(), w.view(), &y, pad).unwrap();
        sink += gx[[0, 0, 0, 0]];
    }
    let bwd = t1.elapsed().as_secs_f64() / iters as f64;
    let to = t - kt + 1;
    let macs = (to * co * h * h * ci * kt * k * k) as f64;
    println!(
        "{label}: fwd {:.2} ms ({:.1} GFLOP/s), bwd {:.2} ms ({:.1} GFLOP/s) [sink {sink}]",
        fwd * 1e3, 2.0 * macs / fwd / 1e9, bwd * 1e3, 3.0 * 2.0 * macs / bwd / 1e9
    );
}

#[test]
#[ignore]
fn bench() {
    bench_one(5, 16, 16, 32, 2, 3, 1, "tsd1-conv crop64");
    bench_one(5, 32, 16, 32, 1, 1, 0, "tsd1-proj crop64");
    bench_one(4, 32, 32, 16, 2, 3, 1, "tsd2-conv crop64");
    bench_one(1, 8, 1, 64, 1, 3, 1, "fuse crop64");
    bench_one(5, 16, 16, 16, 2, 3, 1, "tsd1-conv crop32");
}
