use confsmoe_core::Mat;
use std::time::Instant;

fn main() {
    let a = Mat::from_fn(1536, 32, |i, j| ((i * 31 + j) as f64 * 0.01).sin());
    let b = Mat::from_fn(32, 32, |i, j| ((i + j) as f64 * 0.02).cos());
    let mut acc = 0.0;
    let t = Instant::now();
    let iters = 2000;
    for _ in 0..iters {
        let c = a.matmul(&b);
        acc += c[(0, 0)];
    }
    let dt = t.elapsed().as_secs_f64();
    let flops = (1536 * 32 * 32 * 2) as f64 * iters as f64;
    println!("matmul  : {:.2} GFlop/s ({acc})", flops / dt / 1e9);

    let bt = Mat::from_fn(32, 32, |i, j| ((i * 3 + j) as f64 * 0.05).sin());
    let t = Instant::now();
    for _ in 0..iters {
        let c = a.matmul_nt(&bt);
        acc += c[(0, 0)];
    }
    let dt = t.elapsed().as_secs_f64();
    println!("matmulNT: {:.2} GFlop/s ({acc})", flops / dt / 1e9);

    let big = Mat::from_fn(1536, 32, |i, j| ((i + j * 7) as f64 * 0.03).sin());
    let t = Instant::now();
    for _ in 0..iters {
        let c = a.matmul_tn(&big);
        acc += c[(0, 0)];
    }
    let dt = t.elapsed().as_secs_f64();
    println!("matmulTN: {:.2} GFlop/s ({acc})", flops / dt / 1e9);
}
