// Throughput probe for the hot kernels (run manually).
use glearn_core::numkit::Mat;
use std::time::Instant;

fn mat_rand(r: usize, c: usize, seed: u64) -> Mat {
    let mut s = seed | 1;
    Mat::from_fn(r, c, |_, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    })
}

fn main() {
    let n = 1797usize;

    // Gram with k = 512 (8 heads x 64 dims concatenated)
    let u = mat_rand(n, 512, 1);
    let t = Instant::now();
    let reps = 3;
    let mut sink = 0.0;
    for _ in 0..reps {
        let g = u.gram(1.0 / 8.0);
        sink += g[(0, 1)];
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    let flops = (n * n / 2) as f64 * 512.0 * 2.0;
    println!("gram n=1797 k=512: {:.3} s  {:.2} GFLOPS (effective, half)  [{sink:.3}]", dt, flops / dt / 1e9);

    // Gram with k = 128 (8 heads x 16 dims)
    let u2 = mat_rand(n, 128, 2);
    let t = Instant::now();
    for _ in 0..reps { let g = u2.gram(0.125); sink += g[(1, 2)]; }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    let flops = (n * n / 2) as f64 * 128.0 * 2.0;
    println!("gram n=1797 k=128: {:.3} s  {:.2} GFLOPS  [{sink:.3}]", dt, flops / dt / 1e9);

    // nn: (n x n) · (n x 16)  — message passing
    let a = mat_rand(n, n, 3);
    let h = mat_rand(n, 16, 4);
    let t = Instant::now();
    for _ in 0..reps { let z = a.matmul(&h); sink += z[(5, 5)]; }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    let flops = (n * n * 16) as f64 * 2.0;
    println!("nn   (n,n)x(n,16): {:.3} s  {:.2} GFLOPS  [{sink:.3}]", dt, flops / dt / 1e9);

    // nt: (n x 16) · (n x 16)^T — dA gradient
    let g1 = mat_rand(n, 16, 5);
    let t = Instant::now();
    for _ in 0..reps { let z = g1.matmul_nt(&h); sink += z[(9, 9)]; }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("nt   (n,16)x(n,16)T: {:.3} s  {:.2} GFLOPS  [{sink:.3}]", dt, flops / dt / 1e9);

    // tn: (n x n)^T · (n x 16) — dH gradient
    let t = Instant::now();
    for _ in 0..reps { let z = a.matmul_tn(&h); sink += z[(9, 9)]; }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("tn   (n,n)Tx(n,16): {:.3} s  {:.2} GFLOPS  [{sink:.3}]", dt, flops / dt / 1e9);

    // nn big-k: (n x n) · (n x 512) — dense fallback for metric backward
    let uc = mat_rand(n, 512, 6);
    let t = Instant::now();
    for _ in 0..reps { let z = a.matmul(&uc); sink += z[(3, 3)]; }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    let flops = (n * n * 512) as f64 * 2.0;
    println!("nn   (n,n)x(n,512): {:.3} s  {:.2} GFLOPS  [{sink:.3}]", dt, flops / dt / 1e9);

    // elementwise stream: axpby over n^2
    let b = mat_rand(n, n, 7);
    let t = Instant::now();
    let mut c = Mat::zeros(n, n);
    for _ in 0..reps {
        let (cs, as_, bs) = (c.as_mut_slice(), a.as_slice(), b.as_slice());
        for i in 0..cs.len() { cs[i] = 0.3 * as_[i] + 0.7 * bs[i]; }
        sink += c[(8, 8)];
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    let bytes = (n * n * 8 * 3) as f64;
    println!("axpby n^2 stream: {:.4} s  {:.2} GB/s  [{sink:.3}]", dt, bytes / dt / 1e9);
}
