//! Quick throughput probe for the dense kernels on the current machine.
//! Run with: cargo run --example bench_kernels

use std::time::Instant;

use saec::tensor::kernels::{gemm_nn, gemm_nt, gemm_tn};
use saec::tensor::tape::Tape;
use saec::Tensor;

fn fill(n: usize, seed: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * seed).sin() * 0.1).collect()
}

fn bench_gemm(name: &str, m: usize, k: usize, n: usize, reps: usize, which: u8) {
    let a_len = match which {
        1 => m * k, // nt: a is m x k
        2 => k * m, // tn: a is k x m
        _ => m * k,
    };
    let b_len = match which {
        1 => n * k,
        _ => k * n,
    };
    let a = fill(a_len, 0.31);
    let b = fill(b_len, 0.17);
    let mut c = vec![0.0f64; m * n];
    let t0 = Instant::now();
    for _ in 0..reps {
        match which {
            0 => gemm_nn(m, k, n, &a, &b, &mut c),
            1 => gemm_nt(m, k, n, &a, &b, &mut c),
            _ => gemm_tn(m, k, n, &a, &b, &mut c),
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    let gflops = (2.0 * (m * k * n * reps) as f64) / dt / 1e9;
    println!("{name:<28} {m:>4}x{k:>4}x{n:>4} reps {reps:>5}: {dt:>7.3}s  {gflops:>6.2} GF/s");
    std::hint::black_box(&c);
}

fn bench_conv_tape() {
    // mid-level conv: batch 32, 16ch 16x16 -> 32ch, 3x3 stride 1 pad 1
    let (n, c, h, w, f) = (32, 16, 16, 16, 32);
    let x = Tensor::param(&[n, c, h, w], fill(n * c * h * w, 0.13)).unwrap();
    let k = Tensor::param(&[f, c, 3, 3], fill(f * c * 9, 0.29)).unwrap();
    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let y = tape.conv2d(&x, &k, 1, 1).unwrap();
        let loss = tape.mean_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        x.zero_grad();
        k.zero_grad();
    }
    let dt = t0.elapsed().as_secs_f64();
    let fwd_flops = 2.0 * (n * f * h * w * c * 9) as f64;
    let total = fwd_flops * 3.0 * reps as f64; // fwd + two backward gemms
    println!(
        "conv2d fwd+bwd (tape)        [32,16,16,16]->32ch reps {reps}: {:.3}s  ~{:.2} GF/s  ({:.1} ms/rep)",
        dt,
        total / dt / 1e9,
        dt / reps as f64 * 1e3
    );
}

fn main() {
    // shapes that dominate the training step
    bench_gemm("gemm_nt (conv fwd mid)", 32, 144, 256, 2000, 1);
    bench_gemm("gemm_nt (conv fwd coarse)", 64, 288, 64, 8000, 1);
    bench_gemm("gemm_nn (conv bwd kernel)", 32, 256, 144, 2000, 0);
    bench_gemm("gemm_tn (conv bwd input)", 256, 32, 144, 2000, 2);
    bench_gemm("gemm_nn (dense-ish)", 256, 512, 256, 200, 0);
    bench_conv_tape();
}
