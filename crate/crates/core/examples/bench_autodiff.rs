//! Rough single-core throughput probe for the tape at training-relevant sizes.
//!
//! Run with `cargo run --example bench_autodiff` to see gemm Gflop/s and the
//! per-step cost of a representative MLP forward/backward, which is what the
//! desk-scale default dimensions are budgeted against.

use std::time::Instant;

use pwm_core::autodiff::{Scalar, Tape, Tensor};

fn bench_gemm(m: usize, k: usize, n: usize, reps: usize) {
    let a = vec![1.0f32; m * k];
    let b = vec![1.0f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let t0 = Instant::now();
    for _ in 0..reps {
        f32::gemm(m, k, n, &a, k as isize, 1, &b, n as isize, 1, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n * reps) as f64;
    println!("gemm {m}x{k}x{n}: {:.2} Gflop/s ({:.1} us/call)", flops / dt / 1e9, dt / reps as f64 * 1e6);
}

fn bench_mlp_step(batch: usize, din: usize, hidden: usize, dout: usize, reps: usize) {
    let w1 = Tensor::new([din, hidden], vec![0.01f32; din * hidden]);
    let b1 = Tensor::zeros([hidden]);
    let w2 = Tensor::new([hidden, dout], vec![0.01f32; hidden * dout]);
    let b2 = Tensor::zeros([dout]);
    let x = Tensor::new([batch, din], vec![0.5f32; batch * din]);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let (w1, b1, w2, b2) =
            (tape.leaf(w1.clone()), tape.leaf(b1.clone()), tape.leaf(w2.clone()), tape.leaf(b2.clone()));
        let x = tape.constant(x.clone());
        let h = tape.matmul(x, w1);
        let h = tape.add(h, b1);
        let h = tape.mish(h);
        let o = tape.matmul(h, w2);
        let o = tape.add(o, b2);
        let loss = tape.mean(o);
        tape.backward(loss).unwrap();
        std::hint::black_box(tape.grad(w1));
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "mlp fwd+bwd B={batch} {din}->{hidden}->{dout}: {:.1} us/step",
        dt / reps as f64 * 1e6
    );
}

fn main() {
    bench_gemm(64, 64, 64, 20000);
    bench_gemm(64, 41, 64, 20000);
    bench_gemm(256, 32, 64, 10000);
    bench_gemm(64, 64, 101, 10000);
    bench_gemm(1, 64, 64, 100000);
    bench_mlp_step(64, 41, 64, 32, 5000);
    bench_mlp_step(64, 41, 64, 101, 5000);
    bench_mlp_step(256, 32, 64, 1, 5000);
    let t0 = Instant::now();
    let mut acc = 0.0f32;
    for i in 0..2_000_000u32 {
        acc += (i as f32 * 1e-6).tanh();
    }
    println!("tanh f32: {:.1} ns/call (sink {acc:.3})", t0.elapsed().as_secs_f64() / 2e6 * 1e9);
    let t0 = Instant::now();
    let mut acc = 0.0f32;
    for i in 0..2_000_000u32 {
        acc += (-(i as f32) * 1e-6).exp();
    }
    println!("exp f32: {:.1} ns/call (sink {acc:.3})", t0.elapsed().as_secs_f64() / 2e6 * 1e9);
}
