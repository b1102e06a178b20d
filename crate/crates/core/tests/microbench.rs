// Temporary micro-benchmarks (deleted before finalizing).
use beamopt::autodiff::{Tape, TensorData};
use beamopt::fsum::ExactSum;
use std::time::Instant;

fn rnd(n: usize, seed: u64) -> Vec<f64> {
    let mut x = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
    (0..n)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect()
}

#[test]
#[ignore]
fn bench_pieces() {
    let (m, k, n) = (128usize, 128usize, 32usize);
    let a = TensorData::new(vec![m, k], rnd(m * k, 1)).unwrap();
    let b = TensorData::new(vec![k, n], rnd(k * n, 2)).unwrap();

    // plain tape matmul
    let reps = 500;
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::<f64>::new();
        let av = tape.constant(a.shape.clone(), a.data.clone());
        let bv = tape.constant(b.shape.clone(), b.data.clone());
        let _ = tape.matmul(av, bv).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!(
        "tape matmul {m}x{k}x{n}: {:.1} us  ({:.2} GFLOP/s)",
        dt * 1e6,
        2.0 * (m * k * n) as f64 / dt / 1e9
    );

    // exact tape matmul
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::<f64>::new();
        let av = tape.constant(a.shape.clone(), a.data.clone());
        let bv = tape.constant(b.shape.clone(), b.data.clone());
        let _ = tape.matmul_exact(av, bv).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!(
        "tape matmul_exact {m}x{k}x{n}: {:.1} us  ({:.2} GFLOP/s-equiv)",
        dt * 1e6,
        2.0 * (m * k * n) as f64 / dt / 1e9
    );

    // raw exact_sum throughput
    let xs = rnd(128, 3);
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..200_000 {
        let mut acc = ExactSum::new();
        for &x in &xs {
            acc.add(x);
        }
        sink += acc.total();
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("exact_sum of 128: {:.1} ns/add (sink {sink:.3})", dt / 200_000.0 / 128.0 * 1e9);

    // row_softmax 128x128
    let big = TensorData::new(vec![128, 128], rnd(128 * 128, 4)).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::<f64>::new();
        let v = tape.constant(big.shape.clone(), big.data.clone());
        let _ = tape.row_softmax(v).unwrap();
    }
    println!("row_softmax 128x128: {:.1} us", t0.elapsed().as_secs_f64() / reps as f64 * 1e6);

    // token_norm 128x128
    let g = TensorData::new(vec![128], vec![1.0; 128]).unwrap();
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::<f64>::new();
        let v = tape.constant(big.shape.clone(), big.data.clone());
        let gv = tape.constant(g.shape.clone(), g.data.clone());
        let bv = tape.constant(g.shape.clone(), g.data.clone());
        let _ = tape.token_norm(v, gv, bv).unwrap();
    }
    println!("token_norm 128x128: {:.1} us", t0.elapsed().as_secs_f64() / reps as f64 * 1e6);

    // gelu 128x128
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::<f64>::new();
        let v = tape.constant(big.shape.clone(), big.data.clone());
        let _ = tape.gelu(v);
    }
    println!("gelu 128x128: {:.1} us", t0.elapsed().as_secs_f64() / reps as f64 * 1e6);
}

#[test]
#[ignore]
fn bench_rollout_pieces() {
    use beamopt::autodiff::complex::bind_matrix;
    use beamopt::baselines::mmse_beamformer;
    use beamopt::channel::{make_batch, NormalizationMode, SystemConfig};
    use beamopt::stack::{pga_refine, rollout, L2oModel};
    use beamopt::transformer::{block_forward_on_tape, ModelConfig};

    let cfg = SystemConfig::from_snr(32, 32, 1.0, 1.0, 15.0);
    let batch = make_batch::<f64>(&cfg, NormalizationMode::StdDev, 7, 1);
    let s = &batch.samples[0];
    let mc = ModelConfig::desk(32, 7, 5);
    let model = L2oModel::<f64>::new_random(mc, 2).unwrap();

    let t0 = Instant::now();
    let w0 = mmse_beamformer(s, 1.0).unwrap();
    println!("mmse init: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3);

    let reps = 10;
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::<f64>::new();
        let vars = model.blocks[0].bind(&tape, false);
        let hv = bind_matrix(&tape, &s.h_norm);
        let wv = bind_matrix(&tape, &w0.w);
        let wkn = beamopt::autodiff::complex::ctranspose(&tape, wv).unwrap();
        let _ = block_forward_on_tape(&tape, &vars, &mc, 1.0, hv, wkn, None).unwrap();
    }
    println!("single block forward: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = pga_refine(s, &w0, 5, 1e-2, true).unwrap();
    }
    println!("pga q=5: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = rollout(s, &model, 7).unwrap();
    }
    println!("full rollout: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
