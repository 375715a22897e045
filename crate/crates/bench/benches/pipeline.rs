//! Criterion benchmarks for the hot paths: convolution, min-cut, the
//! graph-cut segmenter, the PSD matrix square root, and a full training step.

use criterion::{criterion_group, criterion_main, Criterion};
use cpgan_core::conv::{conv2d_backward, conv2d_forward};
use cpgan_core::grabcut::grabcut;
use cpgan_core::maxflow::{min_cut, SegGraph};
use cpgan_core::metrics::matrix_sqrt_psd;
use cpgan_core::tensor::Tensor;
use cpgan_core::trainer::{Mode, Trainer, TrainConfig};
use rand::{Rng, SeedableRng};

fn ramp(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| ((i % 97) as f32) / 97.0 - 0.4).collect()).unwrap()
}

fn bench_conv(c: &mut Criterion) {
    let x = ramp(&[16, 16, 48, 48]);
    let k = ramp(&[16, 16, 3, 3]);
    let b = ramp(&[16]);
    c.bench_function("conv2d_forward 16x16x48x48 k3", |bench| {
        bench.iter(|| conv2d_forward(&x, &k, Some(&b), 1, 1).unwrap())
    });
    let y = conv2d_forward(&x, &k, Some(&b), 1, 1).unwrap();
    c.bench_function("conv2d_backward 16x16x48x48 k3", |bench| {
        bench.iter(|| conv2d_backward(&x, &k, &y, 1, 1, true, true, true).unwrap())
    });
}

fn bench_maxflow(c: &mut Criterion) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (48usize, 48usize);
    let mut g = SegGraph::new(h * w);
    for p in 0..h * w {
        g.source_cap[p] = rng.gen_range(0.0..10.0);
        g.sink_cap[p] = rng.gen_range(0.0..10.0);
    }
    for y in 0..h {
        for x in 0..w {
            let p = (y * w + x) as u32;
            if x + 1 < w {
                g.edges.push((p, p + 1, rng.gen_range(0.0..5.0)));
            }
            if y + 1 < h {
                g.edges.push((p, p + w as u32, rng.gen_range(0.0..5.0)));
            }
        }
    }
    c.bench_function("min_cut 48x48 grid", |bench| {
        bench.iter(|| min_cut(&g).unwrap())
    });
}

fn bench_grabcut(c: &mut Criterion) {
    let sample = cpgan_core::data::synth_sample(3, 0, 48);
    let img = Tensor::from_vec(&[1, 3, 48, 48], sample.foreground.data().to_vec()).unwrap();
    c.bench_function("grabcut 48x48 5 rounds", |bench| {
        bench.iter(|| grabcut(&img, 5, 1).unwrap())
    });
}

fn bench_sqrtm(c: &mut Criterion) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let d = 128;
    let a: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut s = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += a[k * d + i] * a[k * d + j];
            }
            s[i * d + j] = acc;
        }
    }
    c.bench_function("matrix_sqrt_psd 128x128", |bench| {
        bench.iter(|| matrix_sqrt_psd(&s, d).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let dir = std::env::temp_dir().join("cpgan-bench");
    let cfg = TrainConfig {
        dataset: "synthetic://11/64".into(),
        resolution: 48,
        batch_size: 16,
        total_steps: 1,
        seed: 7,
        mode: Mode::SsCpgan,
        gen_base_width: 8,
        disc_base_width: 8,
        pseudo_cache_dir: dir.join("cache"),
        out_dir: dir.join("runs"),
        run_name: "bench".into(),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg).unwrap();
    // warm the pseudo-label cache so the bench isolates the update itself
    for _ in 0..4 {
        let batch = trainer.state.sampler.next_batch(&trainer.dataset, 16).unwrap();
        trainer.train_step(&batch).unwrap();
    }
    c.bench_function("train_step 48x48 batch16", |bench| {
        bench.iter(|| {
            let batch = trainer
                .state
                .sampler
                .next_batch(&trainer.dataset, 16)
                .unwrap();
            trainer.train_step(&batch).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_conv, bench_maxflow, bench_grabcut, bench_sqrtm, bench_train_step
}
criterion_main!(benches);
