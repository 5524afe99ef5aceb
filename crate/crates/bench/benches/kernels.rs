use criterion::{black_box, criterion_group, criterion_main, Criterion};

use semifragile_core::dataset::synthetic_image;
use semifragile_core::jpeg::{dct8x8, idct8x8, quant_dequant, simplified_jpeg};
use semifragile_core::models::{ArchConfig, ModelBundle, Watermark};
use semifragile_core::postprocess::{apply_post_process, PostProcessOp};
use semifragile_core::trainer::{train_step, Optimizers, TrainingConfig};
use semifragile_core::imaging::Image;

fn jpeg(c: &mut Criterion) {
    let block = std::array::from_fn(|i| std::array::from_fn(|j| ((i * 8 + j) as f64 * 7.3) % 255.0 - 128.0));
    c.bench_function("dct_idct_8x8", |b| b.iter(|| idct8x8(&dct8x8(black_box(&block)))));
    c.bench_function("quant_dequant_1k", |b| {
        b.iter(|| (0..1000).map(|i| quant_dequant(black_box(i as f64 * 0.173 - 86.0)).0).sum::<f64>())
    });
    let img = synthetic_image(1, 64);
    c.bench_function("simplified_jpeg_64", |b| b.iter(|| simplified_jpeg(black_box(&img), 50).unwrap()));
    c.bench_function("blur_64", |b| {
        b.iter(|| apply_post_process(black_box(&img), &PostProcessOp::GaussianBlur { variance: 1.0 }).unwrap())
    });
}

fn networks(c: &mut Criterion) {
    let arch = ArchConfig { width: 16, watermark_len: 30 };
    let models = ModelBundle::<f32>::init(arch, 0);
    let img = synthetic_image(2, 64);
    let wm = Watermark::zeros(30);
    c.bench_function("embed_w16_64", |b| b.iter(|| models.embed(black_box(&img), &wm).unwrap()));
    c.bench_function("extract_w16_64", |b| b.iter(|| models.extract(black_box(&img)).unwrap()));

    let cfg = TrainingConfig { width: 16, batch_size: 4, image_size: 64, ..TrainingConfig::default() };
    let images: Vec<Image> = (0..4).map(|i| synthetic_image(i, 64)).collect();
    let x = Image::batch_tensor::<f32>(&images).unwrap();
    let bits = vec![1.0f32; 4 * 30];
    let mut m = models.clone();
    let mut opt = Optimizers::default();
    let mut step = 0;
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("train_step_w16_b4_64_jpeg50", |b| {
        b.iter(|| {
            step += 1;
            train_step(&mut m, &mut opt, &x, &bits, &PostProcessOp::Jpeg { quality: 50 }, &cfg, 1e-4, step).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, jpeg, networks);
criterion_main!(benches);
