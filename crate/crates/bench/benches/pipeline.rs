use circlesnake::evaluation::{evaluate, EvalConfig, EvalMode};
use circlesnake::heatmap::{decode_circles, encode_targets};
use circlesnake::model::{CircleSnake, ModelConfig, PredictOptions};
use circlesnake::tensor::Tensor;
use circlesnake_bench::{circle_grid, eval_records};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn codec(c: &mut Criterion) {
    let gts = circle_grid(512.0, 8);
    c.bench_function("encode_64_circles_512px", |b| b.iter(|| black_box(encode_targets(&gts, 512, 512, 4, 4).unwrap())));
    let t = encode_targets(&gts, 512, 512, 4, 4).unwrap();
    c.bench_function("decode_128x128_grid", |b| {
        b.iter(|| black_box(decode_circles(&t.heatmap, &t.radius_map, &t.offset_map, 100, 0.2, 4).unwrap()))
    });
}

fn evaluation(c: &mut Criterion) {
    let names: Vec<String> = (0..4).map(|k| format!("class{k}")).collect();
    let records = eval_records(10, 6, 128, 2.0);
    for mode in [EvalMode::Circle, EvalMode::Segm] {
        let cfg = EvalConfig::new(mode, names.clone());
        c.bench_function(&format!("evaluate_10_images_{}", mode.name()), |b| {
            b.iter(|| black_box(evaluate(&records, &cfg).unwrap()))
        });
    }
}

fn inference(c: &mut Criterion) {
    let model = CircleSnake::<f32>::new(ModelConfig::default()).unwrap();
    let image = Tensor::<f32>::full(vec![3, 256, 256], 0.1);
    let opts = PredictOptions { ct_score: 0.0, top_n: 20, deform: true };
    let mut group = c.benchmark_group("predict");
    group.sample_size(10);
    group.bench_function("256px_20_proposals", |b| b.iter(|| black_box(model.predict(&image, &opts).unwrap())));
    group.finish();
}

criterion_group!(benches, codec, evaluation, inference);
criterion_main!(benches);
