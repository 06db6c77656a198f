use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use labelfuse::backbone::{init_params, LogitGradients, ModelDims};
use labelfuse::fusion::{fusion_loss_grad, FusionInputs};
use labelfuse::linalg::{random_permutation_basis, reconstruct_confusion, softmax, OneHotLabel};
use ndarray::Array2;
use std::hint::black_box;

fn reconstruct(c: &mut Criterion) {
    let mut group = c.benchmark_group("reconstruct_confusion");
    for (k, m) in [(2, 2), (10, 20), (10, 100)] {
        let basis = random_permutation_basis(k, m, 0, true).unwrap();
        let logits: Vec<f64> = (0..m).map(|i| (i as f64 * 0.37).sin()).collect();
        let coeffs = softmax(&logits).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("K{k}_M{m}")), &(), |b, _| {
            b.iter(|| reconstruct_confusion(black_box(&coeffs), &basis).unwrap())
        });
    }
    group.finish();
}

fn loss_grad(c: &mut Criterion) {
    let mut group = c.benchmark_group("fusion_loss_grad");
    for (k, r, m) in [(2, 2, 2), (10, 3, 20), (10, 5, 20)] {
        let basis = random_permutation_basis(k, m, 1, true).unwrap();
        let inputs = FusionInputs {
            f_logits: (0..k).map(|i| (i as f64).cos()).collect(),
            w_logits: (0..r).map(|i| i as f64 * 0.1).collect(),
            c_logits: (0..r).map(|a| (0..m).map(|i| ((a * m + i) as f64).sin()).collect()).collect(),
            annotator_labels: (0..r).map(|a| OneHotLabel::new(a % k, k).unwrap()).collect(),
        };
        group.bench_with_input(BenchmarkId::from_parameter(format!("K{k}_R{r}_M{m}")), &(), |b, _| {
            b.iter(|| fusion_loss_grad(black_box(&inputs), &basis, 1.0).unwrap())
        });
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward_batch64");
    group.sample_size(20);
    for (name, input_dim, hidden, classes) in [("twomoon", 2, vec![32, 32], 2), ("mnist", 784, vec![256, 128], 10)] {
        let dims = ModelDims {
            input_dim,
            hidden,
            classes,
            annotators: 3,
            basis_size: 2.min(classes),
        };
        let params = init_params(&dims, 0, true).unwrap();
        let x = Array2::from_shape_fn((64, input_dim), |(i, j)| ((i * 31 + j * 7) % 97) as f64 / 97.0);
        let upstream = LogitGradients::zeros(64, &dims);
        group.bench_function(name, |b| {
            b.iter(|| {
                let out = params.forward_batch(black_box(x.view())).unwrap();
                params.backward(&out, &upstream).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, reconstruct, loss_grad, forward_backward);
criterion_main!(benches);
