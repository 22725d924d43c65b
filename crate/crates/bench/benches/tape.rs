use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use remix_bench::{toy_batch, toy_model};
use remix_core::objectives::{elbo_mixture, new_component_loss};
use remix_core::tensor::Tape;

fn component_step(c: &mut Criterion) {
    let (data, x) = toy_batch(2);
    let model = toy_model(&data, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    c.bench_function("bounded_kl_loss_backward_m2", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let loss = new_component_loss(&model, &tape, 2, tape.constant(x.clone()), 5.0, 1, &mut rng).unwrap();
            loss.loss.backward().unwrap()
        })
    });
    c.bench_function("mixture_elbo_backward_m2", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let q = model.encode_mixture(&tape, xv, 2).unwrap();
            let est = elbo_mixture(&q, &model, xv, 1, &mut rng).unwrap();
            est.elbo.mean_all().backward().unwrap()
        })
    });
}

criterion_group!(benches, component_step);
criterion_main!(benches);
