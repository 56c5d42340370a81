use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use kaliko_bench::{bottom_blocks, desk_model, latent_and_dense, small_model, windows};
use kaliko_core::analysis::eig;
use kaliko_core::baselines::{dmd_fit, DEFAULT_RIDGE};
use kaliko_core::kalman::{self, TransitionModel};
use kaliko_core::systems::{integrate, OdeSystem};
use kaliko_core::training::replay_loss;
use kaliko_core::Tape;

fn filter_windows(c: &mut Criterion) {
    let model = desk_model();
    let ys = windows(&model, 8);
    c.bench_function("filter_8_windows_m64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let steps =
                kalman::filter(&mut tape, &bound.dynamics, &bound.decoder, &bound.prior, &ys)
                    .expect("finite");
            black_box(steps.last().unwrap().filtered.mean);
        })
    });
}

fn companion_vs_dense(c: &mut Criterion) {
    let model = desk_model();
    let (z, a) = latent_and_dense(&model, 1);
    let blocks = bottom_blocks(&model);

    c.bench_function("transition_matvec_sparse_m64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bv = tape.constant(blocks.clone());
            let zv = tape.constant(z.clone());
            black_box(tape.companion_matvec(bv, zv));
        })
    });
    c.bench_function("transition_matvec_dense_m64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let av = tape.constant(a.clone());
            let zv = tape.constant(z.clone());
            black_box(tape.matmul(av, zv));
        })
    });
}

fn decode_jacobian(c: &mut Criterion) {
    let model = desk_model();
    let (z, _) = latent_and_dense(&model, 2);
    c.bench_function("decode_with_jacobian_m64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let zv = tape.constant(z.clone());
            black_box(bound.decoder.decode_with_jacobian(&mut tape, zv));
        })
    });
}

fn covariance_step(c: &mut Criterion) {
    let model = desk_model();
    c.bench_function("conjugate_cov_m64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let sigma = tape.eye(model.config.latent_dim());
            black_box(bound.dynamics.conjugate_cov(&mut tape, sigma));
        })
    });
}

fn spectrum(c: &mut Criterion) {
    let a = desk_model().transition_matrix();
    c.bench_function("eig_m64", |b| b.iter(|| black_box(eig(&a).expect("converges"))));
}

fn dmd(c: &mut Criterion) {
    let context = integrate(&OdeSystem::VanDerPol, &[1.5, 0.0], 0.05, 127).expect("bounded");
    c.bench_function("dmd_fit_delay16_t128", |b| {
        b.iter(|| black_box(dmd_fit(&[&context], 16, DEFAULT_RIDGE).expect("fits")))
    });
}

fn replay(c: &mut Criterion) {
    let model = small_model();
    let ys = windows(&model, 8);
    c.bench_function("replay_loss_and_gradients_small", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let wl = replay_loss(&mut tape, &bound, &ys, 1.0, 1.0).expect("finite");
            black_box(tape.backward(wl.loss, &model.store).expect("finite"));
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = filter_windows, companion_vs_dense, decode_jacobian, covariance_step, spectrum, dmd, replay
}
criterion_main!(benches);
