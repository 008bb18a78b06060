use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tcda::dynamics::{spin_up, ModelConfig, Rk4, NX};
use tcda::kernels;
use tcda::network::{cnn_forward_batch, init_params, SurrogateKind, SurrogateModel};
use tcda::training::{build_pairs, train_offline, AdamConfig, Provenance};
use tcda::variational::{generate_observations, sc4dvar_gradient, PhysicalModel};

fn truth_state() -> Vec<f64> {
    spin_up(&ModelConfig::l05iii(), 1, 5.0).unwrap().as_slice().to_vec()
}

fn dynamics(c: &mut Criterion) {
    let s = truth_state();
    let x = s[..NX].to_vec();
    let mut out = vec![0.0; NX];
    c.bench_function("l96_tendency", |b| b.iter(|| kernels::l96(black_box(&x), NX, 8.0, &mut out)));
    let cfg = ModelConfig::l05iii();
    let f = cfg.tendency();
    let mut rk = Rk4::new(s.len());
    let mut state = s.clone();
    c.bench_function("two_scale_obs_interval", |b| {
        b.iter(|| {
            state.copy_from_slice(&s);
            rk.advance(&f, &mut state, cfg.dt, cfg.steps_per_obs());
        })
    });
}

fn networks(c: &mut Criterion) {
    let s = truth_state();
    let batch: Vec<f64> = (0..32).flat_map(|_| s[..NX].to_vec()).collect();
    for kind in SurrogateKind::ALL {
        let spec = kind.spec();
        let p = init_params(&spec, 3);
        c.bench_function(&format!("forward_batch32_{kind}"), |b| {
            b.iter(|| cnn_forward_batch(&spec, &p, black_box(&batch), 32).unwrap())
        });
        let m = SurrogateModel::new(kind.mode(6), spec.clone(), p.clone()).unwrap();
        c.bench_function(&format!("resolvent6_{kind}"), |b| b.iter(|| m.resolvent(black_box(&s[..NX]), 6).unwrap()));
    }
}

fn assimilation(c: &mut Criterion) {
    let cfg = ModelConfig::l96();
    let start = spin_up(&cfg, 2, 10.0).unwrap();
    let truth = tcda::dynamics::sample_trajectory(&cfg, start.as_slice(), 1, 7).unwrap();
    let obs = generate_observations(&truth, 2);
    let xb: Vec<f64> = truth[0].iter().map(|v| v + 0.5).collect();
    let model = PhysicalModel::default();
    c.bench_function("sc4dvar_gradient_l6", |b| {
        b.iter(|| sc4dvar_gradient(&model, black_box(&xb), &xb, 0.4, &obs).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let cfg = ModelConfig::l96();
    let start = spin_up(&cfg, 3, 10.0).unwrap();
    let series = tcda::dynamics::sample_trajectory(&cfg, start.as_slice(), 6, 65).unwrap();
    let data = build_pairs(&series, 1, 6, Provenance::Truth).unwrap();
    let model = SurrogateModel::zero(SurrogateKind::TcCnnB, 6).unwrap();
    let adam = AdamConfig {
        epochs: 1,
        ..AdamConfig::default()
    };
    c.bench_function("tc_cnn_b_epoch_64_pairs", |b| {
        b.iter(|| train_offline(&model, &data, &data, &adam, 4).unwrap())
    });
}

criterion_group!(benches, dynamics, networks, assimilation, training);
criterion_main!(benches);
