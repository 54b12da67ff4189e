use std::time::Instant;
use krnet_core::Real;

use krnet_core::flow::{FlowConfig, FlowModel, Variant};
use krnet_core::numkit::RngState;
use krnet_core::targets::{Target, TargetSpec};
use krnet_core::train::{prepare_data, train, TrainConfig};

fn run(name: &str, cfg: FlowConfig, target: Target, tc: TrainConfig) {
    let rng = RngState::new(1);
    let mut m = FlowModel::<f64>::build(&cfg, &rng).unwrap();
    let data = prepare_data(&target, &tc, &rng).unwrap();
    let t = Instant::now();
    let h = train(&mut m, &target, &data, &tc, &rng).unwrap();
    let s = t.elapsed().as_secs_f64();
    println!(
        "{name}: {} epochs in {s:.1}s ({:.3}s/epoch) loss {:?} metric {:?} params {}",
        tc.epochs,
        s / tc.epochs as f64,
        h.last_loss(),
        h.last_metric(),
        m.n_params()
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    match args.get(1).map(String::as_str) {
        Some("logistic") => {
            let cfg = FlowConfig::new(vec![1], 2, 24).with_aug(1);
            let mut tc = TrainConfig::estimation(epochs, 4, 80_000);
            tc.valid_size = 80_000;
            run("logistic", cfg, Target::logistic(), tc);
        }
        Some("mixture") => {
            let cfg = Variant::KrnetAugRn.config(2, 1, 6, 24).unwrap().with_decay(0.9);
            let mut tc = TrainConfig::estimation(epochs, 8, 160_000);
            tc.valid_size = 20_000;
            tc.eval_every = 1000;
            run("mixture", cfg, Target::new(TargetSpec::Mixture2d), tc);
        }
        Some("parts") => parts(),
        Some("mlp") => mlp_only(),
        _ => eprintln!("usage: bench_train logistic|mixture|parts [epochs]"),
    }
}

#[allow(dead_code)]
pub fn parts() {
    use krnet_core::gradients::{adjoint_grad_state, backprop_grad_state};
    let cfg = Variant::KrnetAugRn.config(2, 1, 6, 24).unwrap().with_decay(0.9);
    let mut m = FlowModel::<f64>::build(&cfg, &RngState::new(1)).unwrap();
    m.mark_initialized();
    let x = RngState::new(2).gauss_sample::<f64>(20_000, 3);
    let t = Instant::now();
    let _ = m.forward(&x).unwrap();
    println!("forward {:.3}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let _ = m.inverse(&x).unwrap();
    println!("inverse {:.3}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let _ = adjoint_grad_state(&m, &x).unwrap();
    println!("adjoint {:.3}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let _ = backprop_grad_state(&m, &x).unwrap();
    println!("backprop {:.3}s", t.elapsed().as_secs_f64());
    for i in 0..m.n_layers() {
        let mut z = x.clone();
        let mut ld = vec![0.0; 20_000];
        let t = Instant::now();
        m.layers()[i].forward(m.layer_params(i), &mut z, &mut ld, false).unwrap();
        let f = t.elapsed().as_secs_f64();
        let mut z = x.clone();
        let t = Instant::now();
        let c = m.layers()[i].forward(m.layer_params(i), &mut z, &mut ld, true).unwrap();
        let mut cot = x.clone();
        let mut g = vec![0.0; m.param_range(i).len()];
        m.layers()[i].vjp(m.layer_params(i), &c, &mut cot, &ld, &mut g).unwrap();
        println!("layer {i} {} fwd {:.4}s fwd+vjp {:.4}s", m.layers()[i].kind(), f, t.elapsed().as_secs_f64());
    }
}

#[allow(dead_code)]
pub fn mlp_only() {
    use krnet_core::nn::{InitScheme, Mlp};
    let mlp = Mlp::new(1, 24, 1).unwrap();
    let mut theta = vec![0.0f64; mlp.n_params()];
    mlp.init(&mut RngState::new(1), InitScheme::GlorotUniformFull, &mut theta);
    let x = RngState::new(2).gauss_sample::<f64>(20_000, 1);
    let t = Instant::now();
    for _ in 0..10 {
        let _ = mlp.forward_raw(&theta, &x, false).unwrap();
    }
    println!("mlp fwd {:.4}s", t.elapsed().as_secs_f64() / 10.0);
    let mut v = vec![0.3f64; 20_000 * 24];
    let t = Instant::now();
    for _ in 0..10 {
        f64::tanh_in_place(&mut v);
    }
    println!("tanh 480k {:.4}s", t.elapsed().as_secs_f64() / 10.0);
}
