mod common;

use krnet_core::flow::{FlowModel, MarginalMethod, Variant};
use krnet_core::gradients::{adjoint_grad, backprop_grad, grad_check, relative_discrepancy, GradPath};
use krnet_core::numkit::{std_normal_logpdf, Batch, RngState};
use krnet_core::targets::{HoleSpec, LogDensity, Target, TargetSpec};
use krnet_core::train::{
    estimation_loss, metric_delta, metric_rel_kl, prepare_data, train, Adam, MetricKind, TrainConfig,
};
use krnet_core::KrnetError;

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut p = vec![0.3, -1.2, 4.0];
    let mut adam = Adam::new(3);
    for _ in 0..5 {
        adam.update(&mut p, &[0.0; 3]).unwrap();
    }
    assert_eq!(p, vec![0.3, -1.2, 4.0]);
}

#[test]
fn adam_first_step_matches_hand_computation() {
    let g: [f64; 3] = [0.5, -2.0, 1e-9];
    let mut p = vec![1.0; 3];
    Adam::new(3).update(&mut p, &g).unwrap();
    for (pi, gi) in p.iter().zip(g) {
        // m_hat = g and v_hat = g^2 after bias correction
        let expect = 1.0 - 1e-3 * gi / (gi.abs() + 1e-8);
        assert!((pi - expect).abs() < 1e-15, "{pi} vs {expect}");
    }
}

#[test]
fn adam_rejects_misaligned_lengths() {
    let mut p = vec![0.0; 2];
    assert!(Adam::new(3).update(&mut p, &[0.0; 2]).is_err());
}

#[test]
fn adam_trajectories_are_deterministic() {
    let run = || {
        let mut r = RngState::new(9);
        let mut p = vec![0.0; 10];
        let mut adam = Adam::new(10);
        for _ in 0..100 {
            let g: Vec<f64> = (0..10).map(|_| r.normal()).collect();
            adam.update(&mut p, &g).unwrap();
        }
        p
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let cfg = Variant::KrnetAug.config(1, 1, 2, 8).unwrap();
    let rng = RngState::new(3);
    let mut m = FlowModel::<f64>::build(&cfg, &rng).unwrap();
    let before = m.clone();
    let target = Target::logistic();
    let tc = TrainConfig::estimation(0, 4, 400);
    let data = prepare_data(&target, &tc, &rng).unwrap();
    let h = train(&mut m, &target, &data, &tc, &rng).unwrap();
    assert!(h.records.is_empty());
    assert_eq!(m, before);
}

#[test]
fn identity_augmented_loss_cancels_gamma_terms() {
    let cfg = Variant::KrnetAug.config(2, 1, 2, 8).unwrap();
    let m = FlowModel::<f64>::build(&cfg, &RngState::new(1)).unwrap();
    let y = common::gauss(200, 2, 5);
    let y = Batch::new(200, 2, y.as_slice().iter().map(|v| 2.0 * v + 0.5).collect()).unwrap();
    let gamma = common::gauss(200, 1, 6);
    let g = estimation_loss(&m, &y, Some(&gamma), GradPath::Adjoint).unwrap();
    let expect = -std_normal_logpdf(&y).iter().sum::<f64>() / 200.0;
    assert!((g.loss - expect).abs() < 1e-12, "{} vs {expect}", g.loss);
}

#[test]
fn augmented_estimation_requires_gamma() {
    let cfg = Variant::KrnetAug.config(1, 1, 2, 4).unwrap();
    let m = FlowModel::<f64>::build(&cfg, &RngState::new(1)).unwrap();
    let y = common::gauss(4, 1, 1);
    assert!(matches!(
        estimation_loss(&m, &y, None, GradPath::Adjoint),
        Err(KrnetError::InvalidConfig { .. })
    ));
}

#[test]
fn mixture_loss_decreases_over_fifty_steps() {
    let cfg = Variant::KrnetAugRn.config(2, 1, 2, 16).unwrap();
    let rng = RngState::new(21);
    let mut m = FlowModel::<f64>::build(&cfg, &rng).unwrap();
    let target = Target::new(TargetSpec::Mixture2d);
    // one minibatch per epoch, so each epoch is one optimizer step
    let mut tc = TrainConfig::estimation(50, 1, 2_000);
    tc.valid_size = 500;
    tc.eval_every = 50;
    let data = prepare_data(&target, &tc, &rng).unwrap();
    let h = train(&mut m, &target, &data, &tc, &rng).unwrap();
    assert_eq!(h.records.len(), 50);
    let first = h.records[0].loss;
    let last = h.records[49].loss;
    assert!(last < first - 0.05, "{first} -> {last}");
    assert_eq!(h.metric_kind, MetricKind::ValidLoss);
}

#[test]
fn delta_examples() {
    let h = 2.0 + 2f64.ln();
    assert_eq!(metric_delta(h, h).unwrap().value, 0.0);
    let d = metric_delta(2.72, h).unwrap();
    assert!((d.value - 0.00998).abs() < 1e-5, "{}", d.value);
    assert!(!d.negative_entropy);
    let neg = metric_delta(-1.0, -1.2).unwrap();
    assert!(neg.negative_entropy);
    assert!(matches!(metric_delta(1.0, 0.0), Err(KrnetError::Domain { .. })));
}

#[test]
fn rel_kl_of_matching_gaussians_is_zero() {
    let cfg = Variant::Krnet.config(2, 1, 2, 4).unwrap();
    let m = FlowModel::<f64>::build(&cfg, &RngState::new(1)).unwrap();
    let t = Target::new(TargetSpec::Gaussian { dims: 2 });
    let mut r = RngState::new(2);
    let valid = t.sample(&mut r, 5_000).unwrap();
    let h = t.analytic_entropy().unwrap();
    let v = metric_rel_kl(&m, &valid, &t, h, MarginalMethod::GammaStar, &mut r).unwrap();
    assert!(v.abs() < 1e-12, "{v}");
}

#[test]
fn rel_kl_of_identity_model_against_holes_is_positive() {
    let spec = HoleSpec::new(4);
    let mut r = RngState::new(4);
    let norm = Target::estimate_normalizer(&spec, &mut r, 100_000).unwrap();
    let t = Target::holes(spec).with_normalizer(norm);
    let h = t.estimate_entropy_mc(&mut r, 20_000).unwrap().value;
    let valid = t.sample(&mut r, 5_000).unwrap();
    let cfg = Variant::KrnetAug.config(4, 1, 2, 8).unwrap();
    let m = FlowModel::<f64>::build(&cfg, &RngState::new(1)).unwrap();
    let v = metric_rel_kl(&m, &valid, &t, h, MarginalMethod::GammaStar, &mut r).unwrap();
    assert!(v > 0.1, "{v}");
    let raw = Target::holes(spec);
    assert!(matches!(
        metric_rel_kl(&m, &valid, &raw, h, MarginalMethod::GammaStar, &mut r),
        Err(KrnetError::MissingNormalizer(_))
    ));
}

fn logistic_run(seed: u64, epochs: usize) -> (FlowModel<f64>, krnet_core::train::TrainHistory) {
    logistic_run_with(seed, epochs, 8_000)
}

fn logistic_run_with(
    seed: u64,
    epochs: usize,
    valid: usize,
) -> (FlowModel<f64>, krnet_core::train::TrainHistory) {
    let cfg = Variant::KrnetAug.config(1, 1, 2, 16).unwrap();
    let rng = RngState::new(seed);
    let mut m = FlowModel::<f64>::build(&cfg, &rng).unwrap();
    let target = Target::logistic();
    let mut tc = TrainConfig::estimation(epochs, 4, 8_000);
    tc.valid_size = valid;
    tc.eval_every = 5;
    let data = prepare_data(&target, &tc, &rng).unwrap();
    let h = train(&mut m, &target, &data, &tc, &rng).unwrap();
    (m, h)
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let (ma, ha) = logistic_run(5, 6);
    let (mb, hb) = logistic_run(5, 6);
    assert_eq!(ma.params(), mb.params());
    let (mut a, mut b) = (Vec::new(), Vec::new());
    ha.write_csv(&mut a).unwrap();
    hb.write_csv(&mut b).unwrap();
    assert_eq!(a, b);
    let (mc, _) = logistic_run(6, 6);
    assert_ne!(ma.params(), mc.params());
}

#[test]
fn history_records_are_monotone_and_exported() {
    let (_, h) = logistic_run(1, 7);
    assert_eq!(h.metric_kind, MetricKind::Delta);
    assert!(h.records.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
    // metric at every fifth epoch and after the last
    let with_metric: Vec<usize> = h.records.iter().filter(|r| r.metric.is_some()).map(|r| r.epoch).collect();
    assert_eq!(with_metric, vec![5, 7]);
    let mut out = Vec::new();
    h.write_csv(&mut out).unwrap();
    let s = String::from_utf8(out).unwrap();
    assert!(s.starts_with("epoch,loss,metric\n"));
    assert_eq!(s.lines().count(), 8);
    let mut t = Vec::new();
    h.write_timing_csv(&mut t).unwrap();
    assert!(String::from_utf8(t).unwrap().starts_with("epoch,seconds\n"));
}

#[test]
fn two_seeds_give_comparable_delta() {
    // a large validation set keeps the sampling error of delta small
    let (_, a) = logistic_run_with(11, 30, 200_000);
    let (_, b) = logistic_run_with(12, 30, 200_000);
    let (da, db) = (a.last_metric().unwrap(), b.last_metric().unwrap());
    assert!(da.max(db) <= 3.0 * da.min(db), "{da} vs {db}");
}

#[test]
fn training_loss_stays_above_entropy_minus_noise() {
    let (_, h) = logistic_run(2, 30);
    let t = Target::logistic();
    let ent = t.analytic_entropy().unwrap();
    let y = t.sample(&mut RngState::new(1), 8_000).unwrap();
    let lp = t.log_density(&y).unwrap();
    let mean = lp.iter().sum::<f64>() / lp.len() as f64;
    let sd = (lp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (lp.len() - 1) as f64).sqrt();
    // minibatch losses average over a quarter of the set
    let bound = ent - 5.0 * sd / (2_000f64).sqrt();
    for r in &h.records {
        assert!(r.loss >= bound, "epoch {} loss {} < {bound}", r.epoch, r.loss);
    }
}

#[test]
fn gradient_paths_agree_after_training() {
    let (m, _) = logistic_run(3, 10);
    let y = Target::logistic().sample(&mut RngState::new(8), 64).unwrap();
    let gamma = common::gauss(64, 1, 9);
    let a = adjoint_grad(&m, &y, Some(&gamma)).unwrap();
    let b = backprop_grad(&m, &y, Some(&gamma)).unwrap();
    assert!(relative_discrepancy(&a.grad, &b.grad) <= 1e-9);
    let x = m.assemble(&y, Some(&gamma)).unwrap();
    let rep = grad_check(&m, &x, 1e-5, 50, &mut RngState::new(10)).unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

#[test]
fn divergence_aborts_with_history() {
    let cfg = Variant::Krnet.config(2, 1, 2, 4).unwrap();
    let rng = RngState::new(1);
    let mut m = FlowModel::<f64>::build(&cfg, &rng).unwrap();
    let target = Target::new(TargetSpec::Mixture2d);
    let mut tc = TrainConfig::estimation(10, 2, 200);
    tc.divergence_threshold = 1e-3;
    let data = prepare_data(&target, &tc, &rng).unwrap();
    let h = train(&mut m, &target, &data, &tc, &rng).unwrap();
    assert_eq!(h.records.len(), 1);
    assert_eq!(h.diverged.map(|d| d.0), Some(1));
}

#[test]
fn approximation_of_the_prior_stays_near_zero() {
    let cfg = Variant::KrnetAug.config(2, 1, 2, 8).unwrap();
    let rng = RngState::new(1);
    let mut m = FlowModel::<f64>::build(&cfg, &rng).unwrap();
    let target = Target::new(TargetSpec::Gaussian { dims: 2 });
    let mut tc = TrainConfig::approximation(3, 2, 256);
    tc.eval_every = 1;
    let data = prepare_data(&target, &tc, &rng).unwrap();
    let h = train(&mut m, &target, &data, &tc, &rng).unwrap();
    assert_eq!(h.metric_kind, MetricKind::ReverseKl);
    for r in &h.records {
        assert!(r.loss.abs() < 1e-2, "{}", r.loss);
    }
}

#[test]
fn invalid_budgets_are_rejected() {
    let mut tc = TrainConfig::estimation(1, 0, 10);
    assert!(tc.validate().is_err());
    tc.minibatches = 20;
    assert!(tc.validate().is_err());
    tc.minibatches = 2;
    tc.lr = 0.0;
    assert!(tc.validate().is_err());
}

