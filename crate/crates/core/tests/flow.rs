mod common;

use common::{gauss, random_model, shorten_ode, variant_configs};
use krnet_core::flow::{
    closed_form_pair, rotation_closed_form, split_euler, FlowConfig, FlowModel, LogitConfig, MarginalMethod,
    OdeConfig, Variant,
};
use krnet_core::layers::Layer;
use krnet_core::numkit::{finite_diff_jacobian, log_abs_det, std_normal_logpdf, Batch, RngState};
use krnet_core::KrnetError;

fn kinds(m: &FlowModel<f64>) -> Vec<&'static str> {
    m.layers().iter().map(Layer::kind).collect()
}

#[test]
fn two_dim_rotation_and_cdf_structure() {
    let cfg = FlowConfig::new(vec![1, 1], 2, 8).with_rotation_and_cdf();
    let m = FlowModel::<f64>::build(&cfg, &RngState::new(1)).unwrap();
    assert_eq!(
        kinds(&m),
        ["rotation", "scale_bias", "coupling", "scale_bias", "coupling", "squeeze", "cdf"]
    );
}

#[test]
fn one_dim_augmented_is_a_coupling_chain() {
    let cfg = FlowConfig::new(vec![1], 2, 8).with_aug(1);
    let m = FlowModel::<f64>::build(&cfg, &RngState::new(1)).unwrap();
    assert_eq!(kinds(&m), ["scale_bias", "coupling", "scale_bias", "coupling"]);
    let c: Vec<_> = m
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Coupling(c) => Some((c.cond.clone(), c.upd.clone())),
            _ => None,
        })
        .collect();
    assert_eq!(c, vec![(vec![1], vec![0]), (vec![0], vec![1])]);
}

#[test]
fn odd_inner_count_is_rejected() {
    let cfg = FlowConfig::new(vec![1, 1], 3, 8);
    match FlowModel::<f64>::build(&cfg, &RngState::new(1)) {
        Err(KrnetError::InvalidConfig { field, .. }) => assert_eq!(field, "n_inner"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn identity_model_gives_standard_normal_density() {
    for (_, cfg) in variant_configs(2, 1, 2, 8) {
        let cfg = shorten_ode(cfg, 3);
        let m = FlowModel::<f64>::build(&cfg, &RngState::new(3)).unwrap();
        let y = gauss(50, 2, 4);
        let g = (m.m_aug() > 0).then(|| gauss(50, m.m_aug(), 5));
        let (z, lp) = m.forward_logdensity(&y, g.as_ref()).unwrap();
        let x = m.assemble(&y, g.as_ref()).unwrap();
        assert!(z.max_abs_diff(&x) < 1e-12);
        let want = std_normal_logpdf(&x);
        for (a, b) in lp.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn round_trip_all_variants_deep_stacks() {
    let mut cases = Vec::new();
    cases.extend(variant_configs(2, 1, 2, 8));
    cases.extend(variant_configs(4, 1, 4, 8));
    cases.extend(variant_configs(8, 1, 8, 6));
    cases.extend(variant_configs(8, 2, 2, 6));
    for (v, cfg) in cases {
        let cfg = shorten_ode(cfg, 4);
        let m = random_model(&cfg, 11, 0.05);
        let x = gauss(300, m.dims(), 12);
        let (z, ld) = m.forward(&x).unwrap();
        let (back, ld_inv) = m.inverse(&z).unwrap();
        let err = back.max_abs_diff(&x);
        assert!(err <= 1e-8, "{v} K={} round trip {err:e}", cfg.k());
        for (a, b) in ld.iter().zip(&ld_inv) {
            assert!((a - b).abs() < 1e-8, "{v}: inverse logdet disagrees");
        }
    }
}

#[test]
fn prior_round_trip_through_sampling() {
    let cfg = Variant::KrnetAugRn.config(2, 1, 4, 12).unwrap();
    let m = random_model(&cfg, 21, 0.05);
    let z = gauss(10_000, m.dims(), 22);
    let (x, _) = m.inverse(&z).unwrap();
    let (z2, _) = m.forward(&x).unwrap();
    assert!(z2.max_abs_diff(&z) <= 1e-8);
}

#[test]
fn logdet_matches_numeric_jacobian() {
    let mut cases = variant_configs(2, 1, 2, 8);
    cases.extend(variant_configs(4, 2, 2, 8).into_iter().filter(|(v, _)| !v.is_augmented()));
    cases.extend(variant_configs(3, 1, 2, 6).into_iter().filter(|(v, _)| *v != Variant::RealNvp));
    for (v, cfg) in cases {
        let cfg = shorten_ode(cfg, 3);
        let m = random_model(&cfg, 31, 0.1);
        let d = m.dims();
        assert!(d <= 4);
        let x = gauss(20, d, 32);
        let (_, ld) = m.forward(&x).unwrap();
        for r in 0..x.rows() {
            let jac = finite_diff_jacobian(
                |p: &[f64]| {
                    let b = Batch::new(1, d, p.to_vec())?;
                    Ok(m.forward(&b)?.0.into_vec())
                },
                x.row(r),
                1e-6,
            )
            .unwrap();
            let want = log_abs_det(&jac).unwrap();
            let rel = (ld[r] - want).abs() / want.abs().max(1.0);
            assert!(rel < 1e-4, "{v}: logdet {} vs numeric {want}", ld[r]);
        }
    }
}

#[test]
fn frozen_blocks_are_bit_exact() {
    // K = 4 blocks of 1 dim; block i is fixed after stage K - i + 1.
    let cfg = FlowConfig::new(vec![1, 1, 1, 1], 2, 8).with_rotation_and_cdf();
    let m = random_model(&cfg.clone(), 41, 0.1);
    let mut x = gauss(20, 4, 42);
    for (i, layer) in m.layers().iter().enumerate() {
        let site = m.sites()[i];
        let before = x.clone();
        let mut ld = vec![0.0; x.rows()];
        layer.forward(m.layer_params(i), &mut x, &mut ld, false).unwrap();
        if matches!(layer, Layer::Cdf(_)) {
            continue;
        }
        // at stage k the data blocks K+2-k..K are frozen
        for block in 1..=4usize {
            if site.stage > 0 && site.stage > 4 - block + 1 {
                let col = block - 1;
                for r in 0..x.rows() {
                    assert_eq!(x.get(r, col).to_bits(), before.get(r, col).to_bits());
                }
            }
        }
    }
}

#[test]
fn augmented_columns_join_every_stage() {
    let cfg = Variant::KrnetAugRn.config(4, 1, 2, 8).unwrap();
    let m = FlowModel::<f64>::build(&cfg, &RngState::new(1)).unwrap();
    for k in 1..=cfg.n_stages() {
        let touches_gamma = m.layers().iter().zip(m.sites()).any(|(l, s)| {
            s.stage == k && matches!(l, Layer::Coupling(c) if c.upd.contains(&0) || c.cond.contains(&0))
        });
        assert!(touches_gamma, "stage {k} misses the augmented column");
    }
    // rotations never act on the augmented column
    for l in m.layers() {
        if let Layer::Rotation(r) = l {
            assert!(!r.cols.contains(&0));
        }
    }
}

#[test]
fn marginal_methods_agree_at_identity() {
    let cfg = FlowConfig::new(vec![1], 2, 8).with_aug(1);
    let m = FlowModel::<f64>::build(&cfg, &RngState::new(1)).unwrap();
    let y = gauss(30, 1, 2);
    let want = std_normal_logpdf(&y);
    let mut rng = RngState::new(3);
    let a = m.marginal_logdensity(&y, MarginalMethod::GammaStar, &mut rng).unwrap();
    let b = m.marginal_logdensity(&y, MarginalMethod::Mc(50), &mut rng).unwrap();
    for i in 0..30 {
        assert!((a[i] - want[i]).abs() < 1e-12);
        assert!((b[i] - want[i]).abs() < 1e-12);
    }
    assert!(m.marginal_logdensity(&y, MarginalMethod::Mc(0), &mut rng).is_err());
}

#[test]
fn identity_samples_are_standard_normal() {
    let cfg = Variant::KrnetAug.config(2, 1, 2, 8).unwrap();
    let m = FlowModel::<f64>::build(&cfg, &RngState::new(1)).unwrap();
    let (y, g) = m.sample(&mut RngState::new(9), 20_000).unwrap();
    assert_eq!(g.unwrap().cols(), 1);
    for (mu, sd) in y.col_mean().iter().zip(y.col_std()) {
        assert!(mu.abs() < 0.03 && (sd - 1.0).abs() < 0.03);
    }
}

#[test]
fn sampled_points_have_finite_density() {
    let cfg = Variant::KrnetRn.config(2, 1, 2, 8).unwrap();
    let m = random_model(&cfg, 5, 0.1);
    let (y, _) = m.sample(&mut RngState::new(6), 2000).unwrap();
    let (_, lp) = m.forward_logdensity(&y, None).unwrap();
    assert!(lp.iter().all(|v| v.is_finite()));
}

#[test]
fn one_dim_marginal_integrates_to_one() {
    let cfg = FlowConfig::new(vec![1], 2, 8).with_aug(1);
    let m = random_model(&cfg, 8, 0.05);
    let n = 4001;
    let h = 20.0 / (n - 1) as f64;
    let ys: Vec<f64> = (0..n).map(|i| -10.0 + h * i as f64).collect();
    let y = Batch::column(&ys);
    let mut rng = RngState::new(1);
    // gamma = 0 slice rescaled is only approximately normalized; the
    // Monte Carlo marginal integrates to one in expectation.
    let lp = m.marginal_logdensity(&y, MarginalMethod::Mc(400), &mut rng).unwrap();
    let total: f64 = lp.iter().enumerate().map(|(i, v)| {
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        w * v.exp()
    }).sum::<f64>() * h;
    assert!((total - 1.0).abs() < 2e-2, "integral {total}");
}

#[test]
fn non_augmented_model_joint_integrates_to_one() {
    let cfg = FlowConfig::new(vec![1], 2, 8).with_aug(1);
    let m = random_model(&cfg, 8, 0.05);
    // integrate the joint over a 2D grid
    let n = 401;
    let h = 16.0 / (n - 1) as f64;
    let mut pts = Vec::with_capacity(n * n * 2);
    for i in 0..n {
        for j in 0..n {
            pts.push(-8.0 + h * i as f64);
            pts.push(-8.0 + h * j as f64);
        }
    }
    let x = Batch::new(n * n, 2, pts).unwrap();
    let (z, ld) = m.forward(&x).unwrap();
    let lp = std_normal_logpdf(&z);
    let total: f64 = lp.iter().zip(&ld).map(|(a, b)| (a + b).exp()).sum::<f64>() * h * h;
    assert!((total - 1.0).abs() < 1e-3, "integral {total}");
}

#[test]
fn pair_count_example() {
    assert_eq!(closed_form_pair(24, 3), 1473);
    let cfg = FlowConfig::new(vec![1, 1], 2, 24).with_aug(1);
    let m = FlowModel::<f64>::build(&cfg, &RngState::new(1)).unwrap();
    let c = m.count_params();
    assert_eq!(c.pairs[0], 1473);
    assert!(c.matches_prediction());
}

#[test]
fn counts_match_closed_forms_on_uniform_partitions() {
    let cfgs = vec![
        Variant::KrnetAugRn.config(4, 1, 2, 24).unwrap().with_decay(0.9),
        Variant::KrnetRn.config(6, 2, 4, 16).unwrap(),
        Variant::KrnetAugRn.config(8, 2, 2, 32).unwrap(),
        Variant::KrnetOde.config(2, 1, 2, 8).unwrap(),
        Variant::Krnet.config(4, 1, 2, 10).unwrap(),
    ];
    for cfg in cfgs {
        let m = FlowModel::<f64>::build(&cfg, &RngState::new(1)).unwrap();
        let c = m.count_params();
        assert!(c.matches_prediction(), "{cfg:?}: {c:?}");
        assert_eq!(c.total, m.n_params());
    }
    assert_eq!(rotation_closed_form(2, 4), (4 * 4 + 6 * 6 + 8 * 8));
}

#[test]
fn scale_bias_counts_are_twice_the_active_width() {
    let cfg = Variant::KrnetAug.config(4, 1, 2, 8).unwrap();
    let m = FlowModel::<f64>::build(&cfg, &RngState::new(1)).unwrap();
    for (l, s) in m.layers().iter().zip(m.sites()) {
        if let Layer::ScaleBias(sb) = l {
            let n_k = 1 + (4 + 1 - s.stage);
            assert_eq!(sb.n_params(), 2 * n_k);
        }
    }
}

#[test]
fn non_uniform_partition_reports_unavailable_rotation_formula() {
    let cfg = FlowConfig::new(vec![2, 1, 1], 2, 8).with_rotation_and_cdf();
    let m = FlowModel::<f64>::build(&cfg, &RngState::new(1)).unwrap();
    let c = m.count_params();
    assert_eq!(c.prediction.rotation, None);
    assert_eq!(c.prediction.total, None);
    assert!(c.category("rotation") > 0);
}

#[test]
fn tied_ode_shares_parameters() {
    let base = FlowConfig::new(vec![1, 1], 2, 8).with_aug(1);
    let untied = base.clone().with_ode(OdeConfig::uniform(4));
    let mut tied_cfg = OdeConfig::uniform(4);
    tied_cfg.tied = true;
    let tied = base.with_ode(tied_cfg);
    let a = FlowModel::<f64>::build(&untied, &RngState::new(1)).unwrap();
    let b = FlowModel::<f64>::build(&tied, &RngState::new(1)).unwrap();
    assert_eq!(a.n_params(), 4 * b.n_params());
    assert_eq!(b.count_params().total, b.n_params());
    assert!(b.count_params().matches_prediction());
}

#[test]
fn ode_probe_zero_parameters_give_zero_velocity() {
    let cfg = FlowConfig::new(vec![1, 1], 2, 8).with_aug(1).with_ode(OdeConfig::uniform(10));
    let mut m = FlowModel::<f64>::build(&cfg, &RngState::new(1)).unwrap();
    m.params_mut().iter_mut().for_each(|p| *p = 0.0);
    let x = gauss(20, 3, 2);
    for row in m.ode_limit_probe(&x, &[0.1, 0.05]).unwrap() {
        assert_eq!(row.q_rms, 0.0);
    }
}

#[test]
fn ode_probe_is_first_order() {
    for seed in 0..3 {
        let cfg = FlowConfig::new(vec![1, 1], 2, 8).with_aug(1).with_ode(OdeConfig::uniform(10));
        let m = random_model(&cfg, 50 + seed, 0.3);
        let x = gauss(200, 3, 60 + seed);
        let rows = m.ode_limit_probe(&x, &[0.1, 0.05, 0.025]).unwrap();
        for w in rows.windows(2) {
            let ratio = w[1].diff / w[0].diff;
            assert!((ratio - 0.5).abs() <= 0.15, "ratio {ratio}");
        }
    }
}

#[test]
fn ode_single_pair_velocity_matches_analytic_field() {
    // one data dim, one augmented dim, one coupling pair, K = 1
    let cfg = FlowConfig::new(vec![1], 2, 6).with_aug(1).with_ode(OdeConfig::uniform(10));
    let m = random_model(&cfg, 70, 0.3);
    let x = gauss(5, 2, 71);
    let q = m.ode_velocity(&x, 1e-7).unwrap();
    // analytic field: gamma' = gamma w1(y) + b1(y), y' = y w2(gamma) + b2(gamma)
    let couplings: Vec<usize> = (0..m.n_layers()).filter(|&i| m.layers()[i].kind() == "coupling").take(2).collect();
    for r in 0..5 {
        let mut v = [0.0; 2];
        for (slot, &i) in couplings.iter().enumerate() {
            let Layer::Coupling(c) = &m.layers()[i] else { unreachable!() };
            let theta = m.layer_params(i);
            let y1 = Batch::new(1, 1, vec![x.get(r, c.cond[0])]).unwrap();
            let nm = c.mlp.n_params();
            let (s, t, _) = c.mlp.forward(&theta[..nm], &y1).unwrap();
            let beta = theta[nm];
            let alpha = theta[nm + 1];
            let w = alpha.exp() * s.get(0, 0).tanh();
            let b = beta.exp() * t.get(0, 0).tanh();
            v[slot] = x.get(r, c.upd[0]) * w + b;
            assert_eq!(c.upd[0], slot);
        }
        for j in 0..2 {
            assert!((q.get(r, j) - v[j]).abs() < 1e-5, "velocity {} vs {}", q.get(r, j), v[j]);
        }
    }
}

#[test]
fn translation_only_ode_preserves_volume() {
    let cfg = FlowConfig::new(vec![1], 2, 6).with_aug(1).with_ode(OdeConfig::uniform(10));
    let mut m = random_model(&cfg, 80, 0.3);
    // drive every alpha to -inf so w = 0 exactly
    for i in 0..m.n_layers() {
        if let Layer::Coupling(c) = &m.layers()[i] {
            let nm = c.mlp.n_params();
            let u = c.upd.len();
            let r = m.param_range(i);
            for p in &mut m.params_mut()[r][nm + u..nm + 2 * u] {
                *p = -1e4;
            }
        }
    }
    let x = gauss(50, 2, 81);
    let (_, ld) = m.forward(&x).unwrap();
    assert!(ld.iter().all(|&v| v == 0.0));
}

#[test]
fn split_euler_first_integral_drift_is_first_order() {
    // b1(y) = y + y^3, b2(g) = 1 + g^2 with antiderivatives
    let b1 = |y: f64| y + y * y * y;
    let b2 = |g: f64| 1.0 + g * g;
    let bh1 = |y: f64| 0.5 * y * y + 0.25 * y.powi(4);
    let bh2 = |g: f64| g + g.powi(3) / 3.0;
    let (g0, y0) = (0.3, -0.2);
    let c0 = bh2(g0) - bh1(y0);
    let drift = |n: usize| {
        let traj = split_euler(g0, y0, b1, b2, 0.5 / n as f64, n);
        traj.iter().map(|(g, y)| (bh2(*g) - bh1(*y) - c0).abs()).fold(0.0, f64::max)
    };
    let (d1, d2, d3) = (drift(50), drift(100), drift(200));
    assert!((d2 / d1 - 0.5).abs() < 0.1 && (d3 / d2 - 0.5).abs() < 0.1, "{d1} {d2} {d3}");
    // reference: RK4 on the continuous system conserves the integral to high order
    let rk4 = |n: usize| {
        let h = 0.5 / n as f64;
        let f = |g: f64, y: f64| (b1(y), b2(g));
        let (mut g, mut y) = (g0, y0);
        for _ in 0..n {
            let k1 = f(g, y);
            let k2 = f(g + 0.5 * h * k1.0, y + 0.5 * h * k1.1);
            let k3 = f(g + 0.5 * h * k2.0, y + 0.5 * h * k2.1);
            let k4 = f(g + h * k3.0, y + h * k3.1);
            g += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            y += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        (g, y)
    };
    let (gr, yr) = rk4(2000);
    assert!((bh2(gr) - bh1(yr) - c0).abs() < 1e-10);
    let (ge, ye) = *split_euler(g0, y0, b1, b2, 0.5 / 200.0, 200).last().unwrap();
    assert!((ge - gr).abs() < 0.05 && (ye - yr).abs() < 0.05);
}

#[test]
fn logit_preprocessing_round_trip_and_domain() {
    let cfg = FlowConfig::new(vec![1], 2, 8)
        .with_aug(1)
        .with_logit(LogitConfig { scale: 2.0, lo: -1.0, hi: 1.0 });
    let m = random_model(&cfg, 3, 0.05);
    let y = Batch::column(&[-0.99, -0.5, 0.0, 0.7, 0.999]);
    let (z, lp) = m.forward_logdensity(&y, None).unwrap();
    assert!(lp.iter().all(|v| v.is_finite()));
    let (x, _) = m.inverse(&z).unwrap();
    assert!(x.max_abs_diff(&m.assemble(&y, None).unwrap()) < 1e-10);
    let bad = Batch::column(&[1.5]);
    let err = m.forward_logdensity(&bad, None).unwrap_err();
    assert!(matches!(err, KrnetError::Layer { index: 0, kind: "logit", .. }), "{err}");
}

#[test]
fn non_finite_input_names_the_layer() {
    let cfg = Variant::Krnet.config(2, 1, 2, 8).unwrap();
    let m = random_model(&cfg, 3, 0.05);
    let y = Batch::new(1, 2, vec![f64::NAN, 0.0]).unwrap();
    match m.forward_logdensity(&y, None) {
        Err(KrnetError::Layer { .. }) => {}
        other => panic!("expected a layer error, got {other:?}"),
    }
}

#[test]
fn f32_model_runs() {
    let cfg = Variant::KrnetAug.config(2, 1, 2, 8).unwrap();
    let m = FlowModel::<f32>::build(&cfg, &RngState::new(1)).unwrap();
    let y: Batch<f32> = gauss(10, 2, 2).cast();
    let (_, lp) = m.forward_logdensity(&y, None).unwrap();
    assert!(lp.iter().all(|v| v.is_finite()));
}
