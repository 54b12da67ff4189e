use std::path::{Path, PathBuf};

use krnet_cli::checkpoint::{decode_f64, encode_f64, Checkpoint};
use krnet_cli::repro::{self, Flag};
use krnet_cli::{exit, main_with, CliError, EvalConfig, ExperimentConfig};
use krnet_core::flow::{FlowConfig, FlowModel, Variant};
use krnet_core::nn::InitScheme;
use krnet_core::numkit::RngState;
use krnet_core::targets::TargetSpec;
use krnet_core::train::TrainConfig;
use serde_json::Value;

fn small(dir: &Path) -> ExperimentConfig {
    let mut train = TrainConfig::estimation(3, 2, 400);
    train.valid_size = 400;
    train.eval_every = 1;
    ExperimentConfig {
        variant: Variant::KrnetAug,
        model: Variant::KrnetAug.config(1, 1, 2, 8).unwrap(),
        init: InitScheme::GlorotUniform,
        target: TargetSpec::Logistic { loc: 0.0, scale: 2.0 },
        train,
        eval: EvalConfig {
            samples: 200,
            normalizer_mc: 10_000,
            entropy_mc: 10_000,
        },
        seed: 7,
        runs: 1,
        out: dir.join("out"),
    }
}

fn write_cfg(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join(name);
    cfg.save(&p).unwrap();
    p
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut argv = vec!["krnet".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(&argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn edit_json(p: &Path, f: impl FnOnce(&mut Value)) {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

#[test]
fn config_round_trips_and_hash_ignores_seed_and_output() {
    let d = tempfile::tempdir().unwrap();
    let c = small(d.path());
    let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
    assert_eq!(back, c);
    let mut other = c.clone();
    other.seed = 99;
    other.out = PathBuf::from("elsewhere");
    other.runs = 4;
    assert_eq!(other.hash(), c.hash());
    other.train.epochs += 1;
    assert_ne!(other.hash(), c.hash());
}

#[test]
fn missing_field_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let p = write_cfg(d.path(), "c.json", &small(d.path()));
    edit_json(&p, |v| {
        v["model"].as_object_mut().unwrap().remove("logit");
    });
    let err = ExperimentConfig::load(&p).unwrap_err();
    assert!(err.to_string().contains("model.logit"), "{err}");
    let (code, _, msg) = cli(&["fit", "--config", p.to_str().unwrap()]);
    assert_eq!(code, exit::USAGE, "{msg}");
}

#[test]
fn unknown_key_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let p = write_cfg(d.path(), "c.json", &small(d.path()));
    edit_json(&p, |v| {
        v["train"]["warmup"] = Value::from(3);
    });
    assert!(matches!(ExperimentConfig::load(&p), Err(CliError::Config(_))));
    let (code, _, _) = cli(&["fit", "--config", p.to_str().unwrap()]);
    assert_eq!(code, exit::USAGE);
}

#[test]
fn invalid_variant_tag_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let p = write_cfg(d.path(), "c.json", &small(d.path()));
    edit_json(&p, |v| v["variant"] = Value::from("KRnet_turbo"));
    let (code, _, msg) = cli(&["fit", "--config", p.to_str().unwrap()]);
    assert_eq!(code, exit::USAGE, "{msg}");
}

#[test]
fn missing_target_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let mut c = small(d.path());
    c.train = TrainConfig::approximation(2, 1, 100);
    let p = write_cfg(d.path(), "c.json", &c);
    edit_json(&p, |v| {
        v.as_object_mut().unwrap().remove("target");
    });
    let (code, _, msg) = cli(&["approx", "--config", p.to_str().unwrap()]);
    assert_eq!(code, exit::USAGE, "{msg}");
    assert!(msg.contains("target"), "{msg}");
}

#[test]
fn variant_must_match_model() {
    let d = tempfile::tempdir().unwrap();
    let mut c = small(d.path());
    c.variant = Variant::Krnet;
    assert!(matches!(c.validate(), Err(CliError::Config(_))));
}

#[test]
fn missing_config_file_is_io_error() {
    let (code, _, _) = cli(&["fit", "--config", "/nonexistent/krnet.json"]);
    assert_eq!(code, exit::IO);
}

#[test]
fn unknown_flag_is_usage_error() {
    let (code, _, _) = cli(&["fit", "--config", "x.json", "--bogus"]);
    assert_eq!(code, exit::USAGE);
    let (code, _, _) = cli(&["fit", "--config", "x.json", "--grad-path", "sideways"]);
    assert_eq!(code, exit::USAGE);
}

#[test]
fn base64_blocks_are_little_endian_f64() {
    let v = [1.0, -0.0, f64::MIN_POSITIVE, 1e300, -3.25];
    let s = encode_f64(&v);
    let back = decode_f64(&s).unwrap();
    assert_eq!(v.map(f64::to_bits).to_vec(), back.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(encode_f64(&[1.0]), "AAAAAAAA8D8=");
    assert!(decode_f64("AAAA").is_err());
}

fn trained_like_model(cfg: &ExperimentConfig) -> FlowModel<f64> {
    let rng = RngState::new(cfg.seed);
    let mut m = FlowModel::<f64>::build_with(&cfg.model, &rng, InitScheme::GlorotUniformFull).unwrap();
    let x = RngState::new(3).gauss_sample(64, m.dims());
    m.data_init(&x).unwrap();
    m
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let d = tempfile::tempdir().unwrap();
    for (variant, block) in [(Variant::KrnetAugRn, 1), (Variant::KrnetOde, 2), (Variant::RealNvp, 2)] {
        let mut c = small(d.path());
        c.variant = variant;
        c.model = variant.config(4, block, 2, 6).unwrap();
        c.target = TargetSpec::Gaussian { dims: 4 };
        let m = trained_like_model(&c);
        let rng = RngState::new(11);
        let ck = Checkpoint::new(&c, &m, c.seed, 5, &rng);
        let p = d.path().join("m.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let m2 = back.model().unwrap();
        assert_eq!(m2.params().len(), m.params().len());
        let y = RngState::new(5).gauss_sample(50, 4);
        let g = (m.m_aug() > 0).then(|| RngState::new(6).gauss_sample(50, m.m_aug()));
        let (_, a) = m.forward_logdensity(&y, g.as_ref()).unwrap();
        let (_, b) = m2.forward_logdensity(&y, g.as_ref()).unwrap();
        assert!(
            a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
            "{variant}: logdensity differs after reload"
        );
        assert_eq!(RngState::restore(&back.rng).unwrap().snapshot(), rng.snapshot());
    }
}

#[test]
fn checkpoint_header_is_plain_text_with_version() {
    let d = tempfile::tempdir().unwrap();
    let c = small(d.path());
    let m = trained_like_model(&c);
    let text = Checkpoint::new(&c, &m, 7, 0, &RngState::new(7)).to_text();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("KRNET-CHECKPOINT"));
    assert_eq!(lines.next(), Some("format_version: 1"));
    assert!(text.contains(&format!("config_hash: {}", c.hash())));
    assert!(Checkpoint::from_text(&text.replace("format_version: 1", "format_version: 9")).is_err());
    let tampered = text.replacen("\"epochs\": 3", "\"epochs\": 4", 1);
    assert_ne!(tampered, text);
    assert!(matches!(Checkpoint::from_text(&tampered), Err(CliError::Checkpoint(_))));
    assert!(Checkpoint::from_text("hello").is_err());
}

#[test]
fn fit_writes_artifacts_with_provenance_and_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let c = small(d.path());
    let p = write_cfg(d.path(), "c.json", &c);
    let (code, out, err) = cli(&["fit", "--config", p.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}{err}");
    let run = c.out.join("seed-7");
    let head = format!("# config_hash={} seed=7", c.hash());
    for f in ["history.csv", "timing.csv", "samples.csv", "model.ckpt", "summary.json", "samples.svg"] {
        let text = std::fs::read_to_string(run.join(f)).unwrap_or_else(|_| panic!("{f} missing"));
        assert!(text.contains(&c.hash()), "{f} lacks the config hash");
        if f.ends_with(".csv") {
            assert_eq!(text.lines().next(), Some(head.as_str()), "{f}");
        }
    }
    let history = std::fs::read(run.join("history.csv")).unwrap();
    let hist = String::from_utf8(history.clone()).unwrap();
    assert_eq!(hist.lines().nth(1), Some("epoch,loss,metric"));
    assert_eq!(hist.lines().count(), 2 + 3);
    let samples = std::fs::read_to_string(run.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 2 + 200);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["metric_kind"], "delta");
    assert!(summary["final_metric"].as_f64().unwrap().is_finite());

    let out2 = d.path().join("again");
    let (code, _, _) = cli(&["fit", "--config", p.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(std::fs::read(out2.join("seed-7/history.csv")).unwrap(), history);
    assert_eq!(
        std::fs::read(out2.join("seed-7/samples.csv")).unwrap(),
        std::fs::read(run.join("samples.csv")).unwrap()
    );

    let (code, _, _) = cli(&["fit", "--config", p.to_str().unwrap(), "--out", out2.to_str().unwrap(), "--seed", "8", "--runs", "2"]);
    assert_eq!(code, 0);
    assert!(out2.join("seed-8/history.csv").exists() && out2.join("seed-9/history.csv").exists());
    assert_ne!(std::fs::read(out2.join("seed-8/history.csv")).unwrap(), history);
}

#[test]
fn fit_refuses_approximation_config() {
    let d = tempfile::tempdir().unwrap();
    let mut c = small(d.path());
    c.train = TrainConfig::approximation(2, 1, 100);
    let p = write_cfg(d.path(), "c.json", &c);
    let (code, _, _) = cli(&["fit", "--config", p.to_str().unwrap()]);
    assert_eq!(code, exit::USAGE);
}

#[test]
fn approx_on_prior_reaches_zero_loss() {
    let d = tempfile::tempdir().unwrap();
    let mut c = small(d.path());
    c.variant = Variant::Krnet;
    c.model = FlowConfig::new(vec![1, 1], 2, 8);
    c.target = TargetSpec::Gaussian { dims: 2 };
    c.train = TrainConfig::approximation(5, 2, 500);
    c.train.valid_size = 20_000;
    let p = write_cfg(d.path(), "c.json", &c);
    let (code, out, err) = cli(&["approx", "--config", p.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}{err}");
    let s: Value = serde_json::from_str(&std::fs::read_to_string(c.out.join("seed-7/summary.json")).unwrap()).unwrap();
    assert_eq!(s["metric_kind"], "reverse_kl");
    let kl = s["final_metric"].as_f64().unwrap();
    assert!(kl.abs() < 1e-2, "reverse KL {kl}");
}

#[test]
fn divergence_exits_3_after_writing_history() {
    let d = tempfile::tempdir().unwrap();
    let mut c = small(d.path());
    c.train.divergence_threshold = 1e-3;
    let p = write_cfg(d.path(), "c.json", &c);
    let (code, _, err) = cli(&["fit", "--config", p.to_str().unwrap()]);
    assert_eq!(code, exit::NUMERICAL, "{err}");
    assert!(err.contains("diverged"), "{err}");
    assert!(c.out.join("seed-7/history.csv").exists());
}

fn fit_identity(dir: &Path, dims: usize) -> PathBuf {
    let mut c = small(dir);
    c.variant = Variant::Krnet;
    c.model = FlowConfig::new(vec![1; dims], 2, 4);
    c.target = TargetSpec::Gaussian { dims };
    c.train.epochs = 0;
    c.out = dir.join(format!("identity{dims}"));
    let p = write_cfg(dir, &format!("id{dims}.json"), &c);
    let (code, _, err) = cli(&["fit", "--config", p.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    c.out.join("seed-7/model.ckpt")
}

#[test]
fn eval_identity_checkpoint_on_prior_has_zero_delta() {
    let d = tempfile::tempdir().unwrap();
    let ck = fit_identity(d.path(), 2);
    let (code, out, err) = cli(&["eval", "--checkpoint", ck.to_str().unwrap(), "--n-valid", "100000"]);
    assert_eq!(code, 0, "{err}");
    let r: Value = serde_json::from_str(&out).unwrap();
    // the loss is a sample mean: sd of ln N(y) in 2D is 1, so 4 sigma is 4 / sqrt(1e5) / h
    let h = r["entropy"].as_f64().unwrap();
    assert!(r["delta"].as_f64().unwrap().abs() < 4.0 / 1e5f64.sqrt() / h, "{r}");
    assert!(r["rel_kl_gamma_star"].as_f64().unwrap().abs() < 1e-12);
}

#[test]
fn eval_rejects_dimension_mismatch_and_mixed_configs() {
    let d = tempfile::tempdir().unwrap();
    let two = fit_identity(d.path(), 2);
    let three = fit_identity(d.path(), 3);
    let (code, _, err) = cli(&["eval", "--checkpoint", two.to_str().unwrap(), "--target", "logistic"]);
    assert_eq!(code, exit::USAGE, "{err}");
    assert!(err.contains("dimensions"), "{err}");
    let (code, _, err) = cli(&[
        "eval",
        "--checkpoint",
        two.to_str().unwrap(),
        "--checkpoint",
        three.to_str().unwrap(),
    ]);
    assert_eq!(code, exit::USAGE);
    assert!(err.contains("different configurations"), "{err}");
}

#[test]
fn eval_reports_marginal_methods_side_by_side() {
    let d = tempfile::tempdir().unwrap();
    let c = small(d.path());
    let p = write_cfg(d.path(), "c.json", &c);
    assert_eq!(cli(&["fit", "--config", p.to_str().unwrap()]).0, 0);
    let ck = c.out.join("seed-7/model.ckpt");
    let (code, out, err) = cli(&["eval", "--checkpoint", ck.to_str().unwrap(), "--n-valid", "2000", "--n-mc", "20"]);
    assert_eq!(code, 0, "{err}");
    let r: Value = serde_json::from_str(&out).unwrap();
    assert!(r["rel_kl_gamma_star"].is_number() && r["rel_kl_mc"].is_number(), "{r}");
    assert!(r["marginal"]["max_abs_difference"].is_number());
    let (code, _, _) = cli(&["eval", "--checkpoint", ck.to_str().unwrap(), "--method", "exact"]);
    assert_eq!(code, exit::USAGE);
}

#[test]
fn gradcheck_passes_for_discrete_augmented_and_ode_models() {
    let d = tempfile::tempdir().unwrap();
    for (variant, block) in [(Variant::Krnet, 1), (Variant::KrnetAugRn, 1), (Variant::KrnetOde, 1)] {
        let mut c = small(d.path());
        c.variant = variant;
        c.model = variant.config(2, block, 2, 6).unwrap();
        if let Some(o) = c.model.ode.as_mut() {
            *o = krnet_core::OdeConfig::uniform(3);
        }
        c.target = TargetSpec::Mixture2d;
        let p = write_cfg(d.path(), "g.json", &c);
        let (code, out, err) = cli(&["gradcheck", "--config", p.to_str().unwrap()]);
        assert_eq!(code, 0, "{variant}: {out}{err}");
        assert_eq!(out.matches("PASS").count(), 2, "{out}");
    }
}

#[test]
fn paramcount_reports_pass_and_not_applicable() {
    let d = tempfile::tempdir().unwrap();
    let mut c = small(d.path());
    c.variant = Variant::KrnetAugRn;
    c.model = Variant::KrnetAugRn.config(4, 2, 4, 10).unwrap();
    c.target = TargetSpec::Gaussian { dims: 4 };
    let p = write_cfg(d.path(), "u.json", &c);
    let (code, out, _) = cli(&["paramcount", "--config", p.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    assert!(!out.contains("FAIL") && out.contains("total"), "{out}");

    c.variant = Variant::KrnetRn;
    c.model = FlowConfig::new(vec![1, 2], 2, 6).with_rotation_and_cdf();
    c.target = TargetSpec::Gaussian { dims: 3 };
    let p = write_cfg(d.path(), "n.json", &c);
    let (code, out, _) = cli(&["paramcount", "--config", p.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    let rotation = out.lines().find(|l| l.starts_with("rotation")).unwrap();
    assert!(rotation.contains("n/a"), "{out}");
    assert!(out.lines().any(|l| l.starts_with("coupling") && l.ends_with("PASS")));
}

#[test]
fn repro_unknown_case_lists_cases() {
    let (code, _, err) = cli(&["repro", "--case", "3d-teapot"]);
    assert_eq!(code, exit::USAGE);
    for c in repro::CASES {
        assert!(err.contains(c), "{err}");
    }
}

#[test]
fn every_case_has_valid_pinned_configs() {
    let d = tempfile::tempdir().unwrap();
    for case in repro::CASES {
        let pts = repro::case_points(case, 0, d.path()).unwrap();
        assert!(!pts.is_empty());
        for p in pts {
            ExperimentConfig::from_json(&p.config.to_json()).unwrap();
        }
    }
    let table = repro::case_points("2d-mixture-table", 0, d.path()).unwrap();
    assert_eq!(table.len(), 9);
    assert!(table.iter().all(|p| p.config.runs == 3 && p.config.train.epochs == 2000));
}

#[test]
fn holes_sweep_matches_degrees_of_freedom() {
    let d = tempfile::tempdir().unwrap();
    let pts = repro::case_points("holes-4d", 0, d.path()).unwrap();
    for tri in pts.chunks(3) {
        let n = |p: &repro::Point| FlowModel::<f64>::build(&p.config.model, &RngState::new(0)).unwrap().n_params() as f64;
        let (a, k, r) = (n(&tri[0]), n(&tri[1]), n(&tri[2]));
        assert!((k / a - 1.0).abs() < 0.1 && (r / a - 1.0).abs() < 0.1, "{a} {k} {r}");
        // KRnet must not degenerate into the half-split baseline
        assert_ne!(tri[1].config.model.block_sizes, tri[2].config.model.block_sizes);
    }
}

#[test]
fn repro_case_writes_flagged_report() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("case");
    let (code, stdout, err) = cli(&["repro", "--case", "1d-logistic", "--epochs", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("delta"), "{stdout}");
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("# case=1d-logistic seed=0"));
    assert_eq!(csv.lines().count(), 2 + 3);
    assert!(csv.lines().skip(2).all(|l| ["PASS", "TOLERANCE", "FAIL"].iter().any(|f| l.contains(f))));
    assert!(std::fs::read_to_string(out.join("report.md")).unwrap().contains("| check |"));
}

#[test]
fn flags_follow_tolerance_bands() {
    assert_eq!(Flag::upper(1e-2, 1e-2), Flag::Pass);
    assert_eq!(Flag::upper(1.5e-2, 1e-2), Flag::Tolerance);
    assert_eq!(Flag::upper(3e-2, 1e-2), Flag::Fail);
    assert_eq!(Flag::upper(f64::NAN, 1e-2), Flag::Fail);
    assert_eq!(Flag::lower(0.04, 0.05), Flag::Tolerance);
    assert_eq!(Flag::lower(0.01, 0.05), Flag::Fail);
    assert_eq!(Flag::ordered(1.05, 1.0), Flag::Tolerance);
    assert_eq!(Flag::strictly_below(1.0, 1.0), Flag::Fail);
}

#[test]
fn svg_plots_are_self_contained() {
    let s = krnet_cli::svg::scatter(&[(0.0, 1.0), (2.0, f64::NAN), (1.0, -1.0)], "a<b", "x", "y");
    assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
    assert_eq!(s.matches("<circle").count(), 2);
    assert!(s.contains("a&lt;b"));
    let h = krnet_cli::svg::histogram(&[0.0, 0.5, 1.0, 1.0], 4, "h", "y");
    assert_eq!(h.matches("fill=\"steelblue\"").count(), 4);
}
