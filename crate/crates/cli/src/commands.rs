//! Command-line surface.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use krnet_core::flow::{FlowModel, MarginalMethod};
use krnet_core::gradients::{adjoint_grad_state, backprop_grad_state, grad_check, relative_discrepancy};
use krnet_core::nn::InitScheme;
use krnet_core::numkit::{streams, RngState};
use krnet_core::targets::{HoleSpec, LogDensity, Target, TargetSpec};
use krnet_core::train::{estimation_loss_on, metric_delta, metric_rel_kl, TrainMode};
use krnet_core::GradPath;
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Overrides};
use crate::error::{exit, CliError, CliResult};
use crate::repro::{self, Flag, ReproOptions};
use crate::runner;

/// Finite-difference step of the gradient audit.
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_PROBES: usize = 50;
/// Bounds reported by `gradcheck`.
pub const FD_TOL: f64 = 1e-4;
pub const ADJOINT_TOL: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "krnet", version, about = "KRnet normalizing-flow experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct RunFlags {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long, value_parser = parse_grad_path)]
    pub grad_path: Option<GradPath>,
    /// Override the number of training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl RunFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            runs: self.runs,
            grad_path: self.grad_path,
            epochs: self.epochs,
        }
    }

    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        self.overrides().apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Density estimation from target samples.
    Fit(RunFlags),
    /// Density approximation against the target density (reverse KL).
    Approx(RunFlags),
    /// Metrics of saved checkpoints on a fresh validation set.
    Eval {
        /// Checkpoint file; repeat to compare runs of one configuration.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Target name, JSON object or JSON file; defaults to the checkpoint's.
        #[arg(long)]
        target: Option<String>,
        #[arg(long, default_value_t = 20_000)]
        n_valid: usize,
        /// Marginal recovery for augmented models: `gamma_star`, `mc` or `both`.
        #[arg(long, default_value = "both")]
        method: String,
        /// Draws per point of the `mc` method.
        #[arg(long, default_value_t = 100)]
        n_mc: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference and adjoint-vs-backprop gradient audit.
    Gradcheck(RunFlags),
    /// Enumerated parameter counts against the closed-form predictions.
    Paramcount(RunFlags),
    /// Runs a pinned reproduction case and writes its comparison report.
    Repro {
        #[arg(long)]
        case: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_parser = parse_grad_path)]
        grad_path: Option<GradPath>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn parse_grad_path(s: &str) -> Result<GradPath, String> {
    s.parse().map_err(|e: krnet_core::KrnetError| e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_with(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::SUCCESS };
            if code == exit::SUCCESS {
                let _ = write!(out, "{e}");
            } else {
                let _ = write!(err, "{e}");
            }
            return code;
        }
    };
    match run(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<i32> {
    match cmd {
        Command::Fit(f) => fit(&f, TrainMode::Estimation, out),
        Command::Approx(f) => fit(&f, TrainMode::Approximation, out),
        Command::Eval {
            checkpoints,
            target,
            n_valid,
            method,
            n_mc,
            seed,
            out: path,
        } => {
            let report = eval(&checkpoints, target.as_deref(), n_valid, &method, n_mc, seed)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            if let Some(p) = path {
                write_text(&p, &text)?;
            }
            let _ = out.write_all(text.as_bytes());
            Ok(exit::SUCCESS)
        }
        Command::Gradcheck(f) => gradcheck(&f.load()?, out),
        Command::Paramcount(f) => paramcount(&f.load()?, out),
        Command::Repro {
            case,
            seed,
            out: dir,
            runs,
            grad_path,
            epochs,
        } => {
            if !repro::CASES.contains(&case.as_str()) {
                return Err(repro::unknown_case(&case));
            }
            let opts = ReproOptions {
                seed,
                out: dir.unwrap_or_else(|| PathBuf::from("runs").join(&case)),
                overrides: Overrides {
                    runs,
                    grad_path,
                    epochs,
                    ..Overrides::default()
                },
            };
            let report = repro::run_case(&case, &opts, err)?;
            let _ = writeln!(out, "{}", report.table);
            for c in &report.checks {
                let _ = writeln!(out, "{:<9} {} = {:.4e} (expected {})", c.flag.as_str(), c.name, c.value, c.expected);
            }
            let _ = writeln!(out, "report: {}", opts.out.join("report.md").display());
            Ok(exit::SUCCESS)
        }
    }
}

fn write_text(p: &Path, text: &str) -> CliResult<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
    }
    std::fs::write(p, text).map_err(|e| CliError::io(p, e))
}

fn fit(flags: &RunFlags, mode: TrainMode, out: &mut dyn Write) -> CliResult<i32> {
    let cfg = flags.load()?;
    cfg.expect_mode(mode)?;
    runner::run_all(&cfg, out)?;
    let _ = writeln!(out, "artifacts: {}", cfg.out.display());
    Ok(exit::SUCCESS)
}

/// Target from a preset name, an inline JSON object or a JSON file.
pub fn parse_target(s: &str) -> CliResult<TargetSpec> {
    let preset = match s {
        "logistic" => Some(TargetSpec::Logistic { loc: 0.0, scale: 2.0 }),
        "lognormal" => Some(TargetSpec::Lognormal),
        "uniform" => Some(TargetSpec::Uniform { lo: -1.0, hi: 1.0 }),
        "uniform_hole" => Some(TargetSpec::UniformHole),
        "mixture2d" => Some(TargetSpec::Mixture2d),
        "holes4" => Some(TargetSpec::Holes(HoleSpec::new(4))),
        "holes8" => Some(TargetSpec::Holes(HoleSpec::new(8))),
        _ => s
            .strip_prefix("gaussian")
            .and_then(|d| d.parse().ok())
            .map(|dims| TargetSpec::Gaussian { dims }),
    };
    if let Some(p) = preset {
        return Ok(p);
    }
    let text = if s.trim_start().starts_with('{') {
        s.to_string()
    } else {
        let p = Path::new(s);
        if !p.exists() {
            return Err(CliError::Usage(format!(
                "unknown target `{s}` (presets: logistic, lognormal, uniform, uniform_hole, mixture2d, holes4, holes8, gaussian<N>)"
            )));
        }
        std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?
    };
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("target: {e}")))
}

fn eval(
    paths: &[PathBuf],
    target: Option<&str>,
    n_valid: usize,
    method: &str,
    n_mc: usize,
    seed: Option<u64>,
) -> CliResult<Value> {
    if !matches!(method, "gamma_star" | "mc" | "both") {
        return Err(CliError::Usage(format!("--method must be gamma_star, mc or both, got `{method}`")));
    }
    if n_valid == 0 {
        return Err(CliError::Usage("--n-valid must be positive".into()));
    }
    let cks = paths.iter().map(|p| Checkpoint::load(p)).collect::<CliResult<Vec<_>>>()?;
    if let Some(other) = cks.iter().find(|c| c.config_hash != cks[0].config_hash) {
        return Err(CliError::Usage(format!(
            "refusing to compare checkpoints of different configurations ({} vs {})",
            cks[0].config_hash, other.config_hash
        )));
    }
    let override_spec = target.map(parse_target).transpose()?;
    let mut reports = Vec::new();
    for (ck, path) in cks.iter().zip(paths) {
        let model = ck.model()?;
        let mut cfg = ck.config.clone();
        if let Some(s) = &override_spec {
            cfg.target = s.clone();
        }
        let t = Target::new(cfg.target.clone());
        t.validate()?;
        if t.dim() != model.n_data() {
            return Err(CliError::Config(format!(
                "checkpoint models {} dimensions but target `{}` has {}",
                model.n_data(),
                t.name(),
                t.dim()
            )));
        }
        let rng = RngState::new(seed.unwrap_or(ck.seed));
        let t = runner::prepared_target(&cfg, &rng)?;
        let entropy = runner::target_entropy(&cfg, &t, &rng)?;
        let valid = t.sample(&mut rng.substream(streams::VALIDATION), n_valid)?;
        let mut er = rng.substream(streams::EVALUATION);
        let loss = estimation_loss_on(&model, &valid, &mut er)?;
        let delta = entropy.map(|h| metric_delta(loss, h)).transpose()?;
        let mut r = json!({
            "checkpoint": path.display().to_string(),
            "config_hash": ck.config_hash,
            "seed": ck.seed,
            "variant": ck.config.variant.tag(),
            "target": t.name(),
            "n_valid": n_valid,
            "loss": loss,
            "entropy": entropy,
            "delta": delta.map(|d| d.value),
        });
        if let (Some(h), false) = (entropy, t.is_unnormalized()) {
            let mut methods = vec![("gamma_star", MarginalMethod::GammaStar)];
            if model.m_aug() > 0 && method != "gamma_star" {
                methods.push(("mc", MarginalMethod::Mc(n_mc)));
            }
            if model.m_aug() > 0 && method == "mc" {
                methods.remove(0);
            }
            for (name, m) in methods {
                let v = metric_rel_kl(&model, &valid, &t, h, m, &mut rng.substream(streams::EVALUATION))?;
                r[format!("rel_kl_{name}")] = json!(v);
            }
        }
        if model.m_aug() > 0 {
            let pts = valid.slice_rows(0, valid.rows().min(100));
            let gs = model.marginal_logdensity(&pts, MarginalMethod::GammaStar, &mut er)?;
            let mc = model.marginal_logdensity(&pts, MarginalMethod::Mc(n_mc), &mut er)?;
            let gap = gs.iter().zip(&mc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let rows: Vec<Value> = gs
                .iter()
                .zip(&mc)
                .enumerate()
                .take(10)
                .map(|(i, (g, m))| json!({"y": pts.row(i), "gamma_star": g, "mc": m}))
                .collect();
            r["marginal"] = json!({
                "points": pts.rows(),
                "n_mc": n_mc,
                "max_abs_difference": gap,
                "first_points": rows,
            });
        }
        let (y, _) = model.sample(&mut rng.substream(streams::GENERATION), cfg.eval.samples)?;
        if let Some(hf) = runner::hole_fraction(&t, &y) {
            r["hole_fraction"] = json!(hf);
            r["generated"] = json!(y.rows());
        }
        if matches!(t.spec, TargetSpec::Mixture2d) {
            r["mode_fractions"] = json!(runner::mode_fractions(&y));
        }
        reports.push(r);
    }
    Ok(if reports.len() == 1 {
        reports.pop().expect("one report")
    } else {
        json!({ "config_hash": cks[0].config_hash, "runs": reports })
    })
}

/// Results of the gradient audit.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub fd_max_rel_error: f64,
    pub probes: usize,
    pub adjoint_vs_backprop: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.fd_max_rel_error <= FD_TOL && self.adjoint_vs_backprop <= ADJOINT_TOL
    }
}

/// Audits the gradients of `cfg`'s model at a randomized (nonzero output
/// layer) initialization on a batch of target samples.
pub fn gradcheck_report(cfg: &ExperimentConfig, rows: usize) -> CliResult<GradcheckReport> {
    let rng = RngState::new(cfg.seed);
    let mut model = FlowModel::<f64>::build_with(&cfg.model, &rng, InitScheme::GlorotUniformFull)?;
    let t = runner::prepared_target(cfg, &rng)?;
    let y = t.sample(&mut rng.substream(streams::DATA), rows)?;
    let gamma = (model.m_aug() > 0).then(|| rng.substream(streams::GAMMA).gauss_sample(rows, model.m_aug()));
    let x = model.assemble(&y, gamma.as_ref())?;
    model.data_init(&x)?;
    let fd = grad_check(&model, &x, GRADCHECK_EPS, GRADCHECK_PROBES, &rng)?;
    let a = adjoint_grad_state(&model, &x)?;
    let b = backprop_grad_state(&model, &x)?;
    Ok(GradcheckReport {
        fd_max_rel_error: fd.max_rel_error,
        probes: fd.n_probes,
        adjoint_vs_backprop: relative_discrepancy(&a.grad, &b.grad),
    })
}

fn gradcheck(cfg: &ExperimentConfig, out: &mut dyn Write) -> CliResult<i32> {
    let r = gradcheck_report(cfg, 64)?;
    let fd = Flag::upper(r.fd_max_rel_error, FD_TOL);
    let ab = Flag::upper(r.adjoint_vs_backprop, ADJOINT_TOL);
    let pf = |ok: bool| if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "# config_hash={} seed={}", cfg.hash(), cfg.seed);
    let _ = writeln!(
        out,
        "finite differences: max relative error {:.3e} over {} probes (eps {GRADCHECK_EPS:e}, bound {FD_TOL:e}) {}",
        r.fd_max_rel_error,
        r.probes,
        pf(fd == Flag::Pass)
    );
    let _ = writeln!(
        out,
        "adjoint vs backprop: relative discrepancy {:.3e} (bound {ADJOINT_TOL:e}) {}",
        r.adjoint_vs_backprop,
        pf(ab == Flag::Pass)
    );
    Ok(if r.passed() { exit::SUCCESS } else { exit::NUMERICAL })
}

fn paramcount(cfg: &ExperimentConfig, out: &mut dyn Write) -> CliResult<i32> {
    let model = FlowModel::<f64>::build(&cfg.model, &RngState::new(cfg.seed))?;
    let c = model.count_params();
    let p = &c.prediction;
    let _ = writeln!(out, "# config_hash={} seed={}", cfg.hash(), cfg.seed);
    let _ = writeln!(out, "{:<12} {:>12} {:>12}  result", "category", "enumerated", "formula");
    let mut ok = true;
    let mut line = |name: &str, n: usize, f: Option<usize>| {
        let (fs, res) = match f {
            Some(f) if f == n => (f.to_string(), "PASS"),
            Some(f) => {
                ok = false;
                (f.to_string(), "FAIL")
            }
            None => ("n/a".to_string(), "n/a"),
        };
        let _ = writeln!(out, "{name:<12} {n:>12} {fs:>12}  {res}");
    };
    line("coupling", c.coupling(), Some(p.coupling));
    line("scale_bias", c.category("scale_bias"), Some(p.scale_bias));
    line("rotation", c.category("rotation"), p.rotation);
    line("cdf", c.category("cdf"), Some(p.cdf));
    line("total", c.total, p.total);
    let _ = writeln!(
        out,
        "coupling pairs: {}",
        c.pairs.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" ")
    );
    if !cfg.model.is_uniform_partition() {
        let _ = writeln!(out, "non-uniform partition: rotation and total formulas do not apply");
    }
    Ok(if ok { exit::SUCCESS } else { exit::NUMERICAL })
}
