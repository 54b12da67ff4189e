//! Pinned desk-scale reproduction cases and their comparison reports.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use krnet_core::flow::{FlowConfig, FlowModel, LogitConfig, MarginalMethod, Variant};
use krnet_core::nn::InitScheme;
use krnet_core::numkit::{streams, Batch, RngState};
use krnet_core::targets::{HoleSpec, TargetSpec};
use krnet_core::train::TrainConfig;
use serde::Serialize;

use crate::config::{EvalConfig, ExperimentConfig, Overrides};
use crate::error::{CliError, CliResult};
use crate::runner::{self, RunOutcome};

pub const CASES: [&str; 8] = [
    "1d-logistic",
    "1d-lognormal",
    "1d-uniform",
    "1d-uniform-hole",
    "2d-mixture-table",
    "2d-mixture-approx",
    "holes-4d",
    "holes-8d",
];

/// Outcome of one check against a reference expectation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Flag {
    #[serde(rename = "PASS")]
    Pass,
    /// Missed the bound by at most the tolerance band.
    #[serde(rename = "TOLERANCE")]
    Tolerance,
    #[serde(rename = "FAIL")]
    Fail,
}

impl Flag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Flag::Pass => "PASS",
            Flag::Tolerance => "TOLERANCE",
            Flag::Fail => "FAIL",
        }
    }

    /// `value <= bound` passes; within twice the bound is tolerated.
    pub fn upper(value: f64, bound: f64) -> Flag {
        if value <= bound {
            Flag::Pass
        } else if value <= 2.0 * bound {
            Flag::Tolerance
        } else {
            Flag::Fail
        }
    }

    /// `value >= bound` passes; within half the bound is tolerated.
    pub fn lower(value: f64, bound: f64) -> Flag {
        if value >= bound {
            Flag::Pass
        } else if value >= 0.5 * bound {
            Flag::Tolerance
        } else {
            Flag::Fail
        }
    }

    /// `a <= b` passes; `a <= 1.1 b` is tolerated.
    pub fn ordered(a: f64, b: f64) -> Flag {
        if a <= b {
            Flag::Pass
        } else if a <= 1.1 * b {
            Flag::Tolerance
        } else {
            Flag::Fail
        }
    }

    /// Strict `a < b`, with no tolerance band.
    pub fn strictly_below(a: f64, b: f64) -> Flag {
        if a < b {
            Flag::Pass
        } else {
            Flag::Fail
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Human-readable expectation, e.g. `<= 1e-2`.
    pub expected: String,
    /// Reference value from the published experiment, when one exists.
    pub reference: Option<f64>,
    pub flag: Flag,
}

/// One configured model of a case.
#[derive(Clone, Debug)]
pub struct Point {
    pub variant: Variant,
    /// Swept quantity, e.g. `L=6` or `h=24`.
    pub label: String,
    pub config: ExperimentConfig,
}

pub struct PointResult {
    pub point: Point,
    pub runs: Vec<RunOutcome>,
}

impl PointResult {
    pub fn mean_metric(&self) -> f64 {
        let v: Vec<f64> = self.runs.iter().filter_map(|r| r.summary.final_metric).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn n_params(&self) -> usize {
        self.runs.first().map_or(0, |r| r.summary.n_params)
    }
}

pub struct CaseReport {
    pub case: String,
    pub seed: u64,
    pub points: Vec<PointResult>,
    pub checks: Vec<Check>,
    /// Markdown table of the case (layout depends on the case).
    pub table: String,
}

impl CaseReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.flag == Flag::Pass)
    }
}

fn estimation(epochs: usize, minibatches: usize, train_size: usize, valid_size: usize) -> TrainConfig {
    let mut t = TrainConfig::estimation(epochs, minibatches, train_size);
    t.valid_size = valid_size;
    t.eval_every = epochs.max(1);
    t
}

fn experiment(variant: Variant, model: FlowConfig, target: TargetSpec, train: TrainConfig, seed: u64, out: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        variant,
        model,
        init: InitScheme::GlorotUniform,
        target,
        train,
        eval: EvalConfig::default(),
        seed,
        runs: 1,
        out,
    }
}

fn one_d(variant: Variant, n_inner: usize, hidden: usize, logit: Option<(f64, f64)>) -> CliResult<FlowConfig> {
    let mut m = variant.config(1, 1, n_inner, hidden)?;
    if let Some((lo, hi)) = logit {
        m = m.with_logit(LogitConfig { scale: 2.0, lo, hi });
    }
    Ok(m)
}

/// Hidden width for `variant` whose parameter count is closest to `target`.
pub fn matched_hidden(variant: Variant, n: usize, block: usize, n_inner: usize, target: usize) -> CliResult<usize> {
    let mut best = (usize::MAX, 1);
    for h in 1..=256 {
        let cfg = variant.config(n, block, n_inner, h)?;
        let p = FlowModel::<f64>::build(&cfg, &RngState::new(0))?.n_params();
        let d = p.abs_diff(target);
        if d < best.0 {
            best = (d, h);
        }
        if p > target {
            break;
        }
    }
    Ok(best.1)
}

/// Pinned configuration of every model in `case`, written below `out`.
pub fn case_points(case: &str, seed: u64, out: &Path) -> CliResult<Vec<Point>> {
    let dir = |s: &str| out.join(s);
    let point = |variant, label: &str, config| Point {
        variant,
        label: label.to_string(),
        config,
    };
    let v = Variant::KrnetAug;
    let pts = match case {
        "1d-logistic" => {
            let tc = estimation(300, 40, 80_000, 80_000);
            let spec = TargetSpec::Logistic { loc: 0.0, scale: 2.0 };
            vec![point(v, "L=2", experiment(v, one_d(v, 2, 24, None)?, spec, tc, seed, dir("L2")))]
        }
        "1d-lognormal" => {
            let tc = estimation(300, 40, 80_000, 80_000);
            vec![point(v, "L=4", experiment(v, one_d(v, 4, 24, None)?, TargetSpec::Lognormal, tc, seed, dir("L4")))]
        }
        "1d-uniform" => {
            let tc = estimation(300, 40, 80_000, 80_000);
            let spec = TargetSpec::Uniform { lo: -1.0, hi: 1.0 };
            let m = one_d(v, 4, 24, Some((-1.0, 1.0)))?;
            vec![point(v, "L=4", experiment(v, m, spec, tc, seed, dir("L4")))]
        }
        "1d-uniform-hole" => {
            let tc = estimation(300, 40, 80_000, 80_000);
            let m = one_d(v, 4, 24, Some((-1.5, 1.5)))?;
            let mut c = experiment(v, m, TargetSpec::UniformHole, tc, seed, dir("L4"));
            // identity couplings never leave the Gaussian fit of this target
            c.init = InitScheme::GlorotUniformFull;
            vec![point(v, "L=4", c)]
        }
        "2d-mixture-table" => {
            let mut pts = Vec::new();
            for variant in [Variant::Krnet, Variant::KrnetAug, Variant::KrnetAugRn] {
                for l in [2, 4, 6] {
                    let m = variant.config(2, 1, l, 24)?.with_decay(0.9);
                    let mut tc = estimation(2000, 8, 160_000, 20_000);
                    tc.eval_every = 100;
                    let mut c = experiment(variant, m, TargetSpec::Mixture2d, tc, seed, dir(&format!("{}-L{l}", slug(variant))));
                    c.runs = 3;
                    // augmented points would otherwise start on the identity saddle
                    c.init = InitScheme::GlorotUniformFull;
                    pts.push(point(variant, &format!("L={l}"), c));
                }
            }
            pts
        }
        "2d-mixture-approx" => {
            let variant = Variant::KrnetAugRn;
            let m = variant.config(2, 1, 6, 24)?.with_decay(0.9);
            let mut tc = TrainConfig::approximation(1_500, 10, 2_000);
            tc.valid_size = 100_000;
            tc.eval_every = 50;
            vec![point(variant, "L=6", experiment(variant, m, TargetSpec::Mixture2d, tc, seed, dir("L6")))]
        }
        "holes-4d" => holes_points(4, 1, &[8, 16, 24], seed, out)?,
        "holes-8d" => holes_points(8, 2, &[16, 32], seed, out)?,
        _ => return Err(unknown_case(case)),
    };
    for p in &pts {
        p.config.validate()?;
    }
    Ok(pts)
}

/// Augmented KRnet at each width in `widths`, plus regular KRnet and the
/// real-NVP equivalent at matching parameter counts.
/// KRnet variants use blocks of `block` (must give more than two blocks, or
/// KRnet collapses to the half-split baseline); each augmented width gets a
/// KRnet and a realNVP-equivalent of matched parameter count.
fn holes_points(n: usize, block: usize, widths: &[usize], seed: u64, out: &Path) -> CliResult<Vec<Point>> {
    let n_inner = 4;
    let spec = TargetSpec::Holes(HoleSpec::new(n));
    let mut pts = Vec::new();
    for &h in widths {
        let aug = Variant::KrnetAug.config(n, block, n_inner, h)?;
        let dof = FlowModel::<f64>::build(&aug, &RngState::new(0))?.n_params();
        for variant in [Variant::KrnetAug, Variant::Krnet, Variant::RealNvp] {
            let hv = if variant == Variant::KrnetAug {
                h
            } else {
                matched_hidden(variant, n, block, n_inner, dof)?
            };
            let m = variant.config(n, block, n_inner, hv)?;
            let mut tc = estimation(150, 100, 100_000, 20_000);
            tc.eval_every = 25;
            let mut c = experiment(variant, m, spec.clone(), tc, seed, out.join(format!("{}-h{hv}", slug(variant))));
            c.init = InitScheme::GlorotUniformFull;
            pts.push(Point {
                variant,
                label: format!("h={hv}"),
                config: c,
            });
        }
    }
    Ok(pts)
}

pub fn slug(v: Variant) -> String {
    v.tag().replace("&", "").replace('_', "-").to_lowercase()
}

pub fn unknown_case(case: &str) -> CliError {
    CliError::Usage(format!("unknown case `{case}`; available cases: {}", CASES.join(", ")))
}

/// Largest `|mc - gamma_star|` over `points` and the integral of the
/// `gamma_star` marginal of a 1D augmented model over `window` (midpoint
/// rule). Models with logit preprocessing are integrated in the unbounded
/// coordinate, where the integrand is smooth up to the box edges.
pub fn marginal_consistency(
    model: &FlowModel<f64>,
    points: &Batch<f64>,
    n_mc: usize,
    window: (f64, f64),
    rng: &RngState,
) -> CliResult<(f64, f64)> {
    let mut er = rng.substream(streams::EVALUATION);
    let mc = model.marginal_logdensity(points, MarginalMethod::Mc(n_mc), &mut er)?;
    let gs = model.marginal_logdensity(points, MarginalMethod::GammaStar, &mut er)?;
    let gap = mc.iter().zip(&gs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let n = 40_000;
    let (grid, jac): (Vec<f64>, Vec<f64>) = match model.config().logit {
        Some(l) => {
            let (lo, hi) = (-40.0 * l.scale, 40.0 * l.scale);
            let w = (hi - lo) / n as f64;
            (0..n)
                .map(|i| {
                    let t = ((lo + (i as f64 + 0.5) * w) / l.scale).tanh();
                    let y = l.lo + (l.hi - l.lo) * (t + 1.0) / 2.0;
                    (y, w * (l.hi - l.lo) / (2.0 * l.scale) * (1.0 - t * t))
                })
                // drop points that round onto the box edge
                .filter(|(y, _)| *y > l.lo && *y < l.hi)
                .unzip()
        }
        None => {
            let w = (window.1 - window.0) / n as f64;
            (0..n).map(|i| (window.0 + (i as f64 + 0.5) * w, w)).unzip()
        }
    };
    let lp = model.marginal_logdensity(&Batch::column(&grid), MarginalMethod::GammaStar, &mut er)?;
    let integral = lp.iter().zip(&jac).map(|(v, j)| v.exp() * j).sum::<f64>();
    Ok((gap, integral))
}

/// Integration window of the 1D cases without logit preprocessing.
pub fn quadrature_window(spec: &TargetSpec) -> (f64, f64) {
    match spec {
        TargetSpec::Logistic { loc, scale } => (loc - 40.0 * scale, loc + 40.0 * scale),
        TargetSpec::Lognormal => (-20.0, 400.0),
        _ => (-50.0, 50.0),
    }
}

/// Options shared by every point of a case.
#[derive(Clone, Debug)]
pub struct ReproOptions {
    pub seed: u64,
    pub out: PathBuf,
    pub overrides: Overrides,
}

pub fn run_case(case: &str, opts: &ReproOptions, log: &mut dyn Write) -> CliResult<CaseReport> {
    let mut points = case_points(case, opts.seed, &opts.out)?;
    for p in &mut points {
        let o = Overrides {
            seed: None,
            out: None,
            ..opts.overrides.clone()
        };
        o.apply(&mut p.config);
        p.config.validate()?;
    }
    let mut results = Vec::new();
    for p in points {
        let _ = writeln!(log, "[{case}] {} {}", p.variant, p.label);
        let runs = runner::run_all(&p.config, log)?;
        results.push(PointResult { point: p, runs });
    }
    let (checks, table) = match case {
        c if c.starts_with("1d-") => one_d_checks(&results)?,
        "2d-mixture-table" => mixture_table_checks(&results),
        "2d-mixture-approx" => approx_checks(&results),
        _ => holes_checks(&results),
    };
    let report = CaseReport {
        case: case.to_string(),
        seed: opts.seed,
        points: results,
        checks,
        table,
    };
    write_report(&report, &opts.out)?;
    Ok(report)
}

/// Bound on the relative error of each 1D case.
pub fn one_d_bound(spec: &TargetSpec) -> f64 {
    match spec {
        TargetSpec::Logistic { .. } => 1e-2,
        TargetSpec::Lognormal => 2e-2,
        _ => 5e-2,
    }
}

fn one_d_checks(results: &[PointResult]) -> CliResult<(Vec<Check>, String)> {
    let r = &results[0];
    let spec = &r.point.config.target;
    let delta = r.mean_metric();
    let mut checks = vec![Check {
        name: format!("delta {} {}", r.point.variant, r.point.label),
        value: delta,
        expected: format!("<= {:e}", one_d_bound(spec)),
        reference: None,
        flag: Flag::upper(delta, one_d_bound(spec)),
    }];
    let run = &r.runs[0];
    let rng = RngState::new(run.summary.seed);
    let test = r
        .point
        .config
        .target()
        .sample(&mut rng.substream(streams::PROBES), 100)?;
    let (gap, integral) = marginal_consistency(&run.model, &test, 100, quadrature_window(spec), &rng)?;
    checks.push(Check {
        name: "max |mc(100) - gamma_star| log-density".into(),
        value: gap,
        expected: "<= 5e-2".into(),
        reference: None,
        flag: Flag::upper(gap, 0.05),
    });
    checks.push(Check {
        name: "|integral of gamma_star marginal - 1|".into(),
        value: (integral - 1.0).abs(),
        expected: "<= 1e-2".into(),
        reference: None,
        flag: Flag::upper((integral - 1.0).abs(), 1e-2),
    });
    let mut table = String::from("| variant | L | delta | n_params |\n|---|---|---|---|\n");
    let _ = writeln!(table, "| {} | {} | {delta:.3e} | {} |", r.point.variant, r.point.label, r.n_params());
    Ok((checks, table))
}

fn mixture_table_checks(results: &[PointResult]) -> (Vec<Check>, String) {
    let get = |v: Variant, l: &str| {
        results
            .iter()
            .find(|r| r.point.variant == v && r.point.label == l)
            .map_or(f64::NAN, PointResult::mean_metric)
    };
    let mut table = String::from("| variant | L=2 | L=4 | L=6 |\n|---|---|---|---|\n");
    for v in [Variant::Krnet, Variant::KrnetAug, Variant::KrnetAugRn] {
        let _ = writeln!(
            table,
            "| {v} | {:.3e} | {:.3e} | {:.3e} |",
            get(v, "L=2"),
            get(v, "L=4"),
            get(v, "L=6")
        );
    }
    let best = get(Variant::KrnetAugRn, "L=6");
    let aug = get(Variant::KrnetAug, "L=6");
    let plain = get(Variant::Krnet, "L=6");
    let checks = vec![
        Check {
            name: "mean delta KRnet_aug_R&N L=6".into(),
            value: best,
            expected: "<= 5e-3".into(),
            reference: Some(6.79e-4),
            flag: Flag::upper(best, 5e-3),
        },
        Check {
            name: "KRnet_aug_R&N <= KRnet_aug at L=6".into(),
            value: best - aug,
            expected: "<= 0".into(),
            reference: None,
            flag: Flag::ordered(best, aug),
        },
        Check {
            name: "KRnet_aug <= KRnet at L=6".into(),
            value: aug - plain,
            expected: "<= 0".into(),
            reference: None,
            flag: Flag::ordered(aug, plain),
        },
    ];
    (checks, table)
}

fn approx_checks(results: &[PointResult]) -> (Vec<Check>, String) {
    let r = &results[0];
    let s = &r.runs[0].summary;
    let fr = s.mode_fractions.clone().unwrap_or_default();
    let min = fr.iter().copied().fold(f64::INFINITY, f64::min);
    let kl = r.mean_metric();
    let mut table = String::from("| mode | fraction |\n|---|---|\n");
    for (i, f) in fr.iter().enumerate() {
        let _ = writeln!(table, "| {} | {f:.4} |", i + 1);
    }
    let _ = writeln!(table, "\nreverse KL estimate: {kl:.4e}");
    let checks = vec![
        Check {
            name: "smallest mode fraction of generated samples".into(),
            value: min,
            expected: ">= 0.05".into(),
            reference: Some(1.0 / 6.0),
            flag: Flag::lower(min, 0.05),
        },
        Check {
            name: "reverse KL estimate".into(),
            value: kl,
            expected: "<= 5e-2".into(),
            reference: None,
            flag: Flag::upper(kl, 5e-2),
        },
    ];
    (checks, table)
}

fn holes_checks(results: &[PointResult]) -> (Vec<Check>, String) {
    let mut table = String::from("| variant | width | n_params | rel KL | hole fraction |\n|---|---|---|---|---|\n");
    for r in results {
        let hf = r.runs.iter().filter_map(|o| o.summary.hole_fraction).fold(0.0, f64::max);
        let _ = writeln!(
            table,
            "| {} | {} | {} | {:.4e} | {hf:.4} |",
            r.point.variant,
            r.point.label,
            r.n_params(),
            r.mean_metric()
        );
    }
    let mut checks = Vec::new();
    // points come in (aug, KRnet, realNVP) triples at matched DOFs
    for tri in results.chunks(3) {
        let (aug, nvp) = (&tri[0], &tri[2]);
        checks.push(Check {
            name: format!(
                "rel KL KRnet_aug {} ({} params) < realNVP-equivalent {} ({} params)",
                aug.point.label,
                aug.n_params(),
                nvp.point.label,
                nvp.n_params()
            ),
            value: aug.mean_metric() - nvp.mean_metric(),
            expected: "< 0".into(),
            reference: None,
            flag: Flag::strictly_below(aug.mean_metric(), nvp.mean_metric()),
        });
    }
    if let Some(widest) = results.iter().filter(|r| r.point.variant == Variant::KrnetAug).last() {
        let hf = widest.runs.iter().filter_map(|o| o.summary.hole_fraction).fold(0.0, f64::max);
        checks.push(Check {
            name: format!("hole fraction KRnet_aug {}", widest.point.label),
            value: hf,
            expected: "<= 1e-2".into(),
            reference: None,
            flag: Flag::upper(hf, 1e-2),
        });
    }
    (checks, table)
}

fn write_report(r: &CaseReport, out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let hashes: Vec<String> = r.points.iter().map(|p| p.point.config.hash()).collect();
    let mut md = format!("# {}\n\nseed: {}\n\nconfig hashes:\n", r.case, r.seed);
    for (p, h) in r.points.iter().zip(&hashes) {
        let _ = writeln!(md, "- {} {}: `{h}`", p.point.variant, p.point.label);
    }
    let _ = writeln!(md, "\n{}\n| check | value | expected | reference | flag |\n|---|---|---|---|---|", r.table);
    let mut csv = format!("# case={} seed={}\ncheck,value,expected,reference,flag,config_hashes\n", r.case, r.seed);
    let all_hashes = hashes.join(" ");
    for c in &r.checks {
        let reference = c.reference.map_or_else(|| "-".to_string(), |v| format!("{v:e}"));
        let _ = writeln!(md, "| {} | {:.4e} | {} | {reference} | {} |", c.name, c.value, c.expected, c.flag.as_str());
        let _ = writeln!(
            csv,
            "\"{}\",{:e},\"{}\",{},{},{all_hashes}",
            c.name.replace('"', "'"),
            c.value,
            c.expected,
            if c.reference.is_some() { reference.as_str() } else { "" },
            c.flag.as_str()
        );
    }
    let p = out.join("report.md");
    std::fs::write(&p, md).map_err(|e| CliError::io(&p, e))?;
    let p = out.join("report.csv");
    std::fs::write(&p, csv).map_err(|e| CliError::io(&p, e))?;
    Ok(())
}
