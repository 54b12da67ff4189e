//! One configured experiment: data, training, evaluation and artifacts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use krnet_core::flow::FlowModel;
use krnet_core::numkit::{streams, Batch, RngState};
use krnet_core::targets::{write_batch_csv, LogDensity, Target, TargetSpec};
use krnet_core::train::{prepare_data, train, MetricKind, TrainHistory, TrainMode};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::svg;

/// Per-run results written to `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub variant: String,
    pub target: String,
    pub mode: TrainMode,
    pub metric_kind: MetricKind,
    pub final_loss: Option<f64>,
    pub final_metric: Option<f64>,
    pub epochs_run: usize,
    pub diverged: bool,
    pub n_params: usize,
    /// Entropy used by the metric (analytic or Monte Carlo).
    pub entropy: Option<f64>,
    pub seconds: f64,
    /// Share of generated samples nearest to each mixture centre.
    pub mode_fractions: Option<Vec<f64>>,
    /// Share of generated samples violating a hole constraint.
    pub hole_fraction: Option<f64>,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub model: FlowModel<f64>,
    pub history: TrainHistory,
    pub summary: RunSummary,
}

/// Target with its normalizer attached when the density needs one.
pub fn prepared_target(cfg: &ExperimentConfig, rng: &RngState) -> CliResult<Target> {
    let mut t = cfg.target();
    if let TargetSpec::Holes(h) = &t.spec {
        let n = Target::estimate_normalizer(h, &mut rng.substream(streams::NORMALIZER), cfg.eval.normalizer_mc)?;
        t = t.with_normalizer(n);
    }
    Ok(t)
}

/// Analytic entropy, or a Monte Carlo estimate for normalized targets.
pub fn target_entropy(cfg: &ExperimentConfig, t: &Target, rng: &RngState) -> CliResult<Option<f64>> {
    if let Some(h) = t.analytic_entropy() {
        return Ok(Some(h));
    }
    if t.is_unnormalized() {
        return Ok(None);
    }
    let e = t.estimate_entropy_mc(&mut rng.substream(streams::ENTROPY), cfg.eval.entropy_mc)?;
    Ok(Some(e.value))
}

pub fn mixture_centers() -> Vec<(f64, f64)> {
    (1..=6)
        .map(|i| {
            let a = i as f64 * std::f64::consts::PI / 3.0;
            (5.0 * a.cos(), 5.0 * a.sin())
        })
        .collect()
}

/// Fraction of points nearest to each of the six mixture centres.
pub fn mode_fractions(y: &Batch<f64>) -> Vec<f64> {
    let c = mixture_centers();
    let mut counts = [0usize; 6];
    for r in y.row_iter() {
        let k = (0..6)
            .min_by(|&a, &b| {
                let da = (r[0] - c[a].0).powi(2) + (r[1] - c[a].1).powi(2);
                let db = (r[0] - c[b].0).powi(2) + (r[1] - c[b].1).powi(2);
                da.total_cmp(&db)
            })
            .expect("six centres");
        counts[k] += 1;
    }
    counts.iter().map(|&n| n as f64 / y.rows().max(1) as f64).collect()
}

/// Fraction of points that fall inside a hole of the target.
pub fn hole_fraction(t: &Target, y: &Batch<f64>) -> Option<f64> {
    match &t.spec {
        TargetSpec::Holes(h) => {
            let bad = y.row_iter().filter(|r| !h.accepts(r)).count();
            Some(bad as f64 / y.rows().max(1) as f64)
        }
        _ => None,
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, body: &[u8]) -> CliResult<()> {
    std::fs::write(path, body).map_err(|e| CliError::io(path, e))
}

/// First line of every emitted text result.
pub fn provenance_line(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash} seed={seed}\n")
}

pub fn history_bytes(h: &TrainHistory, hash: &str, seed: u64) -> Vec<u8> {
    let mut out = provenance_line(hash, seed).into_bytes();
    h.write_csv(&mut out).expect("write to memory");
    out
}

/// Writes the generated samples as CSV and an SVG plot of the first two
/// columns (a histogram in one dimension).
pub fn write_samples(dir: &Path, y: &Batch<f64>, hash: &str, seed: u64, title: &str) -> CliResult<()> {
    let mut csv = provenance_line(hash, seed).into_bytes();
    write_batch_csv(&mut csv, y, "y").expect("write to memory");
    write_file(&dir.join("samples.csv"), &csv)?;
    let mut plot = format!("<!-- config_hash={hash} seed={seed} -->\n");
    plot.push_str(&if y.cols() >= 2 {
        let pts: Vec<(f64, f64)> = y.row_iter().map(|r| (r[0], r[1])).collect();
        svg::scatter(&pts, title, "y1", "y2")
    } else {
        svg::histogram(&y.col_values(0), 60, title, "y1")
    });
    write_file(&dir.join("samples.svg"), plot.as_bytes())
}

/// Trains and evaluates run `r` of `cfg`, writing its artifacts under
/// `cfg.out/seed-<seed>/`.
pub fn run_one(cfg: &ExperimentConfig, r: usize) -> CliResult<RunOutcome> {
    let seed = cfg.run_seed(r);
    let hash = cfg.hash();
    let dir = cfg.out.join(format!("seed-{seed}"));
    create_dir(&dir)?;
    let rng = RngState::new(seed);
    let start = Instant::now();

    let target = prepared_target(cfg, &rng)?;
    let entropy = match cfg.train.mode {
        TrainMode::Estimation => target_entropy(cfg, &target, &rng)?,
        TrainMode::Approximation => None,
    };
    let mut model = FlowModel::<f64>::build_with(&cfg.model, &rng, cfg.init)?;
    let mut data = prepare_data(&target, &cfg.train, &rng)?;
    data.entropy = entropy;
    let history = train(&mut model, &target, &data, &cfg.train, &rng)?;

    write_file(&dir.join("history.csv"), &history_bytes(&history, &hash, seed))?;
    let mut timing = provenance_line(&hash, seed).into_bytes();
    history.write_timing_csv(&mut timing).expect("write to memory");
    write_file(&dir.join("timing.csv"), &timing)?;
    Checkpoint::new(cfg, &model, seed, history.records.len(), &rng).save(&dir.join("model.ckpt"))?;

    let generated = if history.diverged.is_none() {
        let (y, _) = model.sample(&mut rng.substream(streams::GENERATION), cfg.eval.samples)?;
        let title = format!("{} {} seed {seed}", cfg.variant, target.name());
        write_samples(&dir, &y, &hash, seed, &title)?;
        Some(y)
    } else {
        None
    };
    let summary = RunSummary {
        config_hash: hash.clone(),
        seed,
        variant: cfg.variant.to_string(),
        target: target.name().to_string(),
        mode: cfg.train.mode,
        metric_kind: history.metric_kind,
        final_loss: history.last_loss(),
        final_metric: history.last_metric(),
        epochs_run: history.records.len(),
        diverged: history.diverged.is_some(),
        n_params: model.n_params(),
        entropy,
        seconds: start.elapsed().as_secs_f64(),
        mode_fractions: match (&target.spec, &generated) {
            (TargetSpec::Mixture2d, Some(y)) => Some(mode_fractions(y)),
            _ => None,
        },
        hole_fraction: generated.as_ref().and_then(|y| hole_fraction(&target, y)),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&dir.join("summary.json"), (json + "\n").as_bytes())?;
    if let Some((epoch, loss)) = history.diverged {
        return Err(CliError::Diverged { epoch, loss, dir });
    }
    debug_assert_eq!(target.dim(), model.n_data());
    Ok(RunOutcome {
        dir,
        model,
        history,
        summary,
    })
}

/// Runs every seed of `cfg` and writes `config.json` and `runs.csv` at the
/// top of the output directory.
pub fn run_all(cfg: &ExperimentConfig, log: &mut dyn Write) -> CliResult<Vec<RunOutcome>> {
    create_dir(&cfg.out)?;
    cfg.save(&cfg.out.join("config.json"))?;
    let hash = cfg.hash();
    let mut outcomes = Vec::with_capacity(cfg.runs);
    let mut table = format!("# config_hash={hash} seed={}\nseed,epochs,loss,metric\n", cfg.seed);
    for r in 0..cfg.runs {
        let o = run_one(cfg, r)?;
        let s = &o.summary;
        let _ = writeln!(
            log,
            "{} {} seed {}: loss {} {:?} {} ({:.1}s)",
            s.variant,
            s.target,
            s.seed,
            fmt_opt(s.final_loss),
            s.metric_kind,
            fmt_opt(s.final_metric),
            s.seconds
        );
        table.push_str(&format!(
            "{},{},{},{}\n",
            s.seed,
            s.epochs_run,
            fmt_opt(s.final_loss),
            fmt_opt(s.final_metric)
        ));
        outcomes.push(o);
    }
    write_file(&cfg.out.join("runs.csv"), table.as_bytes())?;
    Ok(outcomes)
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:e}"))
}
