//! Estimation and approximation losses, the Adam optimizer, the seeded
//! training loop and the evaluation metrics.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{KrnetError, Result};
use crate::flow::{FlowModel, MarginalMethod};
use crate::gradients::{approximation_grad, approximation_loss_value, estimation_grad, GradPath, GradientBundle};
use crate::numkit::{std_normal_logpdf, streams, Batch, RngState};
use crate::real::Real;
use crate::targets::{LogDensity, Target};

/// Bias-corrected Adam with a fixed learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self::with_lr(n_params, 1e-3)
    }

    pub fn with_lr(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn update<T: Real>(&mut self, params: &mut [T], grad: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(KrnetError::DimMismatch {
                context: "adam update",
                expected: self.m.len(),
                got: params.len().max(grad.len()),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i].as_f64();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= T::lit(self.lr * mh / (vh.sqrt() + self.eps));
        }
        Ok(())
    }
}

/// Estimation loss `(1/N) sum ln[p_gamma(gamma) / p(gamma, y)]` (plain
/// negative log-likelihood without augmentation) and its gradient.
pub fn estimation_loss<T: Real>(
    model: &FlowModel<T>,
    y: &Batch<T>,
    gamma: Option<&Batch<T>>,
    path: GradPath,
) -> Result<GradientBundle<T>> {
    if model.m_aug() > 0 && gamma.is_none() {
        return Err(KrnetError::config("gamma", "augmented estimation needs sampled gamma"));
    }
    let x = model.assemble(y, gamma)?;
    let mut g = estimation_grad(model, &x, path)?;
    if let Some(gm) = gamma {
        g.loss += mean(&std_normal_logpdf(gm));
    }
    Ok(g)
}

fn mean<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |s, &x| s + x) / T::from_usize(v.len().max(1)).unwrap()
}

/// Reverse-KL loss against `target` with `batch` fresh prior draws from
/// `rng`, and its reparameterized gradient.
pub fn approximation_loss<T: Real>(
    model: &FlowModel<T>,
    rng: &mut RngState,
    batch: usize,
    target: &dyn LogDensity,
) -> Result<GradientBundle<T>> {
    if batch == 0 {
        return Err(KrnetError::EmptyInput("approximation batch"));
    }
    let z = rng.gauss_sample(batch, model.dims());
    approximation_grad(model, &z, target)
}

/// Relative error `|L - h| / h`, with a flag for negative entropies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub value: f64,
    pub negative_entropy: bool,
}

pub fn metric_delta(loss: f64, entropy: f64) -> Result<Delta> {
    if entropy == 0.0 {
        return Err(KrnetError::Domain {
            context: "relative error with zero entropy",
            value: entropy,
        });
    }
    Ok(Delta {
        value: (loss - entropy).abs() / entropy,
        negative_entropy: entropy < 0.0,
    })
}

/// Model log-density of data points: the marginal for augmented models.
pub fn model_logdensity<T: Real>(
    model: &FlowModel<T>,
    y: &Batch<f64>,
    method: MarginalMethod,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    let yt: Batch<T> = y.cast();
    let lp = if model.m_aug() > 0 {
        model.marginal_logdensity(&yt, method, rng)?
    } else {
        model.forward_logdensity(&yt, None)?.1
    };
    Ok(lp.into_iter().map(|v| v.as_f64()).collect())
}

/// `(1/N) sum [ln p_ref(y) - ln p_model(y)] / h(p_ref)` over samples of the
/// reference distribution.
pub fn metric_rel_kl<T: Real>(
    model: &FlowModel<T>,
    validation: &Batch<f64>,
    target: &Target,
    entropy: f64,
    method: MarginalMethod,
    rng: &mut RngState,
) -> Result<f64> {
    if target.is_unnormalized() {
        return Err(KrnetError::MissingNormalizer(target.name().into()));
    }
    if entropy == 0.0 {
        return Err(KrnetError::Domain {
            context: "relative KL with zero entropy",
            value: entropy,
        });
    }
    let lr = target.log_density(validation)?;
    let lm = model_logdensity(model, validation, method, rng)?;
    let kl = lr.iter().zip(&lm).map(|(a, b)| a - b).sum::<f64>() / lr.len().max(1) as f64;
    Ok(kl / entropy)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Maximum likelihood from target samples.
    Estimation,
    /// Reverse KL against the target density, samples drawn from the model.
    Approximation,
}

/// Optimization budget and schedule of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub minibatches: usize,
    /// Training-set size (estimation) or samples per minibatch (approximation).
    pub train_size: usize,
    pub valid_size: usize,
    pub lr: f64,
    pub grad_path: GradPath,
    /// Resample `gamma` for every minibatch instead of once per epoch.
    pub gamma_per_minibatch: bool,
    /// Evaluate the metric every this many epochs (and after the last).
    pub eval_every: usize,
    /// Abort when the epoch loss exceeds this magnitude.
    pub divergence_threshold: f64,
    /// Marginal recovery used by the relative-KL metric.
    pub marginal: MarginalMethod,
}

impl TrainConfig {
    pub fn estimation(epochs: usize, minibatches: usize, train_size: usize) -> Self {
        TrainConfig {
            mode: TrainMode::Estimation,
            epochs,
            minibatches,
            train_size,
            valid_size: train_size,
            lr: 1e-3,
            grad_path: GradPath::Adjoint,
            gamma_per_minibatch: false,
            eval_every: 10,
            divergence_threshold: 1e6,
            marginal: MarginalMethod::GammaStar,
        }
    }

    pub fn approximation(epochs: usize, minibatches: usize, batch: usize) -> Self {
        TrainConfig {
            mode: TrainMode::Approximation,
            valid_size: 10_000,
            ..Self::estimation(epochs, minibatches, batch)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.minibatches == 0 {
            return Err(KrnetError::config("minibatches", "must be positive"));
        }
        if self.train_size < self.minibatches {
            return Err(KrnetError::config("train_size", "needs at least one sample per minibatch"));
        }
        if self.valid_size == 0 {
            return Err(KrnetError::config("valid_size", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(KrnetError::config("lr", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(KrnetError::config("eval_every", "must be positive"));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(KrnetError::config("divergence_threshold", "must be positive"));
        }
        Ok(())
    }
}

/// Which number the metric column holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Relative error against the analytic (or estimated) entropy.
    Delta,
    /// Relative KL divergence on the validation set.
    RelKl,
    /// Reverse-KL estimate on fresh model samples.
    ReverseKl,
    /// Validation loss when no entropy is available.
    ValidLoss,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// `None` on epochs without evaluation.
    pub metric: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub metric_kind: MetricKind,
    pub records: Vec<EpochRecord>,
    /// Set when training stopped on a divergent loss.
    pub diverged: Option<(usize, f64)>,
}

impl TrainHistory {
    pub fn last_metric(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.metric)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// `epoch,loss,metric` rows; reproducible bit for bit under a fixed seed.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "epoch,loss,metric")?;
        for r in &self.records {
            let m = r.metric.map_or(String::new(), |v| format!("{v:e}"));
            writeln!(w, "{},{:e},{}", r.epoch, r.loss, m)?;
        }
        Ok(())
    }

    /// `epoch,seconds` rows (wall-clock, not reproducible).
    pub fn write_timing_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "epoch,seconds")?;
        for r in &self.records {
            writeln!(w, "{},{:.6}", r.epoch, r.seconds)?;
        }
        Ok(())
    }
}

/// Prepared data and reference values of a run.
pub struct TrainData {
    pub train: Batch<f64>,
    pub valid: Batch<f64>,
    pub entropy: Option<f64>,
}

/// Draws the training and validation sets from the `DATA` and `VALIDATION`
/// substreams of `rng`.
pub fn prepare_data(target: &Target, cfg: &TrainConfig, rng: &RngState) -> Result<TrainData> {
    let train = match cfg.mode {
        TrainMode::Estimation => target.sample(&mut rng.substream(streams::DATA), cfg.train_size)?,
        TrainMode::Approximation => Batch::zeros(0, target.dim()),
    };
    let valid = match cfg.mode {
        TrainMode::Estimation => target.sample(&mut rng.substream(streams::VALIDATION), cfg.valid_size)?,
        TrainMode::Approximation => Batch::zeros(0, target.dim()),
    };
    Ok(TrainData {
        train,
        valid,
        entropy: target.analytic_entropy(),
    })
}

/// Mean estimation loss of a dataset with `gamma` drawn from `rng`.
pub fn estimation_loss_on<T: Real>(model: &FlowModel<T>, y: &Batch<f64>, rng: &mut RngState) -> Result<f64> {
    let yt: Batch<T> = y.cast();
    let m = model.m_aug();
    let gamma = (m > 0).then(|| rng.gauss_sample::<T>(y.rows(), m));
    let (_, lp) = model.forward_logdensity(&yt, gamma.as_ref())?;
    let mut l = -mean(&lp).as_f64();
    if let Some(g) = &gamma {
        l += mean(&std_normal_logpdf(g)).as_f64();
    }
    Ok(l)
}

/// Reverse-KL estimate on `n` fresh model samples.
pub fn reverse_kl_estimate<T: Real>(
    model: &FlowModel<T>,
    target: &dyn LogDensity,
    n: usize,
    rng: &mut RngState,
) -> Result<f64> {
    let z = rng.gauss_sample(n, model.dims());
    Ok(approximation_loss_value(model, &z, target)?.0.as_f64())
}

/// Runs the epoch loop in place on `model`. Data come from `data`; all
/// randomness (shuffling, `gamma`, model samples) derives from `rng`.
pub fn train<T: Real>(
    model: &mut FlowModel<T>,
    target: &Target,
    data: &TrainData,
    cfg: &TrainConfig,
    rng: &RngState,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let metric_kind = match cfg.mode {
        TrainMode::Approximation => MetricKind::ReverseKl,
        TrainMode::Estimation => match (&target.spec, data.entropy) {
            (crate::targets::TargetSpec::Holes(_), _) => MetricKind::RelKl,
            (_, Some(_)) => MetricKind::Delta,
            (_, None) => MetricKind::ValidLoss,
        },
    };
    let mut hist = TrainHistory {
        metric_kind,
        records: Vec::with_capacity(cfg.epochs),
        diverged: None,
    };
    if cfg.epochs == 0 {
        return Ok(hist);
    }
    let mut shuffle = rng.substream(streams::SHUFFLE);
    let mut gamma_rng = rng.substream(streams::GAMMA);
    let mut sample_rng = rng.substream(streams::SAMPLING);
    let m = model.m_aug();
    let n_train = data.train.rows();
    if cfg.mode == TrainMode::Estimation {
        if n_train < cfg.minibatches {
            return Err(KrnetError::config("train_size", "fewer samples than minibatches"));
        }
        if !model.is_initialized() {
            let first = data.train.slice_rows(0, n_train / cfg.minibatches).cast::<T>();
            let g = (m > 0).then(|| gamma_rng.gauss_sample::<T>(first.rows(), m));
            let x = model.assemble(&first, g.as_ref())?;
            model.data_init(&x)?;
        }
    } else {
        model.mark_initialized();
    }
    let mut adam = Adam::with_lr(model.n_params(), cfg.lr);
    let mut order: Vec<usize> = (0..n_train).collect();
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut weight = 0usize;
        match cfg.mode {
            TrainMode::Estimation => {
                shuffle.shuffle(&mut order);
                let mut gamma_epoch = (m > 0 && !cfg.gamma_per_minibatch)
                    .then(|| gamma_rng.gauss_sample::<T>(n_train, m));
                for b in 0..cfg.minibatches {
                    let lo = b * n_train / cfg.minibatches;
                    let hi = (b + 1) * n_train / cfg.minibatches;
                    let idx = &order[lo..hi];
                    let y = data.train.select_rows(idx).cast::<T>();
                    let gamma = if m == 0 {
                        None
                    } else if let Some(ge) = gamma_epoch.as_mut() {
                        Some(ge.slice_rows(lo, hi))
                    } else {
                        Some(gamma_rng.gauss_sample::<T>(idx.len(), m))
                    };
                    let g = estimation_loss(model, &y, gamma.as_ref(), cfg.grad_path)?;
                    loss_sum += g.loss.as_f64() * idx.len() as f64;
                    weight += idx.len();
                    adam.update(model.params_mut(), &g.grad)?;
                }
            }
            TrainMode::Approximation => {
                for _ in 0..cfg.minibatches {
                    let g = approximation_loss(model, &mut sample_rng, cfg.train_size, target)?;
                    loss_sum += g.loss.as_f64() * cfg.train_size as f64;
                    weight += cfg.train_size;
                    adam.update(model.params_mut(), &g.grad)?;
                }
            }
        }
        let loss = loss_sum / weight as f64;
        let seconds = start.elapsed().as_secs_f64();
        if !loss.is_finite() || loss.abs() > cfg.divergence_threshold {
            hist.records.push(EpochRecord {
                epoch,
                loss,
                metric: None,
                seconds,
            });
            hist.diverged = Some((epoch, loss));
            return Ok(hist);
        }
        let metric = if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            Some(evaluate(model, target, data, cfg, metric_kind, rng)?)
        } else {
            None
        };
        hist.records.push(EpochRecord {
            epoch,
            loss,
            metric,
            seconds,
        });
    }
    Ok(hist)
}

/// Evaluates the run metric with randomness from the `EVALUATION` substream
/// (re-derived each call, so evaluation never perturbs training).
pub fn evaluate<T: Real>(
    model: &FlowModel<T>,
    target: &Target,
    data: &TrainData,
    cfg: &TrainConfig,
    kind: MetricKind,
    rng: &RngState,
) -> Result<f64> {
    let mut er = rng.substream(streams::EVALUATION);
    match kind {
        MetricKind::Delta => {
            let l = estimation_loss_on(model, &data.valid, &mut er)?;
            Ok(metric_delta(l, data.entropy.expect("entropy for delta"))?.value)
        }
        MetricKind::ValidLoss => estimation_loss_on(model, &data.valid, &mut er),
        MetricKind::RelKl => {
            let h = match data.entropy {
                Some(h) => h,
                None => return Err(KrnetError::MissingNormalizer(target.name().into())),
            };
            metric_rel_kl(model, &data.valid, target, h, cfg.marginal, &mut er)
        }
        MetricKind::ReverseKl => reverse_kl_estimate(model, target, cfg.valid_size, &mut er),
    }
}
