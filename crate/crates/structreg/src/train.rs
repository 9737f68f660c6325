//! SGD training loop: per-epoch decomposition, shuffled mini-sample
//! updates, L2 weight regularization via lazy scaling, decaying
//! learning rate, convergence detection and wall-clock accounting.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::decompose::{decompose_epoch, DecompositionPolicy, MiniSample};
use crate::error::{Error, Result};
use crate::features::Layout;
use crate::models::{crf_loss, crf_loss_grad, perceptron_update, viterbi, AveragedWeights, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Crf,
    Perceptron,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Expected mini-sample length `n'`; 0 disables decomposition.
    pub mini_size: f64,
    /// L2 strength (the `lambda/2` coefficient of the regularized
    /// objective). Ignored by the perceptron.
    pub lambda: f64,
    pub eta0: f64,
    /// Per-epoch multiplicative learning-rate decay in (0, 1].
    pub decay: f64,
    pub max_epochs: u64,
    /// Relative change of the epoch-mean objective that stops CRF
    /// training.
    pub convergence_threshold: f64,
    pub seed: u64,
    pub eval_each_epoch: bool,
    pub use_rich_edges: bool,
    /// Return averaged perceptron weights (the default) instead of the
    /// final ones.
    pub perceptron_average: bool,
    /// Record `(gradient norm, mini length)` per update, for the
    /// empirical kappa estimator.
    pub record_gradient_norms: bool,
}

impl TrainConfig {
    pub fn crf(seed: u64) -> TrainConfig {
        TrainConfig {
            objective: Objective::Crf,
            mini_size: 0.0,
            lambda: 1.0,
            eta0: 0.1,
            decay: 0.9,
            max_epochs: 100,
            convergence_threshold: 1e-4,
            seed,
            eval_each_epoch: false,
            use_rich_edges: false,
            perceptron_average: true,
            record_gradient_norms: false,
        }
    }

    pub fn perceptron(seed: u64) -> TrainConfig {
        TrainConfig {
            objective: Objective::Perceptron,
            eta0: 1.0,
            decay: 1.0,
            max_epochs: 10,
            ..TrainConfig::crf(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.eta0 <= 0.0 {
            return Err(Error::config("eta0 must be positive"));
        }
        if !(0.0 < self.decay && self.decay <= 1.0) {
            return Err(Error::config("decay must be in (0,1]"));
        }
        if self.max_epochs < 1 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        if self.convergence_threshold <= 0.0 {
            return Err(Error::config("convergence threshold must be positive"));
        }
        if self.lambda < 0.0 {
            return Err(Error::config("lambda must be nonnegative"));
        }
        Ok(())
    }

    pub fn policy(&self) -> Result<DecompositionPolicy> {
        DecompositionPolicy::new(self.mini_size, self.seed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Mean regularized objective per position: summed mini losses over
    /// total tokens, plus the L2 term at end of epoch. For the
    /// perceptron this is the token mistake rate.
    pub objective: f64,
    pub learning_rate: f64,
    pub train_accuracy: Option<f64>,
    pub dev_accuracy: Option<f64>,
    pub seconds_cumulative: f64,
    pub updates: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub converged_at: Option<u64>,
    pub total_updates: u64,
    /// `(gradient L2 norm, mini length)` per update, when recording is
    /// enabled.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub gradient_norms: Vec<(f64, usize)>,
}

impl TrainReport {
    pub fn final_objective(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.objective)
    }

    pub fn total_seconds(&self) -> f64 {
        self.epochs.last().map(|e| e.seconds_cumulative).unwrap_or(0.0)
    }

    /// One JSON object per epoch record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch record serializes"));
            out.push('\n');
        }
        out
    }

    /// TSV view for plotting. Deliberately omits wall-clock seconds so two
    /// identical runs produce byte-identical files; timings live in the
    /// JSON-lines report.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "epoch\tobjective\tlearning_rate\ttrain_accuracy\tdev_accuracy\tupdates\n",
        );
        let opt = |x: Option<f64>| x.map(|v| format!("{:.6}", v)).unwrap_or_else(|| "-".into());
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.12}\t{:.6}\t{}\t{}\t{}\n",
                e.epoch,
                e.objective,
                e.learning_rate,
                opt(e.train_accuracy),
                opt(e.dev_accuracy),
                e.updates
            ));
        }
        out
    }
}

fn token_accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in &ds.samples {
        let (pred, _) = model.viterbi(&s.features)?;
        correct += pred.iter().zip(&s.gold).filter(|(a, b)| a == b).count();
        total += s.len();
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Per-position objective of a fixed weight vector over a mini-sample
/// stream: each mini contributes its loss plus an L2 share proportional
/// to its token mass, and the sum is normalized by total tokens.
pub fn stream_objective(
    ds: &Dataset,
    minis: &[MiniSample],
    layout: &Layout,
    weights: &[f64],
    lambda: f64,
) -> Result<f64> {
    let total_tokens = ds.num_tokens() as f64;
    let sq_norm: f64 = weights.iter().map(|w| w * w).sum();
    let mut nll_sum = 0.0;
    let mut reg_sum = 0.0;
    for m in minis {
        let s = &ds.samples[m.parent];
        let feats = &s.features[m.start..m.end];
        let gold = &s.gold[m.start..m.end];
        let (nll, _) = crf_loss_grad(layout, weights, 1.0, feats, gold)?;
        nll_sum += nll;
        reg_sum += 0.5 * lambda * (m.len() as f64 / total_tokens) * sq_norm;
    }
    Ok((nll_sum + reg_sum) / total_tokens)
}

/// The regularized per-position objective of a whole dataset
/// (`R_lambda`): summed negative log-likelihood plus `(lambda/2)||w||^2`,
/// normalized by total tokens.
pub fn regularized_objective(
    ds: &Dataset,
    layout: &Layout,
    weights: &[f64],
    lambda: f64,
) -> Result<f64> {
    let mut nll = 0.0;
    for s in &ds.samples {
        nll += crf_loss_grad(layout, weights, 1.0, &s.features, &s.gold)?.0;
    }
    let sq_norm: f64 = weights.iter().map(|w| w * w).sum();
    Ok((nll + 0.5 * lambda * sq_norm) / ds.num_tokens() as f64)
}

struct LazyWeights {
    values: Vec<f64>,
    scale: f64,
}

impl LazyWeights {
    fn new(total: usize) -> Self {
        LazyWeights {
            values: vec![0.0; total],
            scale: 1.0,
        }
    }

    /// Multiply the whole vector by `factor` in O(1).
    fn shrink(&mut self, factor: f64) {
        self.scale *= factor;
        if self.scale < 1e-9 {
            for v in &mut self.values {
                *v *= self.scale;
            }
            self.scale = 1.0;
        }
    }

    fn add(&mut self, index: usize, delta: f64) {
        self.values[index] += delta / self.scale;
    }

    fn materialize(&self) -> Vec<f64> {
        self.values.iter().map(|v| v * self.scale).collect()
    }
}

fn train_crf(
    ds: &Dataset,
    ds_dev: Option<&Dataset>,
    cfg: &TrainConfig,
    layout: Layout,
) -> Result<(Vec<f64>, TrainReport)> {
    let policy = cfg.policy()?;
    let total_tokens = ds.num_tokens() as f64;
    let mut w = LazyWeights::new(layout.total());
    let mut report = TrainReport::default();
    let start = Instant::now();
    let mut prev_obj: Option<f64> = None;

    for epoch in 0..cfg.max_epochs {
        let eta = cfg.eta0 * cfg.decay.powi(epoch as i32);
        let stream = decompose_epoch(ds, &policy, epoch);
        for m in &stream.minis {
            let s = &ds.samples[m.parent];
            let feats = &s.features[m.start..m.end];
            let gold = &s.gold[m.start..m.end];
            let (_, grad) = crf_loss_grad(&layout, &w.values, w.scale, feats, gold)?;
            if cfg.lambda > 0.0 {
                let share = m.len() as f64 / total_tokens;
                w.shrink(1.0 - eta * cfg.lambda * share);
            }
            if cfg.record_gradient_norms {
                let norm = grad.iter().map(|(_, g)| g * g).sum::<f64>().sqrt();
                report.gradient_norms.push((norm, m.len()));
            }
            for &(idx, g) in &grad {
                w.add(idx, -eta * g);
            }
        }
        report.total_updates += stream.minis.len() as u64;

        // Exact end-of-epoch objective on the full sequences: the same
        // function R_lambda for every mini size, so convergence detection
        // is not perturbed by this epoch's random cut pattern.
        let sq_norm: f64 = {
            let s2 = w.scale * w.scale;
            w.values.iter().map(|v| v * v * s2).sum()
        };
        let mut nll_sum = 0.0;
        for s in &ds.samples {
            nll_sum += crf_loss(&layout, &w.values, w.scale, &s.features, &s.gold)?;
        }
        let objective = (nll_sum + 0.5 * cfg.lambda * sq_norm) / total_tokens;
        if !objective.is_finite() {
            return Err(Error::numerical(format!(
                "objective diverged at epoch {} (learning rate {})",
                epoch, eta
            )));
        }

        let (train_acc, dev_acc) = if cfg.eval_each_epoch {
            let model = Model {
                weights: w.materialize(),
                layout,
                label_alphabet: ds.label_alphabet.clone(),
                feature_alphabet: ds.feature_alphabet.clone(),
            };
            let ta = token_accuracy(&model, ds)?;
            let da = ds_dev.map(|d| token_accuracy(&model, d)).transpose()?;
            (Some(ta), da)
        } else {
            (None, None)
        };

        report.epochs.push(EpochRecord {
            epoch,
            objective,
            learning_rate: eta,
            train_accuracy: train_acc,
            dev_accuracy: dev_acc,
            seconds_cumulative: start.elapsed().as_secs_f64(),
            updates: stream.minis.len() as u64,
        });

        if let Some(prev) = prev_obj {
            if (objective - prev).abs() / prev.abs().max(f64::MIN_POSITIVE)
                < cfg.convergence_threshold
            {
                report.converged_at = Some(epoch);
                break;
            }
        }
        prev_obj = Some(objective);
    }
    Ok((w.materialize(), report))
}

fn train_perceptron(
    ds: &Dataset,
    ds_dev: Option<&Dataset>,
    cfg: &TrainConfig,
    layout: Layout,
) -> Result<(Vec<f64>, TrainReport)> {
    let policy = cfg.policy()?;
    let total_tokens = ds.num_tokens() as f64;
    let mut avg = AveragedWeights::new(layout.total());
    let mut report = TrainReport::default();
    let start = Instant::now();

    for epoch in 0..cfg.max_epochs {
        let stream = decompose_epoch(ds, &policy, epoch);
        let mut mistakes = 0usize;
        for m in &stream.minis {
            let s = &ds.samples[m.parent];
            mistakes += perceptron_update(
                &mut avg,
                &layout,
                &s.features[m.start..m.end],
                &s.gold[m.start..m.end],
                cfg.eta0,
            )?;
        }
        report.total_updates += stream.minis.len() as u64;

        let (train_acc, dev_acc) = if cfg.eval_each_epoch {
            let weights = if cfg.perceptron_average {
                avg.average()
            } else {
                avg.weights.clone()
            };
            let model = Model {
                weights,
                layout,
                label_alphabet: ds.label_alphabet.clone(),
                feature_alphabet: ds.feature_alphabet.clone(),
            };
            let ta = token_accuracy(&model, ds)?;
            let da = ds_dev.map(|d| token_accuracy(&model, d)).transpose()?;
            (Some(ta), da)
        } else {
            (None, None)
        };

        report.epochs.push(EpochRecord {
            epoch,
            objective: mistakes as f64 / total_tokens,
            learning_rate: cfg.eta0,
            train_accuracy: train_acc,
            dev_accuracy: dev_acc,
            seconds_cumulative: start.elapsed().as_secs_f64(),
            updates: stream.minis.len() as u64,
        });
    }
    let weights = if cfg.perceptron_average {
        avg.average()
    } else {
        avg.weights.clone()
    };
    Ok((weights, report))
}

/// Train a model on an extracted dataset. Deterministic for a fixed
/// config: two identical runs produce bit-identical weights.
pub fn train(
    ds: &Dataset,
    ds_dev: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if ds.samples.iter().any(|s| s.features.len() != s.len()) {
        return Err(Error::data("training samples are not feature-extracted"));
    }
    let layout = Layout::new(
        ds.feature_alphabet.len(),
        ds.label_alphabet.len(),
        cfg.use_rich_edges,
    )?;
    let (weights, report) = match cfg.objective {
        Objective::Crf => train_crf(ds, ds_dev, cfg, layout)?,
        Objective::Perceptron => train_perceptron(ds, ds_dev, cfg, layout)?,
    };
    let model = Model {
        weights,
        layout,
        label_alphabet: ds.label_alphabet.clone(),
        feature_alphabet: ds.feature_alphabet.clone(),
    };
    Ok((model, report))
}

/// Epochs until the epoch-mean objective comes within `epsilon_rel` of
/// the best objective this configuration reaches. `None` when the run
/// never gets there within its epoch budget.
pub fn measure_epochs_to_tolerance(
    ds: &Dataset,
    cfg: &TrainConfig,
    epsilon_rel: f64,
) -> Result<Option<u64>> {
    let mut tight = cfg.clone();
    tight.convergence_threshold = 1e-12;
    tight.eval_each_epoch = false;
    let (_, report) = train(ds, None, &tight)?;
    let reference = report
        .epochs
        .iter()
        .map(|e| e.objective)
        .fold(f64::INFINITY, f64::min);
    let target = reference * (1.0 + epsilon_rel);
    for e in &report.epochs {
        if e.objective <= target {
            return Ok(Some(e.epoch + 1));
        }
    }
    Ok(None)
}

/// Like [`measure_epochs_to_tolerance`], but also reports the cumulative
/// wall-clock seconds at the epoch where the tolerance is first met, taken
/// from the same run so the two numbers describe the same trajectory.
pub fn measure_time_to_tolerance(
    ds: &Dataset,
    cfg: &TrainConfig,
    epsilon_rel: f64,
) -> Result<Option<(u64, f64)>> {
    let mut tight = cfg.clone();
    tight.convergence_threshold = 1e-12;
    tight.eval_each_epoch = false;
    let (_, report) = train(ds, None, &tight)?;
    let reference = report
        .epochs
        .iter()
        .map(|e| e.objective)
        .fold(f64::INFINITY, f64::min);
    let target = reference * (1.0 + epsilon_rel);
    for e in &report.epochs {
        if e.objective <= target {
            return Ok(Some((e.epoch + 1, e.seconds_cumulative)));
        }
    }
    Ok(None)
}

/// Decode every sample with the model and return token accuracy.
pub fn evaluate_accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    token_accuracy(model, ds)
}

/// Predicted label sequences for every sample.
pub fn predict_all(model: &Model, ds: &Dataset) -> Result<Vec<Vec<u32>>> {
    ds.samples
        .iter()
        .map(|s| viterbi(&model.layout, &model.weights, 1.0, &s.features).map(|(p, _)| p))
        .collect()
}
