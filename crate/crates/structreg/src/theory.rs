//! Closed-form stability/generalization/convergence bound calculators
//! and empirical probes for the trends they predict.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::train::{train, TrainConfig};

/// Constants of the stability and generalization bounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Feature dimension d.
    pub d: f64,
    /// Smoothness constant of the point-wise loss.
    pub tau: f64,
    /// Admissibility constant of the prediction function.
    pub rho: f64,
    /// Bound on local feature values.
    pub v: f64,
    /// Structure complexity n.
    pub n: f64,
    /// Training set size m.
    pub m: f64,
    /// L2 regularization strength.
    pub lambda: f64,
    /// Structure regularization strength, in [1, n].
    pub alpha: f64,
    /// Bound on the point-wise loss.
    pub gamma: f64,
    /// Confidence parameter, in (0, 1).
    pub delta: f64,
}

impl TheoryParams {
    fn validate(&self) -> Result<()> {
        let positive = [
            self.d,
            self.tau,
            self.rho,
            self.v,
            self.n,
            self.m,
            self.lambda,
            self.gamma,
        ];
        if positive.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::config("all bound constants must be positive and finite"));
        }
        if !(1.0 <= self.alpha && self.alpha <= self.n) {
            return Err(Error::config(format!(
                "alpha {} must be within [1, n={}]",
                self.alpha, self.n
            )));
        }
        if !(0.0 < self.delta && self.delta < 1.0) {
            return Err(Error::config("delta must be in (0,1)"));
        }
        Ok(())
    }
}

/// The six closed-form stability bounds: function / loss / sample-loss
/// stability for mini-sample removal, and their full-sample-removal
/// variants (larger by a factor alpha).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityBounds {
    pub delta_fn: f64,
    pub delta_loss: f64,
    pub delta_sample: f64,
    pub delta_fn_bar: f64,
    pub delta_loss_bar: f64,
    pub delta_sample_bar: f64,
}

pub fn stability_bounds(p: &TheoryParams) -> Result<StabilityBounds> {
    p.validate()?;
    let base = p.d * p.rho * p.rho * p.v * p.v * p.n * p.n / (p.m * p.lambda * p.alpha * p.alpha);
    let delta_fn = p.tau * base;
    let delta_loss = p.tau * p.tau * base;
    let delta_sample = p.n * delta_loss;
    Ok(StabilityBounds {
        delta_fn,
        delta_loss,
        delta_sample,
        delta_fn_bar: p.alpha * delta_fn,
        delta_loss_bar: p.alpha * delta_loss,
        delta_sample_bar: p.alpha * delta_sample,
    })
}

/// Generalization risk bound: the full bound value and the overfit term
/// (everything except the empirical risk).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationBound {
    pub bound: f64,
    pub overfit_term: f64,
}

pub fn generalization_bound(p: &TheoryParams, empirical_risk: f64) -> Result<GeneralizationBound> {
    p.validate()?;
    if empirical_risk < 0.0 {
        return Err(Error::config("empirical risk must be nonnegative"));
    }
    let core =
        p.d * p.tau * p.tau * p.rho * p.rho * p.v * p.v * p.n * p.n / (p.m * p.lambda * p.alpha);
    let conf = ((1.0 / p.delta).ln() / (2.0 * p.m)).sqrt();
    let overfit_term = 2.0 * core + ((4.0 * p.m - 2.0) * core + p.gamma) * conf;
    Ok(GeneralizationBound {
        bound: empirical_risk + overfit_term,
        overfit_term,
    })
}

/// Constants of the SGD convergence analysis.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SgdTheoryParams {
    /// Strong convexity modulus.
    pub c: f64,
    /// Lipschitz constant of the gradient.
    pub q: f64,
    /// Per-position gradient norm bound: ||grad|| <= kappa * |z|.
    pub kappa: f64,
    /// Convergence tolerance.
    pub epsilon: f64,
    /// Slack factor in (0, 1].
    pub beta: f64,
    /// Initial squared distance to the optimum.
    pub a0: f64,
}

impl SgdTheoryParams {
    fn validate(&self) -> Result<()> {
        let positive = [self.c, self.q, self.kappa, self.epsilon, self.a0];
        if positive.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::config("all SGD constants must be positive and finite"));
        }
        if !(0.0 < self.beta && self.beta <= 1.0) {
            return Err(Error::config("beta must be in (0,1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdIterationBound {
    /// Lower bound on the number of SGD updates to reach tolerance.
    pub t_min: f64,
    /// Prescribed learning rate.
    pub eta: f64,
}

/// Iteration bound `t >= q kappa^2 n^2 log(q a0 / eps) / (eps beta c^2 alpha^2)`
/// with the prescribed rate `eta = c eps beta alpha^2 / (q kappa^2 n^2)`.
pub fn sgd_iterations(p: &SgdTheoryParams, n: f64, alpha: f64) -> Result<SgdIterationBound> {
    p.validate()?;
    if !(n > 0.0) || !(1.0 <= alpha && alpha <= n) {
        return Err(Error::config("need n > 0 and alpha in [1, n]"));
    }
    let eta = p.c * p.epsilon * p.beta * alpha * alpha / (p.q * p.kappa * p.kappa * n * n);
    if eta * p.c >= 1.0 {
        return Err(Error::config(format!(
            "infeasible learning rate: eta*c = {} >= 1, gradient descent would diverge",
            eta * p.c
        )));
    }
    let log_arg = p.q * p.a0 / p.epsilon;
    let t_min = if log_arg <= 1.0 {
        0.0
    } else {
        p.q * p.kappa * p.kappa * n * n * log_arg.ln()
            / (p.epsilon * p.beta * p.c * p.c * alpha * alpha)
    };
    Ok(SgdIterationBound { t_min, eta })
}

/// Empirical ratio `max ||grad|| / |z'|` over recorded updates.
pub fn estimate_kappa(updates: &[(f64, usize)]) -> f64 {
    updates
        .iter()
        .filter(|&&(_, len)| len > 0)
        .map(|&(norm, len)| norm / len as f64)
        .fold(0.0, f64::max)
}

/// Leave-one-out probe results: per-removal max/mean absolute change of
/// the per-position model output on held-out probes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityProbe {
    pub per_removal_max: Vec<f64>,
    pub per_removal_mean: Vec<f64>,
}

impl StabilityProbe {
    pub fn max(&self) -> f64 {
        self.per_removal_max.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.per_removal_mean.is_empty() {
            0.0
        } else {
            self.per_removal_mean.iter().sum::<f64>() / self.per_removal_mean.len() as f64
        }
    }

    pub fn median_of_means(&self) -> f64 {
        let mut v = self.per_removal_mean.clone();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if v.is_empty() {
            0.0
        } else {
            v[v.len() / 2]
        }
    }
}

fn without_sample(ds: &Dataset, index: usize) -> Dataset {
    let mut out = ds.clone();
    out.samples.remove(index);
    out
}

/// Train on `ds`, then retrain with single samples removed, and measure
/// the change of the gold-label marginal at randomly chosen held-out
/// positions. Retraining runs fan out over the rayon pool.
pub fn probe_stability(
    ds: &Dataset,
    heldout: &Dataset,
    cfg: &TrainConfig,
    probe_points: usize,
    num_removals: usize,
    seed: u64,
) -> Result<StabilityProbe> {
    if ds.len() < 2 {
        return Err(Error::data("need at least 2 training samples to probe"));
    }
    if heldout.is_empty() || probe_points == 0 || num_removals == 0 {
        return Err(Error::config("probe needs held-out data, probe points, and removals"));
    }
    let num_removals = num_removals.min(ds.len());

    let mut r = rng::stream(seed, &[0x5354_4142]);
    let mut indices: Vec<usize> = (0..ds.len()).collect();
    indices.shuffle(&mut r);
    indices.truncate(num_removals);

    let probes: Vec<(usize, usize)> = (0..probe_points)
        .map(|_| {
            let s = r.gen_range(0..heldout.len());
            let k = r.gen_range(0..heldout.samples[s].len());
            (s, k)
        })
        .collect();

    let (full_model, _) = train(ds, None, cfg)?;
    let full_values: Vec<f64> = probes
        .iter()
        .map(|&(s, k)| {
            let sample = &heldout.samples[s];
            full_model.stability_value(&sample.features, &sample.gold, k)
        })
        .collect::<Result<_>>()?;

    let results: Vec<Result<(f64, f64)>> = indices
        .par_iter()
        .map(|&i| {
            let reduced = without_sample(ds, i);
            let (model, _) = train(&reduced, None, cfg)?;
            let mut max = 0.0f64;
            let mut sum = 0.0f64;
            for (&(s, k), &full) in probes.iter().zip(&full_values) {
                let sample = &heldout.samples[s];
                let v = model.stability_value(&sample.features, &sample.gold, k)?;
                let diff = (v - full).abs();
                max = max.max(diff);
                sum += diff;
            }
            Ok((max, sum / probes.len() as f64))
        })
        .collect();

    let mut probe = StabilityProbe {
        per_removal_max: Vec::with_capacity(num_removals),
        per_removal_mean: Vec::with_capacity(num_removals),
    };
    for r in results {
        let (max, mean) = r?;
        probe.per_removal_max.push(max);
        probe.per_removal_mean.push(mean);
    }
    Ok(probe)
}
