//! Random decomposition of training sequences into mini-samples.
//!
//! Each epoch, every sample is cut left to right into contiguous
//! segments whose expected length is the configured mini size `n'`;
//! the resulting mini-samples are shuffled and treated as independent
//! training units. Transition context across a cut is discarded.

use rand::Rng;

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionPolicy {
    /// Expected mini-sample length `n'`, possibly fractional.
    /// Zero disables decomposition (whole samples pass through).
    pub mini_size: f64,
    pub seed: u64,
    /// Redraw cut points every epoch (the default). When off, every
    /// epoch reuses the epoch-0 cuts.
    pub refresh_each_epoch: bool,
    /// Draw the first segment length uniformly from 1..=ceil(n') so
    /// cut-point phase varies. Off reproduces fixed-grid cuts.
    pub phase_randomization: bool,
}

impl DecompositionPolicy {
    pub fn new(mini_size: f64, seed: u64) -> Result<Self> {
        if mini_size != 0.0 && mini_size < 1.0 {
            return Err(Error::config("mini size must be 0 (disabled) or >= 1"));
        }
        if !mini_size.is_finite() {
            return Err(Error::config("mini size must be finite"));
        }
        Ok(DecompositionPolicy {
            mini_size,
            seed,
            refresh_each_epoch: true,
            phase_randomization: true,
        })
    }

    pub fn disabled(&self) -> bool {
        self.mini_size == 0.0
    }
}

/// A contiguous slice `[start, end)` of a parent sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiniSample {
    pub parent: usize,
    pub start: usize,
    pub end: usize,
}

impl MiniSample {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// One epoch's shuffled stream of mini-samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatchStream {
    pub epoch: u64,
    pub minis: Vec<MiniSample>,
}

fn segment_length<R: Rng>(mini_size: f64, rng: &mut R) -> usize {
    let base = mini_size.floor() as usize;
    let frac = mini_size - mini_size.floor();
    if frac > 0.0 && rng.gen::<f64>() < frac {
        base + 1
    } else {
        base
    }
}

/// Cut `[0, n)` into segments with expected length `n'`. Pure given the
/// RNG state; a sample no longer than `n'` passes through whole.
pub fn decompose_sample<R: Rng>(
    n: usize,
    policy: &DecompositionPolicy,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    assert!(n >= 1);
    if policy.disabled() || policy.mini_size >= n as f64 {
        return vec![(0, n)];
    }
    let mut spans = Vec::with_capacity((n as f64 / policy.mini_size).ceil() as usize + 1);
    let mut start = 0usize;
    let first = if policy.phase_randomization {
        rng.gen_range(1..=policy.mini_size.ceil() as usize)
    } else {
        segment_length(policy.mini_size, rng)
    };
    let mut len = first;
    while start < n {
        let end = (start + len.max(1)).min(n);
        spans.push((start, end));
        start = end;
        len = segment_length(policy.mini_size, rng);
    }
    spans
}

/// Decompose every sample and shuffle the combined mini list. RNG
/// streams derive from `(seed, epoch, sample index)`, so epochs differ
/// but identical calls reproduce exactly.
/// FNV-1a over a sample's surface forms. Keying decomposition streams on
/// content rather than dataset position keeps every other sample's cut
/// pattern fixed when one sample is removed (leave-one-out probes would
/// otherwise see spurious instability from shifted indices).
fn sample_key(sample: &crate::corpus::Sample) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in &sample.tokens {
        for &b in t.surface.as_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        h = (h ^ 0x1f).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn decompose_epoch(ds: &Dataset, policy: &DecompositionPolicy, epoch: u64) -> MiniBatchStream {
    let cut_epoch = if policy.refresh_each_epoch { epoch } else { 0 };
    // Shuffle by sorting on per-mini pseudorandom keys instead of
    // Fisher-Yates: removing one sample then leaves the relative order
    // of every remaining mini unchanged, which matters for
    // leave-one-out stability probes.
    let mut keyed: Vec<(u64, MiniSample)> = Vec::new();
    for (i, sample) in ds.samples.iter().enumerate() {
        let key = sample_key(sample);
        let mut srng = rng::stream(policy.seed, &[0x4445_434f, cut_epoch, key]);
        for (start, end) in decompose_sample(sample.len(), policy, &mut srng) {
            let order = rng::mix(policy.seed, &[0x5348_5546, epoch, key, start as u64]);
            keyed.push((
                order,
                MiniSample {
                    parent: i,
                    start,
                    end,
                },
            ));
        }
    }
    keyed.sort_unstable_by_key(|&(order, m)| (order, m.parent, m.start));
    MiniBatchStream {
        epoch,
        minis: keyed.into_iter().map(|(_, m)| m).collect(),
    }
}
