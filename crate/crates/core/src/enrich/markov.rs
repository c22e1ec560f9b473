//! Second-order Markov model of within-hour variability.
//!
//! States are bins of the sample's relative position inside its hour's
//! `[min, max]` band, so one tensor serves every hour regardless of level.

use rand::Rng;

use super::series::HighResSeries;
use crate::error::{Error, Result};

/// Additive smoothing applied to every transition count.
pub const LAPLACE_SMOOTHING: f64 = 1e-3;

pub const DEFAULT_BINS: usize = 20;

/// `probs[(b1 * bins + b2) * bins + b3] = Pr(b3 | b1, b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    bins: usize,
    probs: Vec<f64>,
}

impl TransitionModel {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn row(&self, b1: usize, b2: usize) -> &[f64] {
        let start = (b1 * self.bins + b2) * self.bins;
        &self.probs[start..start + self.bins]
    }

    pub fn prob(&self, b1: usize, b2: usize, b3: usize) -> f64 {
        self.row(b1, b2)[b3]
    }

    /// Builds from raw counts, smoothing and normalizing each row.
    pub fn from_counts(bins: usize, counts: &[f64]) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Parameter(format!("need at least 2 bins, got {bins}")));
        }
        if counts.len() != bins * bins * bins {
            return Err(Error::Parameter("transition count tensor has wrong size".into()));
        }
        let mut probs: Vec<f64> = counts.iter().map(|c| c + LAPLACE_SMOOTHING).collect();
        for row in probs.chunks_mut(bins) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
        Ok(TransitionModel { bins, probs })
    }

    /// Convex combination of tensors with the same bin count, rows
    /// renormalized.
    pub fn blend(weights: &[f64], models: &[&TransitionModel]) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::Parameter("no transition models to blend".into()))?;
        if weights.len() != models.len() {
            return Err(Error::Parameter("weight count does not match model count".into()));
        }
        if let Some(m) = models.iter().find(|m| m.bins != first.bins) {
            return Err(Error::Parameter(format!(
                "incompatible bin counts {} and {}",
                first.bins, m.bins
            )));
        }
        let mut probs = vec![0.0; first.probs.len()];
        for (w, m) in weights.iter().zip(models) {
            for (acc, p) in probs.iter_mut().zip(&m.probs) {
                *acc += w * p;
            }
        }
        for row in probs.chunks_mut(first.bins) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
        Ok(TransitionModel {
            bins: first.bins,
            probs,
        })
    }

    /// Draws the next bin given the previous two.
    pub fn sample_next<R: Rng + ?Sized>(&self, b1: usize, b2: usize, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let row = self.row(b1, b2);
        for (b, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return b;
            }
        }
        self.bins - 1
    }
}

/// Bin of `value` inside `[lo, hi]`; a collapsed band maps to bin 0.
pub fn bin_of(value: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let width = hi - lo;
    if !(width > 0.0) {
        return 0;
    }
    let u = ((value - lo) / width).clamp(0.0, 1.0);
    ((u * bins as f64) as usize).min(bins - 1)
}

/// Empirical second-order transition frequencies of a teacher series.
pub fn fit_transition_model(teacher: &HighResSeries, bins: usize) -> Result<TransitionModel> {
    if bins < 2 {
        return Err(Error::Parameter(format!("need at least 2 bins, got {bins}")));
    }
    if teacher.samples_per_hour < 3 {
        return Err(Error::Parameter(format!(
            "need at least 3 samples per hour, got {}",
            teacher.samples_per_hour
        )));
    }
    let mut counts = vec![0.0; bins * bins * bins];
    for (_, hour) in teacher.hours() {
        let (lo, hi) = hour
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let states: Vec<usize> = hour.iter().map(|v| bin_of(*v, lo, hi, bins)).collect();
        for w in states.windows(3) {
            counts[(w[0] * bins + w[1]) * bins + w[2]] += 1.0;
        }
    }
    TransitionModel::from_counts(bins, &counts)
}
