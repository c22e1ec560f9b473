//! Recovery of high-resolution load/PV series for transformers that only
//! have hourly smart-meter data, using models learned on transformers with
//! high-resolution (micro-PMU) measurements.
//!
//! Per teacher transformer two models are trained: a bound model mapping the
//! hourly mean to the within-hour maximum and minimum, and a second-order
//! Markov chain over the relative position inside that band. A student
//! blends the teachers' models with its learning weights and samples a
//! synthetic within-hour trajectory for each hourly reading.

pub mod gpr;
pub mod io;
pub mod markov;
pub mod moments;
pub mod pipeline;
pub mod series;
pub mod weights;

use rand::Rng;

pub use gpr::{GpRegressor, Hyperparameters};
pub use markov::{fit_transition_model, TransitionModel, DEFAULT_BINS};
pub use moments::{estimate_moments, EntryKey, MomentAmbiguitySet, MomentEntry, MomentOptions, Quantity, SampleSet};
pub use series::{HighResSeries, HourSummary, HourlySeries};
pub use weights::{compute_learning_weights, LearningWeights, WeightMode};

use crate::error::{Error, Result};

/// Minimum number of training hours for a bound model.
pub const MIN_TRAINING_HOURS: usize = 24;

/// Relative tolerance below which crossed bounds are clamped rather than
/// rejected.
const BOUND_CROSSING_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

/// Hourly-mean → (max, min) regression models of one teacher.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub upper: GpRegressor,
    pub lower: GpRegressor,
    /// Predictions are floored here: 0 when the teacher never went
    /// negative, unbounded otherwise.
    pub floor: f64,
}

impl BoundModel {
    /// Posterior-mean bounds; a crossed pair is collapsed to its midpoint.
    pub fn predict(&self, p_a: f64) -> Bounds {
        let upper = self.upper.predict(p_a).max(self.floor);
        let lower = self.lower.predict(p_a).max(self.floor);
        if upper >= lower {
            Bounds { lower, upper }
        } else {
            let mid = 0.5 * (upper + lower);
            Bounds { lower: mid, upper: mid }
        }
    }
}

pub fn fit_bound_models(teacher: &HighResSeries) -> Result<BoundModel> {
    let hours = teacher.summaries();
    if hours.len() < MIN_TRAINING_HOURS {
        return Err(Error::Parameter(format!(
            "{}: {} training hours, need at least {MIN_TRAINING_HOURS}",
            teacher.transformer,
            hours.len()
        )));
    }
    let means: Vec<f64> = hours.iter().map(|h| h.mean).collect();
    let maxs: Vec<f64> = hours.iter().map(|h| h.max).collect();
    let mins: Vec<f64> = hours.iter().map(|h| h.min).collect();
    Ok(BoundModel {
        upper: GpRegressor::fit_grid(&means, &maxs)?,
        lower: GpRegressor::fit_grid(&means, &mins)?,
        floor: if teacher.values.iter().all(|v| *v >= 0.0) {
            0.0
        } else {
            f64::NEG_INFINITY
        },
    })
}

/// Teacher models combined with a student's learning weights.
#[derive(Debug, Clone)]
pub struct BlendedModel {
    pub weights: Vec<f64>,
    pub bounds: Vec<BoundModel>,
    pub transitions: TransitionModel,
}

impl BlendedModel {
    /// Weighted bound prediction, clamped so that `lower <= upper`.
    pub fn predict_bounds(&self, p_a: f64) -> Result<Bounds> {
        let (mut lower, mut upper) = (0.0, 0.0);
        for (w, m) in self.weights.iter().zip(&self.bounds) {
            let b = m.predict(p_a);
            lower += w * b.lower;
            upper += w * b.upper;
        }
        if upper < lower {
            let scale = 1.0 + upper.abs().max(lower.abs());
            if lower - upper > BOUND_CROSSING_TOL * scale {
                return Err(Error::DegenerateBounds { lower, upper });
            }
            let mid = 0.5 * (lower + upper);
            lower = mid;
            upper = mid;
        }
        Ok(Bounds { lower, upper })
    }
}

pub fn blend_teachers(
    weights: &LearningWeights,
    bound_models: &[BoundModel],
    transition_models: &[TransitionModel],
) -> Result<BlendedModel> {
    let w = weights.as_slice();
    if w.is_empty() || w.len() != bound_models.len() || w.len() != transition_models.len() {
        return Err(Error::Parameter(format!(
            "{} weights for {} bound and {} transition models",
            w.len(),
            bound_models.len(),
            transition_models.len()
        )));
    }
    if w.iter().any(|x| !(*x >= 0.0)) || (weights.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(
            "learning weights must be nonnegative and sum to 1".into(),
        ));
    }
    let refs: Vec<&TransitionModel> = transition_models.iter().collect();
    Ok(BlendedModel {
        weights: w.to_vec(),
        bounds: bound_models.to_vec(),
        transitions: TransitionModel::blend(w, &refs)?,
    })
}

/// Generates `n` within-hour samples whose mean is exactly `p_a` and which
/// stay inside the predicted band.
///
/// The band is widened if needed so that it contains `p_a`. The first two
/// states are uniform; later states are categorical draws from the blended
/// transition rows, and each state maps to a uniform value inside its bin.
/// The raw trajectory is then shifted to mean `p_a` and, if necessary,
/// shrunk about that mean until it fits the band.
pub fn enrich_hour<R: Rng + ?Sized>(p_a: f64, model: &BlendedModel, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !p_a.is_finite() {
        return Err(Error::Data(format!("hourly value {p_a} is not finite")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let b = model.predict_bounds(p_a)?;
    let lo = b.lower.min(p_a);
    let hi = b.upper.max(p_a);
    let width = hi - lo;
    if !(width > 0.0) {
        return Ok(vec![p_a; n]);
    }

    let tm = &model.transitions;
    let bins = tm.bins();
    let mut states = Vec::with_capacity(n);
    states.push(rng.gen_range(0..bins));
    if n > 1 {
        states.push(rng.gen_range(0..bins));
    }
    while states.len() < n {
        let k = states.len();
        states.push(tm.sample_next(states[k - 2], states[k - 1], rng));
    }
    let raw: Vec<f64> = states
        .iter()
        .map(|&s| lo + (s as f64 + rng.gen::<f64>()) / bins as f64 * width)
        .collect();
    Ok(fit_to_band(&raw, p_a, lo, hi))
}

/// Affine map `y = p_a + c (x - mean(x))` with the largest `c <= 1` keeping
/// every `y` in `[lo, hi]`.
pub fn fit_to_band(raw: &[f64], p_a: f64, lo: f64, hi: f64) -> Vec<f64> {
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let (mn, mx) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let mut c: f64 = 1.0;
    if mx - mean > 0.0 {
        c = c.min((hi - p_a) / (mx - mean));
    }
    if mean - mn > 0.0 {
        c = c.min((p_a - lo) / (mean - mn));
    }
    let c = c.max(0.0);
    let mut out: Vec<f64> = raw.iter().map(|x| (p_a + c * (x - mean)).clamp(lo, hi)).collect();
    // remove the rounding residue of the mean; it is far below the band tolerance
    let drift = out.iter().sum::<f64>() / n - p_a;
    if drift != 0.0 {
        out.iter_mut().for_each(|y| *y -= drift);
    }
    out
}

/// Per-task RNG seed derived from the master seed, transformer and hour.
pub fn task_seed(master: u64, transformer: &str, hour: i64) -> u64 {
    // FNV-1a over the id, then splitmix64 finalisation
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in transformer.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(master ^ splitmix(h ^ splitmix(hour as u64)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
