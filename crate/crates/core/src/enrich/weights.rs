use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset keeping inverse-distance weights finite for identical patterns.
pub const INVERSE_DISTANCE_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `W'_s = 1 / (d_s + δ)`: closer teachers get more weight.
    #[default]
    InverseDistance,
    /// `W'_s = d_s`, the mean pairwise distance itself.
    Literal,
}

/// Normalized per-teacher weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LearningWeights(pub Vec<f64>);

impl LearningWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Mean pairwise Euclidean distance between two sets of daily patterns.
pub fn mean_pairwise_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Parameter("empty pattern set".into()));
    }
    let len = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != len) {
        return Err(Error::Parameter("daily patterns have different lengths".into()));
    }
    let mut total = 0.0;
    for p in a {
        for q in b {
            total += p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
    }
    Ok(total / (a.len() * b.len()) as f64)
}

/// Weights of one student with respect to each teacher.
pub fn compute_learning_weights(
    student: &[Vec<f64>],
    teachers: &[Vec<Vec<f64>>],
    mode: WeightMode,
) -> Result<LearningWeights> {
    if teachers.is_empty() {
        return Err(Error::Parameter("at least one teacher is required".into()));
    }
    let distances = teachers
        .iter()
        .map(|t| mean_pairwise_distance(student, t))
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<f64> = match mode {
        WeightMode::InverseDistance => distances.iter().map(|d| 1.0 / (d + INVERSE_DISTANCE_DELTA)).collect(),
        WeightMode::Literal => distances,
    };
    let total: f64 = raw.iter().sum();
    let weights = if total > 0.0 && total.is_finite() {
        raw.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    };
    Ok(LearningWeights(weights))
}
