//! First two moments of the stacked uncertainty vector.
//!
//! Entries are keyed by (quantity, bus, phase, hour). Covariance is diagonal
//! unless entries are placed in a correlation group, in which case the full
//! sample covariance of the group is kept.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::load::pv_reactive_capability;
use crate::phase::Phase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quantity {
    #[serde(rename = "p_l")]
    PLoad,
    #[serde(rename = "q_l")]
    QLoad,
    #[serde(rename = "p_g")]
    PGen,
    #[serde(rename = "q_cap")]
    QCap,
}

impl Quantity {
    pub const ALL: [Quantity; 4] = [Quantity::PLoad, Quantity::QLoad, Quantity::PGen, Quantity::QCap];

    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::PLoad => "p_l",
            Quantity::QLoad => "q_l",
            Quantity::PGen => "p_g",
            Quantity::QCap => "q_cap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntryKey {
    pub quantity: Quantity,
    pub bus: String,
    pub phase: Phase,
    pub hour: usize,
}

impl EntryKey {
    pub fn new(quantity: Quantity, bus: impl Into<String>, phase: Phase, hour: usize) -> Self {
        EntryKey {
            quantity,
            bus: bus.into(),
            phase,
            hour,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub quantity: Quantity,
    pub bus: String,
    pub phase: Phase,
    pub hour: usize,
    pub mu: f64,
    pub var: f64,
}

impl MomentEntry {
    pub fn key(&self) -> EntryKey {
        EntryKey::new(self.quantity, self.bus.clone(), self.phase, self.hour)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationGroup {
    /// Indices into `entries`.
    pub members: Vec<usize>,
    pub covariance: Vec<Vec<f64>>,
}

/// Mean and covariance of the uncertainty vector, as written to `moments.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentAmbiguitySet {
    pub entries: Vec<MomentEntry>,
    #[serde(default)]
    pub groups: Vec<CorrelationGroup>,
    /// Set when the moments come from hourly data only.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub low_confidence: bool,
    #[serde(skip)]
    index: HashMap<EntryKey, usize>,
    #[serde(skip)]
    group_of: HashMap<usize, (usize, usize)>,
}

impl MomentAmbiguitySet {
    pub fn new(entries: Vec<MomentEntry>, groups: Vec<CorrelationGroup>) -> Result<Self> {
        let mut set = MomentAmbiguitySet {
            entries,
            groups,
            ..Default::default()
        };
        set.reindex()?;
        Ok(set)
    }

    fn reindex(&mut self) -> Result<()> {
        self.index.clear();
        self.group_of.clear();
        for (i, e) in self.entries.iter().enumerate() {
            if !e.mu.is_finite() || !e.var.is_finite() || e.var < 0.0 {
                return Err(Error::Data(format!("entry {i}: invalid moments ({}, {})", e.mu, e.var)));
            }
            if self.index.insert(e.key(), i).is_some() {
                return Err(Error::Data(format!("duplicate moment entry {:?}", e.key())));
            }
        }
        for (g, group) in self.groups.iter_mut().enumerate() {
            let k = group.members.len();
            if group.covariance.len() != k || group.covariance.iter().any(|r| r.len() != k) {
                return Err(Error::Data(format!("group {g}: covariance is not {k}x{k}")));
            }
            for (pos, &m) in group.members.iter().enumerate() {
                if m >= self.entries.len() {
                    return Err(Error::Data(format!("group {g}: member {m} out of range")));
                }
                if self.group_of.insert(m, (g, pos)).is_some() {
                    return Err(Error::Data(format!("entry {m} belongs to two groups")));
                }
            }
            let cov = DMatrix::from_fn(k, k, |i, j| group.covariance[i][j]);
            let sym = (&cov + cov.transpose()) * 0.5;
            let projected = project_psd(&sym);
            for i in 0..k {
                for j in 0..k {
                    group.covariance[i][j] = projected[(i, j)];
                }
            }
        }
        for group in &self.groups {
            for (pos, &m) in group.members.iter().enumerate() {
                self.entries[m].var = group.covariance[pos][pos];
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &EntryKey) -> Option<&MomentEntry> {
        self.index.get(key).map(|&i| &self.entries[i])
    }

    pub fn position(&self, key: &EntryKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Covariance between two entries by index.
    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.entries[i].var;
        }
        match (self.group_of.get(&i), self.group_of.get(&j)) {
            (Some(&(gi, pi)), Some(&(gj, pj))) if gi == gj => self.groups[gi].covariance[pi][pj],
            _ => 0.0,
        }
    }

    /// Mean vector and covariance matrix of the listed entries.
    pub fn block(&self, keys: &[EntryKey]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let idx = keys
            .iter()
            .map(|k| {
                self.position(k).ok_or_else(|| {
                    Error::Layout(format!(
                        "no moments for {} at bus {} phase {} hour {}",
                        k.quantity.as_str(),
                        k.bus,
                        k.phase,
                        k.hour
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mu = idx.iter().map(|&i| self.entries[i].mu).collect();
        let n = idx.len();
        let sigma = DMatrix::from_fn(n, n, |a, b| self.covariance(idx[a], idx[b]));
        Ok((mu, sigma))
    }

    /// Copy with every variance and covariance set to zero.
    pub fn zero_covariance(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.entries {
            e.var = 0.0;
        }
        out.groups.clear();
        out.group_of.clear();
        out
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let mut set: MomentAmbiguitySet = serde_json::from_str(s)?;
        set.reindex()?;
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

/// Nearest positive semidefinite matrix (negative eigenvalues clipped).
pub fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().all(|l| *l >= 0.0) {
        return m.clone();
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

/// Symmetric PSD square root via eigendecomposition.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return m.clone();
    }
    let is_diag = (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0));
    if is_diag {
        return DMatrix::from_diagonal(&m.diagonal().map(|v| v.max(0.0).sqrt()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Samples grouped by entry.
pub type SampleSet = BTreeMap<EntryKey, Vec<f64>>;

#[derive(Debug, Clone, Default)]
pub struct MomentOptions {
    /// Entries whose cross-covariances are kept.
    pub groups: Vec<Vec<EntryKey>>,
    /// Inverter capacity per (bus, phase); required for every `p_g` entry.
    pub capacities: HashMap<(String, Phase), f64>,
}

/// Gaussian maximum-likelihood moments (1/N covariance).
///
/// `q_cap` samples are derived from `p_g` samples with the inverter capacity
/// before moments are taken; `p_g` samples above capacity are clamped to it.
pub fn estimate_moments(samples: &SampleSet, options: &MomentOptions) -> Result<MomentAmbiguitySet> {
    let mut all: SampleSet = SampleSet::new();
    for (key, values) in samples {
        if values.len() < 2 {
            return Err(Error::Data(format!("{key:?}: need at least 2 samples")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{key:?}: non-finite sample")));
        }
        all.insert(key.clone(), values.clone());
        if key.quantity == Quantity::PGen {
            let s_cap = *options
                .capacities
                .get(&(key.bus.clone(), key.phase))
                .ok_or_else(|| Error::Data(format!("no inverter capacity for bus {} phase {}", key.bus, key.phase)))?;
            let q_cap = values
                .iter()
                .map(|p| pv_reactive_capability(s_cap, p.clamp(0.0, s_cap)))
                .collect::<Result<Vec<_>>>()?;
            let qkey = EntryKey {
                quantity: Quantity::QCap,
                ..key.clone()
            };
            all.entry(qkey).or_insert(q_cap);
        }
    }

    let mut entries = Vec::with_capacity(all.len());
    let mut position = HashMap::new();
    for (key, values) in &all {
        let (mu, var) = mle(values);
        position.insert(key.clone(), entries.len());
        entries.push(MomentEntry {
            quantity: key.quantity,
            bus: key.bus.clone(),
            phase: key.phase,
            hour: key.hour,
            mu,
            var,
        });
    }

    let mut groups = Vec::new();
    for keys in &options.groups {
        let members = keys
            .iter()
            .map(|k| {
                position
                    .get(k)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("group member {k:?} has no samples")))
            })
            .collect::<Result<Vec<_>>>()?;
        let series: Vec<&Vec<f64>> = keys.iter().map(|k| &all[k]).collect();
        let n = series[0].len();
        if series.iter().any(|s| s.len() != n) {
            return Err(Error::Data("correlated entries need equally many samples".into()));
        }
        let means: Vec<f64> = members.iter().map(|&m| entries[m].mu).collect();
        let k = members.len();
        let mut cov = vec![vec![0.0; k]; k];
        for a in 0..k {
            for b in a..k {
                let c = series[a]
                    .iter()
                    .zip(series[b].iter())
                    .map(|(x, y)| (x - means[a]) * (y - means[b]))
                    .sum::<f64>()
                    / n as f64;
                cov[a][b] = c;
                cov[b][a] = c;
            }
        }
        groups.push(CorrelationGroup {
            members,
            covariance: cov,
        });
    }
    MomentAmbiguitySet::new(entries, groups)
}

fn mle(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}
