//! Reactive-power dispatch of PV inverters in deterministic, robust and
//! distributionally robust chance-constrained modes.
//!
//! The horizon decomposes into independent hourly programs: each hour has its
//! own moments, the same chance rows, and the dispatch ratios of that hour as
//! decisions.

pub mod affine;
pub mod layout;
pub mod solver;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use affine::{
    assemble_chance_rows, assemble_voltage_affine, check_denominator_positivity, soc_radius, AffineVoltageModel,
    ChanceRow, DenominatorReport, MultiplierBox, Side, VoltageBounds,
};
pub use layout::{PvSlot, UncertaintyLayout};
pub use solver::{
    solve_dispatch, AlphaEntry, DispatchSolution, HourSolution, SolveStatus, SolverConfig, TOLERANCE_ENV,
};

use crate::enrich::moments::{psd_sqrt, MomentAmbiguitySet};
use crate::error::{Error, Result};
use crate::feeder::{Feeder, LinearNetwork};
use crate::phase::Phase;

/// How the "10% from the prediction" box of the robust benchmark is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxInterpretation {
    /// `h = f |mu|`.
    #[default]
    HalfWidth,
    /// `h = sqrt(f) |mu|`: one standard deviation when the variance is
    /// `f mu^2`.
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustBox {
    pub fraction: f64,
    #[serde(default)]
    pub interpretation: BoxInterpretation,
}

impl Default for RobustBox {
    fn default() -> Self {
        RobustBox {
            fraction: 0.10,
            interpretation: BoxInterpretation::HalfWidth,
        }
    }
}

impl RobustBox {
    pub fn half_width(&self, mu: f64) -> f64 {
        match self.interpretation {
            BoxInterpretation::HalfWidth => self.fraction * mu.abs(),
            BoxInterpretation::Variance => self.fraction.sqrt() * mu.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Deterministic,
    Robust(RobustBox),
    Drcc { epsilon: f64 },
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Deterministic => "det",
            Mode::Robust(_) => "ro",
            Mode::Drcc { .. } => "drcc",
        }
    }

    pub fn epsilon(&self) -> Option<f64> {
        match self {
            Mode::Drcc { epsilon } => Some(*epsilon),
            _ => None,
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            Mode::Deterministic => Ok(()),
            Mode::Robust(b) if b.fraction >= 0.0 && b.fraction.is_finite() => Ok(()),
            Mode::Robust(b) => Err(Error::Parameter(format!("box fraction {} must be >= 0", b.fraction))),
            Mode::Drcc { epsilon } => soc_radius(*epsilon).map(|_| ()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProblemOptions {
    pub bounds: VoltageBounds,
    /// Bus phases whose voltages are constrained; every node when unset.
    pub monitored: Option<Vec<(String, Phase)>>,
    /// Multiplier range over which the denominator must stay dominant.
    /// When unset, each hour uses `mu ± 6 sigma` of its own multipliers,
    /// floored at zero.
    pub multiplier_range: Option<(f64, f64)>,
}

/// Data of one hourly program.
#[derive(Debug, Clone)]
pub struct TimeStep {
    pub hour: usize,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub sigma_sqrt: DMatrix<f64>,
    /// Robust half-widths (zero outside robust mode).
    pub half_width: DVector<f64>,
    pub rows: Vec<ChanceRow>,
    /// Substation power at the mean, `c0 + c . alpha` (per unit).
    pub objective_const: f64,
    pub objective: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct DispatchProblem {
    pub mode: Mode,
    pub horizon: usize,
    pub model: AffineVoltageModel,
    pub steps: Vec<TimeStep>,
    pub base_power_kva: f64,
    pub kappa: Option<f64>,
}

impl DispatchProblem {
    pub fn layout(&self) -> &UncertaintyLayout {
        &self.model.layout
    }

    /// Left-hand side of a row as the mode enforces it (`<= 0` required).
    pub fn row_lhs(&self, step: &TimeStep, row: &ChanceRow, alpha: &[f64]) -> f64 {
        let layout = self.layout();
        let mu = step.mu.as_slice();
        match self.mode {
            Mode::Deterministic => row.value(layout, alpha, mu),
            Mode::Robust(_) => {
                let a = row.coefficients(layout, alpha);
                row.value(layout, alpha, mu)
                    + a.iter()
                        .zip(step.half_width.iter())
                        .map(|(a, h)| a.abs() * h)
                        .sum::<f64>()
            }
            Mode::Drcc { .. } => {
                let (mean, std) = row.mean_and_std(layout, alpha, mu, &step.sigma_sqrt);
                mean + self.kappa.unwrap_or(0.0) * std
            }
        }
    }
}

/// Assembles the hourly programs for hours `0..horizon`.
pub fn build_problem(
    feeder: &Feeder,
    moments: &MomentAmbiguitySet,
    mode: Mode,
    horizon: usize,
    options: &ProblemOptions,
) -> Result<DispatchProblem> {
    mode.check()?;
    if horizon == 0 {
        return Err(Error::Parameter("horizon must be at least one hour".into()));
    }
    let net = LinearNetwork::build(feeder)?;
    let model = assemble_voltage_affine(&net.sensitivity, feeder, &net.topology)?;
    let layout = &model.layout;
    let n = layout.n_nodes();
    let monitored = match &options.monitored {
        Some(list) => layout.select_nodes(list)?,
        None => (0..n).collect(),
    };
    let kappa = mode.epsilon().map(soc_radius).transpose()?;

    let mut steps = Vec::with_capacity(horizon);
    for hour in 0..horizon {
        let (mu, sigma) = moments.block(&layout.keys(hour))?;
        let mean_positivity = check_denominator_positivity(
            &model,
            &MultiplierBox {
                p_lower: (0..n).map(|j| mu[layout.p_load(j)]).collect(),
                p_upper: (0..n).map(|j| mu[layout.p_load(j)]).collect(),
                q_lower: (0..n).map(|j| mu[layout.q_load(j)]).collect(),
                q_upper: (0..n).map(|j| mu[layout.q_load(j)]).collect(),
            },
        );
        if !mean_positivity.pass() {
            return Err(Error::ModelValidity(format!(
                "hour {hour}: voltage denominator at the mean is not diagonally dominant (margin {:.3e})",
                mean_positivity.margin
            )));
        }
        let positivity = match options.multiplier_range {
            Some((lo, hi)) => check_denominator_positivity(&model, &MultiplierBox::uniform(n, lo, hi)),
            None => check_denominator_positivity(&model, &moment_box(layout, &mu, &sigma)),
        };
        let rows = assemble_chance_rows(&model, &positivity, options.bounds, &monitored, hour)?;
        let (objective_const, objective) = model.substation_power_affine(&mu)?;
        let half_width = match mode {
            Mode::Robust(b) => DVector::from_iterator(mu.len(), mu.iter().map(|m| b.half_width(*m))),
            _ => DVector::zeros(mu.len()),
        };
        let sigma_sqrt = psd_sqrt(&sigma);
        steps.push(TimeStep {
            hour,
            mu: DVector::from_vec(mu),
            sigma,
            sigma_sqrt,
            half_width,
            rows,
            objective_const,
            objective,
        });
    }
    Ok(DispatchProblem {
        mode,
        horizon,
        model,
        steps,
        base_power_kva: feeder.base_power_kva,
        kappa,
    })
}

/// Number of standard deviations covered by the default multiplier box.
pub const BOX_SIGMAS: f64 = 6.0;

fn moment_box(layout: &UncertaintyLayout, mu: &[f64], sigma: &DMatrix<f64>) -> MultiplierBox {
    let n = layout.n_nodes();
    let lo = |i: usize| (mu[i] - BOX_SIGMAS * sigma[(i, i)].max(0.0).sqrt()).max(0.0);
    let hi = |i: usize| mu[i] + BOX_SIGMAS * sigma[(i, i)].max(0.0).sqrt();
    MultiplierBox {
        p_lower: (0..n).map(|j| lo(layout.p_load(j))).collect(),
        p_upper: (0..n).map(|j| hi(layout.p_load(j))).collect(),
        q_lower: (0..n).map(|j| lo(layout.q_load(j))).collect(),
        q_upper: (0..n).map(|j| hi(layout.q_load(j))).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_checks() {
        assert!(Mode::Drcc { epsilon: 1.5 }.check().is_err());
        assert!(Mode::Drcc { epsilon: 0.05 }.check().is_ok());
        assert!(Mode::Robust(RobustBox {
            fraction: -0.1,
            ..Default::default()
        })
        .check()
        .is_err());
        assert_eq!(Mode::Robust(RobustBox::default()).name(), "ro");
    }

    #[test]
    fn box_interpretations() {
        let hw = RobustBox {
            fraction: 0.1,
            interpretation: BoxInterpretation::HalfWidth,
        };
        let var = RobustBox {
            fraction: 0.1,
            interpretation: BoxInterpretation::Variance,
        };
        assert!((hw.half_width(-2.0) - 0.2).abs() < 1e-15);
        assert!((var.half_width(2.0) - 2.0 * 0.1f64.sqrt()).abs() < 1e-15);
    }
}
