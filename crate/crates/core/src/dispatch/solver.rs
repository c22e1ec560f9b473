//! Conic solve of the hourly programs with Clarabel.
//!
//! Decisions per hour are the dispatch ratios `alpha` (and, in robust mode,
//! auxiliaries `u >= |alpha|`). Every constraint is written as
//! `A z + s = b` with `s` in the nonnegative orthant or a second-order cone.

use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT, SolverStatus, SupportedConeT,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ChanceRow, DispatchProblem, Mode, Side, TimeStep, UncertaintyLayout};
use crate::error::{Error, Result};
use crate::phase::Phase;

/// Environment variable overriding the solver tolerance.
pub const TOLERANCE_ENV: &str = "DRCC_SOLVER_TOL";

/// Components of `Sigma^{1/2} a` below this are treated as exact zeros.
const ZERO_STD: f64 = 1e-13;

/// Row violation accepted from a reduced-accuracy solve.
const REDUCED_ACCURACY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iter: u32,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-8,
            max_iter: 200,
        }
    }
}

impl SolverConfig {
    /// Default configuration with the tolerance taken from
    /// [`TOLERANCE_ENV`] when set.
    pub fn from_env() -> Result<Self> {
        let mut cfg = SolverConfig::default();
        if let Ok(s) = std::env::var(TOLERANCE_ENV) {
            let tol: f64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Parameter(format!("{TOLERANCE_ENV}={s:?} is not a number")))?;
            if !(tol > 0.0 && tol < 1.0) {
                return Err(Error::Parameter(format!("{TOLERANCE_ENV}={tol} must lie in (0, 1)")));
            }
            cfg.tolerance = tol;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalLimit,
}

impl SolveStatus {
    fn severity(self) -> u8 {
        match self {
            SolveStatus::Optimal => 0,
            SolveStatus::NumericalLimit => 1,
            SolveStatus::Infeasible => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HourSolution {
    pub hour: usize,
    pub status: SolveStatus,
    pub alpha: Vec<f64>,
    /// Substation power at the mean (per unit).
    pub objective_pu: f64,
    /// `-lhs` of every row of the hour, in row order.
    pub slacks: Vec<f64>,
    pub hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaEntry {
    pub bus: String,
    pub phase: Phase,
    pub hour: usize,
    pub value: f64,
}

/// Contents of `dispatch.json`. `solve_ms` is the only timing field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchSolution {
    pub mode: String,
    pub epsilon: Option<f64>,
    pub horizon: usize,
    /// Expected substation energy over the horizon; absent unless optimal.
    pub objective_kwh: Option<f64>,
    pub alpha_q: Vec<AlphaEntry>,
    pub status: SolveStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<String>,
    pub solve_ms: f64,
    #[serde(skip)]
    pub hours: Vec<HourSolution>,
}

impl DispatchSolution {
    /// Dispatch ratios per hour in layout order.
    pub fn alpha_by_hour(&self, layout: &UncertaintyLayout) -> Result<Vec<Vec<f64>>> {
        (0..self.horizon)
            .map(|hour| {
                layout
                    .pv
                    .iter()
                    .map(|slot| {
                        self.alpha_q
                            .iter()
                            .find(|e| e.hour == hour && e.bus == slot.bus && e.phase == slot.phase)
                            .map(|e| e.value)
                            .ok_or_else(|| {
                                Error::Layout(format!(
                                    "dispatch has no ratio for bus {} phase {} hour {hour}",
                                    slot.bus, slot.phase
                                ))
                            })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Solves every hour independently and collects the results.
pub fn solve_dispatch(problem: &DispatchProblem, cfg: &SolverConfig) -> Result<DispatchSolution> {
    let start = Instant::now();
    let hours: Vec<HourSolution> = problem
        .steps
        .par_iter()
        .map(|step| solve_hour(problem, step, cfg))
        .collect::<Result<_>>()?;
    let solve_ms = start.elapsed().as_secs_f64() * 1e3;

    let status = hours
        .iter()
        .map(|h| h.status)
        .max_by_key(|s| s.severity())
        .unwrap_or(SolveStatus::Optimal);
    let layout = problem.layout();
    let alpha_q = hours
        .iter()
        .flat_map(|h| {
            layout.pv.iter().zip(&h.alpha).map(move |(slot, v)| AlphaEntry {
                bus: slot.bus.clone(),
                phase: slot.phase,
                hour: h.hour,
                value: *v,
            })
        })
        .collect();
    let objective_kwh = (status == SolveStatus::Optimal)
        .then(|| hours.iter().map(|h| h.objective_pu).sum::<f64>() * problem.base_power_kva);
    let hint = hours.iter().find_map(|h| h.hint.clone());
    Ok(DispatchSolution {
        mode: problem.mode.name().to_string(),
        epsilon: problem.mode.epsilon(),
        horizon: problem.horizon,
        objective_kwh,
        alpha_q,
        status,
        hint,
        solve_ms,
        hours,
    })
}

fn mean_part(layout: &UncertaintyLayout, step: &TimeStep, row: &ChanceRow) -> (f64, Vec<f64>) {
    let c0 = row.b + row.a0.dot(&step.mu);
    let coef = row
        .alpha_coef
        .iter()
        .enumerate()
        .map(|(k, c)| c * step.mu[layout.q_cap(k)])
        .collect();
    (c0, coef)
}

#[derive(Default)]
struct ConeProgram {
    rows_i: Vec<usize>,
    cols_j: Vec<usize>,
    vals: Vec<f64>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
    nonneg: usize,
}

impl ConeProgram {
    /// Adds `coefs . z <= rhs`.
    fn leq(&mut self, coefs: &[(usize, f64)], rhs: f64) {
        let r = self.b.len();
        for &(j, v) in coefs {
            if v != 0.0 {
                self.rows_i.push(r);
                self.cols_j.push(j);
                self.vals.push(v);
            }
        }
        self.b.push(rhs);
        self.nonneg += 1;
    }

    fn close_nonneg(&mut self) {
        if self.nonneg > 0 {
            self.cones.push(NonnegativeConeT(self.nonneg));
        }
    }

    /// Adds `||b_rest - A_rest z|| <= b0 - A0 z`.
    fn soc(&mut self, rows: Vec<(Vec<(usize, f64)>, f64)>) {
        let dim = rows.len();
        for (coefs, rhs) in rows {
            let r = self.b.len();
            for (j, v) in coefs {
                if v != 0.0 {
                    self.rows_i.push(r);
                    self.cols_j.push(j);
                    self.vals.push(v);
                }
            }
            self.b.push(rhs);
        }
        self.cones.push(SecondOrderConeT(dim));
    }
}

fn solve_hour(problem: &DispatchProblem, step: &TimeStep, cfg: &SolverConfig) -> Result<HourSolution> {
    let layout = problem.layout();
    let m = layout.n_pv();
    let robust = matches!(problem.mode, Mode::Robust(_));
    let n_var = if robust { 2 * m } else { m };

    let finish = |alpha: Vec<f64>, status: SolveStatus| {
        let slacks: Vec<f64> = step.rows.iter().map(|r| -problem.row_lhs(step, r, &alpha)).collect();
        let objective_pu = step.objective_const + step.objective.iter().zip(&alpha).map(|(c, a)| c * a).sum::<f64>();
        let hint = (status == SolveStatus::Infeasible).then(|| infeasibility_hint(problem, step));
        HourSolution {
            hour: step.hour,
            status,
            alpha,
            objective_pu,
            slacks,
            hint,
        }
    };

    if m == 0 {
        let worst = step
            .rows
            .iter()
            .map(|r| problem.row_lhs(step, r, &[]))
            .fold(f64::NEG_INFINITY, f64::max);
        let status = if worst <= cfg.tolerance {
            SolveStatus::Optimal
        } else {
            SolveStatus::Infeasible
        };
        return Ok(finish(Vec::new(), status));
    }

    let mut prog = ConeProgram::default();
    for k in 0..m {
        prog.leq(&[(k, 1.0)], 1.0);
        prog.leq(&[(k, -1.0)], 1.0);
        if robust {
            prog.leq(&[(k, 1.0), (m + k, -1.0)], 0.0);
            prog.leq(&[(k, -1.0), (m + k, -1.0)], 0.0);
        }
    }

    let mut cones = Vec::new();
    for row in &step.rows {
        let (mut c0, coef) = mean_part(layout, step, row);
        let mut lin: Vec<(usize, f64)> = coef.iter().copied().enumerate().collect();
        match problem.mode {
            Mode::Deterministic => prog.leq(&lin, -c0),
            Mode::Robust(_) => {
                c0 += row
                    .a0
                    .iter()
                    .zip(step.half_width.iter())
                    .map(|(a, h)| a.abs() * h)
                    .sum::<f64>();
                for (k, c) in row.alpha_coef.iter().enumerate() {
                    lin.push((m + k, c.abs() * step.half_width[layout.q_cap(k)]));
                }
                prog.leq(&lin, -c0);
            }
            Mode::Drcc { .. } => {
                let kappa = problem.kappa.expect("drcc mode has a radius");
                let s = &step.sigma_sqrt;
                let sa0 = s * &row.a0;
                let mut comps = Vec::new();
                for i in 0..sa0.len() {
                    let g: Vec<(usize, f64)> = (0..m)
                        .map(|k| (k, row.alpha_coef[k] * s[(i, layout.q_cap(k))]))
                        .filter(|(_, v)| v.abs() > ZERO_STD)
                        .collect();
                    if sa0[i].abs() > ZERO_STD || !g.is_empty() {
                        comps.push((g.into_iter().map(|(k, v)| (k, -v)).collect(), sa0[i]));
                    }
                }
                if comps.is_empty() {
                    prog.leq(&lin, -c0);
                } else {
                    let head: Vec<(usize, f64)> = lin.iter().map(|&(k, v)| (k, v / kappa)).collect();
                    let mut cone = vec![(head, -c0 / kappa)];
                    cone.extend(comps);
                    cones.push(cone);
                }
            }
        }
    }
    prog.close_nonneg();
    for cone in cones {
        prog.soc(cone);
    }

    let n_con = prog.b.len();
    let a = CscMatrix::new_from_triplets(n_con, n_var, prog.rows_i, prog.cols_j, prog.vals);
    let p = CscMatrix::zeros((n_var, n_var));
    let mut q = vec![0.0; n_var];
    q[..m].copy_from_slice(step.objective.as_slice());
    let settings = DefaultSettings {
        verbose: false,
        max_iter: cfg.max_iter,
        tol_gap_abs: cfg.tolerance,
        tol_gap_rel: cfg.tolerance,
        tol_feas: cfg.tolerance,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p, &q, &a, &prog.b, &prog.cones, settings)
        .map_err(|e| Error::Parameter(format!("hour {}: solver setup failed: {e}", step.hour)))?;
    solver.solve();
    let sol = &solver.solution;
    let alpha: Vec<f64> = sol.x[..m].iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::AlmostSolved => {
            let worst = step
                .rows
                .iter()
                .map(|r| problem.row_lhs(step, r, &alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            if worst <= REDUCED_ACCURACY_TOL {
                log::warn!(
                    "hour {}: reduced-accuracy solve accepted (max row {worst:.2e})",
                    step.hour
                );
                SolveStatus::Optimal
            } else {
                SolveStatus::NumericalLimit
            }
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
        other => {
            log::warn!("hour {}: solver stopped with {other:?}", step.hour);
            SolveStatus::NumericalLimit
        }
    };
    let alpha = if status == SolveStatus::Infeasible {
        vec![0.0; m]
    } else {
        alpha
    };
    Ok(finish(alpha, status))
}

/// The row that is furthest from feasible even at the dispatch most
/// favourable to its mean part.
fn infeasibility_hint(problem: &DispatchProblem, step: &TimeStep) -> String {
    let layout = problem.layout();
    let mut worst: Option<(f64, &ChanceRow)> = None;
    for row in &step.rows {
        let (_, coef) = mean_part(layout, step, row);
        let best: Vec<f64> = coef.iter().map(|c| if *c > 0.0 { -1.0 } else { 1.0 }).collect();
        let lhs = problem.row_lhs(step, row, &best);
        if worst.is_none_or(|(w, _)| lhs > w) {
            worst = Some((lhs, row));
        }
    }
    match worst {
        Some((lhs, row)) => {
            let (bus, phase) = &layout.nodes[row.node];
            let side = match row.side {
                Side::Upper => "upper",
                Side::Lower => "lower",
            };
            format!(
                "hour {} bus {bus} phase {phase} {side} voltage row: {lhs:.3e} > 0 at the most favourable dispatch",
                row.hour
            )
        }
        None => "no constraint rows".to_string(),
    }
}
