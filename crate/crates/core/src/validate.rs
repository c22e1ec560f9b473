//! Out-of-sample checks of a dispatch: the nonlinear power-flow oracle,
//! Monte-Carlo violation rates and the energy comparison across modes.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dispatch::{
    build_problem, solve_dispatch, BoxInterpretation, DispatchProblem, DispatchSolution, Mode, ProblemOptions,
    RobustBox, Side, SolveStatus, SolverConfig, TimeStep, UncertaintyLayout,
};
use crate::enrich::moments::{psd_sqrt, MomentAmbiguitySet};
use crate::enrich::task_seed;
use crate::error::{Error, Result};
use crate::feeder::Feeder;
use crate::phase::Phase;

pub const SWEEP_TOL: f64 = 1e-10;
pub const SWEEP_MAX_ITER: usize = 200;
pub const MIN_SAMPLES: usize = 1000;
const BLOCK: usize = 2000;
const Z95: f64 = 1.959_963_984_540_054;

/// Per-node powers for the nonlinear sweep, in layout node order.
/// Loads are rated powers at 1 pu voltage, generation is an injection.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePowers {
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
    pub p_gen: Vec<f64>,
    pub q_gen: Vec<f64>,
}

impl NodePowers {
    /// Powers implied by one uncertainty realization and dispatch.
    pub fn from_xi(layout: &UncertaintyLayout, xi: &[f64], alpha: &[f64]) -> Self {
        let n = layout.n_nodes();
        let mut out = NodePowers {
            p_load: (0..n).map(|j| xi[layout.p_load(j)]).collect(),
            q_load: (0..n).map(|j| xi[layout.q_load(j)]).collect(),
            p_gen: vec![0.0; n],
            q_gen: vec![0.0; n],
        };
        for (k, slot) in layout.pv.iter().enumerate() {
            out.p_gen[slot.node] += xi[layout.p_gen(k)];
            out.q_gen[slot.node] += alpha[k] * xi[layout.q_cap(k)];
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    /// Complex phase voltages per node.
    pub voltages: Vec<Complex64>,
    /// Squared magnitudes per node.
    pub v_sq: DVector<f64>,
    pub iterations: usize,
}

/// Three-phase forward/backward sweep with exact ZIP loads.
pub fn nonlinear_sweep(feeder: &Feeder, powers: &NodePowers) -> Result<SweepResult> {
    let topo = feeder.topology()?;
    let n = topo.n_nodes();
    for (name, v) in [
        ("p_load", &powers.p_load),
        ("q_load", &powers.q_load),
        ("p_gen", &powers.p_gen),
        ("q_gen", &powers.q_gen),
    ] {
        if v.len() != n {
            return Err(Error::Layout(format!(
                "{name} has {} entries, feeder has {n} nodes",
                v.len()
            )));
        }
    }
    let angle = |p: Phase| -2.0 * std::f64::consts::PI / 3.0 * [0.0, 1.0, -1.0][p.index()];
    let source: Vec<Complex64> = Phase::ALL
        .iter()
        .map(|&p| Complex64::from_polar(feeder.v0[p.index()].sqrt(), angle(p)))
        .collect();
    let mut v: Vec<Complex64> = topo.nodes.iter().map(|nd| source[nd.phase.index()]).collect();

    // node index of each (bus, phase), used to walk parents
    let node_of = |bus: usize, p: Phase| topo.node_index(bus, p);
    let mut mismatch = f64::INFINITY;
    for iter in 1..=SWEEP_MAX_ITER {
        // backward: injection currents then branch currents, leaves first
        let mut branch = vec![Complex64::new(0.0, 0.0); n];
        for (i, nd) in topo.nodes.iter().enumerate() {
            let zip = &feeder.buses[nd.bus].zip;
            let vsq = v[i].norm_sqr();
            let p = zip.kp.power_exact(vsq, powers.p_load[i])? - powers.p_gen[i];
            let q = zip.kq.power_exact(vsq, powers.q_load[i])? - powers.q_gen[i];
            branch[i] = (Complex64::new(p, q) / v[i]).conj();
        }
        for &bus in topo.order.iter().rev() {
            let Some(parent) = topo.parent[bus] else { continue };
            for p in feeder.buses[bus].phases.iter() {
                if let (Some(c), Some(up)) = (node_of(bus, p), node_of(parent, p)) {
                    let cur = branch[c];
                    branch[up] += cur;
                }
            }
        }
        // forward: voltages from the root down
        let mut next = v.clone();
        for &bus in &topo.order {
            let line = &feeder.lines[topo.feeding_line[bus].expect("non-root bus has a feeding line")];
            let parent = topo.parent[bus].expect("non-root bus has a parent");
            let phases = feeder.buses[bus].phases;
            for p in phases.iter() {
                let c = node_of(bus, p).expect("bus phase is a node");
                let up = match node_of(parent, p) {
                    Some(u) => next[u],
                    None => source[p.index()],
                };
                let mut drop = Complex64::new(0.0, 0.0);
                for q in phases.iter() {
                    let z = Complex64::new(line.r[p.index()][q.index()], line.x[p.index()][q.index()]);
                    drop += z * branch[node_of(bus, q).expect("bus phase is a node")];
                }
                next[c] = up - drop;
            }
        }
        mismatch = next.iter().zip(&v).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        v = next;
        if !mismatch.is_finite() {
            break;
        }
        if mismatch < SWEEP_TOL {
            let v_sq = DVector::from_iterator(n, v.iter().map(|x| x.norm_sqr()));
            return Ok(SweepResult {
                voltages: v,
                v_sq,
                iterations: iter,
            });
        }
    }
    Err(Error::OracleDivergence {
        iterations: SWEEP_MAX_ITER,
        mismatch,
    })
}

/// Largest gap between the affine and nonlinear squared voltages at one
/// realization.
pub fn linearization_error(feeder: &Feeder, problem: &DispatchProblem, xi: &[f64], alpha: &[f64]) -> Result<f64> {
    let affine = problem.model.voltages(xi, alpha)?;
    let exact = nonlinear_sweep(feeder, &NodePowers::from_xi(problem.layout(), xi, alpha))?;
    Ok((affine - exact.v_sq).amax())
}

/// Two-sided 95% Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = Z95 * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if k == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowViolation {
    pub bus: String,
    pub phase: Phase,
    pub hour: usize,
    pub side: Side,
    pub rate: f64,
    pub ci95: (f64, f64),
}

/// Target versus realized moments of one hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub hour: usize,
    pub max_mean_gap: f64,
    pub max_var_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub samples: usize,
    pub seed: u64,
    pub rows: Vec<RowViolation>,
    pub moments: Vec<MomentCheck>,
}

impl ViolationReport {
    pub fn worst(&self) -> Option<&RowViolation> {
        self.rows.iter().max_by(|a, b| a.rate.total_cmp(&b.rate))
    }
}

fn row_label(layout: &UncertaintyLayout, node: usize) -> (String, Phase) {
    let (bus, phase) = &layout.nodes[node];
    (bus.clone(), *phase)
}

/// Draws `n` Gaussian samples per hour clipped to the support and counts
/// how often each row is violated under the solved dispatch.
pub fn monte_carlo_violation(
    problem: &DispatchProblem,
    solution: &DispatchSolution,
    n: usize,
    seed: u64,
) -> Result<ViolationReport> {
    if n < MIN_SAMPLES {
        return Err(Error::Parameter(format!(
            "need at least {MIN_SAMPLES} samples, got {n}"
        )));
    }
    let layout = problem.layout();
    let alphas = solution.alpha_by_hour(layout)?;
    let (lo, hi) = layout.support();
    let mut rows = Vec::new();
    let mut moments = Vec::new();
    for step in &problem.steps {
        let alpha = &alphas[step.hour];
        let blocks: Vec<usize> = (0..n.div_ceil(BLOCK)).collect();
        let partial: Vec<(Vec<usize>, DVector<f64>, DVector<f64>)> = blocks
            .par_iter()
            .map(|&b| {
                let count = BLOCK.min(n - b * BLOCK);
                let mut rng = ChaCha8Rng::seed_from_u64(task_seed(seed, &format!("mc/{}", step.hour), b as i64));
                let dim = layout.dim();
                let mut hits = vec![0usize; step.rows.len()];
                let mut sum = DVector::zeros(dim);
                let mut sq = DVector::zeros(dim);
                for _ in 0..count {
                    let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let mut xi = &step.mu + &step.sigma_sqrt * z;
                    for i in 0..dim {
                        xi[i] = xi[i].clamp(lo[i], hi[i]);
                    }
                    let d = &xi - &step.mu;
                    sum += &xi;
                    sq += d.component_mul(&d);
                    for (r, row) in step.rows.iter().enumerate() {
                        if row.value(layout, alpha, xi.as_slice()) > 0.0 {
                            hits[r] += 1;
                        }
                    }
                }
                (hits, sum, sq)
            })
            .collect();
        let mut hits = vec![0usize; step.rows.len()];
        let mut sum = DVector::zeros(layout.dim());
        let mut sq = DVector::zeros(layout.dim());
        for (h, s, q) in partial {
            hits.iter_mut().zip(h).for_each(|(a, b)| *a += b);
            sum += s;
            sq += q;
        }
        let nf = n as f64;
        let mean = sum / nf;
        let max_mean_gap = (&mean - &step.mu).amax();
        // second moment about the target mean, corrected for the mean shift
        let var = DVector::from_fn(layout.dim(), |i, _| sq[i] / nf - (mean[i] - step.mu[i]).powi(2));
        let max_var_gap = (0..layout.dim())
            .map(|i| (var[i] - step.sigma[(i, i)]).abs())
            .fold(0.0, f64::max);
        moments.push(MomentCheck {
            hour: step.hour,
            max_mean_gap,
            max_var_gap,
        });
        for (row, k) in step.rows.iter().zip(hits) {
            let (bus, phase) = row_label(layout, row.node);
            rows.push(RowViolation {
                bus,
                phase,
                hour: step.hour,
                side: row.side,
                rate: k as f64 / nf,
                ci95: wilson_interval(k, n),
            });
        }
    }
    Ok(ViolationReport {
        samples: n,
        seed,
        rows,
        moments,
    })
}

/// The row whose DRCC left-hand side is closest to binding, among rows
/// with nonzero spread: `(hour, row index)`.
pub fn binding_row(problem: &DispatchProblem, solution: &DispatchSolution) -> Result<Option<(usize, usize)>> {
    let layout = problem.layout();
    let alphas = solution.alpha_by_hour(layout)?;
    let mut best: Option<(f64, usize, usize)> = None;
    for step in &problem.steps {
        let alpha = &alphas[step.hour];
        for (r, row) in step.rows.iter().enumerate() {
            let (_, std) = row.mean_and_std(layout, alpha, step.mu.as_slice(), &step.sigma_sqrt);
            if std <= 1e-12 {
                continue;
            }
            let lhs = problem.row_lhs(step, row, alpha);
            if best.is_none_or(|(b, _, _)| lhs > b) {
                best = Some((lhs, step.hour, r));
            }
        }
    }
    Ok(best.map(|(_, h, r)| (h, r)))
}

/// Violation rate of one row under the extremal two-point law that matches
/// the hour's mean and covariance and puts mass `epsilon` at
/// `a.mu + b + kappa sigma_a`. Samples are stratified on the two-point
/// coordinate; the rest of the covariance is Gaussian and orthogonal to the
/// row. Not clipped to the support.
pub fn two_point_violation(
    problem: &DispatchProblem,
    solution: &DispatchSolution,
    hour: usize,
    row_index: usize,
    epsilon: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n < MIN_SAMPLES {
        return Err(Error::Parameter(format!(
            "need at least {MIN_SAMPLES} samples, got {n}"
        )));
    }
    let kappa = crate::dispatch::soc_radius(epsilon)?;
    let layout = problem.layout();
    let step: &TimeStep = problem
        .steps
        .iter()
        .find(|s| s.hour == hour)
        .ok_or_else(|| Error::Parameter(format!("hour {hour} is outside the horizon")))?;
    let row = step
        .rows
        .get(row_index)
        .ok_or_else(|| Error::Parameter(format!("hour {hour} has no row {row_index}")))?;
    let alpha = &solution.alpha_by_hour(layout)?[hour];
    let a = row.coefficients(layout, alpha);
    let sa = &step.sigma * &a;
    let std = a.dot(&sa).max(0.0).sqrt();
    if std <= 1e-12 {
        return Err(Error::Parameter(format!(
            "row {row_index} of hour {hour} has no spread"
        )));
    }
    let w = sa / std;
    let rest: DMatrix<f64> = psd_sqrt(&(&step.sigma - &w * w.transpose()));
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed(seed, "two-point", hour as i64));
    let mut hits = 0usize;
    for i in 0..n {
        let u = (i as f64 + rng.gen::<f64>()) / n as f64;
        let z = if u < epsilon { kappa } else { -1.0 / kappa };
        let eta = DVector::from_fn(layout.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let xi = &step.mu + &w * z + &rest * eta;
        // tolerate the solver's feasibility slack at the atom
        if row.value(layout, alpha, xi.as_slice()) > -1e-7 {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeEnergy {
    pub label: String,
    pub mode: String,
    pub epsilon: Option<f64>,
    pub status: SolveStatus,
    pub energy_kwh: Option<f64>,
    pub reduction_pct: Option<f64>,
    pub solve_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub base_kwh: f64,
    pub modes: Vec<ModeEnergy>,
}

/// Display label of a mode.
pub fn mode_label(mode: &Mode) -> String {
    match mode {
        Mode::Deterministic => "Deter".into(),
        Mode::Robust(RobustBox {
            interpretation: BoxInterpretation::HalfWidth,
            ..
        }) => "RO".into(),
        Mode::Robust(RobustBox {
            interpretation: BoxInterpretation::Variance,
            ..
        }) => "RO (variance)".into(),
        Mode::Drcc { epsilon } => format!("DRCC (eps={epsilon})"),
    }
}

/// Expected energy without reactive support: `alpha = 0` at the mean.
pub fn base_energy_kwh(problem: &DispatchProblem) -> f64 {
    problem.steps.iter().map(|s| s.objective_const).sum::<f64>() * problem.base_power_kva
}

/// Solves every mode and compares expected energy against the
/// no-dispatch baseline.
pub fn energy_report(
    feeder: &Feeder,
    moments: &MomentAmbiguitySet,
    modes: &[Mode],
    horizon: usize,
    options: &ProblemOptions,
    cfg: &SolverConfig,
) -> Result<(EnergyReport, Vec<(DispatchProblem, DispatchSolution)>)> {
    let mut base = None;
    let mut rows = Vec::with_capacity(modes.len());
    let mut solved = Vec::with_capacity(modes.len());
    for mode in modes {
        let problem = build_problem(feeder, moments, *mode, horizon, options)?;
        let b = *base.get_or_insert_with(|| base_energy_kwh(&problem));
        let sol = solve_dispatch(&problem, cfg)?;
        rows.push(ModeEnergy {
            label: mode_label(mode),
            mode: mode.name().into(),
            epsilon: mode.epsilon(),
            status: sol.status,
            energy_kwh: sol.objective_kwh,
            reduction_pct: sol.objective_kwh.map(|e| 100.0 * (b - e) / b),
            solve_ms: sol.solve_ms,
        });
        solved.push((problem, sol));
    }
    let base_kwh = match base {
        Some(b) => b,
        None => {
            let problem = build_problem(feeder, moments, Mode::Deterministic, horizon, options)?;
            base_energy_kwh(&problem)
        }
    };
    Ok((EnergyReport { base_kwh, modes: rows }, solved))
}

impl EnergyReport {
    /// Plain-text comparison table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<18} {:>14} {:>14}\n", "Mode", "Energy (kWh)", "Reduction (%)");
        out += &format!("{:<18} {:>14.3} {:>14}\n", "Base", self.base_kwh, "-");
        for m in &self.modes {
            let energy = m
                .energy_kwh
                .map_or_else(|| format!("{:?}", m.status), |e| format!("{e:.3}"));
            let red = m.reduction_pct.map_or_else(|| "-".into(), |r| format!("{r:.3}"));
            out += &format!("{:<18} {:>14} {:>14}\n", m.label, energy, red);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyEntry {
    pub energy_kwh: Option<f64>,
    pub reduction_pct: Option<f64>,
    pub status: SolveStatus,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySection {
    pub base: f64,
    pub modes: BTreeMap<String, EnergyEntry>,
}

/// Contents of `report.json`. Timings live only under `timing_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<RowViolation>,
    pub energy: EnergySection,
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub moments: Vec<MomentCheck>,
    #[serde(default)]
    pub timing_ms: BTreeMap<String, f64>,
}

impl ValidationReport {
    pub fn new(violations: &ViolationReport, energy: &EnergyReport) -> Self {
        let modes = energy
            .modes
            .iter()
            .map(|m| {
                (
                    m.label.clone(),
                    EnergyEntry {
                        energy_kwh: m.energy_kwh,
                        reduction_pct: m.reduction_pct,
                        status: m.status,
                        epsilon: m.epsilon,
                    },
                )
            })
            .collect();
        ValidationReport {
            violations: violations.rows.clone(),
            energy: EnergySection {
                base: energy.base_kwh,
                modes,
            },
            seeds: BTreeMap::from([("monte_carlo".to_string(), violations.seed)]),
            moments: violations.moments.clone(),
            timing_ms: energy.modes.iter().map(|m| (m.label.clone(), m.solve_ms)).collect(),
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
