//! Unbalanced three-phase radial feeder and its linear voltage model.
//!
//! Non-root buses are numbered in breadth-first order from the root and each
//! bus owns the line that feeds it. A *node* is a (bus, phase) pair of a
//! non-root bus; nodes are the rows of every matrix built here. Missing phases
//! are removed from the matrices rather than zero-padded, so the reduced
//! incidence matrix stays square and invertible.
//!
//! Line sign convention: the incidence row of a line carries `+1` on the
//! upstream (parent) phase and `-1` on the downstream phase, so that
//! `A0 v0 + A v = 2 D_r P + 2 D_x Q` and, with `A^T P = p` for injections
//! `p`, the squared voltages are `v = v_tilde + R p + X q` with
//! `R = 2 A^-1 D_r A^-T`, `X = 2 A^-1 D_x A^-T` and `v_tilde = -A^-1 A0 v0`.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::load::{PvInverter, ZipLoad};
use crate::phase::{Phase, PhaseSet};

pub type Mat3 = [[f64; 3]; 3];

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: String,
    pub phases: PhaseSet,
    #[serde(default)]
    pub zip: ZipLoad,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pv: Option<PvInverter>,
}

impl Bus {
    pub fn new(id: impl Into<String>, phases: PhaseSet) -> Self {
        Bus {
            id: id.into(),
            phases,
            zip: ZipLoad::default(),
            pv: None,
        }
    }

    pub fn with_pv(mut self, s_cap: f64) -> Self {
        self.pv = Some(PvInverter { s_cap, phases: None });
        self
    }

    pub fn with_zip(mut self, zip: ZipLoad) -> Self {
        self.zip = zip;
        self
    }

    /// Phases that carry an inverter.
    pub fn pv_phases(&self) -> PhaseSet {
        match &self.pv {
            Some(pv) => match pv.phases {
                Some(p) => p.iter().filter(|ph| self.phases.contains(*ph)).collect(),
                None => self.phases,
            },
            None => PhaseSet::empty(),
        }
    }
}

/// Three-phase line with per-unit series resistance and reactance matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: String,
    pub to: String,
    pub r: Mat3,
    pub x: Mat3,
}

impl Line {
    /// Uncoupled line with the same self impedance on the given phases.
    pub fn uncoupled(from: impl Into<String>, to: impl Into<String>, phases: PhaseSet, r: f64, x: f64) -> Self {
        let mut rm = [[0.0; 3]; 3];
        let mut xm = [[0.0; 3]; 3];
        for p in phases.iter() {
            rm[p.index()][p.index()] = r;
            xm[p.index()][p.index()] = x;
        }
        Line {
            from: from.into(),
            to: to.into(),
            r: rm,
            x: xm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feeder {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub root: String,
    /// Squared feeder-head voltage per phase (per-unit^2).
    pub v0: [f64; 3],
    pub base_voltage_kv: f64,
    pub base_power_kva: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DuplicateBus,
    EmptyPhases,
    UnknownRoot,
    DanglingEndpoint,
    NotRadial,
    Cycle,
    Disconnected,
    PhaseMismatch,
    Impedance,
    BadParameter,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    fn push(&mut self, kind: ViolationKind, message: String) {
        self.violations.push(Violation { kind, message });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// A phase of a non-root bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Node {
    pub bus: usize,
    pub phase: Phase,
}

/// Breadth-first orientation of a validated radial feeder.
#[derive(Debug, Clone)]
pub struct Topology {
    pub root: usize,
    /// Non-root buses in breadth-first order.
    pub order: Vec<usize>,
    pub parent: Vec<Option<usize>>,
    /// Index into `Feeder::lines` of the line feeding each bus.
    pub feeding_line: Vec<Option<usize>>,
    pub nodes: Vec<Node>,
    node_index: HashMap<(usize, Phase), usize>,
}

impl Topology {
    pub fn node_index(&self, bus: usize, phase: Phase) -> Option<usize> {
        self.node_index.get(&(bus, phase)).copied()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

impl Feeder {
    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn bus(&self, id: &str) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn root_index(&self) -> Option<usize> {
        self.bus_index(&self.root)
    }

    /// Checks every structural invariant and lists all violations found.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, b) in self.buses.iter().enumerate() {
            if index.insert(b.id.as_str(), i).is_some() {
                report.push(ViolationKind::DuplicateBus, format!("duplicate bus id {:?}", b.id));
            }
            if b.phases.is_empty() {
                report.push(ViolationKind::EmptyPhases, format!("bus {:?} has no phases", b.id));
            }
            if let Err(e) = b.zip.check() {
                report.push(ViolationKind::BadParameter, format!("bus {:?}: {e}", b.id));
            }
            if let Some(pv) = &b.pv {
                if !(pv.s_cap >= 0.0) || !pv.s_cap.is_finite() {
                    report.push(
                        ViolationKind::BadParameter,
                        format!("bus {:?}: negative inverter capacity {}", b.id, pv.s_cap),
                    );
                }
            }
        }
        if !index.contains_key(self.root.as_str()) {
            report.push(ViolationKind::UnknownRoot, format!("root {:?} is not a bus", self.root));
        }
        for (k, v) in self.v0.iter().enumerate() {
            if !(*v > 0.0) {
                report.push(
                    ViolationKind::BadParameter,
                    format!("v0[{}] = {v} must be positive", Phase::ALL[k]),
                );
            }
        }

        let n = self.buses.len();
        if self.lines.len() + 1 != n {
            report.push(
                ViolationKind::NotRadial,
                format!("not radial: |E| ≠ |N|−1 ({} lines, {} buses)", self.lines.len(), n),
            );
        }

        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (li, line) in self.lines.iter().enumerate() {
            let from = index.get(line.from.as_str()).copied();
            let to = index.get(line.to.as_str()).copied();
            match (from, to) {
                (Some(f), Some(t)) if f != t => {
                    adjacency[f].push((t, li));
                    adjacency[t].push((f, li));
                    let (pf, pt) = (self.buses[f].phases, self.buses[t].phases);
                    if !pt.is_subset_of(pf) && !pf.is_subset_of(pt) {
                        report.push(
                            ViolationKind::PhaseMismatch,
                            format!("line {}-{}: phases {pf} and {pt} are not nested", line.from, line.to),
                        );
                    }
                    check_impedance(line, pf, pt, &mut report);
                }
                (Some(_), Some(_)) => report.push(
                    ViolationKind::Cycle,
                    format!("line {}-{} is a self loop", line.from, line.to),
                ),
                _ => {
                    for (end, found) in [(&line.from, from), (&line.to, to)] {
                        if found.is_none() {
                            report.push(
                                ViolationKind::DanglingEndpoint,
                                format!(
                                    "dangling endpoint: line {}-{} references unknown bus {:?}",
                                    line.from, line.to, end
                                ),
                            );
                        }
                    }
                }
            }
        }

        if let Some(&root) = index.get(self.root.as_str()) {
            let mut seen = vec![false; n];
            let mut used_line = vec![false; self.lines.len()];
            let mut queue = VecDeque::from([root]);
            seen[root] = true;
            let mut cycle_reported = false;
            while let Some(u) = queue.pop_front() {
                for &(w, li) in &adjacency[u] {
                    if used_line[li] {
                        continue;
                    }
                    used_line[li] = true;
                    if seen[w] {
                        if !cycle_reported {
                            report.push(
                                ViolationKind::Cycle,
                                format!("cycle closed by line {}-{}", self.lines[li].from, self.lines[li].to),
                            );
                            cycle_reported = true;
                        }
                        continue;
                    }
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
            for (i, s) in seen.iter().enumerate() {
                if !s {
                    report.push(
                        ViolationKind::Disconnected,
                        format!("bus {:?} is not connected to the root", self.buses[i].id),
                    );
                }
            }
        }
        report
    }

    /// Orients the feeder away from the root. Fails unless `validate` passes.
    pub fn topology(&self) -> Result<Topology> {
        let report = self.validate();
        if !report.is_ok() {
            return Err(Error::InvalidFeeder(report.to_string()));
        }
        let n = self.buses.len();
        let root = self.root_index().expect("validated");
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (li, line) in self.lines.iter().enumerate() {
            let f = self.bus_index(&line.from).expect("validated");
            let t = self.bus_index(&line.to).expect("validated");
            adjacency[f].push((t, li));
            adjacency[t].push((f, li));
        }
        let mut parent = vec![None; n];
        let mut feeding_line = vec![None; n];
        let mut order = Vec::with_capacity(n - 1);
        let mut seen = vec![false; n];
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &(w, li) in &adjacency[u] {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = Some(u);
                    feeding_line[w] = Some(li);
                    order.push(w);
                    queue.push_back(w);
                }
            }
        }
        let mut nodes = Vec::new();
        let mut node_index = HashMap::new();
        for &b in &order {
            let child = self.buses[b].phases;
            let up = self.buses[parent[b].expect("non-root")].phases;
            if !child.is_subset_of(up) {
                return Err(Error::InvalidFeeder(format!(
                    "bus {:?} has phases {child} not served by its parent ({up})",
                    self.buses[b].id
                )));
            }
            for phase in child.iter() {
                node_index.insert((b, phase), nodes.len());
                nodes.push(Node { bus: b, phase });
            }
        }
        Ok(Topology {
            root,
            order,
            parent,
            feeding_line,
            nodes,
            node_index,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Feeder> {
        let file: FeederFile = serde_json::from_str(s)?;
        file.into_feeder()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Feeder> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&FeederFile::from_feeder(self))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

#[allow(clippy::needless_range_loop)]
fn check_impedance(line: &Line, pf: PhaseSet, pt: PhaseSet, report: &mut ValidationReport) {
    let phases: PhaseSet = pf.iter().filter(|p| pt.contains(*p)).collect();
    let name = format!("line {}-{}", line.from, line.to);
    for (label, m) in [("r", &line.r), ("x", &line.x)] {
        for i in 0..3 {
            for j in 0..3 {
                let v = m[i][j];
                if !v.is_finite() {
                    report.push(
                        ViolationKind::Impedance,
                        format!("{name}: {label}[{i}][{j}] not finite"),
                    );
                    continue;
                }
                if (v - m[j][i]).abs() > SYMMETRY_TOL * (1.0 + v.abs()) {
                    report.push(ViolationKind::Impedance, format!("{name}: {label} not symmetric"));
                    return;
                }
                let present = phases.contains(Phase::ALL[i]) && phases.contains(Phase::ALL[j]);
                if !present && v != 0.0 {
                    report.push(
                        ViolationKind::Impedance,
                        format!("{name}: {label}[{i}][{j}] nonzero for absent phase"),
                    );
                }
            }
        }
    }
    for i in 0..3 {
        if line.r[i][i] < 0.0 {
            report.push(
                ViolationKind::Impedance,
                format!("{name}: negative resistance on diagonal"),
            );
        }
    }
}

/// Checks the radial invariants, returning them as a report.
pub fn validate_radial(feeder: &Feeder) -> ValidationReport {
    feeder.validate()
}

/// Rotation matrix `Γ[φ][ψ] = α^(φ-ψ)` with `α = exp(-i 2π/3)`.
pub fn phase_rotation() -> [[Complex64; 3]; 3] {
    let mut g = [[Complex64::new(0.0, 0.0); 3]; 3];
    for (i, row) in g.iter_mut().enumerate() {
        for (j, e) in row.iter_mut().enumerate() {
            let k = i as f64 - j as f64;
            *e = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI / 3.0 * k);
        }
    }
    g
}

/// Effective resistance and reactance used in the three-phase voltage drop:
/// `r̄ = Re(Γ)∘r + Im(Γ)∘x`, `x̄ = Re(Γ)∘x − Im(Γ)∘r`.
///
/// This is the small-unbalance approximation that assumes phase voltages
/// stay 120° apart.
pub fn three_phase_effective_impedance(line: &Line) -> (Mat3, Mat3) {
    let g = phase_rotation();
    let mut rb = [[0.0; 3]; 3];
    let mut xb = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (re, im) = (g[i][j].re, g[i][j].im);
            rb[i][j] = re * line.r[i][j] + im * line.x[i][j];
            xb[i][j] = re * line.x[i][j] - im * line.r[i][j];
        }
    }
    (rb, xb)
}

/// Reduced incidence matrices. Rows are line phases (one per node, the line
/// feeding the node's bus); `a0` columns are the root phases a, b, c and `a`
/// columns are nodes.
#[derive(Debug, Clone)]
pub struct IncidencePair {
    pub a0: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

pub fn build_incidence(topo: &Topology) -> IncidencePair {
    let n = topo.n_nodes();
    let mut a0 = DMatrix::zeros(n, 3);
    let mut a = DMatrix::zeros(n, n);
    for (row, node) in topo.nodes.iter().enumerate() {
        let up = topo.parent[node.bus].expect("non-root");
        a[(row, row)] = -1.0;
        if up == topo.root {
            a0[(row, node.phase.index())] = 1.0;
        } else {
            let col = topo
                .node_index(up, node.phase)
                .expect("child phases are a subset of the parent's");
            a[(row, col)] = 1.0;
        }
    }
    IncidencePair { a0, a }
}

/// Linear squared-voltage model `v = v_tilde + R p + X q` over nodes, with
/// injections positive into the bus.
#[derive(Debug, Clone)]
pub struct SensitivityModel {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub v_tilde: DVector<f64>,
}

impl SensitivityModel {
    pub fn n_nodes(&self) -> usize {
        self.v_tilde.len()
    }

    pub fn voltages(&self, p: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        &self.v_tilde + &self.r * p + &self.x * q
    }
}

/// Block-diagonal stacks of the effective line matrices, reduced to the
/// phases of each downstream bus.
pub fn impedance_blocks(feeder: &Feeder, topo: &Topology) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = topo.n_nodes();
    let mut dr = DMatrix::zeros(n, n);
    let mut dx = DMatrix::zeros(n, n);
    for &bus in &topo.order {
        let line = &feeder.lines[topo.feeding_line[bus].expect("non-root")];
        let (rb, xb) = three_phase_effective_impedance(line);
        for pi in feeder.buses[bus].phases.iter() {
            let i = topo.node_index(bus, pi).expect("node");
            for pj in feeder.buses[bus].phases.iter() {
                let j = topo.node_index(bus, pj).expect("node");
                dr[(i, j)] = rb[pi.index()][pj.index()];
                dx[(i, j)] = xb[pi.index()][pj.index()];
            }
        }
    }
    (dr, dx)
}

pub fn build_sensitivities(feeder: &Feeder, topo: &Topology, incidence: &IncidencePair) -> Result<SensitivityModel> {
    let n = topo.n_nodes();
    let lu = incidence.a.clone().lu();
    let a_inv = lu.try_inverse().ok_or(Error::SingularIncidence)?;
    if a_inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularIncidence);
    }
    let (dr, dx) = impedance_blocks(feeder, topo);
    let a_inv_t = a_inv.transpose();
    let r = (&a_inv * dr * &a_inv_t) * 2.0;
    let x = (&a_inv * dx * &a_inv_t) * 2.0;
    let v0 = DVector::from_column_slice(&feeder.v0);
    let v_tilde = -(&a_inv * &incidence.a0 * v0);
    debug_assert_eq!(v_tilde.len(), n);
    Ok(SensitivityModel { r, x, v_tilde })
}

/// Topology, incidence and sensitivities bundled for downstream use.
#[derive(Debug, Clone)]
pub struct LinearNetwork {
    pub topology: Topology,
    pub incidence: IncidencePair,
    pub sensitivity: SensitivityModel,
}

impl LinearNetwork {
    pub fn build(feeder: &Feeder) -> Result<Self> {
        let topology = feeder.topology()?;
        let incidence = build_incidence(&topology);
        let sensitivity = build_sensitivities(feeder, &topology, &incidence)?;
        Ok(LinearNetwork {
            topology,
            incidence,
            sensitivity,
        })
    }
}

// ---------------------------------------------------------------------------
// File format. Matrices are per-unit; inverter capacity is given in kVA and
// converted with the feeder's base power.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeederFile {
    buses: Vec<BusFile>,
    lines: Vec<Line>,
    root: String,
    v0: V0,
    base_voltage_kv: f64,
    base_power_kva: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusFile {
    id: String,
    phases: PhaseSet,
    #[serde(default)]
    zip: ZipLoad,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pv: Option<PvFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PvFile {
    s_cap_kva: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phases: Option<PhaseSet>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum V0 {
    Uniform(f64),
    PerPhase([f64; 3]),
}

impl FeederFile {
    fn into_feeder(self) -> Result<Feeder> {
        if !(self.base_power_kva > 0.0) {
            return Err(Error::InvalidFeeder(format!(
                "base_power_kva must be positive, got {}",
                self.base_power_kva
            )));
        }
        let base = self.base_power_kva;
        let buses = self
            .buses
            .into_iter()
            .map(|b| Bus {
                id: b.id,
                phases: b.phases,
                zip: b.zip,
                pv: b.pv.map(|pv| PvInverter {
                    s_cap: pv.s_cap_kva / base,
                    phases: pv.phases,
                }),
            })
            .collect();
        let v0 = match self.v0 {
            V0::Uniform(v) => [v; 3],
            V0::PerPhase(v) => v,
        };
        Ok(Feeder {
            buses,
            lines: self.lines,
            root: self.root,
            v0,
            base_voltage_kv: self.base_voltage_kv,
            base_power_kva: self.base_power_kva,
        })
    }

    fn from_feeder(f: &Feeder) -> FeederFile {
        let v0 = if f.v0.iter().all(|v| *v == f.v0[0]) {
            V0::Uniform(f.v0[0])
        } else {
            V0::PerPhase(f.v0)
        };
        FeederFile {
            buses: f
                .buses
                .iter()
                .map(|b| BusFile {
                    id: b.id.clone(),
                    phases: b.phases,
                    zip: b.zip,
                    pv: b.pv.map(|pv| PvFile {
                        s_cap_kva: pv.s_cap * f.base_power_kva,
                        phases: pv.phases,
                    }),
                })
                .collect(),
            lines: f.lines.clone(),
            root: f.root.clone(),
            v0,
            base_voltage_kv: f.base_voltage_kv,
            base_power_kva: f.base_power_kva,
        }
    }
}
