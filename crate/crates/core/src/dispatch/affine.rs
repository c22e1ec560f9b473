//! Affine voltage model under uncertainty and the per-node chance rows.
//!
//! With linearized ZIP loads the squared voltages solve
//! `M(xi) v = N(xi, alpha)` where
//!
//! ```text
//! M(xi)        = I + R diag(s_p p_L) + X diag(s_q q_L)
//! N(xi, alpha) = v_tilde + R (p_g - o_p p_L) + X (alpha Q_cap - o_q q_L)
//! ```
//!
//! (`s`, `o` are ZIP slopes and offsets, injections positive). A voltage
//! bound `v_i <= c` is multiplied through row `i` of the denominator to give
//! `N_i - c (M 1)_i <= 0`, which is affine in `xi` for fixed `alpha`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::layout::UncertaintyLayout;
use crate::error::{Error, Result};
use crate::feeder::{Feeder, SensitivityModel, Topology};

#[derive(Debug, Clone)]
pub struct AffineVoltageModel {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub v_tilde: DVector<f64>,
    pub slope_p: DVector<f64>,
    pub offset_p: DVector<f64>,
    pub slope_q: DVector<f64>,
    pub offset_q: DVector<f64>,
    pub layout: UncertaintyLayout,
}

pub fn assemble_voltage_affine(
    sens: &SensitivityModel,
    feeder: &Feeder,
    topo: &Topology,
) -> Result<AffineVoltageModel> {
    let n = topo.n_nodes();
    if sens.n_nodes() != n {
        return Err(Error::Layout(format!(
            "sensitivities cover {} nodes, topology has {n}",
            sens.n_nodes()
        )));
    }
    let mut slope_p = DVector::zeros(n);
    let mut offset_p = DVector::zeros(n);
    let mut slope_q = DVector::zeros(n);
    let mut offset_q = DVector::zeros(n);
    for (i, node) in topo.nodes.iter().enumerate() {
        let zip = &feeder.buses[node.bus].zip;
        zip.check()?;
        slope_p[i] = zip.kp.slope();
        offset_p[i] = zip.kp.offset();
        slope_q[i] = zip.kq.slope();
        offset_q[i] = zip.kq.offset();
    }
    Ok(AffineVoltageModel {
        r: sens.r.clone(),
        x: sens.x.clone(),
        v_tilde: sens.v_tilde.clone(),
        slope_p,
        offset_p,
        slope_q,
        offset_q,
        layout: UncertaintyLayout::new(feeder, topo),
    })
}

impl AffineVoltageModel {
    pub fn n_nodes(&self) -> usize {
        self.v_tilde.len()
    }

    pub fn denominator(&self, xi: &[f64]) -> DMatrix<f64> {
        let n = self.n_nodes();
        let mut m = DMatrix::identity(n, n);
        for j in 0..n {
            let cp = self.slope_p[j] * xi[self.layout.p_load(j)];
            let cq = self.slope_q[j] * xi[self.layout.q_load(j)];
            for i in 0..n {
                m[(i, j)] += self.r[(i, j)] * cp + self.x[(i, j)] * cq;
            }
        }
        m
    }

    pub fn numerator(&self, xi: &[f64], alpha: &[f64]) -> DVector<f64> {
        let n = self.n_nodes();
        let mut p = DVector::zeros(n);
        let mut q = DVector::zeros(n);
        for j in 0..n {
            p[j] = -self.offset_p[j] * xi[self.layout.p_load(j)];
            q[j] = -self.offset_q[j] * xi[self.layout.q_load(j)];
        }
        for (k, slot) in self.layout.pv.iter().enumerate() {
            p[slot.node] += xi[self.layout.p_gen(k)];
            q[slot.node] += alpha[k] * xi[self.layout.q_cap(k)];
        }
        &self.v_tilde + &self.r * p + &self.x * q
    }

    /// Squared voltages at one uncertainty realization.
    pub fn voltages(&self, xi: &[f64], alpha: &[f64]) -> Result<DVector<f64>> {
        self.check_dims(xi, alpha)?;
        self.denominator(xi)
            .lu()
            .solve(&self.numerator(xi, alpha))
            .ok_or_else(|| Error::ModelValidity("voltage denominator is singular".into()))
    }

    /// Active power drawn from the substation (lossless), per unit.
    pub fn substation_power(&self, xi: &[f64], alpha: &[f64]) -> Result<f64> {
        let v = self.voltages(xi, alpha)?;
        let mut total = 0.0;
        for j in 0..self.n_nodes() {
            total += xi[self.layout.p_load(j)] * (self.slope_p[j] * v[j] + self.offset_p[j]);
        }
        for k in 0..self.layout.n_pv() {
            total -= xi[self.layout.p_gen(k)];
        }
        Ok(total)
    }

    /// `(c0, c)` with substation power `c0 + c . alpha` at the fixed `xi`.
    pub fn substation_power_affine(&self, xi: &[f64]) -> Result<(f64, DVector<f64>)> {
        let m = self.layout.n_pv();
        let zero = vec![0.0; m];
        let c0 = self.substation_power(xi, &zero)?;
        let lu = self.denominator(xi).lu();
        // weights of each node voltage in the power: p_L s_p
        let w = DVector::from_fn(self.n_nodes(), |j, _| xi[self.layout.p_load(j)] * self.slope_p[j]);
        let mut c = DVector::zeros(m);
        for (k, slot) in self.layout.pv.iter().enumerate() {
            let col = self.x.column(slot.node) * xi[self.layout.q_cap(k)];
            let dv = lu
                .solve(&col.into_owned())
                .ok_or_else(|| Error::ModelValidity("voltage denominator is singular".into()))?;
            c[k] = w.dot(&dv);
        }
        Ok((c0, c))
    }

    fn check_dims(&self, xi: &[f64], alpha: &[f64]) -> Result<()> {
        if xi.len() != self.layout.dim() || alpha.len() != self.layout.n_pv() {
            return Err(Error::Layout(format!(
                "expected {} uncertainty entries and {} dispatch ratios, got {} and {}",
                self.layout.dim(),
                self.layout.n_pv(),
                xi.len(),
                alpha.len()
            )));
        }
        Ok(())
    }
}

/// Elementwise bounds on the load multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierBox {
    pub p_lower: Vec<f64>,
    pub p_upper: Vec<f64>,
    pub q_lower: Vec<f64>,
    pub q_upper: Vec<f64>,
}

impl MultiplierBox {
    pub fn uniform(n: usize, lower: f64, upper: f64) -> Self {
        MultiplierBox {
            p_lower: vec![lower; n],
            p_upper: vec![upper; n],
            q_lower: vec![lower; n],
            q_upper: vec![upper; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenominatorReport {
    /// Smallest `M_ii - sum_{j != i} |M_ij|` over rows and box vertices.
    pub margin: f64,
    pub worst_node: Option<usize>,
}

impl DenominatorReport {
    pub fn pass(&self) -> bool {
        self.margin > 0.0
    }
}

/// Checks that `M(xi)` is row diagonally dominant with a positive diagonal
/// for every multiplier vertex of the box.
///
/// Each column's multipliers enter each row in one entry only, so the worst
/// vertex decouples per entry: the smallest diagonal and the largest
/// off-diagonal magnitudes are found independently.
pub fn check_denominator_positivity(model: &AffineVoltageModel, bx: &MultiplierBox) -> DenominatorReport {
    let n = model.n_nodes();
    let mut worst = DenominatorReport {
        margin: f64::INFINITY,
        worst_node: None,
    };
    if n == 0 {
        worst.margin = 1.0;
        return worst;
    }
    let vertices = |i: usize, j: usize| {
        let a = model.r[(i, j)] * model.slope_p[j];
        let b = model.x[(i, j)] * model.slope_q[j];
        [
            a * bx.p_lower[j] + b * bx.q_lower[j],
            a * bx.p_lower[j] + b * bx.q_upper[j],
            a * bx.p_upper[j] + b * bx.q_lower[j],
            a * bx.p_upper[j] + b * bx.q_upper[j],
        ]
    };
    for i in 0..n {
        let diag = 1.0 + vertices(i, i).into_iter().fold(f64::INFINITY, f64::min);
        let off: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| vertices(i, j).into_iter().map(f64::abs).fold(0.0, f64::max))
            .sum();
        let margin = diag - off;
        if margin < worst.margin {
            worst = DenominatorReport {
                margin,
                worst_node: Some(i),
            };
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Upper,
    Lower,
}

/// `a(alpha) . xi + b <= 0` for one node, hour and side. Only the `Q_cap`
/// entries depend on the decision: `a[q_cap(k)] = alpha_coef[k] * alpha[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChanceRow {
    pub node: usize,
    pub hour: usize,
    pub side: Side,
    pub a0: DVector<f64>,
    pub alpha_coef: Vec<f64>,
    pub b: f64,
}

impl ChanceRow {
    pub fn coefficients(&self, layout: &UncertaintyLayout, alpha: &[f64]) -> DVector<f64> {
        let mut a = self.a0.clone();
        for (k, (c, al)) in self.alpha_coef.iter().zip(alpha).enumerate() {
            a[layout.q_cap(k)] += c * al;
        }
        a
    }

    pub fn value(&self, layout: &UncertaintyLayout, alpha: &[f64], xi: &[f64]) -> f64 {
        let mut v = self.b + self.a0.iter().zip(xi).map(|(a, x)| a * x).sum::<f64>();
        for (k, (c, al)) in self.alpha_coef.iter().zip(alpha).enumerate() {
            v += c * al * xi[layout.q_cap(k)];
        }
        v
    }

    /// `(a(alpha).mu + b, ||S a(alpha)||)` for a covariance square root `S`.
    pub fn mean_and_std(
        &self,
        layout: &UncertaintyLayout,
        alpha: &[f64],
        mu: &[f64],
        sigma_sqrt: &DMatrix<f64>,
    ) -> (f64, f64) {
        let a = self.coefficients(layout, alpha);
        let mean = self.b + a.iter().zip(mu).map(|(x, y)| x * y).sum::<f64>();
        (mean, (sigma_sqrt * a).norm())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltageBounds {
    /// Squared-voltage limits.
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for VoltageBounds {
    fn default() -> Self {
        VoltageBounds {
            v_min: 0.95 * 0.95,
            v_max: 1.05 * 1.05,
        }
    }
}

/// Upper and lower rows for every monitored node at one hour.
pub fn assemble_chance_rows(
    model: &AffineVoltageModel,
    positivity: &DenominatorReport,
    bounds: VoltageBounds,
    monitored: &[usize],
    hour: usize,
) -> Result<Vec<ChanceRow>> {
    if !positivity.pass() {
        return Err(Error::ModelValidity(format!(
            "voltage denominator not diagonally dominant (margin {:.3e} at node {:?})",
            positivity.margin, positivity.worst_node
        )));
    }
    if !(bounds.v_min <= bounds.v_max) {
        return Err(Error::Parameter(format!(
            "v_min {} exceeds v_max {}",
            bounds.v_min, bounds.v_max
        )));
    }
    let layout = &model.layout;
    let n = model.n_nodes();
    let mut rows = Vec::with_capacity(2 * monitored.len());
    for &i in monitored {
        for side in [Side::Upper, Side::Lower] {
            let (sign, c) = match side {
                Side::Upper => (1.0, bounds.v_max),
                Side::Lower => (-1.0, bounds.v_min),
            };
            let mut a0 = DVector::zeros(layout.dim());
            for j in 0..n {
                a0[layout.p_load(j)] = -sign * model.r[(i, j)] * (c * model.slope_p[j] + model.offset_p[j]);
                a0[layout.q_load(j)] = -sign * model.x[(i, j)] * (c * model.slope_q[j] + model.offset_q[j]);
            }
            let mut alpha_coef = Vec::with_capacity(layout.n_pv());
            for (k, slot) in layout.pv.iter().enumerate() {
                a0[layout.p_gen(k)] = sign * model.r[(i, slot.node)];
                alpha_coef.push(sign * model.x[(i, slot.node)]);
            }
            rows.push(ChanceRow {
                node: i,
                hour,
                side,
                a0,
                alpha_coef,
                b: sign * (model.v_tilde[i] - c),
            });
        }
    }
    Ok(rows)
}

/// `kappa(eps) = sqrt((1 - eps) / eps)`.
pub fn soc_radius(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Parameter(format!("risk level {epsilon} must lie in (0, 1)")));
    }
    Ok(((1.0 - epsilon) / epsilon).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{Bus, Line, LinearNetwork};
    use crate::load::{ZipCoefficients, ZipLoad};
    use crate::phase::{Phase, PhaseSet};

    fn two_bus(zip: ZipLoad, pv: bool) -> (Feeder, AffineVoltageModel) {
        let a = PhaseSet::single(Phase::A);
        let mut load = Bus::new("1", a).with_zip(zip);
        if pv {
            load = load.with_pv(0.5);
        }
        let f = Feeder {
            buses: vec![Bus::new("0", a), load],
            lines: vec![Line::uncoupled("0", "1", a, 0.01, 0.02)],
            root: "0".into(),
            v0: [1.0; 3],
            base_voltage_kv: 4.16,
            base_power_kva: 100.0,
        };
        let net = LinearNetwork::build(&f).unwrap();
        let m = assemble_voltage_affine(&net.sensitivity, &f, &net.topology).unwrap();
        (f, m)
    }

    #[test]
    fn no_injections_give_v_tilde() {
        let (_, m) = two_bus(ZipLoad::default(), true);
        let v = m.voltages(&[0.0; 4], &[0.7]).unwrap();
        assert_eq!(v[0], 1.0);
    }

    #[test]
    fn constant_power_is_plain_lindistflow() {
        let (_, m) = two_bus(ZipLoad::constant_power(), false);
        assert_eq!(m.denominator(&[0.4, 0.3]), DMatrix::identity(1, 1));
        let v = m.voltages(&[0.4, 0.3], &[]).unwrap();
        // v = 1 - 2 r p - 2 x q
        assert!((v[0] - (1.0 - 0.02 * 0.4 - 0.04 * 0.3)).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_with_zip_loads() {
        let (_, m) = two_bus(ZipLoad::default(), true);
        let xi = [0.3, 0.2, 0.1, 0.4];
        let alpha = [-0.5];
        let v = m.voltages(&xi, &alpha).unwrap()[0];
        let kp = ZipCoefficients::DEFAULT_ACTIVE;
        let kq = ZipCoefficients::DEFAULT_REACTIVE;
        let p = 0.1 - 0.3 * kp.power_linearized(v, 1.0);
        let q = -0.5 * 0.4 - 0.2 * kq.power_linearized(v, 1.0);
        assert!((v - (1.0 + 0.02 * p + 0.04 * q)).abs() < 1e-14);
    }

    #[test]
    fn hand_expanded_rows() {
        let (_, m) = two_bus(ZipLoad::default(), true);
        let rep = check_denominator_positivity(&m, &MultiplierBox::uniform(1, 0.0, 1.0));
        let b = VoltageBounds { v_min: 0.9, v_max: 1.1 };
        let rows = assemble_chance_rows(&m, &rep, b, &[0], 3).unwrap();
        let (r, x) = (0.02, 0.04);
        let (sp, op, sq, oq) = (
            0.96 - 1.17 / 2.0,
            1.21 - 1.17 / 2.0,
            6.28 - 10.16 / 2.0,
            4.88 - 10.16 / 2.0,
        );
        let up = &rows[0];
        assert_eq!(up.side, Side::Upper);
        assert_eq!(up.hour, 3);
        let want = [-r * (1.1 * sp + op), -x * (1.1 * sq + oq), r, 0.0];
        for (g, w) in up.a0.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
        assert!((up.alpha_coef[0] - x).abs() < 1e-12);
        assert!((up.b - (1.0 - 1.1)).abs() < 1e-12);
        let lo = &rows[1];
        let want = [r * (0.9 * sp + op), x * (0.9 * sq + oq), -r, 0.0];
        for (g, w) in lo.a0.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
        assert!((lo.alpha_coef[0] + x).abs() < 1e-12);
        assert!((lo.b - (0.9 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn point_mass_rows_are_voltage_bounds() {
        let (_, m) = two_bus(ZipLoad::default(), true);
        let rep = check_denominator_positivity(&m, &MultiplierBox::uniform(1, 0.0, 1.0));
        let b = VoltageBounds::default();
        let rows = assemble_chance_rows(&m, &rep, b, &[0], 0).unwrap();
        let xi = [0.5, 0.3, 0.2, 0.45];
        for alpha in [-1.0, -0.2, 0.6] {
            let v = m.voltages(&xi, &[alpha]).unwrap()[0];
            let md = m.denominator(&xi)[(0, 0)];
            let up = rows[0].value(&m.layout, &[alpha], &xi);
            let lo = rows[1].value(&m.layout, &[alpha], &xi);
            assert!((up - md * (v - b.v_max)).abs() < 1e-14);
            assert!((lo - md * (b.v_min - v)).abs() < 1e-14);
        }
    }

    #[test]
    fn alpha_only_in_capability_block() {
        let (_, m) = two_bus(ZipLoad::default(), true);
        let rep = check_denominator_positivity(&m, &MultiplierBox::uniform(1, 0.0, 1.0));
        let rows = assemble_chance_rows(&m, &rep, VoltageBounds::default(), &[0], 0).unwrap();
        for row in &rows {
            let a1 = row.coefficients(&m.layout, &[0.0]);
            let a2 = row.coefficients(&m.layout, &[1.0]);
            let diff = a2 - a1;
            for i in 0..diff.len() {
                assert_eq!(diff[i] != 0.0, i == m.layout.q_cap(0));
            }
        }
    }

    #[test]
    fn positivity_margins() {
        let (_, m) = two_bus(ZipLoad::default(), false);
        let zero = check_denominator_positivity(&m, &MultiplierBox::uniform(1, 0.0, 0.0));
        assert_eq!(zero.margin, 1.0);
        let mut big = m.clone();
        // negative self-coupling large enough to flip the diagonal
        big.offset_p[0] = 0.0;
        big.slope_q[0] = -100.0;
        let rep = check_denominator_positivity(&big, &MultiplierBox::uniform(1, 0.0, 1.0));
        assert!(!rep.pass());
        assert!(assemble_chance_rows(&big, &rep, VoltageBounds::default(), &[0], 0).is_err());
    }

    #[test]
    fn objective_gradient_matches_finite_difference() {
        let (_, m) = two_bus(ZipLoad::default(), true);
        let xi = [0.5, 0.3, 0.2, 0.45];
        let (c0, c) = m.substation_power_affine(&xi).unwrap();
        assert!((c0 - m.substation_power(&xi, &[0.0]).unwrap()).abs() < 1e-15);
        let h = 1e-3;
        let fd = (m.substation_power(&xi, &[h]).unwrap() - m.substation_power(&xi, &[-h]).unwrap()) / (2.0 * h);
        assert!((fd - c[0]).abs() < 1e-10);
        // absorbing reactive power lowers voltage and so lowers the ZIP draw
        assert!(c[0] > 0.0);
    }

    #[test]
    fn radius_values() {
        assert_eq!(soc_radius(0.5).unwrap(), 1.0);
        assert!((soc_radius(0.05).unwrap() - 19f64.sqrt()).abs() < 1e-15);
        assert!(soc_radius(0.0).is_err() && soc_radius(1.0).is_err() && soc_radius(1.5).is_err());
        let mut prev = f64::INFINITY;
        for k in 1..100 {
            let r = soc_radius(k as f64 / 100.0).unwrap();
            assert!(r < prev);
            prev = r;
        }
    }
}
