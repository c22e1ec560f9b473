//! Voltage-dependent ZIP loads and PV inverter reactive capability.
//!
//! Voltages are squared magnitudes `v = |V|^2` in per-unit throughout. The
//! linearised ZIP form substitutes `sqrt(v) ≈ (1 + v) / 2`, which is exact at
//! `v = 1` and drops the `(ΔV)^2` term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase::PhaseSet;

/// Tolerance on `k1 + k2 + k3 = 1` for normalized coefficient sets.
pub const NORMALIZATION_TOL: f64 = 0.05;

/// Constant-impedance, constant-current and constant-power coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ZipCoefficients(pub [f64; 3]);

impl ZipCoefficients {
    pub const DEFAULT_ACTIVE: ZipCoefficients = ZipCoefficients([0.96, -1.17, 1.21]);
    pub const DEFAULT_REACTIVE: ZipCoefficients = ZipCoefficients([6.28, -10.16, 4.88]);
    pub const CONSTANT_POWER: ZipCoefficients = ZipCoefficients([0.0, 0.0, 1.0]);

    pub fn new(z: f64, i: f64, p: f64) -> Self {
        ZipCoefficients([z, i, p])
    }

    pub fn z(&self) -> f64 {
        self.0[0]
    }

    pub fn i(&self) -> f64 {
        self.0[1]
    }

    pub fn p(&self) -> f64 {
        self.0[2]
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn is_normalized(&self) -> bool {
        (self.sum() - 1.0).abs() <= NORMALIZATION_TOL
    }

    /// Coefficient on `v` in the linearised model.
    pub fn slope(&self) -> f64 {
        self.z() + self.i() / 2.0
    }

    /// Constant term in the linearised model.
    pub fn offset(&self) -> f64 {
        self.p() + self.i() / 2.0
    }

    /// `m * (k1 v + k2 sqrt(v) + k3)`.
    pub fn power_exact(&self, v: f64, m: f64) -> Result<f64> {
        if !(v > 0.0) {
            return Err(Error::Domain {
                what: "squared voltage",
                value: v,
            });
        }
        Ok(m * (self.z() * v + self.i() * v.sqrt() + self.p()))
    }

    /// `m * ((k1 + k2/2) v + (k3 + k2/2))`.
    pub fn power_linearized(&self, v: f64, m: f64) -> f64 {
        m * (self.slope() * v + self.offset())
    }
}

/// Active and reactive ZIP coefficients of one bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZipLoad {
    pub kp: ZipCoefficients,
    pub kq: ZipCoefficients,
    /// When set, both triples must sum to one within [`NORMALIZATION_TOL`].
    #[serde(default = "default_true")]
    pub normalized: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ZipLoad {
    fn default() -> Self {
        ZipLoad {
            kp: ZipCoefficients::DEFAULT_ACTIVE,
            kq: ZipCoefficients::DEFAULT_REACTIVE,
            normalized: true,
        }
    }
}

impl ZipLoad {
    pub fn constant_power() -> Self {
        ZipLoad {
            kp: ZipCoefficients::CONSTANT_POWER,
            kq: ZipCoefficients::CONSTANT_POWER,
            normalized: true,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.normalized {
            for (name, c) in [("kp", self.kp), ("kq", self.kq)] {
                if !c.is_normalized() {
                    return Err(Error::Parameter(format!(
                        "{name} coefficients sum to {:.4}, expected 1 ± {NORMALIZATION_TOL}",
                        c.sum()
                    )));
                }
            }
        }
        let finite = self.kp.0.iter().chain(&self.kq.0).all(|k| k.is_finite());
        if !finite {
            return Err(Error::Parameter("non-finite ZIP coefficient".into()));
        }
        Ok(())
    }
}

/// PV inverter with per-phase apparent-power capacity (per-unit).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PvInverter {
    pub s_cap: f64,
    /// Phases the inverter is connected to; all bus phases when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<PhaseSet>,
}

impl PvInverter {
    pub fn new(s_cap: f64) -> Result<Self> {
        if !(s_cap >= 0.0) || !s_cap.is_finite() {
            return Err(Error::Domain {
                what: "inverter capacity",
                value: s_cap,
            });
        }
        Ok(PvInverter { s_cap, phases: None })
    }

    pub fn reactive_capability(&self, p_g: f64) -> Result<f64> {
        pv_reactive_capability(self.s_cap, p_g)
    }
}

/// Available reactive capacity `sqrt(s_cap^2 - p_g^2)`.
pub fn pv_reactive_capability(s_cap: f64, p_g: f64) -> Result<f64> {
    if !(p_g >= 0.0) {
        return Err(Error::Domain {
            what: "PV active output",
            value: p_g,
        });
    }
    if p_g > s_cap {
        return Err(Error::OverCapacity { s_cap, p_g });
    }
    Ok(((s_cap - p_g) * (s_cap + p_g)).max(0.0).sqrt())
}

/// Reactive output `alpha_q * q_cap` for a dispatch ratio in `[-1, 1]`.
pub fn pv_reactive_output(alpha_q: f64, q_cap: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&alpha_q) {
        return Err(Error::Domain {
            what: "dispatch ratio",
            value: alpha_q,
        });
    }
    Ok(alpha_q * q_cap)
}
