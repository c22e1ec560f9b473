//! Synthetic feeders, transformer fleets and moments.
//!
//! The feeders are small enough to solve in milliseconds. The fleet
//! generator produces per-transformer high-resolution series with a daily
//! shape, day-to-day variation and autocorrelated within-hour fluctuations of
//! transformer-specific strength, so that teachers differ and learning
//! weights matter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dispatch::UncertaintyLayout;
use crate::enrich::io::{HighResPair, HourlyPair, TransformerInfo, TransformerKind, TransformerMap};
use crate::enrich::moments::{MomentAmbiguitySet, MomentEntry, Quantity};
use crate::enrich::series::HighResSeries;
use crate::enrich::task_seed;
use crate::error::Result;
use crate::feeder::{Bus, Feeder, Line, Mat3};
use crate::load::pv_reactive_capability;
use crate::phase::{Phase, PhaseSet};

fn phases(s: &str) -> PhaseSet {
    PhaseSet::parse(s).expect("fixture phase set")
}

/// Line whose self impedance is `(r, x)` and whose mutual terms are
/// `ratio` times the self terms, restricted to `ph`.
pub fn coupled_line(from: &str, to: &str, ph: PhaseSet, r: f64, x: f64, ratio: f64) -> Line {
    let mut rm: Mat3 = [[0.0; 3]; 3];
    let mut xm: Mat3 = [[0.0; 3]; 3];
    for a in ph.iter() {
        for b in ph.iter() {
            let f = if a == b { 1.0 } else { ratio };
            rm[a.index()][b.index()] = f * r;
            xm[a.index()][b.index()] = f * x;
        }
    }
    Line {
        from: from.into(),
        to: to.into(),
        r: rm,
        x: xm,
    }
}

/// Root `0` feeding bus `1` feeding bus `2`, three-phase, inverter at `2`.
pub fn three_bus() -> Feeder {
    let abc = PhaseSet::ABC;
    Feeder {
        buses: vec![Bus::new("0", abc), Bus::new("1", abc), Bus::new("2", abc).with_pv(0.3)],
        lines: vec![
            coupled_line("0", "1", abc, 0.02, 0.04, 0.4),
            coupled_line("1", "2", abc, 0.02, 0.04, 0.4),
        ],
        root: "0".into(),
        v0: [1.03 * 1.03; 3],
        base_voltage_kv: 13.8,
        base_power_kva: 100.0,
    }
}

/// Single-phase three-bus feeder with inverters at both downstream buses.
pub fn two_pv() -> Feeder {
    let a = PhaseSet::single(Phase::A);
    Feeder {
        buses: vec![
            Bus::new("0", a),
            Bus::new("1", a).with_pv(0.3),
            Bus::new("2", a).with_pv(0.3),
        ],
        lines: vec![
            Line::uncoupled("0", "1", a, 0.03, 0.06),
            Line::uncoupled("1", "2", a, 0.04, 0.08),
        ],
        root: "0".into(),
        v0: [1.03 * 1.03; 3],
        base_voltage_kv: 13.8,
        base_power_kva: 100.0,
    }
}

/// Thirteen-bus unbalanced feeder patterned on the IEEE 13-node test
/// feeder, with inverters at 634, 675 and 611.
pub fn ieee13() -> Feeder {
    let buses = vec![
        Bus::new("650", phases("abc")),
        Bus::new("632", phases("abc")),
        Bus::new("633", phases("abc")),
        Bus::new("634", phases("abc")).with_pv(0.3),
        Bus::new("645", phases("bc")),
        Bus::new("646", phases("bc")),
        Bus::new("671", phases("abc")),
        Bus::new("692", phases("abc")),
        Bus::new("675", phases("abc")).with_pv(0.3),
        Bus::new("684", phases("ac")),
        Bus::new("611", phases("c")).with_pv(0.3),
        Bus::new("652", phases("a")),
        Bus::new("680", phases("abc")),
    ];
    let l = |f: &str, t: &str, ph: &str, r: f64, x: f64| coupled_line(f, t, phases(ph), r, x, 0.4);
    let lines = vec![
        l("650", "632", "abc", 0.0060, 0.0120),
        l("632", "633", "abc", 0.0036, 0.0060),
        l("633", "634", "abc", 0.0024, 0.0048),
        l("632", "645", "bc", 0.0048, 0.0072),
        l("645", "646", "bc", 0.0030, 0.0048),
        l("632", "671", "abc", 0.0060, 0.0120),
        l("671", "692", "abc", 0.0006, 0.0006),
        l("692", "675", "abc", 0.0036, 0.0060),
        l("671", "684", "ac", 0.0024, 0.0036),
        l("684", "611", "c", 0.0024, 0.0036),
        l("684", "652", "a", 0.0048, 0.0048),
        l("671", "680", "abc", 0.0036, 0.0072),
    ];
    Feeder {
        buses,
        lines,
        root: "650".into(),
        v0: [1.03 * 1.03; 3],
        base_voltage_kv: 13.8,
        base_power_kva: 100.0,
    }
}

// ---------------------------------------------------------------------------
// Fleet generation

/// Shape and volatility of one synthetic transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerProfile {
    pub info: TransformerInfo,
    /// Mean active power at the daily peak shape value 1 (kW).
    pub scale_kw: f64,
    pub power_factor: f64,
    /// Within-hour AR(1) coefficient and innovation scale (relative).
    pub ar: f64,
    pub volatility: f64,
    /// Relative day-to-day standard deviation.
    pub day_spread: f64,
    pub peak_hour: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetSpec {
    pub days: usize,
    pub samples_per_hour: usize,
    pub seed: u64,
    /// Number of micro-PMU (teacher) transformers.
    pub n_pmu: usize,
    /// Number of smart-meter-only transformers.
    pub n_sm: usize,
}

impl Default for FleetSpec {
    fn default() -> Self {
        FleetSpec {
            days: 7,
            samples_per_hour: 3600,
            seed: 1,
            n_pmu: 8,
            n_sm: 34,
        }
    }
}

/// Ground-truth high-resolution data of every transformer and the split
/// into teachers and students.
#[derive(Debug, Clone)]
pub struct SyntheticFleet {
    pub map: TransformerMap,
    pub profiles: Vec<TransformerProfile>,
    pub truth: Vec<HighResPair>,
    /// Candidate teacher ids in the order they receive micro-PMUs.
    pub pmu_order: Vec<String>,
}

impl SyntheticFleet {
    /// Teachers' high-resolution data when the first `k` candidates carry
    /// micro-PMUs.
    pub fn pmu_data(&self, k: usize) -> Vec<HighResPair> {
        let ids = &self.pmu_order[..k.min(self.pmu_order.len())];
        self.truth
            .iter()
            .filter(|p| ids.contains(&p.p.transformer))
            .cloned()
            .collect()
    }

    /// Hourly data of every transformer that is not among the first `k`.
    pub fn sm_data(&self, k: usize) -> Vec<HourlyPair> {
        let ids = &self.pmu_order[..k.min(self.pmu_order.len())];
        self.truth
            .iter()
            .filter(|p| !ids.contains(&p.p.transformer))
            .map(|p| HourlyPair {
                p: p.p.to_hourly(),
                q: p.q.to_hourly(),
            })
            .collect()
    }

    /// Hourly data of every transformer.
    pub fn all_hourly(&self) -> Vec<HourlyPair> {
        self.sm_data(0)
    }
}

/// Places load transformers on every node (extra ones on the first nodes
/// until the count is reached) and one PV transformer per inverter phase.
/// Micro-PMUs go to an interleaved selection of load and PV transformers.
pub fn synthetic_fleet(feeder: &Feeder, spec: &FleetSpec) -> Result<SyntheticFleet> {
    let topo = feeder.topology()?;
    let layout = UncertaintyLayout::new(feeder, &topo);
    let total = spec.n_pmu + spec.n_sm;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut infos = Vec::new();
    for slot in &layout.pv {
        infos.push(TransformerInfo {
            id: format!("pv-{}{}", slot.bus, slot.phase),
            bus: slot.bus.clone(),
            phase: slot.phase,
            kind: TransformerKind::Pv,
        });
    }
    let n_load = total.saturating_sub(infos.len()).max(layout.n_nodes());
    for k in 0..n_load {
        let (bus, phase) = &layout.nodes[k % layout.n_nodes()];
        infos.push(TransformerInfo {
            id: format!("ld-{bus}{phase}-{}", k / layout.n_nodes()),
            bus: bus.clone(),
            phase: *phase,
            kind: TransformerKind::Load,
        });
    }

    let profiles: Vec<TransformerProfile> = infos
        .into_iter()
        .map(|info| {
            let pv = info.kind == TransformerKind::Pv;
            TransformerProfile {
                scale_kw: if pv {
                    rng.gen_range(18.0..24.0)
                } else {
                    rng.gen_range(3.0..7.0)
                },
                power_factor: rng.gen_range(0.9..0.97),
                ar: rng.gen_range(0.85..0.98),
                volatility: if pv {
                    rng.gen_range(0.03..0.08)
                } else {
                    rng.gen_range(0.02..0.1)
                },
                day_spread: rng.gen_range(0.03..0.08),
                peak_hour: rng.gen_range(17.0..21.0),
                info,
            }
        })
        .collect();

    // interleave load and pv candidates: three loads then one pv
    let loads: Vec<&TransformerProfile> = profiles
        .iter()
        .filter(|p| p.info.kind == TransformerKind::Load)
        .collect();
    let pvs: Vec<&TransformerProfile> = profiles.iter().filter(|p| p.info.kind == TransformerKind::Pv).collect();
    let load_slots = (spec.n_pmu - spec.n_pmu / 4).max(1);
    let mut pmu_order = Vec::new();
    let (mut li, mut pi) = (0, 0);
    while pmu_order.len() < spec.n_pmu && (li < loads.len() || pi < pvs.len()) {
        let want_pv = pmu_order.len() % 4 == 3;
        if (want_pv && pi < pvs.len()) || li >= loads.len() {
            pmu_order.push(pvs[pi].info.id.clone());
            pi += 1;
        } else {
            // spread load teachers across the feeder
            pmu_order.push(loads[(li * loads.len() / load_slots) % loads.len()].info.id.clone());
            li += 1;
        }
    }

    let truth = profiles
        .par_iter()
        .map(|p| generate_series(p, spec))
        .collect::<Result<Vec<_>>>()?;
    let map = TransformerMap {
        transformers: profiles.iter().map(|p| p.info.clone()).collect(),
    };
    Ok(SyntheticFleet {
        map,
        profiles,
        truth,
        pmu_order,
    })
}

/// Relative daily load shape, peak 1.
pub fn load_shape(hour: f64, peak_hour: f64) -> f64 {
    let base = 0.55 + 0.2 * (2.0 * std::f64::consts::PI * (hour - 9.0) / 24.0).sin();
    let d = hour - peak_hour;
    (base + 0.25 * (-d * d / 6.0).exp()).min(1.0)
}

/// Relative clear-sky PV shape between 06:00 and 18:00.
pub fn pv_shape(hour: f64) -> f64 {
    if (6.0..=18.0).contains(&hour) {
        (std::f64::consts::PI * (hour - 6.0) / 12.0).sin().max(0.0)
    } else {
        0.0
    }
}

fn generate_series(p: &TransformerProfile, spec: &FleetSpec) -> Result<HighResPair> {
    let n = spec.samples_per_hour;
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed(spec.seed, &p.info.id, -1));
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let tan_phi = (1.0 - p.power_factor * p.power_factor).sqrt() / p.power_factor;
    let pv = p.info.kind == TransformerKind::Pv;
    let mut ps = Vec::with_capacity(spec.days * 24 * n);
    let mut qs = Vec::with_capacity(spec.days * 24 * n);
    let mut x = 0.0;
    let innovation = p.volatility * (1.0 - p.ar * p.ar).sqrt();
    for _day in 0..spec.days {
        let day_factor = if pv {
            rng.gen_range(0.65..1.0)
        } else {
            1.0 + p.day_spread * std_normal.sample(&mut rng)
        };
        for h in 0..24 {
            for k in 0..n {
                let t = h as f64 + (k as f64 + 0.5) / n as f64;
                x = p.ar * x + innovation * std_normal.sample(&mut rng);
                if pv {
                    let v = (p.scale_kw * pv_shape(t) * day_factor * (1.0 + x)).clamp(0.0, p.scale_kw);
                    ps.push(v);
                    qs.push(0.0);
                } else {
                    let v = (p.scale_kw * load_shape(t, p.peak_hour) * day_factor * (1.0 + x)).max(0.0);
                    ps.push(v);
                    qs.push(v * tan_phi * (1.0 + 0.5 * x));
                }
            }
        }
    }
    Ok(HighResPair {
        p: HighResSeries::new(p.info.id.clone(), 0, n, ps)?,
        q: HighResSeries::new(p.info.id.clone(), 0, n, qs)?,
    })
}

/// Analytic moments for dispatch tests: loads follow the daily shape at
/// `load_pu` per phase with standard deviation `rel_std` times the mean, PV
/// follows the solar shape at `pv_pu`.
pub fn synthetic_moments(
    feeder: &Feeder,
    horizon: usize,
    load_pu: f64,
    pv_pu: f64,
    rel_std: f64,
) -> Result<MomentAmbiguitySet> {
    let topo = feeder.topology()?;
    let layout = UncertaintyLayout::new(feeder, &topo);
    let mut entries = Vec::new();
    for hour in 0..horizon {
        let t = (hour % 24) as f64 + 0.5;
        let shape = load_shape(t, 19.0);
        for (bus, phase) in &layout.nodes {
            for (q, mu) in [
                (Quantity::PLoad, load_pu * shape),
                (Quantity::QLoad, 0.4 * load_pu * shape),
            ] {
                entries.push(MomentEntry {
                    quantity: q,
                    bus: bus.clone(),
                    phase: *phase,
                    hour,
                    mu,
                    var: (rel_std * mu).powi(2),
                });
            }
        }
        for slot in &layout.pv {
            let pg = (pv_pu * pv_shape(t)).min(slot.s_cap);
            let sd = rel_std * pg;
            let qcap = pv_reactive_capability(slot.s_cap, pg)?;
            // first-order propagation through sqrt(s^2 - p^2)
            let q_sd = if qcap > 0.0 { sd * pg / qcap } else { 0.0 };
            for (q, mu, var) in [(Quantity::PGen, pg, sd * sd), (Quantity::QCap, qcap, q_sd * q_sd)] {
                entries.push(MomentEntry {
                    quantity: q,
                    bus: slot.bus.clone(),
                    phase: slot.phase,
                    hour,
                    mu,
                    var,
                });
            }
        }
    }
    MomentAmbiguitySet::new(entries, Vec::new())
}
