use crate::enrich::moments::{EntryKey, MomentAmbiguitySet, MomentEntry, Quantity};
use crate::error::{Error, Result};
use crate::feeder::{Feeder, Topology};
use crate::load::pv_reactive_capability;
use crate::phase::Phase;

/// An inverter-carrying node.
#[derive(Debug, Clone, PartialEq)]
pub struct PvSlot {
    pub node: usize,
    pub bus: String,
    pub phase: Phase,
    pub s_cap: f64,
}

/// Index map of the per-hour uncertainty vector
/// `xi = [p_L (nodes); q_L (nodes); p_g (pv); Q_cap (pv)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyLayout {
    /// (bus id, phase) of every non-root node, in topology order.
    pub nodes: Vec<(String, Phase)>,
    pub pv: Vec<PvSlot>,
}

impl UncertaintyLayout {
    pub fn new(feeder: &Feeder, topo: &Topology) -> Self {
        let mut nodes = Vec::with_capacity(topo.n_nodes());
        let mut pv = Vec::new();
        for (i, node) in topo.nodes.iter().enumerate() {
            let bus = &feeder.buses[node.bus];
            nodes.push((bus.id.clone(), node.phase));
            if let Some(inv) = &bus.pv {
                if bus.pv_phases().contains(node.phase) {
                    pv.push(PvSlot {
                        node: i,
                        bus: bus.id.clone(),
                        phase: node.phase,
                        s_cap: inv.s_cap,
                    });
                }
            }
        }
        UncertaintyLayout { nodes, pv }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_pv(&self) -> usize {
        self.pv.len()
    }

    pub fn dim(&self) -> usize {
        2 * self.nodes.len() + 2 * self.pv.len()
    }

    pub fn p_load(&self, node: usize) -> usize {
        node
    }

    pub fn q_load(&self, node: usize) -> usize {
        self.nodes.len() + node
    }

    pub fn p_gen(&self, k: usize) -> usize {
        2 * self.nodes.len() + k
    }

    pub fn q_cap(&self, k: usize) -> usize {
        2 * self.nodes.len() + self.pv.len() + k
    }

    /// Quantity, bus and phase of a flat index.
    pub fn describe(&self, idx: usize) -> (Quantity, &str, Phase) {
        let n = self.nodes.len();
        let m = self.pv.len();
        let (q, bus, phase) = if idx < n {
            (Quantity::PLoad, &self.nodes[idx].0, self.nodes[idx].1)
        } else if idx < 2 * n {
            (Quantity::QLoad, &self.nodes[idx - n].0, self.nodes[idx - n].1)
        } else if idx < 2 * n + m {
            let s = &self.pv[idx - 2 * n];
            (Quantity::PGen, &s.bus, s.phase)
        } else {
            let s = &self.pv[idx - 2 * n - m];
            (Quantity::QCap, &s.bus, s.phase)
        };
        (q, bus.as_str(), phase)
    }

    pub fn keys(&self, hour: usize) -> Vec<EntryKey> {
        (0..self.dim())
            .map(|i| {
                let (q, bus, phase) = self.describe(i);
                EntryKey::new(q, bus, phase, hour)
            })
            .collect()
    }

    /// Support of each entry: multipliers in `[0, 1]`, generation and
    /// capability in `[0, s_cap]`.
    pub fn support(&self) -> (Vec<f64>, Vec<f64>) {
        let mut upper = vec![1.0; 2 * self.nodes.len()];
        upper.extend(self.pv.iter().map(|s| s.s_cap));
        upper.extend(self.pv.iter().map(|s| s.s_cap));
        (vec![0.0; self.dim()], upper)
    }

    /// Adds zero-load entries for nodes without measurements and derives
    /// missing capability entries from the generation mean.
    pub fn complete_moments(&self, moments: &MomentAmbiguitySet, horizon: usize) -> Result<MomentAmbiguitySet> {
        let mut entries = moments.entries.clone();
        let mut present: std::collections::HashSet<EntryKey> = entries.iter().map(|e| e.key()).collect();
        for hour in 0..horizon {
            for (i, key) in self.keys(hour).into_iter().enumerate() {
                if present.contains(&key) {
                    continue;
                }
                let mu = if key.quantity == Quantity::QCap {
                    let k = i - 2 * self.nodes.len() - self.pv.len();
                    let s_cap = self.pv[k].s_cap;
                    let pg = moments
                        .get(&EntryKey {
                            quantity: Quantity::PGen,
                            ..key.clone()
                        })
                        .map_or(0.0, |e| e.mu);
                    pv_reactive_capability(s_cap, pg.clamp(0.0, s_cap))?
                } else {
                    0.0
                };
                present.insert(key.clone());
                entries.push(MomentEntry {
                    quantity: key.quantity,
                    bus: key.bus,
                    phase: key.phase,
                    hour: key.hour,
                    mu,
                    var: 0.0,
                });
            }
        }
        let mut out = MomentAmbiguitySet::new(entries, moments.groups.clone())?;
        out.low_confidence = moments.low_confidence;
        Ok(out)
    }

    /// Node indices of the listed bus phases.
    pub fn select_nodes(&self, monitored: &[(String, Phase)]) -> Result<Vec<usize>> {
        monitored
            .iter()
            .map(|(bus, phase)| {
                self.nodes
                    .iter()
                    .position(|(b, p)| b == bus && p == phase)
                    .ok_or_else(|| Error::Layout(format!("bus {bus} phase {phase} is not a feeder node")))
            })
            .collect()
    }
}
