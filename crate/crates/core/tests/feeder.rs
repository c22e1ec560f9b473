use drcc_cvr::feeder::{build_incidence, three_phase_effective_impedance, Bus, Feeder, Line, LinearNetwork};
use drcc_cvr::fixtures::{self, coupled_line};
use drcc_cvr::phase::{Phase, PhaseSet};
use nalgebra::DVector;
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct BranchSpec {
    parent: usize,
    mask: u8,
    r: f64,
    x: f64,
    ratio: f64,
}

fn mask_set(mask: u8) -> PhaseSet {
    (0..3)
        .filter(|i| mask & (1 << i) != 0)
        .fold(PhaseSet::empty(), |s, i| s.with(Phase::from_index(i).unwrap()))
}

fn random_feeder(specs: &[BranchSpec], v0: [f64; 3]) -> Feeder {
    let mut masks = vec![0b111u8];
    let mut buses = vec![Bus::new("b0", PhaseSet::ABC)];
    let mut lines = Vec::new();
    for (k, s) in specs.iter().enumerate() {
        let parent = s.parent % (k + 1);
        let pm = masks[parent];
        let mut m = s.mask & pm;
        if m == 0 {
            m = pm & pm.wrapping_neg();
        }
        masks.push(m);
        let id = format!("b{}", k + 1);
        buses.push(Bus::new(id.clone(), mask_set(m)));
        lines.push(coupled_line(&format!("b{parent}"), &id, mask_set(m), s.r, s.x, s.ratio));
    }
    Feeder {
        buses,
        lines,
        root: "b0".into(),
        v0,
        base_voltage_kv: 4.16,
        base_power_kva: 1000.0,
    }
}

fn branch() -> impl Strategy<Value = BranchSpec> {
    (any::<usize>(), 1u8..8, 1e-3..2e-2f64, 1e-3..3e-2f64, 0.0..0.45f64).prop_map(|(parent, mask, r, x, ratio)| {
        BranchSpec {
            parent,
            mask,
            r,
            x,
            ratio,
        }
    })
}

/// Walks the tree from the root: each bus sits below its parent by twice the
/// effective impedance times the power flowing through the feeding line.
fn recursive_voltages(feeder: &Feeder, p: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
    let topo = feeder.topology().unwrap();
    let nb = feeder.buses.len();
    let mut p_sub = vec![[0.0; 3]; nb];
    let mut q_sub = vec![[0.0; 3]; nb];
    for (i, node) in topo.nodes.iter().enumerate() {
        p_sub[node.bus][node.phase.index()] += p[i];
        q_sub[node.bus][node.phase.index()] += q[i];
    }
    for &b in topo.order.iter().rev() {
        let up = topo.parent[b].unwrap();
        for ph in 0..3 {
            p_sub[up][ph] += p_sub[b][ph];
            q_sub[up][ph] += q_sub[b][ph];
        }
    }
    let mut v = vec![[f64::NAN; 3]; nb];
    v[topo.root] = feeder.v0;
    for &b in &topo.order {
        let up = topo.parent[b].unwrap();
        let line: &Line = &feeder.lines[topo.feeding_line[b].unwrap()];
        let (rb, xb) = three_phase_effective_impedance(line);
        let phases = feeder.buses[b].phases;
        for phi in phases.iter() {
            let i = phi.index();
            let mut drop = 0.0;
            for psi in phases.iter() {
                let j = psi.index();
                drop += rb[i][j] * p_sub[b][j] + xb[i][j] * q_sub[b][j];
            }
            v[b][i] = v[up][i] + 2.0 * drop;
        }
    }
    DVector::from_iterator(topo.n_nodes(), topo.nodes.iter().map(|n| v[n.bus][n.phase.index()]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matrix_model_matches_tree_recursion(
        specs in prop::collection::vec(branch(), 1..50),
        v0 in prop::array::uniform3(0.95..1.1f64),
        seed in prop::collection::vec(-1.0..1.0f64, 300),
    ) {
        let feeder = random_feeder(&specs, v0);
        prop_assert!(feeder.validate().is_ok());
        let net = LinearNetwork::build(&feeder).unwrap();
        let n = net.topology.n_nodes();
        let p = DVector::from_iterator(n, seed.iter().cycle().take(n).copied());
        let q = DVector::from_iterator(n, seed.iter().rev().cycle().take(n).map(|v| 0.5 * v));
        let got = net.sensitivity.voltages(&p, &q);
        let want = recursive_voltages(&feeder, &p, &q);
        for i in 0..n {
            prop_assert!((got[i] - want[i]).abs() <= 1e-10, "node {i}: {} vs {}", got[i], want[i]);
        }
    }

    #[test]
    fn uncoupled_sensitivities_are_symmetric(specs in prop::collection::vec(branch(), 1..30)) {
        // Mutual terms pick up an antisymmetric part from the phase rotation.
        let uncoupled: Vec<BranchSpec> = specs.into_iter().map(|s| BranchSpec { ratio: 0.0, ..s }).collect();
        let feeder = random_feeder(&uncoupled, [1.0; 3]);
        let s = LinearNetwork::build(&feeder).unwrap().sensitivity;
        prop_assert!((&s.r - s.r.transpose()).amax() <= 1e-12);
        prop_assert!((&s.x - s.x.transpose()).amax() <= 1e-12);
    }

    #[test]
    fn incidence_rows_sum_to_zero(specs in prop::collection::vec(branch(), 1..40)) {
        let feeder = random_feeder(&specs, [1.0; 3]);
        let inc = build_incidence(&feeder.topology().unwrap());
        for i in 0..inc.a.nrows() {
            let s: f64 = inc.a0.row(i).sum() + inc.a.row(i).sum();
            prop_assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn single_phase_resistance_is_psd(specs in prop::collection::vec(branch(), 1..40)) {
        let single: Vec<BranchSpec> = specs.into_iter().map(|s| BranchSpec { mask: 1, ..s }).collect();
        let mut feeder = random_feeder(&single, [1.0; 3]);
        feeder.buses[0].phases = PhaseSet::single(Phase::A);
        let r = LinearNetwork::build(&feeder).unwrap().sensitivity.r;
        let eig = r.symmetric_eigenvalues();
        prop_assert!(eig.min() >= -1e-12, "min eigenvalue {}", eig.min());
    }
}

#[test]
fn zero_injection_gives_head_voltage() {
    let f = fixtures::ieee13();
    let net = LinearNetwork::build(&f).unwrap();
    let n = net.topology.n_nodes();
    let v = net.sensitivity.voltages(&DVector::zeros(n), &DVector::zeros(n));
    for (i, node) in net.topology.nodes.iter().enumerate() {
        assert_eq!(v[i], f.v0[node.phase.index()]);
    }
}

fn assert_same_feeder(a: &Feeder, b: &Feeder) {
    assert_eq!(a.root, b.root);
    assert_eq!(a.buses.len(), b.buses.len());
    assert_eq!(a.lines.len(), b.lines.len());
    for (x, y) in a.buses.iter().zip(&b.buses) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.phases, y.phases);
        assert_eq!(x.zip, y.zip);
        match (&x.pv, &y.pv) {
            (None, None) => {}
            (Some(u), Some(w)) => assert!((u.s_cap - w.s_cap).abs() < 1e-12),
            _ => panic!("pv mismatch at bus {}", x.id),
        }
    }
    for (x, y) in a.lines.iter().zip(&b.lines) {
        assert_eq!((&x.from, &x.to), (&y.from, &y.to));
        for i in 0..3 {
            for j in 0..3 {
                assert!((x.r[i][j] - y.r[i][j]).abs() < 1e-15);
                assert!((x.x[i][j] - y.x[i][j]).abs() < 1e-15);
            }
        }
    }
    for i in 0..3 {
        assert!((a.v0[i] - b.v0[i]).abs() < 1e-12);
    }
}

#[test]
fn shipped_fixture_files_match_builders() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
    let cases: [(&str, Feeder); 3] = [
        ("three_bus", fixtures::three_bus()),
        ("two_pv", fixtures::two_pv()),
        ("ieee13", fixtures::ieee13()),
    ];
    for (name, built) in cases {
        let loaded = Feeder::load(format!("{dir}/{name}.json")).unwrap();
        assert_same_feeder(&loaded, &built);
        assert!(loaded.validate().is_ok(), "{name}");
    }
}

#[test]
fn json_round_trip_preserves_sensitivities() {
    let f = fixtures::ieee13();
    let back = Feeder::from_json_str(&f.to_json_string().unwrap()).unwrap();
    let a = LinearNetwork::build(&f).unwrap().sensitivity;
    let b = LinearNetwork::build(&back).unwrap().sensitivity;
    assert!((&a.r - &b.r).amax() < 1e-12);
    assert!((&a.x - &b.x).amax() < 1e-12);
}
