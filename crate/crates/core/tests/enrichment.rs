use drcc_cvr::enrich::pipeline::{enrich_fleet, enrich_student, train_teacher, EnrichConfig};
use drcc_cvr::enrich::weights::{compute_learning_weights, WeightMode};
use drcc_cvr::enrich::LearningWeights;
use drcc_cvr::enrich::{blend_teachers, enrich_hour};
use drcc_cvr::fixtures::{ieee13, synthetic_fleet, FleetSpec, SyntheticFleet};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fleet(samples_per_hour: usize) -> SyntheticFleet {
    let spec = FleetSpec {
        days: 2,
        samples_per_hour,
        seed: 11,
        ..Default::default()
    };
    synthetic_fleet(&ieee13(), &spec).unwrap()
}

fn within_hour_variance(values: &[f64], n: usize) -> f64 {
    values
        .chunks(n)
        .map(|h| {
            let m = h.iter().sum::<f64>() / n as f64;
            h.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64
        })
        .sum()
}

fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn fleet_enrichment_is_deterministic() {
    let fl = fleet(60);
    let cfg = EnrichConfig {
        seed: 3,
        ..Default::default()
    };
    let run = |cfg: &EnrichConfig| enrich_fleet(&fl.map, &fl.pmu_data(4), &fl.sm_data(4), cfg).unwrap();
    let a = run(&cfg);
    let b = run(&cfg);
    assert_eq!(a.series.len(), b.series.len());
    for (x, y) in a.series.iter().zip(&b.series) {
        assert_eq!(x.p.values, y.p.values);
        assert_eq!(x.q.values, y.q.values);
    }
    assert_eq!(a.weights, b.weights);

    let c = run(&EnrichConfig { seed: 4, ..cfg });
    assert!(a.series.iter().zip(&c.series).any(|(x, y)| x.p.values != y.p.values));
}

#[test]
fn fleet_weights_are_normalized() {
    let fl = fleet(60);
    for mode in [WeightMode::InverseDistance, WeightMode::Literal] {
        let cfg = EnrichConfig {
            weight_mode: mode,
            ..Default::default()
        };
        let out = enrich_fleet(&fl.map, &fl.pmu_data(8), &fl.sm_data(8), &cfg).unwrap();
        assert!(!out.weights.is_empty());
        for (ids, w) in out.weights.values() {
            assert_eq!(ids.len(), w.0.len());
            assert!(w.0.iter().all(|x| *x >= 0.0));
            assert!((w.sum() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn self_enrichment_keeps_within_hour_variance() {
    let fl = fleet(3600);
    for t in fl.pmu_data(2) {
        let truth = within_hour_variance(&t.p.values, t.p.samples_per_hour);
        let hourly = t.p.to_hourly();
        let mut worst = 1.0f64;
        for trial in 0..50 {
            let cfg = EnrichConfig {
                seed: trial,
                ..Default::default()
            };
            let model = train_teacher(&t.p, &cfg).unwrap();
            let e = enrich_student(&hourly, &[model], &cfg, "p").unwrap().series;
            let ratio = within_hour_variance(&e.values, e.samples_per_hour) / truth;
            if (ratio - 1.0).abs() > (worst - 1.0).abs() {
                worst = ratio;
            }
        }
        assert!(
            (worst - 1.0).abs() <= 0.25,
            "{}: variance ratio {worst}",
            t.p.transformer
        );
    }
}

#[test]
fn self_enrichment_matches_sample_distribution_with_fine_bins() {
    let fl = fleet(3600);
    let cfg = EnrichConfig {
        bins: 50,
        seed: 8,
        ..Default::default()
    };
    for t in fl.pmu_data(8) {
        let model = train_teacher(&t.p, &cfg).unwrap();
        let e = enrich_student(&t.p.to_hourly(), &[model], &cfg, "p").unwrap().series;
        let ks = ks_distance(&e.values, &t.p.values);
        assert!(ks <= 0.1, "{}: KS {ks}", t.p.transformer);
    }
}

fn patterns(v: &[f64]) -> Vec<Vec<f64>> {
    vec![v.to_vec()]
}

#[test]
fn weight_examples() {
    let student = patterns(&[0.0, 0.0]);
    let near = patterns(&[1.0, 0.0]);
    let far = patterns(&[0.0, 3.0]);

    let w = compute_learning_weights(&student, &[near.clone(), far.clone()], WeightMode::InverseDistance).unwrap();
    // 1/(1+δ) and 1/(3+δ), normalized
    let delta = 1e-6;
    let (a, b) = (1.0 / (1.0 + delta), 1.0 / (3.0 + delta));
    assert!((w.0[0] - a / (a + b)).abs() < 1e-12);
    assert!((w.0[0] - 0.75).abs() < 1e-6 && (w.0[1] - 0.25).abs() < 1e-6);

    let w = compute_learning_weights(&student, &[near.clone(), far], WeightMode::Literal).unwrap();
    assert!((w.0[0] - 0.25).abs() < 1e-12 && (w.0[1] - 0.75).abs() < 1e-12);

    let mirror = patterns(&[-1.0, 0.0]);
    for mode in [WeightMode::InverseDistance, WeightMode::Literal] {
        let w = compute_learning_weights(&student, &[near.clone(), mirror.clone()], mode).unwrap();
        assert_eq!(w.0, vec![0.5, 0.5]);
        let w = compute_learning_weights(&student, std::slice::from_ref(&near), mode).unwrap();
        assert_eq!(w.0, vec![1.0]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn weights_sum_to_one(
        student in prop::collection::vec(prop::collection::vec(0.0..2.0f64, 6), 1..4),
        teachers in prop::collection::vec(prop::collection::vec(prop::collection::vec(0.0..2.0f64, 6), 1..4), 1..6),
        literal in any::<bool>(),
    ) {
        let mode = if literal { WeightMode::Literal } else { WeightMode::InverseDistance };
        let w = compute_learning_weights(&student, &teachers, mode).unwrap();
        prop_assert!(w.0.iter().all(|x| *x >= 0.0));
        prop_assert!((w.sum() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn blended_models_respect_the_hour_contract() {
    let fl = fleet(60);
    let cfg = EnrichConfig::default();
    let teachers: Vec<_> = fl
        .pmu_data(8)
        .iter()
        .map(|t| train_teacher(&t.p, &cfg).unwrap())
        .collect();
    let loads: Vec<_> = teachers.iter().filter(|t| !t.id.starts_with("pv-")).take(3).collect();
    let bounds: Vec<_> = loads.iter().map(|t| t.bounds.clone()).collect();
    let trans: Vec<_> = loads.iter().map(|t| t.transitions.clone()).collect();

    proptest!(ProptestConfig::with_cases(48), |(raw in prop::collection::vec(0.01..1.0f64, 3), p_frac in 0.0..1.0f64, seed in any::<u64>())| {
        let total: f64 = raw.iter().sum();
        let w = LearningWeights(raw.iter().map(|x| x / total).collect());
        let model = blend_teachers(&w, &bounds, &trans).unwrap();
        let tm = &model.transitions;
        for b1 in 0..tm.bins() {
            for b2 in 0..tm.bins() {
                let row = tm.row(b1, b2);
                prop_assert!(row.iter().all(|x| *x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
        let hourly = fl.truth[0].p.to_hourly();
        let (lo_obs, hi_obs) = hourly.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        let p_a = lo_obs + p_frac * (hi_obs - lo_obs);
        let b = model.predict_bounds(p_a).unwrap();
        let (lo, hi) = (b.lower.min(p_a), b.upper.max(p_a));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = enrich_hour(p_a, &model, 600, &mut rng).unwrap();
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        prop_assert!((mean - p_a).abs() <= 1e-9);
        prop_assert!(out.iter().all(|v| *v >= lo - 1e-9 && *v <= hi + 1e-9));
    });
}
