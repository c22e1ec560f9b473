//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::time::Instant;

use drcc_cvr::dispatch::{
    build_problem, solve_dispatch, BoxInterpretation, DispatchProblem, DispatchSolution, Mode, ProblemOptions,
    RobustBox, SolveStatus, SolverConfig,
};
use drcc_cvr::enrich::moments::{estimate_moments, MomentAmbiguitySet, MomentOptions};
use drcc_cvr::enrich::pipeline::{
    enrich_fleet, enrich_student, inverter_capacities, pooled_hourly_samples, pooled_samples, train_teacher,
    EnrichConfig,
};
use drcc_cvr::feeder::Feeder;
use drcc_cvr::fixtures::{ieee13, synthetic_fleet, synthetic_moments, two_pv, FleetSpec};
use drcc_cvr::load::ZipCoefficients;
use drcc_cvr::validate::{
    binding_row, energy_report, monte_carlo_violation, nonlinear_sweep, two_point_violation, NodePowers,
};

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

const HORIZON: usize = 24;

fn scenario() -> (Feeder, MomentAmbiguitySet) {
    let f = ieee13();
    let m = synthetic_moments(&f, HORIZON, 0.5, 0.25, 0.15).expect("moments");
    (f, m)
}

fn solve(f: &Feeder, m: &MomentAmbiguitySet, mode: Mode) -> Result<(DispatchProblem, DispatchSolution), String> {
    let p = build_problem(f, m, mode, HORIZON, &ProblemOptions::default()).map_err(|e| e.to_string())?;
    let s = solve_dispatch(&p, &SolverConfig::default()).map_err(|e| e.to_string())?;
    Ok((p, s))
}

fn energy(s: &DispatchSolution) -> Result<f64, String> {
    s.objective_kwh
        .ok_or_else(|| format!("{} solve ended {:?}", s.mode, s.status))
}

fn epsilon_monotonicity() -> Outcome {
    let start = Instant::now();
    let (f, m) = scenario();
    let mut e = Vec::new();
    for eps in [0.02, 0.05, 0.1] {
        e.push(energy(&solve(&f, &m, Mode::Drcc { epsilon: eps })?.1)?);
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = e[0] - e[1] >= -1e-6 && e[1] - e[2] >= -1e-6 && secs < 60.0;
    Ok((
        ok,
        format!(
            "E(0.02)={:.4} E(0.05)={:.4} E(0.1)={:.4} kWh, {secs:.1} s",
            e[0], e[1], e[2]
        ),
    ))
}

fn deterministic_limit() -> Outcome {
    let (f, m) = scenario();
    let zero = m.zero_covariance();
    let (_, det) = solve(&f, &zero, Mode::Deterministic)?;
    let (_, dr) = solve(&f, &zero, Mode::Drcc { epsilon: 0.05 })?;
    let d_obj = (energy(&det)? - energy(&dr)?).abs() / f.base_power_kva;
    let d_alpha = det
        .alpha_q
        .iter()
        .zip(&dr.alpha_q)
        .map(|(a, b)| (a.value - b.value).abs())
        .fold(0.0, f64::max);
    Ok((
        d_obj <= 1e-6 && d_alpha <= 1e-6,
        format!("objective gap {d_obj:.2e} pu, alpha gap {d_alpha:.2e}"),
    ))
}

fn chance_guarantee() -> Outcome {
    let (f, m) = scenario();
    let mut ok = true;
    let mut parts = Vec::new();
    for eps in [0.02, 0.05, 0.1] {
        let (p, s) = solve(&f, &m, Mode::Drcc { epsilon: eps })?;
        let r = monte_carlo_violation(&p, &s, 10_000, 2024).map_err(|e| e.to_string())?;
        let worst = r.rows.iter().map(|v| v.rate).fold(0.0, f64::max);
        let upper = r.rows.iter().map(|v| v.ci95.1).fold(0.0, f64::max);
        ok &= worst <= eps && upper <= eps + 0.01;
        parts.push(format!("eps={eps}: max rate {worst:.4}, max Wilson upper {upper:.4}"));
    }
    Ok((ok, parts.join("; ")))
}

fn cantelli_tightness() -> Outcome {
    let (f, m) = scenario();
    let eps = 0.05;
    let (p, s) = solve(&f, &m, Mode::Drcc { epsilon: eps })?;
    let (hour, row) = binding_row(&p, &s)
        .map_err(|e| e.to_string())?
        .ok_or("no row with spread")?;
    let alpha = &s.alpha_by_hour(p.layout()).map_err(|e| e.to_string())?[hour];
    let lhs = p.row_lhs(&p.steps[hour], &p.steps[hour].rows[row], alpha);
    let rate = two_point_violation(&p, &s, hour, row, eps, 100_000, 99).map_err(|e| e.to_string())?;
    Ok((
        rate >= eps - 0.01 && rate <= eps,
        format!("hour {hour} row {row} (lhs {lhs:.1e}): two-point rate {rate:.4}"),
    ))
}

fn linearization_accuracy() -> Outcome {
    let (f, m) = scenario();
    let (p, s) = solve(&f, &m, Mode::Drcc { epsilon: 0.05 })?;
    let alphas = s.alpha_by_hour(p.layout()).map_err(|e| e.to_string())?;
    let n_pv = p.layout().n_pv();
    let mut worst = 0.0f64;
    let mut peak_load = 0.0f64;
    for step in &p.steps {
        let mu = step.mu.as_slice();
        peak_load = peak_load.max((0..p.layout().n_nodes()).map(|j| mu[j]).fold(0.0, f64::max));
        for alpha in [
            alphas[step.hour].clone(),
            vec![0.0; n_pv],
            vec![-1.0; n_pv],
            vec![1.0; n_pv],
        ] {
            let lin = p.model.voltages(mu, &alpha).map_err(|e| e.to_string())?;
            let exact = nonlinear_sweep(&f, &NodePowers::from_xi(p.layout(), mu, &alpha)).map_err(|e| e.to_string())?;
            for (a, b) in lin.iter().zip(exact.v_sq.iter()) {
                worst = worst.max((a.sqrt() - b.sqrt()).abs());
            }
        }
    }
    // loads scaled so the heaviest phase draws exactly 0.5 pu
    let layout = p.layout();
    let heavy = p
        .steps
        .iter()
        .max_by(|a, b| a.mu.max().total_cmp(&b.mu.max()))
        .expect("hours");
    let mut xi = heavy.mu.clone();
    let scale = 0.5 / (0..layout.n_nodes()).map(|j| xi[j]).fold(0.0, f64::max);
    for j in 0..layout.n_nodes() {
        xi[layout.p_load(j)] *= scale;
        xi[layout.q_load(j)] *= scale;
    }
    for alpha in [vec![0.0; n_pv], vec![-1.0; n_pv], vec![1.0; n_pv]] {
        let lin = p.model.voltages(xi.as_slice(), &alpha).map_err(|e| e.to_string())?;
        let exact =
            nonlinear_sweep(&f, &NodePowers::from_xi(layout, xi.as_slice(), &alpha)).map_err(|e| e.to_string())?;
        for (a, b) in lin.iter().zip(exact.v_sq.iter()) {
            worst = worst.max((a.sqrt() - b.sqrt()).abs());
        }
    }
    peak_load = peak_load.max(0.5);
    // ZIP linearization on a dense grid of |dV| <= 0.05
    let mut zip_ok = true;
    let mut zip_worst = 0.0f64;
    for c in [ZipCoefficients::DEFAULT_ACTIVE, ZipCoefficients::DEFAULT_REACTIVE] {
        for k in -5000..=5000 {
            let dv = k as f64 * 1e-5;
            let v = (1.0 + dv) * (1.0 + dv);
            let err = (c.power_exact(v, 1.0).map_err(|e| e.to_string())? - c.power_linearized(v, 1.0)).abs();
            let bound = c.i().abs() * dv * dv / 2.0 * 1.01;
            zip_ok &= err <= bound + 1e-15;
            zip_worst = zip_worst.max(err);
        }
    }
    Ok((
        peak_load <= 0.5 && worst <= 0.01 && zip_ok,
        format!(
            "peak load {peak_load:.3} pu, max |V| gap {worst:.2e} pu; ZIP grid max error {zip_worst:.2e} within bound: {zip_ok}"
        ),
    ))
}

fn cvr_direction() -> Outcome {
    let (f, m) = scenario();
    let modes = [
        Mode::Deterministic,
        Mode::Robust(RobustBox::default()),
        Mode::Robust(RobustBox {
            fraction: 0.1,
            interpretation: BoxInterpretation::Variance,
        }),
        Mode::Drcc { epsilon: 0.02 },
        Mode::Drcc { epsilon: 0.05 },
        Mode::Drcc { epsilon: 0.1 },
    ];
    let (report, solved) = energy_report(
        &f,
        &m,
        &modes,
        HORIZON,
        &ProblemOptions::default(),
        &SolverConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = vec![format!("base {:.2}", report.base_kwh)];
    for row in &report.modes {
        match row.energy_kwh {
            Some(e) => {
                ok &= e <= report.base_kwh + 1e-6;
                parts.push(format!("{} {e:.2}", row.label));
            }
            None => {
                // only the variance reading of the robust box may be infeasible
                ok &= row.label == "RO (variance)";
                parts.push(format!("{} {:?}", row.label, row.status));
            }
        }
    }
    let mut v_lo = f64::INFINITY;
    let mut v_hi = f64::NEG_INFINITY;
    for (p, s) in solved.iter().filter(|(p, _)| matches!(p.mode, Mode::Drcc { .. })) {
        let alphas = s.alpha_by_hour(p.layout()).map_err(|e| e.to_string())?;
        for step in &p.steps {
            let v = p
                .model
                .voltages(step.mu.as_slice(), &alphas[step.hour])
                .map_err(|e| e.to_string())?;
            v_lo = v_lo.min(v.min());
            v_hi = v_hi.max(v.max());
        }
    }
    ok &= v_lo >= 0.95f64.powi(2) - 1e-7 && v_hi <= 1.05f64.powi(2) + 1e-7;
    parts.push(format!("DRCC v at mean in [{v_lo:.4}, {v_hi:.4}]"));
    Ok((ok, parts.join(", ")))
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

fn within_hour_variance(values: &[f64], n: usize) -> f64 {
    values
        .chunks(n)
        .map(|h| {
            let m = h.iter().sum::<f64>() / n as f64;
            h.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64
        })
        .sum()
}

fn enrichment_fidelity() -> Outcome {
    let f = ieee13();
    let spec = FleetSpec {
        days: 3,
        samples_per_hour: 3600,
        seed: 5,
        ..Default::default()
    };
    let fleet = synthetic_fleet(&f, &spec).map_err(|e| e.to_string())?;
    let cfg = EnrichConfig {
        seed: 17,
        ..Default::default()
    };
    let (mut mean_gap, mut worst_ratio, mut worst_ks, mut row_gap) = (0.0f64, 1.0f64, 0.0f64, 0.0f64);
    for t in fleet.pmu_data(8) {
        let model = train_teacher(&t.p, &cfg).map_err(|e| e.to_string())?;
        let tm = &model.transitions;
        for b1 in 0..tm.bins() {
            for b2 in 0..tm.bins() {
                row_gap = row_gap.max((tm.row(b1, b2).iter().sum::<f64>() - 1.0).abs());
            }
        }
        let hourly = t.p.to_hourly();
        let e = enrich_student(&hourly, &[model], &cfg, "p")
            .map_err(|e| e.to_string())?
            .series;
        let n = e.samples_per_hour;
        for (k, h) in e.values.chunks(n).enumerate() {
            let scale = 1.0 + hourly.values[k].abs();
            mean_gap = mean_gap.max((h.iter().sum::<f64>() / n as f64 - hourly.values[k]).abs() / scale);
        }
        let ratio = within_hour_variance(&e.values, n) / within_hour_variance(&t.p.values, n);
        if (ratio - 1.0).abs() > (worst_ratio - 1.0).abs() {
            worst_ratio = ratio;
        }
        worst_ks = worst_ks.max(ks_distance(&e.values, &t.p.values));
    }
    let en = enrich_fleet(&fleet.map, &fleet.pmu_data(8), &fleet.sm_data(8), &cfg).map_err(|e| e.to_string())?;
    let weight_gap = en
        .weights
        .values()
        .map(|(_, w)| (w.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    let ok = mean_gap <= 1e-9
        && (worst_ratio - 1.0).abs() <= 0.25
        && worst_ks <= 0.1
        && row_gap <= 1e-9
        && weight_gap <= 1e-9;
    Ok((
        ok,
        format!(
            "hourly mean gap {mean_gap:.1e}, worst variance ratio {worst_ratio:.3}, worst KS {worst_ks:.3}, \
             Markov row gap {row_gap:.1e}, weight gap {weight_gap:.1e}"
        ),
    ))
}

fn variance_error(est: &MomentAmbiguitySet, truth: &MomentAmbiguitySet) -> f64 {
    truth
        .entries
        .iter()
        .map(|e| (est.get(&e.key()).map_or(0.0, |x| x.var) - e.var).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn pmu_sensitivity() -> Outcome {
    let f = ieee13();
    let opts = MomentOptions {
        capacities: inverter_capacities(&f),
        ..Default::default()
    };
    let seeds = 20;
    let mut total = [0.0; 3];
    for seed in 1..=seeds {
        let spec = FleetSpec {
            days: 4,
            samples_per_hour: 30,
            seed,
            ..Default::default()
        };
        let fleet = synthetic_fleet(&f, &spec).map_err(|e| e.to_string())?;
        let truth = pooled_samples(&fleet.map, &fleet.truth, HORIZON, f.base_power_kva)
            .and_then(|s| estimate_moments(&s, &opts))
            .map_err(|e| e.to_string())?;
        for (i, k) in [0usize, 4, 8].into_iter().enumerate() {
            let est = if k == 0 {
                pooled_hourly_samples(&fleet.map, &fleet.all_hourly(), HORIZON, f.base_power_kva)
            } else {
                let cfg = EnrichConfig {
                    seed,
                    ..Default::default()
                };
                let en =
                    enrich_fleet(&fleet.map, &fleet.pmu_data(k), &fleet.sm_data(k), &cfg).map_err(|e| e.to_string())?;
                pooled_samples(&fleet.map, &en.series, HORIZON, f.base_power_kva)
            }
            .and_then(|s| estimate_moments(&s, &opts))
            .map_err(|e| e.to_string())?;
            total[i] += variance_error(&est, &truth);
        }
    }
    let avg = total.map(|t| t / seeds as f64);
    Ok((
        avg[1] <= avg[0] && avg[2] <= avg[1],
        format!(
            "mean Frobenius error over {seeds} seeds: 0 -> {:.3e}, 4 -> {:.3e}, 8 -> {:.3e}",
            avg[0], avg[1], avg[2]
        ),
    ))
}

fn grid_oracle() -> Outcome {
    let f = two_pv();
    let horizon = 24;
    let m = synthetic_moments(&f, horizon, 0.6, 0.25, 0.2).map_err(|e| e.to_string())?;
    let p = build_problem(
        &f,
        &m,
        Mode::Drcc { epsilon: 0.05 },
        horizon,
        &ProblemOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let s = solve_dispatch(&p, &SolverConfig::default()).map_err(|e| e.to_string())?;
    if s.status != SolveStatus::Optimal {
        return Ok((false, format!("solver ended {:?}", s.status)));
    }
    let mut worst_gain = f64::NEG_INFINITY;
    let mut binding_hours = 0;
    for (step, hs) in p.steps.iter().zip(&s.hours) {
        let obj = |a: &[f64]| step.objective_const + step.objective.iter().zip(a).map(|(c, x)| c * x).sum::<f64>();
        if hs.slacks.iter().any(|sl| sl.abs() < 1e-6) {
            binding_hours += 1;
        }
        for i in 0..=200 {
            for j in 0..=200 {
                let a = [-1.0 + 0.01 * i as f64, -1.0 + 0.01 * j as f64];
                if step.rows.iter().all(|r| p.row_lhs(step, r, &a) <= 0.0) {
                    worst_gain = worst_gain.max(obj(&hs.alpha) - obj(&a));
                }
            }
        }
    }
    Ok((
        worst_gain <= 1e-4 && binding_hours > 0,
        format!(
            "largest grid improvement {worst_gain:.2e} pu over {horizon} hours ({binding_hours} with a binding row)"
        ),
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("epsilon monotonicity", epsilon_monotonicity),
        ("deterministic limit", deterministic_limit),
        ("chance-constraint guarantee", chance_guarantee),
        ("Cantelli tightness", cantelli_tightness),
        ("linearization accuracy", linearization_accuracy),
        ("CVR direction", cvr_direction),
        ("enrichment fidelity", enrichment_fidelity),
        ("PMU-count sensitivity", pmu_sensitivity),
        ("small-instance oracle", grid_oracle),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {} [{}] {name}: {detail} ({:.1} s)",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
