//! Fleet-level enrichment: teachers are trained once, every student is
//! enriched from the teachers of its kind, and per-bus samples are pooled
//! into moment estimates.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::io::{HighResPair, HourlyPair, TransformerKind, TransformerMap};
use super::markov::{fit_transition_model, TransitionModel, DEFAULT_BINS};
use super::moments::{EntryKey, Quantity, SampleSet};
use super::series::{HighResSeries, HourlySeries};
use super::weights::{compute_learning_weights, LearningWeights, WeightMode};
use super::{blend_teachers, enrich_hour, fit_bound_models, task_seed, BoundModel};
use crate::error::{Error, Result};
use crate::feeder::Feeder;
use crate::phase::Phase;

#[derive(Debug, Clone)]
pub struct EnrichConfig {
    pub bins: usize,
    pub weight_mode: WeightMode,
    /// Samples generated per student hour; the teachers' cadence when unset.
    pub samples_per_hour: Option<usize>,
    pub hours_per_day: usize,
    pub seed: u64,
}

impl Default for EnrichConfig {
    fn default() -> Self {
        EnrichConfig {
            bins: DEFAULT_BINS,
            weight_mode: WeightMode::InverseDistance,
            samples_per_hour: None,
            hours_per_day: 24,
            seed: 0,
        }
    }
}

/// Everything a student needs from one teacher.
#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub id: String,
    pub samples_per_hour: usize,
    pub bounds: BoundModel,
    pub transitions: TransitionModel,
    pub patterns: Vec<Vec<f64>>,
}

pub fn train_teacher(series: &HighResSeries, cfg: &EnrichConfig) -> Result<TeacherModel> {
    Ok(TeacherModel {
        id: series.transformer.clone(),
        samples_per_hour: series.samples_per_hour,
        bounds: fit_bound_models(series)?,
        transitions: fit_transition_model(series, cfg.bins)?,
        patterns: series.to_hourly().daily_patterns(cfg.hours_per_day),
    })
}

pub fn train_teachers(series: &[HighResSeries], cfg: &EnrichConfig) -> Result<Vec<TeacherModel>> {
    series.par_iter().map(|s| train_teacher(s, cfg)).collect()
}

#[derive(Debug, Clone)]
pub struct EnrichedSeries {
    pub series: HighResSeries,
    pub weights: LearningWeights,
}

/// Enriches one student. `stream` separates the random streams of several
/// series that share a transformer id (e.g. active and reactive power).
pub fn enrich_student(
    student: &HourlySeries,
    teachers: &[TeacherModel],
    cfg: &EnrichConfig,
    stream: &str,
) -> Result<EnrichedSeries> {
    if teachers.is_empty() {
        return Err(Error::Parameter("at least one teacher is required".into()));
    }
    if student.is_empty() {
        return Err(Error::Data(format!("{}: no hourly data", student.transformer)));
    }
    if student.hours.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::Data(format!("{}: hourly data has gaps", student.transformer)));
    }
    let n = cfg.samples_per_hour.unwrap_or(teachers[0].samples_per_hour);
    if n == 0 {
        return Err(Error::Parameter("samples per hour must be positive".into()));
    }

    let patterns = student.daily_patterns(cfg.hours_per_day);
    let weights = if patterns.is_empty() || teachers.iter().any(|t| t.patterns.is_empty()) {
        log::warn!(
            "{}: no complete day to compare; using uniform weights",
            student.transformer
        );
        LearningWeights(vec![1.0 / teachers.len() as f64; teachers.len()])
    } else {
        let tp: Vec<Vec<Vec<f64>>> = teachers.iter().map(|t| t.patterns.clone()).collect();
        compute_learning_weights(&patterns, &tp, cfg.weight_mode)?
    };
    let bounds: Vec<BoundModel> = teachers.iter().map(|t| t.bounds.clone()).collect();
    let transitions: Vec<TransitionModel> = teachers.iter().map(|t| t.transitions.clone()).collect();
    let model = blend_teachers(&weights, &bounds, &transitions)?;

    let label = format!("{}/{stream}", student.transformer);
    let hours: Vec<Vec<f64>> = student
        .hours
        .par_iter()
        .zip(student.values.par_iter())
        .map(|(&h, &p_a)| {
            let mut rng = ChaCha8Rng::seed_from_u64(task_seed(cfg.seed, &label, h));
            enrich_hour(p_a, &model, n, &mut rng)
        })
        .collect::<Result<_>>()?;
    let series = HighResSeries::new(
        student.transformer.clone(),
        student.hours[0],
        n,
        hours.into_iter().flatten().collect(),
    )?;
    Ok(EnrichedSeries { series, weights })
}

/// Each hourly value repeated `n` times.
pub fn hold_hourly(series: &HourlySeries, n: usize) -> Result<HighResSeries> {
    if series.hours.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::Data(format!("{}: hourly data has gaps", series.transformer)));
    }
    let start = series.hours.first().copied().unwrap_or(0);
    let values = series.values.iter().flat_map(|v| std::iter::repeat_n(*v, n)).collect();
    HighResSeries::new(series.transformer.clone(), start, n, values)
}

#[derive(Debug, Clone)]
pub struct FleetEnrichment {
    /// Teachers unchanged, followed by enriched students, in id order.
    pub series: Vec<HighResPair>,
    /// Active-power learning weights of each student, keyed by student id.
    pub weights: BTreeMap<String, (Vec<String>, LearningWeights)>,
}

/// Runs the enrichment steps for every transformer.
///
/// Teachers pass through unchanged; a transformer present in both data sets
/// is treated as a teacher. Students learn only from teachers of the same
/// kind. Load reactive power is enriched independently of active power; PV
/// reactive power is a dispatch decision rather than an uncertainty, so its
/// hourly value is held over the hour.
pub fn enrich_fleet(
    map: &TransformerMap,
    pmu: &[HighResPair],
    sm: &[HourlyPair],
    cfg: &EnrichConfig,
) -> Result<FleetEnrichment> {
    let kind_of = |id: &str| -> Result<TransformerKind> {
        map.get(id)
            .map(|t| t.kind)
            .ok_or_else(|| Error::Data(format!("transformer {id} is not in the transformer map")))
    };
    if pmu.is_empty() && !sm.is_empty() {
        return Err(Error::Parameter(
            "no teacher (micro-PMU) data; use SM-only mode to estimate moments from hourly data".into(),
        ));
    }

    let mut out: BTreeMap<String, HighResPair> = BTreeMap::new();
    let mut weights = BTreeMap::new();
    for kind in [TransformerKind::Load, TransformerKind::Pv] {
        let mut teachers = Vec::new();
        for pair in pmu {
            if kind_of(&pair.p.transformer)? == kind {
                teachers.push(pair);
            }
        }
        let mut students = Vec::new();
        for pair in sm {
            let id = &pair.p.transformer;
            if kind_of(id)? == kind && !pmu.iter().any(|t| &t.p.transformer == id) {
                students.push(pair);
            }
        }
        for t in &teachers {
            out.insert(t.p.transformer.clone(), (*t).clone());
        }
        if students.is_empty() {
            continue;
        }
        if teachers.is_empty() {
            return Err(Error::Parameter(format!(
                "no {kind:?} teacher for {} students; use SM-only mode",
                students.len()
            )));
        }
        let ids: Vec<String> = teachers.iter().map(|t| t.p.transformer.clone()).collect();
        let p_series: Vec<HighResSeries> = teachers.iter().map(|t| t.p.clone()).collect();
        let p_models = train_teachers(&p_series, cfg)?;
        let q_models = if kind == TransformerKind::Load {
            let q_series: Vec<HighResSeries> = teachers.iter().map(|t| t.q.clone()).collect();
            Some(train_teachers(&q_series, cfg)?)
        } else {
            None
        };
        let n = cfg.samples_per_hour.unwrap_or(p_models[0].samples_per_hour);
        let enriched: Vec<(HighResPair, LearningWeights)> = students
            .par_iter()
            .map(|s| {
                let p = enrich_student(&s.p, &p_models, cfg, "p")?;
                let q = match &q_models {
                    Some(m) => enrich_student(&s.q, m, cfg, "q")?.series,
                    None => hold_hourly(&s.q, n)?,
                };
                Ok((HighResPair { p: p.series, q }, p.weights))
            })
            .collect::<Result<_>>()?;
        for (pair, w) in enriched {
            weights.insert(pair.p.transformer.clone(), (ids.clone(), w));
            out.insert(pair.p.transformer.clone(), pair);
        }
    }
    Ok(FleetEnrichment {
        series: out.into_values().collect(),
        weights,
    })
}

/// Inverter capacity of every PV bus phase, keyed for [`MomentOptions`].
///
/// [`MomentOptions`]: super::moments::MomentOptions
pub fn inverter_capacities(feeder: &Feeder) -> HashMap<(String, Phase), f64> {
    let mut caps = HashMap::new();
    for bus in &feeder.buses {
        if let Some(pv) = &bus.pv {
            for ph in bus.pv_phases().iter() {
                caps.insert((bus.id.clone(), ph), pv.s_cap);
            }
        }
    }
    caps
}

/// Per-unit samples per (quantity, bus, phase, hour of horizon).
///
/// Transformers on the same bus phase and of the same kind are summed hour
/// by hour over the hours all of them cover. Every sample of elapsed hour
/// `h` contributes to horizon hour `h mod horizon`.
pub fn pooled_samples(
    map: &TransformerMap,
    series: &[HighResPair],
    horizon: usize,
    base_power_kva: f64,
) -> Result<SampleSet> {
    if horizon == 0 {
        return Err(Error::Parameter("horizon must be at least one hour".into()));
    }
    if !(base_power_kva > 0.0) {
        return Err(Error::Parameter(format!(
            "base power {base_power_kva} must be positive"
        )));
    }
    // (quantity, bus, phase) -> [(series, scale)]
    let mut groups: BTreeMap<(Quantity, String, Phase), Vec<&HighResSeries>> = BTreeMap::new();
    for pair in series {
        let info = map.get(&pair.p.transformer).ok_or_else(|| {
            Error::Data(format!(
                "transformer {} is not in the transformer map",
                pair.p.transformer
            ))
        })?;
        match info.kind {
            TransformerKind::Load => {
                groups
                    .entry((Quantity::PLoad, info.bus.clone(), info.phase))
                    .or_default()
                    .push(&pair.p);
                groups
                    .entry((Quantity::QLoad, info.bus.clone(), info.phase))
                    .or_default()
                    .push(&pair.q);
            }
            TransformerKind::Pv => {
                groups
                    .entry((Quantity::PGen, info.bus.clone(), info.phase))
                    .or_default()
                    .push(&pair.p);
            }
        }
    }

    let mut samples = SampleSet::new();
    for ((quantity, bus, phase), members) in groups {
        let n = members[0].samples_per_hour;
        if members.iter().any(|s| s.samples_per_hour != n) {
            return Err(Error::Data(format!(
                "transformers on bus {bus} phase {phase} have different sample rates"
            )));
        }
        let first = members.iter().map(|s| s.start_hour).max().expect("non-empty");
        let end = members
            .iter()
            .map(|s| s.start_hour + s.n_hours() as i64)
            .min()
            .expect("non-empty");
        for h in first..end {
            let mut total = vec![0.0; n];
            for s in &members {
                let k = (h - s.start_hour) as usize;
                for (acc, v) in total.iter_mut().zip(&s.values[k * n..(k + 1) * n]) {
                    *acc += v / base_power_kva;
                }
            }
            let key = EntryKey::new(quantity, bus.clone(), phase, h.rem_euclid(horizon as i64) as usize);
            samples.entry(key).or_default().extend(total);
        }
    }
    Ok(samples)
}

/// Hourly samples only: each hourly value is one sample.
pub fn pooled_hourly_samples(
    map: &TransformerMap,
    series: &[HourlyPair],
    horizon: usize,
    base_power_kva: f64,
) -> Result<SampleSet> {
    let as_high_res = series
        .iter()
        .map(|s| {
            Ok(HighResPair {
                p: hold_hourly(&s.p, 1)?,
                q: hold_hourly(&s.q, 1)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    pooled_samples(map, &as_high_res, horizon, base_power_kva)
}
