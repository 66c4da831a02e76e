//! Synthetic cohorts with planted temporal structure.
//!
//! Three signals can be switched on independently:
//!
//! * gap: after an inter-visit gap (start to start) longer than 365 days the
//!   next visit carries a GAP concept with probability `p_gap`, and never
//!   otherwise. Each patient belongs to a long-gap regime (all gaps in
//!   366..=700 days) with probability `long_gap_fraction`, otherwise all gaps
//!   are at most 365 days.
//! * seasonal: visits starting in the configured months receive a seasonal
//!   concept with probability `strength`.
//! * visit type: each visit type owns a concept profile; an event is drawn
//!   from its visit's profile with probability `affinity`.
//!
//! A small disease process (diabetes, heart failure, diuretics, death) feeds
//! the shipped cohort definitions. Every signal consumes its own ChaCha
//! stream, so toggling one leaves the others' draws untouched.

use chrono::{Datelike, Days, NaiveDate};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, WeightedIndex};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_store::{
    DischargeTo, Domain, Event, EventStore, Gender, Person, Visit, DEFAULT_VISIT_TYPES,
};

pub const T2DM: &str = "201820";
pub const T2DM_ALT: &str = "443238";
pub const T1DM: &str = "201254";
pub const HEART_FAILURE: &str = "316139";
pub const DIURETIC: &str = "956874";
pub const DEATH: &str = "4306655";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapSignal {
    pub enabled: bool,
    pub p_gap: f64,
    pub n_concepts: usize,
    pub long_gap_fraction: f64,
}

impl Default for GapSignal {
    fn default() -> Self {
        Self {
            enabled: true,
            p_gap: 0.3,
            n_concepts: 3,
            long_gap_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeasonalSignal {
    pub enabled: bool,
    pub n_concepts: usize,
    pub months: Vec<u32>,
    pub strength: f64,
}

impl Default for SeasonalSignal {
    fn default() -> Self {
        Self {
            enabled: true,
            n_concepts: 3,
            months: vec![12, 1, 2],
            strength: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisitTypeSignal {
    pub enabled: bool,
    pub affinity: f64,
    pub profile_size: usize,
}

impl Default for VisitTypeSignal {
    fn default() -> Self {
        Self {
            enabled: true,
            affinity: 0.6,
            profile_size: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiseasePlant {
    pub enabled: bool,
    pub p_t2dm: f64,
    pub p_t1dm: f64,
    pub p_hf_given_t2dm: f64,
    pub p_death: f64,
}

impl Default for DiseasePlant {
    fn default() -> Self {
        Self {
            enabled: true,
            p_t2dm: 0.2,
            p_t1dm: 0.02,
            p_hf_given_t2dm: 0.4,
            p_death: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_conditions: usize,
    pub n_procedures: usize,
    pub n_medications: usize,
    pub mean_visits: f64,
    pub mean_events_per_visit: f64,
    /// `(visit type, weight)` pairs.
    pub visit_type_mix: Vec<(String, f64)>,
    pub first_visit_year: i32,
    pub first_visit_span_years: u32,
    pub gap: GapSignal,
    pub seasonal: SeasonalSignal,
    pub visit_type: VisitTypeSignal,
    pub disease: DiseasePlant,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let mix = [
            ("outpatient", 0.35),
            ("office", 0.25),
            ("inpatient", 0.12),
            ("emergency", 0.1),
            ("emergency_inpatient", 0.05),
            ("home", 0.05),
            ("exam", 0.08),
        ];
        Self {
            n_patients: 1000,
            n_conditions: 120,
            n_procedures: 60,
            n_medications: 80,
            mean_visits: 8.0,
            mean_events_per_visit: 4.0,
            visit_type_mix: mix.iter().map(|(t, w)| (t.to_string(), *w)).collect(),
            first_visit_year: 2005,
            first_visit_span_years: 6,
            gap: GapSignal::default(),
            seasonal: SeasonalSignal::default(),
            visit_type: VisitTypeSignal::default(),
            disease: DiseasePlant::default(),
        }
    }
}

impl SynthConfig {
    /// Every violated constraint, not only the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let prob = |name: &str, p: f64, v: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&p) {
                v.push(format!("{name} = {p} is not a probability"));
            }
        };
        if self.n_patients == 0 {
            v.push("n_patients must be positive".into());
        }
        if self.n_conditions == 0 || self.n_procedures == 0 || self.n_medications == 0 {
            v.push("domain vocabulary sizes must be positive".into());
        }
        if !(self.mean_visits >= 1.0) {
            v.push("mean_visits must be >= 1".into());
        }
        if !(self.mean_events_per_visit >= 1.0) {
            v.push("mean_events_per_visit must be >= 1".into());
        }
        if self.visit_type_mix.is_empty()
            || self.visit_type_mix.iter().any(|(_, w)| !(*w >= 0.0))
            || self.visit_type_mix.iter().map(|(_, w)| w).sum::<f64>() <= 0.0
        {
            v.push("visit_type_mix needs non-negative weights with a positive sum".into());
        }
        for (t, _) in &self.visit_type_mix {
            if !DEFAULT_VISIT_TYPES.contains(&t.as_str()) {
                v.push(format!("unknown visit type `{t}`"));
            }
        }
        prob("gap.p_gap", self.gap.p_gap, &mut v);
        prob("gap.long_gap_fraction", self.gap.long_gap_fraction, &mut v);
        if self.gap.enabled && self.gap.n_concepts == 0 {
            v.push("gap.n_concepts must be positive".into());
        }
        prob("seasonal.strength", self.seasonal.strength, &mut v);
        if self.seasonal.months.iter().any(|m| !(1..=12).contains(m)) {
            v.push("seasonal.months must lie in 1..=12".into());
        }
        if self.seasonal.enabled && self.seasonal.n_concepts == 0 {
            v.push("seasonal.n_concepts must be positive".into());
        }
        prob("visit_type.affinity", self.visit_type.affinity, &mut v);
        if self.visit_type.enabled && self.visit_type.profile_size == 0 {
            v.push("visit_type.profile_size must be positive".into());
        }
        prob("disease.p_t2dm", self.disease.p_t2dm, &mut v);
        prob("disease.p_t1dm", self.disease.p_t1dm, &mut v);
        prob("disease.p_hf_given_t2dm", self.disease.p_hf_given_t2dm, &mut v);
        prob("disease.p_death", self.disease.p_death, &mut v);
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

pub fn gap_concepts(cfg: &SynthConfig) -> Vec<String> {
    (0..cfg.gap.n_concepts).map(|i| format!("gap_{i}")).collect()
}

pub fn seasonal_concepts(cfg: &SynthConfig) -> Vec<String> {
    (0..cfg.seasonal.n_concepts).map(|i| format!("season_{i}")).collect()
}

fn concept_name(domain: Domain, i: usize) -> String {
    match domain {
        Domain::Condition => format!("cond_{i:04}"),
        Domain::Procedure => format!("proc_{i:04}"),
        Domain::Medication => format!("med_{i:04}"),
    }
}

/// Rollup map for the generated base vocabulary: conditions and medications
/// roll up to their first two digits, procedures to their first three.
pub fn hierarchy(cfg: &SynthConfig) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for i in 0..cfg.n_conditions {
        out.push((concept_name(Domain::Condition, i), format!("cond_{:02}", i / 100)));
    }
    for i in 0..cfg.n_procedures {
        out.push((concept_name(Domain::Procedure, i), format!("proc_{:03}", i / 10)));
    }
    for i in 0..cfg.n_medications {
        out.push((concept_name(Domain::Medication, i), format!("med_{:02}", i / 100)));
    }
    out
}

pub fn hierarchy_csv(cfg: &SynthConfig) -> String {
    let mut s = String::from("concept_id,rollup_code\n");
    for (c, r) in hierarchy(cfg) {
        s.push_str(&format!("{c},{r}\n"));
    }
    s
}

struct Streams {
    structure: ChaCha8Rng,
    events: ChaCha8Rng,
    gap: ChaCha8Rng,
    seasonal: ChaCha8Rng,
    vtype: ChaCha8Rng,
    disease: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let s = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            structure: s(1),
            events: s(2),
            gap: s(3),
            seasonal: s(4),
            vtype: s(5),
            disease: s(6),
        }
    }
}

fn skewed_index<R: Rng>(n: usize, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    ((u * u) * n as f64).floor().min((n - 1) as f64) as usize
}

fn is_inpatient(t: &str) -> bool {
    t == "inpatient" || t == "emergency_inpatient"
}

pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<EventStore> {
    cfg.validate()?;
    let mut st = Streams::new(seed);
    let type_names: Vec<&str> = cfg.visit_type_mix.iter().map(|(t, _)| t.as_str()).collect();
    let type_dist = WeightedIndex::new(cfg.visit_type_mix.iter().map(|(_, w)| *w))
        .map_err(|e| Error::Config(format!("visit_type_mix: {e}")))?;
    let extra_visits = Poisson::new(cfg.mean_visits - 1.0).ok();
    let extra_events = Poisson::new(cfg.mean_events_per_visit - 1.0).ok();
    let domain_dist = WeightedIndex::new([0.5, 0.25, 0.25]).unwrap();
    let domains = [Domain::Condition, Domain::Procedure, Domain::Medication];
    let sizes = [cfg.n_conditions, cfg.n_procedures, cfg.n_medications];

    // one profile per visit type, over the whole base vocabulary
    let profiles: Vec<Vec<(Domain, usize)>> = type_names
        .iter()
        .map(|_| {
            (0..cfg.visit_type.profile_size)
                .map(|_| {
                    let d = domain_dist.sample(&mut st.vtype);
                    (domains[d], st.vtype.gen_range(0..sizes[d]))
                })
                .collect()
        })
        .collect();
    let gap_set = gap_concepts(cfg);
    let season_set = seasonal_concepts(cfg);
    let base = NaiveDate::from_ymd_opt(cfg.first_visit_year, 1, 1)
        .ok_or_else(|| Error::Config("first_visit_year out of range".into()))?;

    let mut persons = Vec::with_capacity(cfg.n_patients);
    let mut visits = Vec::new();
    let mut events = Vec::new();
    for i in 0..cfg.n_patients {
        let pid = format!("p{i:06}");
        let s = &mut st.structure;
        let first = base + Days::new(s.gen_range(0..=cfg.first_visit_span_years as u64 * 365));
        let age_days = (s.gen_range(18.0..85.0) * 365.25) as u64;
        let birth = first - Days::new(age_days);
        let gender = [Gender::Female, Gender::Male, Gender::Other][WeightedIndex::new([0.49, 0.49, 0.02])
            .unwrap()
            .sample(s)];
        let long_regime = s.gen::<f64>() < cfg.gap.long_gap_fraction;
        let n_visits = 1 + extra_visits.map_or(0, |p| p.sample(s) as usize);

        // visit skeleton
        let mut skel: Vec<(NaiveDate, NaiveDate, usize, i64)> = Vec::with_capacity(n_visits);
        let mut start = first;
        let mut prev_gap = -1i64;
        for k in 0..n_visits {
            let t = type_dist.sample(s);
            let dur = if is_inpatient(type_names[t]) { s.gen_range(1..=10u64) } else { 0 };
            let end = start + Days::new(dur);
            skel.push((start, end, t, prev_gap));
            if k + 1 < n_visits {
                let gap = if long_regime {
                    s.gen_range(366..=700u64)
                } else {
                    // log-uniform over 1..=365 so week, month and year scales all occur
                    let g = (s.gen_range(0.0f64..(365f64).ln())).exp().round() as u64;
                    g.clamp(1, 365)
                };
                let gap = gap.max(dur);
                prev_gap = gap as i64;
                start = start + Days::new(gap);
            }
        }
        let discharge: Vec<Option<DischargeTo>> = skel
            .iter()
            .map(|&(_, _, t, _)| {
                is_inpatient(type_names[t]).then(|| {
                    [DischargeTo::Home, DischargeTo::Nursing, DischargeTo::Other]
                        [WeightedIndex::new([0.7, 0.2, 0.1]).unwrap().sample(s)]
                })
            })
            .collect();

        // disease course, decided up front on its own stream
        let dz = &mut st.disease;
        let mut planted: Vec<Vec<&str>> = vec![Vec::new(); n_visits];
        if cfg.disease.enabled {
            let has_t2dm = dz.gen::<f64>() < cfg.disease.p_t2dm;
            let has_t1dm = dz.gen::<f64>() < cfg.disease.p_t1dm;
            let k = dz.gen_range(0..n_visits);
            let hf_draw = dz.gen::<f64>() < cfg.disease.p_hf_given_t2dm;
            let dies = dz.gen::<f64>() < cfg.disease.p_death;
            let repeat: Vec<f64> = (0..n_visits).map(|_| dz.gen()).collect();
            if has_t2dm {
                planted[k].push(if repeat[k] < 0.5 { T2DM } else { T2DM_ALT });
                for j in k + 1..n_visits {
                    if repeat[j] < 0.5 {
                        planted[j].push(T2DM);
                    }
                }
                if hf_draw && k + 1 < n_visits {
                    let later: Vec<usize> = (k + 1..n_visits).collect();
                    let inpatient: Vec<usize> =
                        later.iter().copied().filter(|&j| is_inpatient(type_names[skel[j].2])).collect();
                    let pool = if inpatient.is_empty() { &later } else { &inpatient };
                    let j = pool[dz.gen_range(0..pool.len())];
                    planted[j].push(HEART_FAILURE);
                    for (m, visit_plants) in planted.iter_mut().enumerate().skip(j) {
                        if m == j || repeat[m] < 0.7 {
                            visit_plants.push(DIURETIC);
                        }
                    }
                }
            }
            if has_t1dm {
                planted[k].push(T1DM);
            }
            if dies {
                planted[n_visits - 1].push(DEATH);
            }
        }

        for (k, &(vs, ve, t, gap_before)) in skel.iter().enumerate() {
            let vid = format!("{pid}_v{k:03}");
            let vtype = type_names[t];
            visits.push(Visit {
                visit_id: vid.clone(),
                person_id: pid.clone(),
                visit_type: vtype.to_string(),
                start_date: vs,
                end_date: ve,
                discharge_to: discharge[k],
            });
            let span = (ve - vs).num_days() as u64;
            let mut push = |domain: Domain, concept: String, date: NaiveDate| {
                events.push(Event {
                    person_id: pid.clone(),
                    visit_id: vid.clone(),
                    domain,
                    concept_id: concept,
                    event_date: date,
                });
            };
            let ev = &mut st.events;
            let n_ev = 1 + extra_events.map_or(0, |p| p.sample(ev) as usize);
            for _ in 0..n_ev {
                let d = domain_dist.sample(ev);
                let idx = skewed_index(sizes[d], ev);
                let date = vs + Days::new(ev.gen_range(0..=span));
                let (mut dom, mut ci) = (domains[d], idx);
                if cfg.visit_type.enabled {
                    let vt = &mut st.vtype;
                    if vt.gen::<f64>() < cfg.visit_type.affinity {
                        (dom, ci) = profiles[t][vt.gen_range(0..profiles[t].len())];
                    }
                }
                push(dom, concept_name(dom, ci), date);
            }
            if cfg.gap.enabled && gap_before > 365 {
                let g = &mut st.gap;
                let hit = g.gen::<f64>() < cfg.gap.p_gap;
                let which = g.gen_range(0..gap_set.len());
                if hit {
                    push(Domain::Condition, gap_set[which].clone(), vs);
                }
            }
            if cfg.seasonal.enabled && cfg.seasonal.months.contains(&vs.month()) {
                let sr = &mut st.seasonal;
                let hit = sr.gen::<f64>() < cfg.seasonal.strength;
                let which = sr.gen_range(0..season_set.len());
                if hit {
                    push(Domain::Condition, season_set[which].clone(), vs);
                }
            }
            for &c in &planted[k] {
                let domain = if c == DIURETIC { Domain::Medication } else { Domain::Condition };
                push(domain, c.to_string(), vs);
            }
        }
        persons.push(Person {
            person_id: pid,
            birth_date: birth,
            gender,
        });
    }
    EventStore::from_records(persons, visits, events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_patients: 50,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_synthetic(&small(), 3).unwrap();
        let b = generate_synthetic(&small(), 3).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let c = generate_synthetic(&small(), 4).unwrap();
        assert_ne!(a.to_csv(), c.to_csv());
    }

    #[test]
    fn invalid_config_lists_every_problem() {
        let cfg = SynthConfig {
            n_patients: 0,
            gap: GapSignal {
                p_gap: 1.5,
                ..Default::default()
            },
            ..Default::default()
        };
        assert_eq!(cfg.violations().len(), 2);
        assert!(generate_synthetic(&cfg, 0).is_err());
    }

    #[test]
    fn toggling_gap_leaves_base_events_alone() {
        let on = generate_synthetic(&small(), 9).unwrap();
        let mut cfg = small();
        cfg.gap.enabled = false;
        let off = generate_synthetic(&cfg, 9).unwrap();
        let strip = |s: &EventStore| -> Vec<String> {
            s.patients()
                .iter()
                .flat_map(|p| p.events())
                .filter(|e| !e.concept_id.starts_with("gap_"))
                .map(|e| format!("{}{}{}", e.visit_id, e.concept_id, e.event_date))
                .collect()
        };
        assert_eq!(strip(&on), strip(&off));
    }
}
