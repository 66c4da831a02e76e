//! Declarative prediction tasks: index events, inclusion rules, windows and
//! labels, plus rolled-up frequency features for linear baselines.

mod features;
mod shipped;

pub use features::{rollup_counts, rollup_features, FeatureVocab, Hierarchy};
pub use shipped::{gap_signal, shipped, shipped_names};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::event_store::{DischargeTo, Event, EventStore, Patient, VisitEvents, DATE_FMT};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Features before the index date, prediction window right after it.
    #[default]
    Standard,
    /// Features in a window starting at the index date; hold-off and
    /// prediction windows follow it.
    PostIndex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    EventDate,
    VisitStart,
    VisitEnd,
}

/// Matches visits, or events within visits when concept sets are named.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predicate {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub concept_sets: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub visit_types: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub discharge_to: Vec<String>,
    /// 1-based visit number within the person's history.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nth_visit: Option<usize>,
    /// Defaults to the event date for concept predicates, else visit start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Anchor>,
}

impl Predicate {
    fn is_empty(&self) -> bool {
        self.concept_sets.is_empty()
            && self.visit_types.is_empty()
            && self.discharge_to.is_empty()
            && self.nth_visit.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleWindow {
    /// The example's feature window.
    Observation,
    /// Everything strictly before the index date.
    BeforeIndex,
    /// Everything up to and including the index date.
    ThroughIndex,
    /// The visit holding the index event.
    IndexVisit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountUnit {
    #[default]
    Events,
    Visits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inclusion {
    pub window: RuleWindow,
    #[serde(default)]
    pub count: CountUnit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<usize>,
    #[serde(default)]
    pub matches: Predicate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConceptSet {
    Inline(Vec<String>),
    File { file: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortDefinition {
    pub name: String,
    #[serde(default)]
    pub layout: Layout,
    /// Absent means unbounded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation_window_days: Option<i64>,
    #[serde(default)]
    pub hold_off_days: i64,
    /// Absent means unbounded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_window_days: Option<i64>,
    /// Lets index and outcome predicates overlap.
    #[serde(default)]
    pub allow_overlap: bool,
    #[serde(default)]
    pub concept_sets: BTreeMap<String, ConceptSet>,
    pub index: Predicate,
    #[serde(default)]
    pub inclusion: Vec<Inclusion>,
    pub outcome: Predicate,
}

/// A definition with concept sets loaded and every field checked.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub def: CohortDefinition,
    sets: HashMap<String, HashSet<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub person_id: String,
    pub index_date: NaiveDate,
    pub label: u8,
    /// Inclusive feature window; `None` start is unbounded.
    pub feature_start: Option<NaiveDate>,
    pub feature_end: NaiveDate,
}

fn shift(d: NaiveDate, days: i64) -> NaiveDate {
    if days >= 0 {
        d.checked_add_days(Days::new(days as u64)).unwrap_or(NaiveDate::MAX)
    } else {
        d.checked_sub_days(Days::new(days.unsigned_abs())).unwrap_or(NaiveDate::MIN)
    }
}

pub fn read_concept_set(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_concept_set(&text, &path.display().to_string())
}

/// One-column CSV with a `concept_id` header.
pub fn parse_concept_set(text: &str, file: &str) -> Result<Vec<String>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("concept_id") {
        return Err(Error::Malformed {
            file: file.to_string(),
            line: 1,
            msg: "expected header `concept_id`".into(),
        });
    }
    Ok(lines.map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

impl CohortDefinition {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))
    }

    /// Parses a definition file and inlines concept-set files named relative
    /// to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut def = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for set in def.concept_sets.values_mut() {
            if let ConceptSet::File { file } = set {
                *set = ConceptSet::Inline(read_concept_set(&base.join(&*file))?);
            }
        }
        Ok(def)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("definition serializes")
    }

    pub fn with_observation_window(&self, days: Option<i64>) -> Self {
        Self {
            observation_window_days: days,
            ..self.clone()
        }
    }

    /// Every problem with the definition; concept sets must be inline.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (what, w) in [
            ("observation_window_days", self.observation_window_days),
            ("hold_off_days", Some(self.hold_off_days)),
            ("prediction_window_days", self.prediction_window_days),
        ] {
            if w.is_some_and(|d| d < 0) {
                v.push(format!("{what} must be >= 0"));
            }
        }
        if self.layout == Layout::PostIndex && self.observation_window_days.is_none() {
            v.push("post_index layout needs a bounded observation window".into());
        }
        if self.index.is_empty() {
            v.push("index predicate matches everything".into());
        }
        if self.outcome.is_empty() {
            v.push("outcome predicate matches everything".into());
        }
        let mut preds: Vec<(&str, &Predicate)> = vec![("index", &self.index), ("outcome", &self.outcome)];
        for (i, r) in self.inclusion.iter().enumerate() {
            if let (Some(lo), Some(hi)) = (r.min, r.max) {
                if lo > hi {
                    v.push(format!("inclusion {i}: min {lo} > max {hi}"));
                }
            }
            preds.push(("inclusion", &r.matches));
        }
        for (what, p) in preds {
            for s in &p.concept_sets {
                match self.concept_sets.get(s) {
                    None => v.push(format!("{what}: unknown concept set `{s}`")),
                    Some(ConceptSet::File { file }) => {
                        v.push(format!("{what}: concept set `{s}` not loaded from {}", file.display()))
                    }
                    Some(ConceptSet::Inline(_)) => {}
                }
            }
            for d in &p.discharge_to {
                if let Err(e) = d.parse::<DischargeTo>() {
                    v.push(format!("{what}: {e}"));
                }
            }
            if p.nth_visit == Some(0) {
                v.push(format!("{what}: nth_visit is 1-based"));
            }
            if p.anchor == Some(Anchor::EventDate) && p.concept_sets.is_empty() {
                v.push(format!("{what}: event_date anchor needs concept sets"));
            }
        }
        if !self.allow_overlap {
            let concepts = |p: &Predicate| -> HashSet<&str> {
                p.concept_sets
                    .iter()
                    .filter_map(|s| match self.concept_sets.get(s) {
                        Some(ConceptSet::Inline(c)) => Some(c.iter().map(String::as_str)),
                        _ => None,
                    })
                    .flatten()
                    .collect()
            };
            let (ci, co) = (concepts(&self.index), concepts(&self.outcome));
            if let Some(c) = ci.intersection(&co).next() {
                v.push(format!("concept `{c}` is both index and outcome; set allow_overlap"));
            }
            let shared_type = self.index.visit_types.iter().find(|t| self.outcome.visit_types.contains(t));
            if let Some(t) = shared_type {
                if co.is_empty() {
                    v.push(format!("visit type `{t}` is both index and outcome; set allow_overlap"));
                }
            }
        }
        v
    }

    pub fn compile(&self) -> Result<Cohort> {
        let v = self.violations();
        if !v.is_empty() {
            return Err(Error::Cohort {
                name: self.name.clone(),
                msg: v.join("; "),
            });
        }
        let sets = self
            .concept_sets
            .iter()
            .map(|(k, s)| match s {
                ConceptSet::Inline(c) => (k.clone(), c.iter().cloned().collect()),
                ConceptSet::File { .. } => unreachable!("checked above"),
            })
            .collect();
        Ok(Cohort { def: self.clone(), sets })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Occurrence {
    date: NaiveDate,
    visit: usize,
}

impl Cohort {
    pub fn name(&self) -> &str {
        &self.def.name
    }

    fn occurrences(&self, p: &Patient, pred: &Predicate) -> Vec<Occurrence> {
        let mut out = Vec::new();
        for (k, ve) in p.visits.iter().enumerate() {
            let v = &ve.visit;
            if pred.nth_visit.is_some_and(|n| n != k + 1) {
                continue;
            }
            if !pred.visit_types.is_empty() && !pred.visit_types.contains(&v.visit_type) {
                continue;
            }
            if !pred.discharge_to.is_empty()
                && !v.discharge_to.is_some_and(|d| pred.discharge_to.iter().any(|s| s == d.as_str()))
            {
                continue;
            }
            let at = |anchor: Anchor, e: Option<&Event>| match anchor {
                Anchor::VisitStart => v.start_date,
                Anchor::VisitEnd => v.end_date,
                Anchor::EventDate => e.map_or(v.start_date, |e| e.event_date),
            };
            if pred.concept_sets.is_empty() {
                out.push(Occurrence {
                    date: at(pred.anchor.unwrap_or(Anchor::VisitStart), None),
                    visit: k,
                });
            } else {
                for e in &ve.events {
                    if pred.concept_sets.iter().any(|s| self.sets[s].contains(&e.concept_id)) {
                        out.push(Occurrence {
                            date: at(pred.anchor.unwrap_or(Anchor::EventDate), Some(e)),
                            visit: k,
                        });
                    }
                }
            }
        }
        out.sort();
        out
    }

    /// Inclusive feature window for an index date.
    fn feature_window(&self, index: NaiveDate) -> (Option<NaiveDate>, NaiveDate) {
        let d = &self.def;
        match d.layout {
            Layout::Standard => (
                d.observation_window_days.map(|o| shift(index, -o)),
                shift(index, -d.hold_off_days),
            ),
            Layout::PostIndex => (Some(index), shift(index, d.observation_window_days.unwrap_or(0))),
        }
    }

    /// Half-open prediction window `(start, end]`; `None` end is unbounded.
    pub fn prediction_window(&self, index: NaiveDate) -> (NaiveDate, Option<NaiveDate>) {
        let d = &self.def;
        let start = match d.layout {
            Layout::Standard => index,
            Layout::PostIndex => shift(index, d.observation_window_days.unwrap_or(0) + d.hold_off_days),
        };
        (start, d.prediction_window_days.map(|w| shift(start, w)))
    }

    fn passes(&self, p: &Patient, rule: &Inclusion, at: Occurrence, window: (Option<NaiveDate>, NaiveDate)) -> bool {
        let hits: Vec<Occurrence> = self
            .occurrences(p, &rule.matches)
            .into_iter()
            .filter(|o| match rule.window {
                RuleWindow::Observation => window.0.is_none_or(|s| o.date >= s) && o.date <= window.1,
                RuleWindow::BeforeIndex => o.date < at.date,
                RuleWindow::ThroughIndex => o.date <= at.date,
                RuleWindow::IndexVisit => o.visit == at.visit,
            })
            .collect();
        let n = match rule.count {
            CountUnit::Events => hits.len(),
            CountUnit::Visits => hits.iter().map(|o| o.visit).collect::<HashSet<_>>().len(),
        };
        rule.min.is_none_or(|m| n >= m) && rule.max.is_none_or(|m| n <= m)
    }

    /// The example for one person at their first qualifying index date.
    pub fn example_for(&self, p: &Patient) -> Option<LabeledExample> {
        let outcomes = self.occurrences(p, &self.def.outcome);
        for at in self.occurrences(p, &self.def.index) {
            let window = self.feature_window(at.date);
            if !self.def.inclusion.iter().all(|r| self.passes(p, r, at, window)) {
                continue;
            }
            let (ps, pe) = self.prediction_window(at.date);
            let label = outcomes.iter().any(|o| o.date > ps && pe.is_none_or(|e| o.date <= e));
            return Some(LabeledExample {
                person_id: p.person.person_id.clone(),
                index_date: at.date,
                label: label as u8,
                feature_start: window.0,
                feature_end: window.1,
            });
        }
        None
    }

    pub fn build(&self, store: &EventStore) -> Result<Vec<LabeledExample>> {
        if store.is_empty() {
            return Err(Error::EmptyStore);
        }
        Ok(store.patients().iter().filter_map(|p| self.example_for(p)).collect())
    }
}

pub fn build_cohort(store: &EventStore, def: &CohortDefinition) -> Result<Vec<LabeledExample>> {
    def.compile()?.build(store)
}

impl LabeledExample {
    pub fn in_window(&self, d: NaiveDate) -> bool {
        self.feature_start.is_none_or(|s| d >= s) && d <= self.feature_end
    }

    pub fn feature_events<'a>(&'a self, p: &'a Patient) -> impl Iterator<Item = &'a Event> + 'a {
        p.events().filter(move |e| self.in_window(e.event_date))
    }

    /// Visits restricted to in-window events; visits left empty are dropped.
    pub fn feature_visits(&self, p: &Patient) -> Vec<VisitEvents> {
        p.visits
            .iter()
            .filter_map(|ve| {
                let events: Vec<Event> = ve.events.iter().filter(|e| self.in_window(e.event_date)).cloned().collect();
                (!events.is_empty()).then(|| VisitEvents {
                    visit: ve.visit.clone(),
                    events,
                })
            })
            .collect()
    }
}

pub fn examples_csv(examples: &[LabeledExample]) -> String {
    let mut s = String::from("person_id,index_date,label\n");
    for e in examples {
        let _ = writeln!(s, "{},{},{}", e.person_id, e.index_date.format(DATE_FMT), e.label);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_store::{parse_date, Domain, Gender, Person, Visit};

    fn d(s: &str) -> NaiveDate {
        parse_date(s).unwrap()
    }

    fn store(visits: &[(&str, &str, &str, &[&str])]) -> EventStore {
        let mut vs = Vec::new();
        let mut es = Vec::new();
        for (i, (ty, start, end, concepts)) in visits.iter().enumerate() {
            let id = format!("v{i}");
            vs.push(Visit {
                visit_id: id.clone(),
                person_id: "p".into(),
                visit_type: ty.to_string(),
                start_date: d(start),
                end_date: d(end),
                discharge_to: None,
            });
            for c in concepts.iter() {
                es.push(Event {
                    person_id: "p".into(),
                    visit_id: id.clone(),
                    domain: Domain::Condition,
                    concept_id: c.to_string(),
                    event_date: d(start),
                });
            }
        }
        let person = Person {
            person_id: "p".into(),
            birth_date: d("1950-01-01"),
            gender: Gender::Female,
        };
        EventStore::from_records(vec![person], vs, es).unwrap()
    }

    fn def(text: &str) -> CohortDefinition {
        CohortDefinition::from_toml(text).unwrap()
    }

    const SIMPLE: &str = r#"
        name = "t"
        prediction_window_days = 30
        concept_sets = { a = ["a"], b = ["b"] }
        index = { concept_sets = ["a"] }
        outcome = { concept_sets = ["b"] }
    "#;

    #[test]
    fn outcome_must_follow_index() {
        let c = def(SIMPLE).compile().unwrap();
        let same_day = store(&[("outpatient", "2020-01-01", "2020-01-01", &["a", "b"])]);
        assert_eq!(c.build(&same_day).unwrap()[0].label, 0);
        let later = store(&[
            ("outpatient", "2020-01-01", "2020-01-01", &["a"]),
            ("outpatient", "2020-01-31", "2020-01-31", &["b"]),
        ]);
        assert_eq!(c.build(&later).unwrap()[0].label, 1);
        let too_late = store(&[
            ("outpatient", "2020-01-01", "2020-01-01", &["a"]),
            ("outpatient", "2020-02-01", "2020-02-01", &["b"]),
        ]);
        assert_eq!(c.build(&too_late).unwrap()[0].label, 0);
    }

    #[test]
    fn first_qualifying_index_only() {
        let c = def(SIMPLE).compile().unwrap();
        let s = store(&[
            ("outpatient", "2020-01-01", "2020-01-01", &["a"]),
            ("outpatient", "2020-03-01", "2020-03-01", &["a"]),
        ]);
        let ex = c.build(&s).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].index_date, d("2020-01-01"));
    }

    #[test]
    fn violations_are_enumerated() {
        let bad = def(r#"
            name = "bad"
            hold_off_days = -1
            layout = "post_index"
            index = { concept_sets = ["missing"], discharge_to = ["moon"] }
            outcome = {}
        "#);
        assert_eq!(bad.violations().len(), 5, "{:?}", bad.violations());
        assert!(bad.compile().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(CohortDefinition::from_toml("name = \"x\"\nbogus = 1\nindex = {nth_visit = 1}\noutcome = {nth_visit = 2}").is_err());
    }

    #[test]
    fn overlap_needs_opt_in() {
        let text = r#"
            name = "o"
            concept_sets = { a = ["a"] }
            index = { concept_sets = ["a"] }
            outcome = { concept_sets = ["a"] }
        "#;
        assert_eq!(def(text).violations().len(), 1);
        let ok = def(&format!("allow_overlap = true\n{text}"));
        assert!(ok.violations().is_empty());
    }

    #[test]
    fn feature_window_excludes_hold_off() {
        let c = def(r#"
            name = "h"
            observation_window_days = 100
            hold_off_days = 10
            prediction_window_days = 30
            concept_sets = { a = ["a"], b = ["b"] }
            index = { concept_sets = ["a"] }
            outcome = { concept_sets = ["b"] }
        "#)
        .compile()
        .unwrap();
        let s = store(&[
            ("outpatient", "2019-01-01", "2019-01-01", &["x"]),
            ("outpatient", "2019-12-01", "2019-12-01", &["y"]),
            ("outpatient", "2019-12-28", "2019-12-28", &["z"]),
            ("outpatient", "2020-01-01", "2020-01-01", &["a"]),
        ]);
        let ex = &c.build(&s).unwrap()[0];
        let p = s.patient("p").unwrap();
        let got: Vec<&str> = ex.feature_events(p).map(|e| e.concept_id.as_str()).collect();
        assert_eq!(got, ["y"]);
        assert_eq!(ex.feature_visits(p).len(), 1);
    }

    #[test]
    fn csv_export() {
        let ex = LabeledExample {
            person_id: "p".into(),
            index_date: d("2020-01-02"),
            label: 1,
            feature_start: None,
            feature_end: d("2020-01-02"),
        };
        assert_eq!(examples_csv(&[ex]), "person_id,index_date,label\np,2020-01-02,1\n");
    }
}
