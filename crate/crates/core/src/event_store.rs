//! Persons, visits and domain events, validated and indexed per person.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::Deserialize;

use crate::error::{io_err, Error, Result};

pub const DATE_FMT: &str = "%Y-%m-%d";

/// Visit types accepted by default.
pub const DEFAULT_VISIT_TYPES: [&str; 7] = [
    "outpatient",
    "inpatient",
    "emergency",
    "emergency_inpatient",
    "office",
    "home",
    "exam",
];

macro_rules! str_enum {
    ($name:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($var),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$var => $s),+ }
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok(Self::$var),)+
                    _ => Err(format!("unknown {} `{s}`", stringify!($name).to_lowercase())),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

str_enum!(Gender { Female => "female", Male => "male", Other => "other" });
str_enum!(Domain { Condition => "condition", Procedure => "procedure", Medication => "medication" });
str_enum!(DischargeTo { Home => "home", Nursing => "nursing", Other => "other" });

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Person {
    pub person_id: String,
    pub birth_date: NaiveDate,
    pub gender: Gender,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Visit {
    pub visit_id: String,
    pub person_id: String,
    pub visit_type: String,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub discharge_to: Option<DischargeTo>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub person_id: String,
    pub visit_id: String,
    pub domain: Domain,
    pub concept_id: String,
    pub event_date: NaiveDate,
}

impl Event {
    /// Canonical order within a visit: date, then domain, then concept.
    fn sort_key(&self) -> (NaiveDate, Domain, &str) {
        (self.event_date, self.domain, &self.concept_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisitEvents {
    pub visit: Visit,
    pub events: Vec<Event>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Patient {
    pub person: Person,
    /// Sorted by start date (ties by visit id).
    pub visits: Vec<VisitEvents>,
}

impl Patient {
    pub fn n_events(&self) -> usize {
        self.visits.iter().map(|v| v.events.len()).sum()
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.visits.iter().flat_map(|v| v.events.iter())
    }
}

/// Immutable, validated collection of patients ordered by person id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStore {
    patients: Vec<Patient>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub visit_types: Vec<String>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            visit_types: DEFAULT_VISIT_TYPES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Deserialize)]
struct PersonRow {
    person_id: String,
    birth_date: String,
    gender: String,
}

#[derive(Deserialize)]
struct VisitRow {
    visit_id: String,
    person_id: String,
    visit_type: String,
    start_date: String,
    end_date: String,
    discharge_to: String,
}

#[derive(Deserialize)]
struct EventRow {
    person_id: String,
    visit_id: String,
    domain: String,
    concept_id: String,
    event_date: String,
}

pub fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s, DATE_FMT).map_err(|e| format!("bad date `{s}`: {e}"))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, file: &str) -> Result<Vec<(u64, T)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => io_err(path)(io),
            other => Error::Malformed {
                file: file.into(),
                line: 1,
                msg: format!("{other:?}"),
            },
        })?;
    let mut out = Vec::new();
    for rec in rdr.deserialize::<T>() {
        match rec {
            Ok(row) => {
                // header is line 1; data rows follow
                out.push((out.len() as u64 + 2, row));
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(Error::Malformed {
                    file: file.into(),
                    line,
                    msg: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

fn malformed(file: &str, line: u64, msg: impl Into<String>) -> Error {
    Error::Malformed {
        file: file.into(),
        line,
        msg: msg.into(),
    }
}

fn integrity(file: &str, line: u64, msg: impl Into<String>) -> Error {
    Error::Integrity {
        file: file.into(),
        line,
        msg: msg.into(),
    }
}

impl EventStore {
    /// Loads and validates the three CSV tables.
    pub fn load(persons: &Path, visits: &Path, events: &Path, opts: &LoadOptions) -> Result<Self> {
        let prow = read_rows::<PersonRow>(persons, "persons.csv")?;
        let vrow = read_rows::<VisitRow>(visits, "visits.csv")?;
        let erow = read_rows::<EventRow>(events, "events.csv")?;

        let mut ps = Vec::with_capacity(prow.len());
        for (line, r) in prow {
            let f = "persons.csv";
            ps.push((
                line,
                Person {
                    birth_date: parse_date(&r.birth_date).map_err(|m| malformed(f, line, m))?,
                    gender: r.gender.parse().map_err(|m: String| malformed(f, line, m))?,
                    person_id: r.person_id,
                },
            ));
        }
        let mut vs = Vec::with_capacity(vrow.len());
        for (line, r) in vrow {
            let f = "visits.csv";
            let discharge_to = match r.discharge_to.as_str() {
                "" => None,
                s => Some(s.parse().map_err(|m: String| malformed(f, line, m))?),
            };
            if !opts.visit_types.iter().any(|t| *t == r.visit_type) {
                return Err(malformed(f, line, format!("unknown visit type `{}`", r.visit_type)));
            }
            vs.push((
                line,
                Visit {
                    start_date: parse_date(&r.start_date).map_err(|m| malformed(f, line, m))?,
                    end_date: parse_date(&r.end_date).map_err(|m| malformed(f, line, m))?,
                    visit_id: r.visit_id,
                    person_id: r.person_id,
                    visit_type: r.visit_type,
                    discharge_to,
                },
            ));
        }
        let mut es = Vec::with_capacity(erow.len());
        for (line, r) in erow {
            let f = "events.csv";
            es.push((
                line,
                Event {
                    domain: r.domain.parse().map_err(|m: String| malformed(f, line, m))?,
                    event_date: parse_date(&r.event_date).map_err(|m| malformed(f, line, m))?,
                    person_id: r.person_id,
                    visit_id: r.visit_id,
                    concept_id: r.concept_id,
                },
            ));
        }
        Self::assemble(ps, vs, es)
    }

    /// Loads `persons.csv`, `visits.csv` and `events.csv` from one directory.
    pub fn load_dir(dir: &Path, opts: &LoadOptions) -> Result<Self> {
        Self::load(
            &dir.join("persons.csv"),
            &dir.join("visits.csv"),
            &dir.join("events.csv"),
            opts,
        )
    }

    /// Builds a store from in-memory records, applying every load-time check.
    pub fn from_records(persons: Vec<Person>, visits: Vec<Visit>, events: Vec<Event>) -> Result<Self> {
        let number = |n: usize| (2..).take(n).collect::<Vec<u64>>();
        let (pl, vl, el) = (number(persons.len()), number(visits.len()), number(events.len()));
        Self::assemble(
            pl.into_iter().zip(persons).collect(),
            vl.into_iter().zip(visits).collect(),
            el.into_iter().zip(events).collect(),
        )
    }

    fn assemble(persons: Vec<(u64, Person)>, visits: Vec<(u64, Visit)>, events: Vec<(u64, Event)>) -> Result<Self> {
        let mut patients: Vec<Patient> = Vec::with_capacity(persons.len());
        let mut index = HashMap::with_capacity(persons.len());
        for (line, p) in persons {
            if p.person_id.is_empty() {
                return Err(malformed("persons.csv", line, "empty person_id"));
            }
            if index.insert(p.person_id.clone(), patients.len()).is_some() {
                return Err(integrity("persons.csv", line, format!("duplicate person_id `{}`", p.person_id)));
            }
            patients.push(Patient {
                person: p,
                visits: Vec::new(),
            });
        }

        let mut visit_loc: HashMap<String, (usize, u64)> = HashMap::with_capacity(visits.len());
        let mut visit_lines: Vec<Vec<u64>> = vec![Vec::new(); patients.len()];
        for (line, v) in visits {
            let f = "visits.csv";
            let &pi = index
                .get(&v.person_id)
                .ok_or_else(|| integrity(f, line, format!("unknown person `{}`", v.person_id)))?;
            if v.visit_id.is_empty() {
                return Err(malformed(f, line, "empty visit_id"));
            }
            if v.start_date > v.end_date {
                return Err(integrity(f, line, format!("visit `{}` ends before it starts", v.visit_id)));
            }
            if v.start_date < patients[pi].person.birth_date {
                return Err(integrity(f, line, format!("visit `{}` precedes birth date", v.visit_id)));
            }
            if visit_loc.insert(v.visit_id.clone(), (pi, line)).is_some() {
                return Err(integrity(f, line, format!("duplicate visit_id `{}`", v.visit_id)));
            }
            patients[pi].visits.push(VisitEvents { visit: v, events: Vec::new() });
            visit_lines[pi].push(line);
        }

        // order visits, then remember each visit's position for event routing
        let mut slot: HashMap<String, usize> = HashMap::with_capacity(visit_loc.len());
        for (pi, p) in patients.iter_mut().enumerate() {
            let mut order: Vec<usize> = (0..p.visits.len()).collect();
            order.sort_by(|&a, &b| {
                let (va, vb) = (&p.visits[a].visit, &p.visits[b].visit);
                (va.start_date, &va.visit_id).cmp(&(vb.start_date, &vb.visit_id))
            });
            let lines: Vec<u64> = order.iter().map(|&i| visit_lines[pi][i]).collect();
            let mut taken: Vec<Option<VisitEvents>> = p.visits.drain(..).map(Some).collect();
            p.visits = order.iter().map(|&i| taken[i].take().unwrap()).collect();
            for w in 1..p.visits.len() {
                let (prev, next) = (&p.visits[w - 1].visit, &p.visits[w].visit);
                if next.start_date < prev.end_date {
                    return Err(integrity(
                        "visits.csv",
                        lines[w],
                        format!("visit `{}` overlaps visit `{}`", next.visit_id, prev.visit_id),
                    ));
                }
            }
            for (k, ve) in p.visits.iter().enumerate() {
                slot.insert(ve.visit.visit_id.clone(), k);
            }
        }

        for (line, e) in events {
            let f = "events.csv";
            if e.visit_id.is_empty() {
                return Err(integrity(f, line, "event without a visit"));
            }
            let &(pi, _) = visit_loc
                .get(&e.visit_id)
                .ok_or_else(|| integrity(f, line, format!("unknown visit `{}`", e.visit_id)))?;
            let p = &mut patients[pi];
            if p.person.person_id != e.person_id {
                return Err(integrity(
                    f,
                    line,
                    format!("visit `{}` belongs to another person", e.visit_id),
                ));
            }
            if e.concept_id.is_empty() {
                return Err(malformed(f, line, "empty concept_id"));
            }
            let ve = &mut p.visits[slot[&e.visit_id]];
            if e.event_date < ve.visit.start_date || e.event_date > ve.visit.end_date {
                return Err(integrity(
                    f,
                    line,
                    format!("event dated {} outside visit `{}`", e.event_date, e.visit_id),
                ));
            }
            ve.events.push(e);
        }
        for p in &mut patients {
            for ve in &mut p.visits {
                ve.events.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
            }
        }

        patients.sort_by(|a, b| a.person.person_id.cmp(&b.person.person_id));
        let index = patients
            .iter()
            .enumerate()
            .map(|(i, p)| (p.person.person_id.clone(), i))
            .collect();
        Ok(Self { patients, index })
    }

    pub fn patients(&self) -> &[Patient] {
        &self.patients
    }

    pub fn patient(&self, person_id: &str) -> Result<&Patient> {
        self.index
            .get(person_id)
            .map(|&i| &self.patients[i])
            .ok_or_else(|| Error::UnknownPerson(person_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn n_visits(&self) -> usize {
        self.patients.iter().map(|p| p.visits.len()).sum()
    }

    pub fn n_events(&self) -> usize {
        self.patients.iter().map(Patient::n_events).sum()
    }

    /// Distinct concept ids, sorted.
    pub fn concepts(&self) -> Vec<String> {
        let set: HashSet<&str> = self
            .patients
            .iter()
            .flat_map(|p| p.events())
            .map(|e| e.concept_id.as_str())
            .collect();
        let mut v: Vec<String> = set.into_iter().map(str::to_string).collect();
        v.sort();
        v
    }

    /// Patients with at least one visit and more than `min_events` events.
    pub fn eligible(&self, min_events: usize) -> impl Iterator<Item = &Patient> {
        self.patients
            .iter()
            .filter(move |p| !p.visits.is_empty() && p.n_events() > min_events)
    }

    /// Canonical CSV text for the three tables.
    pub fn to_csv(&self) -> (String, String, String) {
        let mut persons = String::from("person_id,birth_date,gender\n");
        let mut visits = String::from("visit_id,person_id,visit_type,start_date,end_date,discharge_to\n");
        let mut events = String::from("person_id,visit_id,domain,concept_id,event_date\n");
        for p in &self.patients {
            let pr = &p.person;
            persons.push_str(&format!(
                "{},{},{}\n",
                pr.person_id,
                pr.birth_date.format(DATE_FMT),
                pr.gender
            ));
            for ve in &p.visits {
                let v = &ve.visit;
                visits.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    v.visit_id,
                    v.person_id,
                    v.visit_type,
                    v.start_date.format(DATE_FMT),
                    v.end_date.format(DATE_FMT),
                    v.discharge_to.map_or("", DischargeTo::as_str)
                ));
                for e in &ve.events {
                    events.push_str(&format!(
                        "{},{},{},{},{}\n",
                        e.person_id,
                        e.visit_id,
                        e.domain,
                        e.concept_id,
                        e.event_date.format(DATE_FMT)
                    ));
                }
            }
        }
        (persons, visits, events)
    }

    /// Writes `persons.csv`, `visits.csv` and `events.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let (p, v, e) = self.to_csv();
        for (name, body) in [("persons.csv", p), ("visits.csv", v), ("events.csv", e)] {
            let path = dir.join(name);
            let mut f = fs::File::create(&path).map_err(io_err(&path))?;
            f.write_all(body.as_bytes()).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// Five-number summary plus mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Distribution {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[s.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryStats {
    pub n_patients: usize,
    pub visits: Distribution,
    pub records: Distribution,
}

impl SummaryStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("statistic,visits_per_patient,records_per_patient\n");
        let rows = [
            ("mean", self.visits.mean, self.records.mean),
            ("std", self.visits.std, self.records.std),
            ("min", self.visits.min, self.records.min),
            ("25%", self.visits.q1, self.records.q1),
            ("50%", self.visits.median, self.records.median),
            ("75%", self.visits.q3, self.records.q3),
            ("max", self.visits.max, self.records.max),
        ];
        for (k, a, b) in rows {
            s.push_str(&format!("{k},{a:.4},{b:.4}\n"));
        }
        s
    }
}

pub fn summary_stats(store: &EventStore) -> Result<SummaryStats> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    let visits: Vec<f64> = store.patients().iter().map(|p| p.visits.len() as f64).collect();
    let records: Vec<f64> = store.patients().iter().map(|p| p.n_events() as f64).collect();
    Ok(SummaryStats {
        n_patients: store.len(),
        visits: Distribution::of(&visits).unwrap(),
        records: Distribution::of(&records).unwrap(),
    })
}
