use chrono::NaiveDate;

use super::vocab::*;
use super::TokenSequence;
use crate::error::{Error, Result};
use crate::event_store::{EventStore, Person, VisitEvents};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// `VS c.. VE ATT VS c.. VE`
    Cehr,
    /// `c.. SEP c..`
    BehrtStyle,
    /// `c.. c..`
    MedbertStyle,
    /// `c.. ATT c..`
    NoVsVe,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Cehr, Variant::NoVsVe, Variant::BehrtStyle, Variant::MedbertStyle];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cehr => "cehr",
            Variant::BehrtStyle => "behrt",
            Variant::MedbertStyle => "medbert",
            Variant::NoVsVe => "no_vs_ve",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// Artificial time token for a gap of `days`.
///
/// Weeks `W0..W3` below 28 days, months `M1..M11` from 28 to 365 days with
/// `n = clamp(days / 30, 1, 11)`, and `LT` beyond 365 days.
pub fn att_token(days: i64) -> Result<u32> {
    match days {
        d if d < 0 => Err(Error::NegativeInterval(d)),
        d if d < 28 => Ok(W0 + (d / 7) as u32),
        d if d <= 365 => Ok(M1 + ((d / 30).clamp(1, 11) - 1) as u32),
        _ => Ok(LT),
    }
}

const EPOCH: NaiveDate = match NaiveDate::from_ymd_opt(1970, 1, 1) {
    Some(d) => d,
    None => panic!("epoch"),
};

fn years_since(from: NaiveDate, to: NaiveDate) -> f64 {
    (to - from).num_days() as f64 / 365.25
}

/// Sequence for the given visits of one person. Visits without events are
/// skipped; gaps are measured start to start between kept visits.
pub fn build_visits(
    person: &Person,
    visits: &[VisitEvents],
    variant: Variant,
    vocab: &Vocabulary,
    types: &VisitTypes,
) -> Result<TokenSequence> {
    let kept: Vec<&VisitEvents> = visits.iter().filter(|v| !v.events.is_empty()).collect();
    if kept.is_empty() {
        return Err(Error::EmptyHistory(person.person_id.clone()));
    }
    let mut seq = TokenSequence::default();
    for (k, ve) in kept.iter().enumerate() {
        let v = &ve.visit;
        let time = years_since(EPOCH, v.start_date);
        let age = years_since(person.birth_date, v.start_date);
        let segment = if k % 2 == 0 { 1 } else { 2 };
        let vtype = types
            .id(&v.visit_type)
            .ok_or_else(|| Error::Data(format!("unknown visit type `{}`", v.visit_type)))?;
        if k > 0 {
            let prev_seg = if segment == 1 { 2 } else { 1 };
            match variant {
                Variant::Cehr | Variant::NoVsVe => {
                    let gap = (v.start_date - kept[k - 1].visit.start_date).num_days();
                    seq.push(att_token(gap)?, time, age, prev_seg, TYPE_NONE);
                }
                Variant::BehrtStyle => seq.push(SEP, time, age, prev_seg, TYPE_NONE),
                Variant::MedbertStyle => {}
            }
        }
        let framed = variant == Variant::Cehr;
        if framed {
            seq.push(VS, time, age, segment, vtype);
        }
        for e in &ve.events {
            seq.push(vocab.id(&e.concept_id), time, age, segment, vtype);
        }
        if framed {
            seq.push(VE, time, age, segment, vtype);
        }
    }
    Ok(seq)
}

pub fn build_sequence(
    store: &EventStore,
    person_id: &str,
    variant: Variant,
    vocab: &Vocabulary,
    types: &VisitTypes,
) -> Result<TokenSequence> {
    let p = store.patient(person_id)?;
    build_visits(&p.person, &p.visits, variant, vocab, types)
}
