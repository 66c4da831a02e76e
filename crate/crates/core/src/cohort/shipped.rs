//! Definitions bundled with the crate. The same files live in `cohorts/`.

use super::{CohortDefinition, ConceptSet, Predicate};
use crate::error::{Error, Result};
use crate::synth::{gap_concepts, SynthConfig};

const DEFINITIONS: [(&str, &str); 4] = [
    ("t2dm_hf", include_str!("../../cohorts/t2dm_hf.toml")),
    ("hf_readmit", include_str!("../../cohorts/hf_readmit.toml")),
    ("discharge_home_death", include_str!("../../cohorts/discharge_home_death.toml")),
    ("hospitalization", include_str!("../../cohorts/hospitalization.toml")),
];

const CONCEPT_FILES: [(&str, &str); 5] = [
    ("t2dm.csv", include_str!("../../cohorts/t2dm.csv")),
    ("t1dm.csv", include_str!("../../cohorts/t1dm.csv")),
    ("heart_failure.csv", include_str!("../../cohorts/heart_failure.csv")),
    ("diuretic.csv", include_str!("../../cohorts/diuretic.csv")),
    ("death.csv", include_str!("../../cohorts/death.csv")),
];

pub fn shipped_names() -> Vec<&'static str> {
    DEFINITIONS.iter().map(|(n, _)| *n).collect()
}

/// A bundled definition with its concept sets inlined.
pub fn shipped(name: &str) -> Result<CohortDefinition> {
    let text = DEFINITIONS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::Cohort {
            name: name.into(),
            msg: format!("no such shipped definition; known: {}", shipped_names().join(", ")),
        })?;
    let mut def = CohortDefinition::from_toml(text)?;
    for set in def.concept_sets.values_mut() {
        if let ConceptSet::File { file } = set {
            let key = file.to_string_lossy();
            let (_, csv) = CONCEPT_FILES
                .iter()
                .find(|(f, _)| *f == key)
                .expect("bundled concept file");
            *set = ConceptSet::Inline(super::parse_concept_set(csv, &key)?);
        }
    }
    Ok(def)
}

/// Synthetic task whose outcome is any gap-marker concept within two years
/// of the third visit. Those markers only follow long gaps, so the label
/// tracks the patient's visit spacing.
pub fn gap_signal(cfg: &SynthConfig) -> CohortDefinition {
    CohortDefinition {
        name: "gap_signal".into(),
        layout: Default::default(),
        observation_window_days: None,
        hold_off_days: 0,
        prediction_window_days: Some(730),
        allow_overlap: false,
        concept_sets: [("gap".to_string(), ConceptSet::Inline(gap_concepts(cfg)))].into(),
        index: Predicate {
            nth_visit: Some(3),
            ..Default::default()
        },
        inclusion: Vec::new(),
        outcome: Predicate {
            concept_sets: vec!["gap".into()],
            ..Default::default()
        },
    }
}
