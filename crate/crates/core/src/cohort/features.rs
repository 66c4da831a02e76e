use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use super::LabeledExample;
use crate::error::{io_err, Error, Result};
use crate::event_store::{Event, Patient};

/// Concept to coarser rollup code. Unmapped concepts stay as they are.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Hierarchy {
    map: HashMap<String, String>,
}

impl Hierarchy {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            map: pairs.into_iter().collect(),
        }
    }

    /// `concept_id,rollup_code` with a header row.
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut map = HashMap::new();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "concept_id,rollup_code" => {}
            _ => {
                return Err(Error::Malformed {
                    file: file.into(),
                    line: 1,
                    msg: "expected header `concept_id,rollup_code`".into(),
                })
            }
        }
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Malformed {
                file: file.into(),
                line: i as u64 + 1,
                msg: msg.into(),
            };
            let (c, r) = line.split_once(',').ok_or_else(|| bad("expected 2 fields"))?;
            if r.contains(',') {
                return Err(bad("expected 2 fields"));
            }
            if c.is_empty() || r.is_empty() {
                return Err(bad("empty field"));
            }
            if map.insert(c.to_string(), r.to_string()).is_some() {
                return Err(bad(&format!("concept `{c}` mapped twice")));
            }
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn rollup<'a>(&'a self, concept: &'a str) -> &'a str {
        self.map.get(concept).map_or(concept, String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn rollup_counts<'a>(events: impl IntoIterator<Item = &'a Event>, h: &Hierarchy) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for e in events {
        *counts.entry(h.rollup(&e.concept_id).to_string()).or_insert(0) += 1;
    }
    counts
}

/// Column index per rollup code.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FeatureVocab {
    codes: Vec<String>,
    index: HashMap<String, usize>,
}

impl FeatureVocab {
    pub fn new(codes: impl IntoIterator<Item = String>) -> Self {
        let codes: Vec<String> = codes.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let index = codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Self { codes, index }
    }

    /// Every code seen in the examples' feature windows.
    pub fn fit<'a>(
        examples: impl IntoIterator<Item = (&'a LabeledExample, &'a Patient)>,
        h: &Hierarchy,
    ) -> Self {
        let mut codes = BTreeSet::new();
        for (ex, p) in examples {
            for e in ex.feature_events(p) {
                codes.insert(h.rollup(&e.concept_id).to_string());
            }
        }
        Self::new(codes)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn get(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }
}

/// Sparse counts `(column, count)` sorted by column. Codes outside the
/// vocabulary are dropped.
pub fn rollup_features(ex: &LabeledExample, p: &Patient, h: &Hierarchy, vocab: &FeatureVocab) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = rollup_counts(ex.feature_events(p), h)
        .into_iter()
        .filter_map(|(code, n)| vocab.get(&code).map(|i| (i, n as f64)))
        .collect();
    out.sort_by_key(|&(i, _)| i);
    out
}
