use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::event_store::{EventStore, DEFAULT_VISIT_TYPES};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const UNK: u32 = 2;
pub const SEP: u32 = 3;
pub const VS: u32 = 4;
pub const VE: u32 = 5;
/// First week token, W0..W3 follow contiguously.
pub const W0: u32 = 6;
/// First month token, M1..M11 follow contiguously.
pub const M1: u32 = 10;
pub const LT: u32 = 21;
pub const FIRST_CONCEPT: u32 = 22;

/// Visit-type channel ids: 0 means none, 1 is the masked-type id.
pub const TYPE_NONE: u32 = 0;
pub const TYPE_MASK: u32 = 1;

const RESERVED: [&str; 6] = ["[PAD]", "[MASK]", "[UNK]", "[SEP]", "[VS]", "[VE]"];

/// Token vocabulary: reserved tokens, ATT tokens, then concepts in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_concepts<S: AsRef<str>>(concepts: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..4).map(|n| format!("W{n}")));
        tokens.extend((1..=11).map(|n| format!("M{n}")));
        tokens.push("LT".into());
        debug_assert_eq!(tokens.len(), FIRST_CONCEPT as usize);
        let mut concepts: Vec<String> = concepts.into_iter().map(|s| s.as_ref().to_string()).collect();
        concepts.sort();
        concepts.dedup();
        tokens.extend(concepts);
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("concept `{t}` collides with a reserved token")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn from_store(store: &EventStore) -> Result<Self> {
        Self::from_concepts(store.concepts())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("token,id\n");
        for (i, t) in self.tokens.iter().enumerate() {
            s.push_str(&format!("{t},{i}\n"));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(io_err(path))
    }

    /// Reads a vocabulary written by [`Vocabulary::write`].
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut concepts = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let (tok, id) = line.rsplit_once(',').ok_or_else(|| Error::Malformed {
                file: path.display().to_string(),
                line: n as u64 + 1,
                msg: "expected token,id".into(),
            })?;
            let id: u32 = id.parse().map_err(|_| Error::Malformed {
                file: path.display().to_string(),
                line: n as u64 + 1,
                msg: format!("bad id `{id}`"),
            })?;
            if id >= FIRST_CONCEPT {
                concepts.push(tok.to_string());
            }
        }
        let v = Self::from_concepts(&concepts)?;
        if v.to_csv() != text {
            return Err(Error::Data(format!("{}: not a canonical vocabulary file", path.display())));
        }
        Ok(v)
    }
}

/// Visit-type ids: 0 none, 1 masked, then the known types in a fixed order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisitTypes {
    names: Vec<String>,
}

impl Default for VisitTypes {
    fn default() -> Self {
        Self::new(DEFAULT_VISIT_TYPES.iter().map(|s| s.to_string()).collect())
    }
}

impl VisitTypes {
    pub fn new(names: Vec<String>) -> Self {
        Self { names }
    }

    /// Size of the id space including the two reserved ids.
    pub fn len(&self) -> usize {
        self.names.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32 + 2)
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        id.checked_sub(2).and_then(|i| self.names.get(i as usize)).map(String::as_str)
    }
}
