//! Temporal knowledge graph storage: vocabularies, quadruples, indices and
//! transductive / out-of-graph splits.

mod descriptions;
mod graph;
mod inductive;
mod inverse;
mod parse;
mod split;

use std::collections::HashMap;
use std::fmt;

use chrono::{Datelike, NaiveDate};

pub use descriptions::DescriptionStore;
pub use graph::{HistoryEntry, TemporalKg};
pub use inductive::{build_inductive_split, InductiveSplit, InductiveSplitConfig, UnseenSelection};
pub use inverse::{add_inverse_relations, invert_facts, InverseRelations, INVERSE_PREFIX};
pub use parse::{parse_quadruple_file, parse_timestamp};
pub use split::DatasetSplit;

#[derive(Debug, thiserror::Error)]
pub enum TkgError {
    #[error("line {0}: expected 4 tab-separated fields")]
    MalformedLine(usize),
    #[error("line {0}: unparseable timestamp")]
    BadTimestamp(usize),
    #[error("relations already carry inverse companions")]
    AlreadyInverted,
    #[error("unseen entity {0} has too few facts for the requested shot count")]
    InsufficientFacts(String),
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("split ordering violated: {0}")]
    SplitOrder(String),
    #[error("invalid split configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

macro_rules! id_type {
    ($name:ident) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(EntityId);
id_type!(RelationId);
id_type!(TimestampId);

/// One timestamped fact in id space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Quadruple {
    pub s: EntityId,
    pub p: RelationId,
    pub o: EntityId,
    pub t: TimestampId,
}

impl Quadruple {
    pub fn new(s: u32, p: u32, o: u32, t: u32) -> Self {
        Quadruple { s: EntityId(s), p: RelationId(p), o: EntityId(o), t: TimestampId(t) }
    }

    pub fn touches(&self, e: EntityId) -> bool {
        self.s == e || self.o == e
    }
}

/// Dense string vocabulary; ids are assigned in first-seen order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Calendar date or bare integer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeValue {
    Date { year: i32, month: u32, day: u32 },
    Step(i64),
}

impl TimeValue {
    /// Totally ordered key: days since 1970-01-01 for dates, the integer
    /// itself for steps.
    pub fn key(&self) -> i64 {
        match *self {
            TimeValue::Date { year, month, day } => {
                let date = NaiveDate::from_ymd_opt(year, month, day).expect("validated at parse time");
                let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch");
                (date - epoch).num_days()
            }
            TimeValue::Step(v) => v,
        }
    }

    pub fn from_date(date: NaiveDate) -> Self {
        TimeValue::Date { year: date.year(), month: date.month(), day: date.day() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeEntry {
    pub text: String,
    pub value: TimeValue,
    pub key: i64,
}

/// Timestamp vocabulary carrying the original text and ordering key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimeVocab {
    entries: Vec<TimeEntry>,
    index: HashMap<String, u32>,
}

impl TimeVocab {
    pub fn intern(&mut self, text: &str, value: TimeValue) -> u32 {
        if let Some(&id) = self.index.get(text) {
            return id;
        }
        let id = self.entries.len() as u32;
        self.entries.push(TimeEntry { text: text.to_string(), value, key: value.key() });
        self.index.insert(text.to_string(), id);
        id
    }

    pub fn get(&self, text: &str) -> Option<TimestampId> {
        self.index.get(text).map(|&i| TimestampId(i))
    }

    pub fn entry(&self, t: TimestampId) -> &TimeEntry {
        &self.entries[t.index()]
    }

    pub fn key(&self, t: TimestampId) -> i64 {
        self.entries[t.index()].key
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TimeEntry] {
        &self.entries
    }
}

/// Entity, relation and timestamp vocabularies for one dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabularies {
    pub entities: Vocab,
    pub relations: Vocab,
    pub times: TimeVocab,
}

impl Vocabularies {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name).map(EntityId)
    }

    pub fn relation(&self, name: &str) -> Option<RelationId> {
        self.relations.get(name).map(RelationId)
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        self.entities.name(e.0)
    }

    pub fn relation_name(&self, p: RelationId) -> &str {
        self.relations.name(p.0)
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn is_valid(&self, q: &Quadruple) -> bool {
        q.s.index() < self.entities.len()
            && q.o.index() < self.entities.len()
            && q.p.index() < self.relations.len()
            && q.t.index() < self.times.len()
    }
}
