use std::collections::{BTreeSet, HashMap};

use super::{EntityId, Quadruple, RelationId, TimeVocab, TimestampId};

/// One element of an `(s, p)` history list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HistoryEntry {
    pub o: EntityId,
    pub t: TimestampId,
    pub key: i64,
}

/// Fact store with the two lookup indices needed for history retrieval and
/// time-aware filtering.
#[derive(Clone, Debug, Default)]
pub struct TemporalKg {
    facts: Vec<Quadruple>,
    history: HashMap<(EntityId, RelationId), Vec<HistoryEntry>>,
    filter: HashMap<(EntityId, RelationId, TimestampId), BTreeSet<EntityId>>,
}

static EMPTY_HISTORY: [HistoryEntry; 0] = [];

impl TemporalKg {
    /// Builds both indices. History lists are sorted by timestamp key with
    /// ties kept in input order.
    pub fn new(facts: Vec<Quadruple>, times: &TimeVocab) -> Self {
        let mut history: HashMap<(EntityId, RelationId), Vec<HistoryEntry>> = HashMap::new();
        let mut filter: HashMap<_, BTreeSet<EntityId>> = HashMap::new();
        for q in &facts {
            history.entry((q.s, q.p)).or_default().push(HistoryEntry { o: q.o, t: q.t, key: times.key(q.t) });
            filter.entry((q.s, q.p, q.t)).or_default().insert(q.o);
        }
        for list in history.values_mut() {
            list.sort_by_key(|h| h.key);
        }
        TemporalKg { facts, history, filter }
    }

    pub fn facts(&self) -> &[Quadruple] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// Time-ascending history of `(s, p)`.
    pub fn history(&self, s: EntityId, p: RelationId) -> &[HistoryEntry] {
        self.history.get(&(s, p)).map_or(&EMPTY_HISTORY, Vec::as_slice)
    }

    /// Objects of facts `(s, p, ?, t)` at exactly `t`.
    pub fn gold_objects(&self, s: EntityId, p: RelationId, t: TimestampId) -> Option<&BTreeSet<EntityId>> {
        self.filter.get(&(s, p, t))
    }

    pub fn filter_entries(&self) -> impl Iterator<Item = (&(EntityId, RelationId, TimestampId), &BTreeSet<EntityId>)> {
        self.filter.iter()
    }

    pub fn history_keys(&self) -> impl Iterator<Item = &(EntityId, RelationId)> {
        self.history.keys()
    }
}
