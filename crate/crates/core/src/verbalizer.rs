//! Prompt construction: lexical timestamps, entity descriptions, history
//! retrieval and the query / candidate prompt layouts.

use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::tokenizer::{count_tokens, truncate_tokens, CLS, SEP};
use crate::tkg::{DescriptionStore, EntityId, RelationId, TemporalKg, TimeEntry, TimeValue, TimeVocab, TimestampId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VerbalizeError {
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
}

const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september", "october", "november",
    "december",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexicalTimestamp(pub String);

/// `yyyy-mm-dd` becomes `yyyy <month> dd`; integer steps are printed as is.
pub fn lexicalize_timestamp(entry: &TimeEntry) -> LexicalTimestamp {
    match entry.value {
        TimeValue::Date { year, month, day } => LexicalTimestamp(format!("{year:04} {} {day:02}", MONTHS[month as usize - 1])),
        TimeValue::Step(v) => LexicalTimestamp(v.to_string()),
    }
}

/// `name, description` cut to `budget` tokens (at least one token is kept).
pub fn entity_description(e: EntityId, store: &DescriptionStore, budget: usize) -> Result<String, VerbalizeError> {
    let (name, desc) = store.entity(e).ok_or(VerbalizeError::UnknownEntity(e))?;
    let full = if desc.is_empty() { name.to_string() } else { format!("{name}, {desc}") };
    Ok(truncate_tokens(&full, budget.max(1)).to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HistoryOrder {
    Descending,
    Ascending,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextForm {
    /// `time relation object` per item.
    Pairs,
    /// Object description only.
    Entities,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryConfig {
    pub order: HistoryOrder,
    pub form: ContextForm,
    pub max_items: usize,
    /// Use `t' < t` instead of `t' <= t`.
    pub strict_past: bool,
    /// Drop past facts whose object equals the gold answer.
    pub exclude_gold: bool,
    pub seed: u64,
}

impl Default for HistoryConfig {
    fn default() -> Self {
        HistoryConfig {
            order: HistoryOrder::Descending,
            form: ContextForm::Pairs,
            max_items: 8,
            strict_past: false,
            exclude_gold: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HistoryItem {
    pub o: EntityId,
    pub t: TimestampId,
    pub p: RelationId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryContext {
    pub items: Vec<HistoryItem>,
    pub order: HistoryOrder,
    pub form: ContextForm,
}

impl HistoryContext {
    pub fn empty(cfg: &HistoryConfig) -> Self {
        HistoryContext { items: Vec::new(), order: cfg.order, form: cfg.form }
    }
}

fn query_seed(seed: u64, s: EntityId, p: RelationId, t: TimestampId) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [s.0, p.0, t.0] {
        h = (h ^ u64::from(v)).wrapping_mul(0x1000_0000_01b3);
        h ^= h >> 29;
    }
    h
}

/// Past facts `(s, p, õ, t')` with `t' <= t` (or `<`), excluding `gold`.
/// The `max_items` most recent are kept and then arranged by `cfg.order`.
pub fn retrieve_history(
    s: EntityId,
    p: RelationId,
    t: TimestampId,
    gold: Option<EntityId>,
    kg: &TemporalKg,
    times: &TimeVocab,
    cfg: &HistoryConfig,
) -> HistoryContext {
    let key = times.key(t);
    let mut items: Vec<HistoryItem> = kg
        .history(s, p)
        .iter()
        .filter(|h| if cfg.strict_past { h.key < key } else { h.key <= key })
        .filter(|h| !(cfg.exclude_gold && Some(h.o) == gold))
        .map(|h| HistoryItem { o: h.o, t: h.t, p })
        .collect();
    // ascending; keep the most recent tail
    if items.len() > cfg.max_items {
        items.drain(..items.len() - cfg.max_items);
    }
    match cfg.order {
        HistoryOrder::Ascending => {}
        HistoryOrder::Descending => items.reverse(),
        HistoryOrder::Random => items.shuffle(&mut ChaCha8Rng::seed_from_u64(query_seed(cfg.seed, s, p, t))),
    }
    HistoryContext { items, order: cfg.order, form: cfg.form }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    Time,
    Subject,
    Relation,
    History,
    Candidate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptText {
    pub text: String,
    pub segments: Vec<(SegmentKind, Range<usize>)>,
}

impl PromptText {
    pub fn segment(&self, kind: SegmentKind) -> Option<&str> {
        self.segments.iter().find(|(k, _)| *k == kind).map(|(_, r)| &self.text[r.clone()])
    }

    pub fn token_count(&self) -> usize {
        count_tokens(&self.text)
    }
}

/// Token budgets for prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Budgets {
    /// Per entity description.
    pub description: usize,
    /// Whole query sequence.
    pub total: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets { description: 50, total: 128 }
    }
}

fn render_history(
    history: &HistoryContext,
    store: &DescriptionStore,
    times: &TimeVocab,
    budget: usize,
) -> Result<String, VerbalizeError> {
    let mut out = String::new();
    for (i, item) in history.items.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let obj = entity_description(item.o, store, budget)?;
        match history.form {
            ContextForm::Pairs => {
                let lt = lexicalize_timestamp(times.entry(item.t));
                let _ = write!(out, "{} {} {}", lt.0, store.relation_name(item.p), obj);
            }
            ContextForm::Entities => out.push_str(&obj),
        }
    }
    Ok(out)
}

/// `<cls> L_t | D_s | D_p <sep> H <sep>`. History tokens beyond the total
/// budget are dropped from the end; the part up to the first `<sep>` and
/// the closing `<sep>` are always kept.
pub fn verbalize_query(
    s: EntityId,
    p: RelationId,
    t: TimestampId,
    history: &HistoryContext,
    store: &DescriptionStore,
    times: &TimeVocab,
    budgets: Budgets,
) -> Result<PromptText, VerbalizeError> {
    let lt = lexicalize_timestamp(times.entry(t));
    let ds = entity_description(s, store, budgets.description)?;
    let dp = store.relation_name(p);

    let mut text = String::new();
    let mut segments = Vec::with_capacity(4);
    text.push_str(CLS);
    text.push(' ');
    let mut push = |text: &mut String, kind, body: &str| {
        let start = text.len();
        text.push_str(body);
        segments.push((kind, start..text.len()));
    };
    push(&mut text, SegmentKind::Time, &lt.0);
    text.push_str(" | ");
    push(&mut text, SegmentKind::Subject, &ds);
    text.push_str(" | ");
    push(&mut text, SegmentKind::Relation, dp);
    text.push(' ');
    text.push_str(SEP);

    let head_tokens = count_tokens(&text);
    let room = budgets.total.saturating_sub(head_tokens + 1);
    let full_history = render_history(history, store, times, budgets.description)?;
    let hist = truncate_tokens(&full_history, room).trim_end_matches([',', ' ']);

    text.push(' ');
    push(&mut text, SegmentKind::History, hist);
    if !hist.is_empty() {
        text.push(' ');
    }
    text.push_str(SEP);
    Ok(PromptText { text, segments })
}

/// `<cls> D_e <sep>`
pub fn verbalize_candidate(e: EntityId, store: &DescriptionStore, budget: usize) -> Result<PromptText, VerbalizeError> {
    let de = entity_description(e, store, budget)?;
    let start = CLS.len() + 1;
    let text = format!("{CLS} {de} {SEP}");
    Ok(PromptText { segments: vec![(SegmentKind::Candidate, start..start + de.len())], text })
}
