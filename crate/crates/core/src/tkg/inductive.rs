use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EntityId, Quadruple, TemporalKg, TimeVocab, TkgError};

#[derive(Clone, Debug, PartialEq)]
pub enum UnseenSelection {
    /// Sample this fraction of all entities among those with enough facts.
    Fraction(f64),
    Explicit(Vec<EntityId>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InductiveSplitConfig {
    pub selection: UnseenSelection,
    /// Support facts kept per unseen entity.
    pub shots: usize,
    pub seed: u64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for InductiveSplitConfig {
    fn default() -> Self {
        InductiveSplitConfig {
            selection: UnseenSelection::Fraction(0.1),
            shots: 0,
            seed: 0,
            valid_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

/// Out-of-graph split: a background graph over seen entities plus query
/// facts each touching at least one unseen entity.
#[derive(Clone, Debug)]
pub struct InductiveSplit {
    pub background: TemporalKg,
    pub seen: BTreeSet<EntityId>,
    pub unseen: BTreeSet<EntityId>,
    pub support: BTreeMap<EntityId, Vec<Quadruple>>,
    pub query_train: Vec<Quadruple>,
    pub query_valid: Vec<Quadruple>,
    pub query_test: Vec<Quadruple>,
    pub shots: usize,
}

impl InductiveSplit {
    pub fn support_facts(&self) -> Vec<Quadruple> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for facts in self.support.values() {
            for q in facts {
                if seen.insert(*q) {
                    out.push(*q);
                }
            }
        }
        out
    }

    pub fn touches_unseen(&self, q: &Quadruple) -> bool {
        self.unseen.contains(&q.s) || self.unseen.contains(&q.o)
    }
}

/// Splits `facts` (base relations only) into background, support and query
/// sets. `num_entities` is the entity vocabulary size.
pub fn build_inductive_split(
    facts: &[Quadruple],
    num_entities: usize,
    times: &TimeVocab,
    cfg: &InductiveSplitConfig,
) -> Result<InductiveSplit, TkgError> {
    let k = cfg.shots;
    let mut touching: BTreeMap<EntityId, Vec<usize>> = BTreeMap::new();
    for (i, q) in facts.iter().enumerate() {
        touching.entry(q.s).or_default().push(i);
        if q.o != q.s {
            touching.entry(q.o).or_default().push(i);
        }
    }
    let count = |e: &EntityId| touching.get(e).map_or(0, Vec::len);

    let unseen: BTreeSet<EntityId> = match &cfg.selection {
        UnseenSelection::Explicit(list) => {
            for e in list {
                if e.index() >= num_entities {
                    return Err(TkgError::UnknownEntity(e.to_string()));
                }
                if count(e) < k + 1 {
                    return Err(TkgError::InsufficientFacts(e.to_string()));
                }
            }
            list.iter().copied().collect()
        }
        UnseenSelection::Fraction(f) => {
            if !(0.0..1.0).contains(f) {
                return Err(TkgError::InvalidConfig(format!("unseen fraction {f} outside [0, 1)")));
            }
            let mut eligible: Vec<EntityId> = (0..num_entities as u32).map(EntityId).filter(|e| count(e) >= k + 1).collect();
            let mut want = (f * num_entities as f64).round() as usize;
            if *f > 0.0 {
                want = want.max(1);
            }
            if want > eligible.len() {
                return Err(TkgError::InvalidConfig(format!("{want} unseen entities requested but only {} have {} facts", eligible.len(), k + 1)));
            }
            eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
            eligible.truncate(want);
            eligible.into_iter().collect()
        }
    };

    let order_key = |i: &usize| (times.key(facts[*i].t), *i);

    let mut support = BTreeMap::new();
    let mut in_support = HashSet::new();
    for &e in &unseen {
        let mut idx = touching.get(&e).cloned().unwrap_or_default();
        idx.sort_by_key(order_key);
        let chosen: Vec<usize> = idx.into_iter().take(k).collect();
        in_support.extend(chosen.iter().copied());
        support.insert(e, chosen.iter().map(|&i| facts[i]).collect::<Vec<_>>());
    }

    let mut background = Vec::new();
    let mut queries = Vec::new();
    for (i, q) in facts.iter().enumerate() {
        if unseen.contains(&q.s) || unseen.contains(&q.o) {
            if !in_support.contains(&i) {
                queries.push(i);
            }
        } else {
            background.push(*q);
        }
    }
    queries.sort_by_key(order_key);
    let n = queries.len();
    let n_test = (cfg.test_fraction * n as f64).round() as usize;
    let n_valid = (cfg.valid_fraction * n as f64).round() as usize;
    let n_train = n.saturating_sub(n_test + n_valid);
    let pick = |r: std::ops::Range<usize>| queries[r].iter().map(|&i| facts[i]).collect::<Vec<_>>();

    let seen = (0..num_entities as u32).map(EntityId).filter(|e| !unseen.contains(e)).collect();
    Ok(InductiveSplit {
        background: TemporalKg::new(background, times),
        seen,
        unseen,
        support,
        query_train: pick(0..n_train),
        query_valid: pick(n_train..(n_train + n_valid).min(n)),
        query_test: pick((n_train + n_valid).min(n)..n),
        shots: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tkg::TimeValue;

    fn times(n: i64) -> TimeVocab {
        let mut tv = TimeVocab::default();
        for i in 0..n {
            tv.intern(&i.to_string(), TimeValue::Step(i));
        }
        tv
    }

    fn toy() -> Vec<Quadruple> {
        vec![
            Quadruple::new(0, 0, 1, 0),
            Quadruple::new(2, 0, 3, 1),
            Quadruple::new(4, 1, 0, 2),
            Quadruple::new(4, 0, 5, 3),
            Quadruple::new(1, 1, 4, 4),
            Quadruple::new(5, 0, 4, 5),
            Quadruple::new(2, 1, 5, 6),
            Quadruple::new(0, 0, 2, 7),
            Quadruple::new(4, 1, 3, 8),
            Quadruple::new(3, 0, 1, 9),
        ]
    }

    #[test]
    fn zero_shot_has_empty_support() {
        let cfg = InductiveSplitConfig { selection: UnseenSelection::Explicit(vec![EntityId(4)]), shots: 0, ..Default::default() };
        let split = build_inductive_split(&toy(), 6, &times(10), &cfg).unwrap();
        assert!(split.support.values().all(Vec::is_empty));
        let touching = toy().iter().filter(|q| q.touches(EntityId(4))).count();
        assert_eq!(split.query_train.len() + split.query_valid.len() + split.query_test.len(), touching);
    }

    #[test]
    fn support_matches_exhaustive_scan() {
        let facts = toy();
        let unseen = [EntityId(4), EntityId(5)];
        let cfg = InductiveSplitConfig { selection: UnseenSelection::Explicit(unseen.to_vec()), shots: 1, ..Default::default() };
        let split = build_inductive_split(&facts, 6, &times(10), &cfg).unwrap();
        for e in unseen {
            // brute force: earliest fact touching e
            let mut best: Option<Quadruple> = None;
            for q in &facts {
                if q.touches(e) && best.map_or(true, |b| q.t.0 < b.t.0) {
                    best = Some(*q);
                }
            }
            assert_eq!(split.support[&e], vec![best.unwrap()]);
        }
        for q in split.background.facts() {
            assert!(!unseen.iter().any(|&e| q.touches(e)));
        }
        for q in split.query_train.iter().chain(&split.query_valid).chain(&split.query_test) {
            assert!(split.touches_unseen(q));
        }
        assert!(split.seen.is_disjoint(&split.unseen));
    }

    #[test]
    fn insufficient_facts_is_reported() {
        let cfg = InductiveSplitConfig { selection: UnseenSelection::Explicit(vec![EntityId(3)]), shots: 5, ..Default::default() };
        assert!(matches!(build_inductive_split(&toy(), 6, &times(10), &cfg), Err(TkgError::InsufficientFacts(_))));
    }

    #[test]
    fn fraction_selection_is_seeded() {
        let cfg = InductiveSplitConfig { selection: UnseenSelection::Fraction(0.34), shots: 1, seed: 9, ..Default::default() };
        let a = build_inductive_split(&toy(), 6, &times(10), &cfg).unwrap();
        let b = build_inductive_split(&toy(), 6, &times(10), &cfg).unwrap();
        assert_eq!(a.unseen, b.unseen);
        assert_eq!(a.unseen.len(), 2);
        assert_eq!(a.query_test, b.query_test);
    }
}
