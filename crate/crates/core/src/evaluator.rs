//! Candidate ranking with time-aware filtering, and MRR / Hits@N.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::hash::{DefaultHasher, Hash, Hasher};

use crate::encoder::Tower;
use crate::model::{ModelError, TwoTowerModel};
use crate::numerics::{matmul_nt, Tensor};
use crate::tkg::{EntityId, Quadruple, TemporalKg, Vocabularies, TimeVocab};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no ranking results")]
    EmptyResults,
    #[error("gold entity {0} is not a candidate")]
    UnknownGold(EntityId),
    #[error("protocol mismatch: {0}")]
    ProtocolMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Unit-norm candidate embeddings, row `i` for entity `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateMatrix {
    pub matrix: Tensor,
    /// Hash of the parameters and candidate inputs the rows came from.
    pub fingerprint: u64,
}

impl CandidateMatrix {
    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    /// Cosine scores of every candidate against each row of `queries`
    /// (which must already be unit-norm): `B x |E|`.
    pub fn scores(&self, queries: &Tensor) -> Tensor {
        matmul_nt(queries, &self.matrix)
    }
}

pub fn model_fingerprint(model: &TwoTowerModel) -> u64 {
    let mut h = DefaultHasher::new();
    for (_, p) in model.store.iter() {
        p.name().hash(&mut h);
        for v in p.value().data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Encodes every entity's candidate text through the candidate tower.
pub fn embed_all_candidates(model: &TwoTowerModel, candidates: &[Vec<u32>]) -> Result<CandidateMatrix, EvalError> {
    let seqs: Vec<&[u32]> = candidates.iter().map(Vec::as_slice).collect();
    let matrix = model.embed(Tower::Candidate, &seqs)?;
    let mut h = DefaultHasher::new();
    model_fingerprint(model).hash(&mut h);
    candidates.hash(&mut h);
    Ok(CandidateMatrix { matrix, fingerprint: h.finish() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FilterMode {
    Raw,
    TimeAware,
}

/// Head queries come from inverse-relation facts, tail queries from the
/// original facts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Head,
    Tail,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Head => "head",
            Direction::Tail => "tail",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    /// The query as asked, `(s, p, gold, t)` with `p` possibly inverse.
    pub query: Quadruple,
    pub direction: Direction,
    pub raw_rank: usize,
    pub filtered_rank: usize,
    pub top10: Vec<EntityId>,
}

/// Raw and filtered rank of `gold`: one plus the number of candidates
/// scoring strictly higher, where the filtered count skips `filter` members
/// other than the gold itself.
pub fn rank_scores(scores: &[f64], gold: EntityId, filter: Option<&BTreeSet<EntityId>>) -> Result<(usize, usize), EvalError> {
    let g = *scores.get(gold.index()).ok_or(EvalError::UnknownGold(gold))?;
    let mut raw = 1;
    let mut filtered = 1;
    for (i, &s) in scores.iter().enumerate() {
        if s > g {
            raw += 1;
            if !filter.is_some_and(|f| f.contains(&EntityId(i as u32))) {
                filtered += 1;
            }
        }
    }
    Ok((raw, filtered))
}

fn top_k(scores: &[f64], k: usize) -> Vec<EntityId> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter().map(|i| EntityId(i as u32)).collect()
}

/// Ranks one query given its candidate scores. In time-aware mode the other
/// objects of `(s, p, ?, t)` in `filter_kg` are excluded.
pub fn rank_query(
    query: Quadruple,
    direction: Direction,
    scores: &[f64],
    filter_kg: &TemporalKg,
    mode: FilterMode,
) -> Result<RankingResult, EvalError> {
    let filter = match mode {
        FilterMode::Raw => None,
        FilterMode::TimeAware => filter_kg.gold_objects(query.s, query.p, query.t),
    };
    let (raw_rank, filtered_rank) = rank_scores(scores, query.o, filter)?;
    Ok(RankingResult { query, direction, raw_rank, filtered_rank, top10: top_k(scores, 10) })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: impl IntoIterator<Item = usize>) -> Option<Metrics> {
        let mut m = Metrics::default();
        for r in ranks {
            m.count += 1;
            m.mrr += 1.0 / r as f64;
            m.hits1 += (r <= 1) as u8 as f64;
            m.hits3 += (r <= 3) as u8 as f64;
            m.hits10 += (r <= 10) as u8 as f64;
        }
        if m.count == 0 {
            return None;
        }
        let n = m.count as f64;
        m.mrr /= n;
        m.hits1 /= n;
        m.hits3 /= n;
        m.hits10 /= n;
        Some(m)
    }

    fn average(a: Option<Metrics>, b: Option<Metrics>) -> Option<Metrics> {
        match (a, b) {
            (Some(a), Some(b)) => Some(Metrics {
                mrr: (a.mrr + b.mrr) / 2.0,
                hits1: (a.hits1 + b.hits1) / 2.0,
                hits3: (a.hits3 + b.hits3) / 2.0,
                hits10: (a.hits10 + b.hits10) / 2.0,
                count: a.count + b.count,
            }),
            (x, None) | (None, x) => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Filtered metrics, the mean of the head and tail breakdowns.
    pub filtered: Metrics,
    pub raw: Metrics,
    pub head: Option<Metrics>,
    pub tail: Option<Metrics>,
}

pub fn compute_metrics(results: &[RankingResult]) -> Result<MetricsReport, EvalError> {
    let ranks = |d: Direction, filtered: bool| {
        Metrics::from_ranks(
            results
                .iter()
                .filter(|r| r.direction == d)
                .map(|r| if filtered { r.filtered_rank } else { r.raw_rank }),
        )
    };
    let head = ranks(Direction::Head, true);
    let tail = ranks(Direction::Tail, true);
    let filtered = Metrics::average(head, tail).ok_or(EvalError::EmptyResults)?;
    let raw = Metrics::average(ranks(Direction::Head, false), ranks(Direction::Tail, false)).ok_or(EvalError::EmptyResults)?;
    Ok(MetricsReport { filtered, raw, head, tail })
}

impl MetricsReport {
    /// `metric<TAB>value` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let mut put = |prefix: &str, m: &Metrics| {
            for (name, v) in [("mrr", m.mrr), ("hits@1", m.hits1), ("hits@3", m.hits3), ("hits@10", m.hits10)] {
                let _ = writeln!(out, "{prefix}{name}\t{v:.6}");
            }
        };
        put("", &self.filtered);
        put("raw_", &self.raw);
        if let Some(h) = &self.head {
            put("head_", h);
        }
        if let Some(t) = &self.tail {
            put("tail_", t);
        }
        let _ = writeln!(out, "queries\t{}", self.filtered.count);
        out
    }
}

/// Per-query lines `s p o t direction filtered_rank`, tab separated, with
/// surface names. Head queries are written in their original orientation.
pub fn per_query_tsv(results: &[RankingResult], vocabs: &Vocabularies, times: &TimeVocab, base_relations: usize) -> String {
    let mut out = String::new();
    for r in results {
        let q = r.query;
        let (s, p, o) = match r.direction {
            Direction::Tail => (q.s, q.p, q.o),
            Direction::Head => (q.o, crate::tkg::RelationId(q.p.0 - base_relations as u32), q.s),
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            vocabs.entity_name(s),
            vocabs.relation_name(p),
            vocabs.entity_name(o),
            times.entry(q.t).text,
            r.direction.as_str(),
            r.filtered_rank
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tkg::TimeValue;

    #[test]
    fn single_candidate_rank_one() {
        assert_eq!(rank_scores(&[0.3], EntityId(0), None).unwrap(), (1, 1));
    }

    #[test]
    fn filtering_removes_same_time_alternative() {
        // gold 0 below entities 1 and 2; entity 1 is another answer at t
        let mut tv = TimeVocab::default();
        tv.intern("0", TimeValue::Step(0));
        let kg = TemporalKg::new(vec![Quadruple::new(5, 0, 0, 0), Quadruple::new(5, 0, 1, 0)], &tv);
        let scores = [0.1, 0.9, 0.5, -0.3, 0.0, 0.0];
        let r = rank_query(Quadruple::new(5, 0, 0, 0), Direction::Tail, &scores, &kg, FilterMode::TimeAware).unwrap();
        assert_eq!((r.raw_rank, r.filtered_rank), (3, 2));
        assert_eq!(r.top10[0], EntityId(1));
    }

    #[test]
    fn ties_do_not_penalise_gold() {
        assert_eq!(rank_scores(&[0.5, 0.5, 0.5], EntityId(1), None).unwrap(), (1, 1));
    }

    #[test]
    fn metrics_formula() {
        let m = Metrics::from_ranks([1, 2, 4]).unwrap();
        assert!((m.mrr - 0.583333).abs() < 1e-6);
        assert!((m.hits1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.hits10, 1.0);
        assert_eq!(compute_metrics(&[]), Err(EvalError::EmptyResults));
    }

    #[test]
    fn unknown_gold() {
        assert_eq!(rank_scores(&[0.1], EntityId(3), None), Err(EvalError::UnknownGold(EntityId(3))));
    }
}
