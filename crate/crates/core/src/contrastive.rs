//! Cosine scoring, negative sampling and the additive-margin InfoNCE loss.

use std::collections::VecDeque;

use crate::numerics::{CustomOp, NodeId, Tape, Tensor, TensorError};
use crate::tkg::EntityId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ContrastiveError {
    #[error("cannot score a zero vector")]
    ZeroVector,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub init_tau: f64,
    pub margin: f64,
    /// Number of previous batches kept as pre-batch negatives.
    pub pre_batch_depth: usize,
    pub use_self_negatives: bool,
    pub tau_min: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { init_tau: 0.05, margin: 0.02, pre_batch_depth: 2, use_self_negatives: true, tau_min: 1e-3 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        if !(self.tau_min > 0.0) || !(self.init_tau >= self.tau_min) {
            return Err(ContrastiveError::InvalidConfig(format!("need 0 < tau_min <= init_tau, got {} and {}", self.tau_min, self.init_tau)));
        }
        if !(self.margin >= 0.0) {
            return Err(ContrastiveError::InvalidConfig(format!("negative margin {}", self.margin)));
        }
        Ok(())
    }
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64, ContrastiveError> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(ContrastiveError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log Σ_j e^{z_j} - z_0`. When the gold logit `z_0` dominates this is
/// `log1p(Σ_{j>0} e^{z_j - z_0})`, which keeps tiny losses exact.
fn nce_from_logits(z: &[f64]) -> f64 {
    let (z0, rest) = (z[0], &z[1..]);
    let max = rest.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= z0 {
        rest.iter().map(|x| (x - z0).exp()).sum::<f64>().ln_1p()
    } else {
        log_sum_exp(z) - z0
    }
}

/// `-log(e^{(g-γ)/τ} / (e^{(g-γ)/τ} + Σ e^{n_i/τ}))`.
pub fn info_nce_loss(gold: f64, negatives: &[f64], tau: f64, margin: f64) -> f64 {
    let z: Vec<f64> = std::iter::once((gold - margin) / tau).chain(negatives.iter().map(|n| n / tau)).collect();
    nce_from_logits(&z)
}

/// Detached candidate embeddings of the most recent batches.
#[derive(Clone, Debug, Default)]
pub struct PreBatchQueue {
    depth: usize,
    batches: VecDeque<(Tensor, Vec<EntityId>)>,
}

impl PreBatchQueue {
    pub fn new(depth: usize) -> Self {
        PreBatchQueue { depth, batches: VecDeque::with_capacity(depth) }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Appends one batch (row `i` of `embeddings` belongs to `ids[i]`),
    /// evicting the oldest batch when full.
    pub fn push_batch(&mut self, embeddings: Tensor, ids: Vec<EntityId>) {
        assert_eq!(embeddings.rows(), ids.len(), "one id per queued embedding");
        if self.depth == 0 {
            return;
        }
        if self.batches.len() == self.depth {
            self.batches.pop_front();
        }
        self.batches.push_back((embeddings, ids));
    }

    /// Total queued rows.
    pub fn len(&self) -> usize {
        self.batches.iter().map(|(_, ids)| ids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch_count(&self) -> usize {
        self.batches.len()
    }

    pub fn clear(&mut self) {
        self.batches.clear();
    }

    /// Queued entity ids, oldest first.
    pub fn ids(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.batches.iter().flat_map(|(_, ids)| ids.iter().copied())
    }

    /// All queued rows stacked oldest first, or `None` when empty.
    pub fn embeddings(&self) -> Option<Tensor> {
        let n = self.len();
        let d = self.batches.front()?.0.cols();
        let mut data = Vec::with_capacity(n * d);
        for (e, _) in &self.batches {
            data.extend_from_slice(e.data());
        }
        Some(Tensor::from_vec(n, d, data).expect("queued rows share one width"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NegativeFamily {
    InBatch,
    PreBatch,
    SelfNegative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Negative {
    pub family: NegativeFamily,
    pub entity: EntityId,
    /// Column of this negative in the batch score matrix.
    pub column: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NegativeSet {
    pub negatives: Vec<Negative>,
}

impl NegativeSet {
    pub fn count(&self, family: NegativeFamily) -> usize {
        self.negatives.iter().filter(|n| n.family == family).count()
    }
}

/// Column layout of the batch score matrix: the `B` gold candidates, then
/// the `B` self candidates when enabled, then the queued rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreLayout {
    pub batch: usize,
    pub self_negatives: bool,
    pub queued: usize,
}

impl ScoreLayout {
    pub fn gold_column(&self, i: usize) -> usize {
        i
    }

    pub fn self_column(&self, i: usize) -> usize {
        self.batch + i
    }

    pub fn queue_column(&self, r: usize) -> usize {
        self.batch * (1 + self.self_negatives as usize) + r
    }

    pub fn width(&self) -> usize {
        self.queue_column(self.queued)
    }
}

/// Negatives for every query of a batch given its gold objects and head
/// entities. Anything whose id equals the query's gold id is dropped.
pub fn assemble_negatives(
    golds: &[EntityId],
    heads: &[EntityId],
    queue: &PreBatchQueue,
    use_self_negatives: bool,
) -> Result<(ScoreLayout, Vec<NegativeSet>), ContrastiveError> {
    if golds.is_empty() {
        return Err(ContrastiveError::EmptyBatch);
    }
    assert_eq!(golds.len(), heads.len(), "one head per query");
    let layout = ScoreLayout { batch: golds.len(), self_negatives: use_self_negatives, queued: queue.len() };
    let queued: Vec<EntityId> = queue.ids().collect();
    let sets = golds
        .iter()
        .enumerate()
        .map(|(i, &gold)| {
            let mut negatives = Vec::new();
            for (j, &other) in golds.iter().enumerate() {
                if j != i && other != gold {
                    negatives.push(Negative { family: NegativeFamily::InBatch, entity: other, column: layout.gold_column(j) });
                }
            }
            for (r, &e) in queued.iter().enumerate() {
                if e != gold {
                    negatives.push(Negative { family: NegativeFamily::PreBatch, entity: e, column: layout.queue_column(r) });
                }
            }
            if use_self_negatives && heads[i] != gold {
                negatives.push(Negative { family: NegativeFamily::SelfNegative, entity: heads[i], column: layout.self_column(i) });
            }
            NegativeSet { negatives }
        })
        .collect();
    Ok((layout, sets))
}

/// Mean margin-InfoNCE over the rows of a score matrix, differentiable in
/// the scores and in `θ = ln τ`.
struct MarginInfoNce {
    /// Per row: the gold column followed by the negative columns.
    columns: Vec<Vec<usize>>,
    margin: f64,
}

impl MarginInfoNce {
    fn row_logits(&self, scores: &Tensor, row: usize, tau: f64) -> Vec<f64> {
        let s = scores.row_slice(row);
        let cols = &self.columns[row];
        let mut z: Vec<f64> = cols.iter().map(|&c| s[c]).collect();
        z[0] -= self.margin;
        z.iter_mut().for_each(|v| *v /= tau);
        z
    }

    fn forward(&self, scores: &Tensor, theta: f64) -> f64 {
        let tau = theta.exp();
        let total: f64 = (0..scores.rows())
            .map(|r| {
                let z = self.row_logits(scores, r, tau);
                nce_from_logits(&z)
            })
            .sum();
        total / scores.rows() as f64
    }
}

impl CustomOp for MarginInfoNce {
    fn name(&self) -> &'static str {
        "margin_info_nce"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let (scores, theta) = (inputs[0], inputs[1].item());
        let tau = theta.exp();
        let b = scores.rows() as f64;
        let g = grad_out.item();
        let mut gs = Tensor::zeros(scores.rows(), scores.cols());
        let mut gtheta = 0.0;
        for r in 0..scores.rows() {
            let z = self.row_logits(scores, r, tau);
            let lse = log_sum_exp(&z);
            // p_0 - 1 summed from the negatives to avoid cancellation
            let rest: f64 = z[1..].iter().map(|&zj| (zj - lse).exp()).sum();
            let dst = gs.row_slice_mut(r);
            for (j, (&c, &zj)) in self.columns[r].iter().zip(&z).enumerate() {
                let coef = if j == 0 { -rest } else { (zj - lse).exp() };
                // dz_j / ds = 1 / τ, dz_j / dθ = -z_j
                dst[c] += g * coef / (tau * b);
                gtheta -= g * coef * zj / b;
            }
        }
        vec![Some(gs), Some(Tensor::scalar(gtheta))]
    }
}

/// Records the batch loss given a `B x W` score matrix laid out as in
/// [`ScoreLayout`], one negative set per row, and a `1 x 1` log-temperature.
pub fn info_nce_node(
    tape: &mut Tape,
    scores: NodeId,
    log_tau: NodeId,
    layout: &ScoreLayout,
    sets: &[NegativeSet],
    margin: f64,
) -> Result<NodeId, ContrastiveError> {
    let vs = tape.value(scores);
    if vs.rows() != sets.len() || vs.cols() != layout.width() {
        return Err(TensorError::ShapeMismatch { op: "info_nce", left: vs.shape(), right: (sets.len(), layout.width()) }.into());
    }
    if sets.is_empty() {
        return Err(ContrastiveError::EmptyBatch);
    }
    let columns = sets
        .iter()
        .enumerate()
        .map(|(i, s)| std::iter::once(layout.gold_column(i)).chain(s.negatives.iter().map(|n| n.column)).collect())
        .collect();
    let op = MarginInfoNce { columns, margin };
    let value = op.forward(vs, tape.value(log_tau).item());
    Ok(tape.custom(&[scores, log_tau], Tensor::scalar(value), Box::new(op)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<EntityId> {
        v.iter().map(|&i| EntityId(i)).collect()
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine_score(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_score(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.70710678).abs() < 1e-8);
        assert_eq!(cosine_score(&[0.0, 0.0], &[1.0, 1.0]), Err(ContrastiveError::ZeroVector));
    }

    #[test]
    fn loss_closed_forms() {
        assert_eq!(info_nce_loss(0.3, &[], 0.05, 0.02), 0.0);
        let want = (1.0 + (-2.0f64).exp()).ln();
        assert!((info_nce_loss(1.0, &[-1.0], 1.0, 0.0) - want).abs() < 1e-12);
        assert!((want - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn queue_is_fifo() {
        let mut q = PreBatchQueue::new(2);
        for b in 0..3u32 {
            q.push_batch(Tensor::full(2, 3, b as f64), ids(&[b, b + 10]));
        }
        assert_eq!(q.ids().collect::<Vec<_>>(), ids(&[1, 11, 2, 12]));
        let e = q.embeddings().unwrap();
        assert_eq!(e.shape(), (4, 3));
        assert_eq!(e.get(0, 0), 1.0);
        assert_eq!(e.get(3, 2), 2.0);
    }

    #[test]
    fn cold_start_has_no_pre_batch() {
        let q = PreBatchQueue::new(2);
        let (_, sets) = assemble_negatives(&ids(&[1, 2, 3]), &ids(&[4, 5, 6]), &q, true).unwrap();
        for s in &sets {
            assert_eq!(s.count(NegativeFamily::PreBatch), 0);
            assert_eq!(s.count(NegativeFamily::InBatch), 2);
            assert_eq!(s.count(NegativeFamily::SelfNegative), 1);
        }
    }

    #[test]
    fn self_loop_drops_self_negative() {
        let q = PreBatchQueue::new(0);
        let (_, sets) = assemble_negatives(&ids(&[1, 2]), &ids(&[1, 7]), &q, true).unwrap();
        assert_eq!(sets[0].count(NegativeFamily::SelfNegative), 0);
        assert_eq!(sets[1].count(NegativeFamily::SelfNegative), 1);
    }

    #[test]
    fn fused_loss_matches_scalar_form() {
        let scores = Tensor::from_rows(&[vec![0.9, 0.1, -0.2, 0.3], vec![0.2, 0.8, 0.5, -0.1]]).unwrap();
        let q = PreBatchQueue::new(0);
        let (layout, sets) = assemble_negatives(&ids(&[1, 2]), &ids(&[3, 4]), &q, true).unwrap();
        let mut tape = Tape::new();
        let s = tape.variable(scores.clone());
        let th = tape.variable(Tensor::scalar(0.05f64.ln()));
        let loss = info_nce_node(&mut tape, s, th, &layout, &sets, 0.02).unwrap();
        let want = (info_nce_loss(0.9, &[0.1, -0.2], 0.05, 0.02) + info_nce_loss(0.8, &[0.2, -0.1], 0.05, 0.02)) / 2.0;
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }
}
