//! The two-tower model: one shared backbone, one prefix bank per tower and a
//! learnable temperature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{assemble_negatives, info_nce_node, ContrastiveError, LossConfig, NegativeSet, PreBatchQueue};
use crate::encoder::{encode_batch, EncoderConfig, EncoderError, EncoderWeights, PrefixBank, Tower};
use crate::numerics::{ParamGrads, ParamId, ParamStore, Tape, Tensor, TensorError};
use crate::tkg::EntityId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Rows encoded per tape when embedding many sequences without gradients.
const EMBED_CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct TwoTowerModel {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub weights: EncoderWeights,
    pub query_bank: PrefixBank,
    pub candidate_bank: PrefixBank,
    pub log_tau: ParamId,
}

impl TwoTowerModel {
    pub fn new(config: EncoderConfig, init_tau: f64, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let weights = EncoderWeights::init(&mut store, &config, &mut rng)?;
        let query_bank = PrefixBank::init(&mut store, Tower::Query, &config, &mut rng);
        let candidate_bank = PrefixBank::init(&mut store, Tower::Candidate, &config, &mut rng);
        let log_tau = store.register("temperature.log_tau", Tensor::scalar(init_tau.ln()), false);
        Ok(TwoTowerModel { config, store, weights, query_bank, candidate_bank, log_tau })
    }

    pub fn bank(&self, tower: Tower) -> &PrefixBank {
        match tower {
            Tower::Query => &self.query_bank,
            Tower::Candidate => &self.candidate_bank,
        }
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.log_tau).value().item().exp()
    }

    /// Keeps `τ >= tau_min`.
    pub fn clamp_tau(&mut self, tau_min: f64) {
        let floor = tau_min.ln();
        let v = self.store.get_mut(self.log_tau).value_mut();
        if v.item() < floor {
            v.set(0, 0, floor);
        }
    }

    /// L2-normalised pooled embeddings, one row per sequence.
    pub fn embed(&self, tower: Tower, seqs: &[&[u32]]) -> Result<Tensor, ModelError> {
        let d = self.config.width;
        let mut out = Tensor::zeros(seqs.len(), d);
        for (c, chunk) in seqs.chunks(EMBED_CHUNK).enumerate() {
            let mut tape = Tape::new();
            let trace = encode_batch(&mut tape, &self.store, &self.weights, Some(self.bank(tower)), &self.config, chunk)?;
            let normed = tape.l2_normalize_rows(trace.pooled)?;
            let v = tape.value(normed);
            for r in 0..chunk.len() {
                out.row_slice_mut(c * EMBED_CHUNK + r).copy_from_slice(v.row_slice(r));
            }
        }
        Ok(out)
    }

    /// Copy whose parameters are rounded to `f32`, i.e. exactly what a
    /// checkpoint round trip yields.
    pub fn quantized(&self) -> Self {
        let mut m = self.clone();
        let ids: Vec<ParamId> = m.store.ids().collect();
        for id in ids {
            m.store.get_mut(id).value_mut().quantize_f32();
        }
        m
    }
}

/// One training query: token ids of the verbalised query, its gold object
/// and the subject entity (used for the self negative).
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub query: Vec<u32>,
    pub gold: EntityId,
    pub head: EntityId,
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub loss: f64,
    pub grads: ParamGrads,
    /// Detached normalised gold-candidate embeddings, row `i` for example `i`.
    pub gold_embeddings: Tensor,
    pub gold_ids: Vec<EntityId>,
    pub negatives: Vec<NegativeSet>,
}

/// Forward and backward pass over one batch. `candidates[e]` holds the
/// token ids of entity `e`'s candidate text.
pub fn batch_step(
    model: &TwoTowerModel,
    batch: &[&Example],
    candidates: &[Vec<u32>],
    queue: &PreBatchQueue,
    loss_cfg: &LossConfig,
    max_in_batch: Option<usize>,
) -> Result<BatchOutput, ModelError> {
    let golds: Vec<EntityId> = batch.iter().map(|e| e.gold).collect();
    let heads: Vec<EntityId> = batch.iter().map(|e| e.head).collect();
    let (layout, mut sets) = assemble_negatives(&golds, &heads, queue, loss_cfg.use_self_negatives)?;
    if let Some(cap) = max_in_batch {
        for set in &mut sets {
            let mut kept = 0;
            set.negatives.retain(|n| {
                if n.family != crate::contrastive::NegativeFamily::InBatch {
                    return true;
                }
                kept += 1;
                kept <= cap
            });
        }
    }

    // each distinct candidate entity is encoded once
    let mut unique: Vec<EntityId> = Vec::new();
    let mut slot = std::collections::HashMap::new();
    let mut slot_of = |e: EntityId, unique: &mut Vec<EntityId>| {
        *slot.entry(e).or_insert_with(|| {
            unique.push(e);
            unique.len() - 1
        })
    };
    let gold_rows: Vec<usize> = golds.iter().map(|&e| slot_of(e, &mut unique)).collect();
    let head_rows: Vec<usize> = if loss_cfg.use_self_negatives {
        heads.iter().map(|&e| slot_of(e, &mut unique)).collect()
    } else {
        Vec::new()
    };

    let store = &model.store;
    let cfg = &model.config;
    let mut tape = Tape::new();
    let queries: Vec<&[u32]> = batch.iter().map(|e| e.query.as_slice()).collect();
    let q = encode_batch(&mut tape, store, &model.weights, Some(&model.query_bank), cfg, &queries)?;
    let qn = tape.l2_normalize_rows(q.pooled)?;
    let cand_seqs: Vec<&[u32]> = unique.iter().map(|e| candidates[e.index()].as_slice()).collect();
    let c = encode_batch(&mut tape, store, &model.weights, Some(&model.candidate_bank), cfg, &cand_seqs)?;
    let cn = tape.l2_normalize_rows(c.pooled)?;

    let mut blocks = vec![tape.gather_rows(cn, &gold_rows)?];
    if loss_cfg.use_self_negatives {
        blocks.push(tape.gather_rows(cn, &head_rows)?);
    }
    if let Some(p) = queue.embeddings() {
        blocks.push(tape.constant(p));
    }
    let all = tape.concat_rows(&blocks)?;
    let scores = tape.matmul_nt(qn, all)?;
    let log_tau = tape.param(store, model.log_tau);
    let loss = info_nce_node(&mut tape, scores, log_tau, &layout, &sets, loss_cfg.margin)?;

    let loss_value = tape.value(loss).item();
    let grads = if tape.requires_grad(loss) { tape.backward(loss)?.params } else { ParamGrads::default() };
    let cv = tape.value(cn);
    let mut gold_embeddings = Tensor::zeros(batch.len(), cfg.width);
    for (i, &r) in gold_rows.iter().enumerate() {
        gold_embeddings.row_slice_mut(i).copy_from_slice(cv.row_slice(r));
    }
    Ok(BatchOutput { loss: loss_value, grads, gold_embeddings, gold_ids: golds, negatives: sets })
}
