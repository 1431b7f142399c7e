use rand::Rng;

use super::{EncoderConfig, Tower};
use crate::numerics::{NodeId, ParamId, ParamStore, Tape, Tensor, TensorError};

/// How prefix parameters are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reparam {
    /// Stored directly per layer.
    Embedding,
    /// A shared `m x d` base embedding mapped through a two-layer tanh MLP
    /// that emits every layer's prefix at once.
    Mlp { hidden: usize },
}

/// Where the prefix enters attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrefixMode {
    /// Prefix rows are concatenated to the layer input before the key and
    /// value projections.
    Hidden,
    /// Separate key and value prefixes are concatenated after projection.
    KeyValue,
}

impl PrefixMode {
    pub fn slots(self) -> usize {
        match self {
            PrefixMode::Hidden => 1,
            PrefixMode::KeyValue => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum BankParams {
    /// `layers * slots` tensors of `m x d`, layer-major.
    Embedding(Vec<ParamId>),
    Mlp { base: ParamId, w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
}

/// Trainable prefix parameters of one tower.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixBank {
    pub tower: Tower,
    params: BankParams,
}

/// Prefix input of one layer.
#[derive(Clone, Copy, Debug)]
pub enum LayerPrefix {
    None,
    Hidden(NodeId),
    KeyValue { keys: NodeId, values: NodeId },
}

impl PrefixBank {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, tower: Tower, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let (m, d, std) = (cfg.prefix_len, cfg.width, cfg.init_std);
        let slots = cfg.prefix_mode.slots();
        let pre = format!("prefix.{}", tower.name());
        let params = match cfg.reparam {
            Reparam::Embedding => {
                let mut ids = Vec::with_capacity(cfg.layers * slots);
                for j in 0..cfg.layers {
                    for slot in 0..slots {
                        let name = match (cfg.prefix_mode, slot) {
                            (PrefixMode::Hidden, _) => format!("{pre}.layer{j}"),
                            (PrefixMode::KeyValue, 0) => format!("{pre}.layer{j}.key"),
                            (PrefixMode::KeyValue, _) => format!("{pre}.layer{j}.value"),
                        };
                        ids.push(store.register(name, Tensor::randn(m, d, std, rng), true));
                    }
                }
                BankParams::Embedding(ids)
            }
            Reparam::Mlp { hidden } => {
                let out = cfg.layers * slots * d;
                BankParams::Mlp {
                    base: store.register(format!("{pre}.mlp.base"), Tensor::randn(m, d, std, rng), true),
                    w1: store.register(format!("{pre}.mlp.w1"), Tensor::randn(d, hidden, std, rng), true),
                    b1: store.register(format!("{pre}.mlp.b1"), Tensor::zeros(1, hidden), false),
                    w2: store.register(format!("{pre}.mlp.w2"), Tensor::randn(hidden, out, std, rng), true),
                    b2: store.register(format!("{pre}.mlp.b2"), Tensor::zeros(1, out), false),
                }
            }
        };
        PrefixBank { tower, params }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match &self.params {
            BankParams::Embedding(ids) => ids.clone(),
            BankParams::Mlp { base, w1, b1, w2, b2 } => vec![*base, *w1, *b1, *w2, *b2],
        }
    }

    /// Parameters that directly hold layer `j`'s prefix (embedding mode only).
    pub fn layer_params(&self, j: usize, slots: usize) -> Option<&[ParamId]> {
        match &self.params {
            BankParams::Embedding(ids) => ids.get(j * slots..(j + 1) * slots),
            BankParams::Mlp { .. } => None,
        }
    }

    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        self.params().iter().map(|&id| store.get(id).value().len()).sum()
    }
}

/// Per-layer prefix tensors for one tower. With `prefix_len == 0` every
/// layer gets [`LayerPrefix::None`].
pub fn materialize_prefix(
    tape: &mut Tape,
    store: &ParamStore,
    bank: &PrefixBank,
    cfg: &EncoderConfig,
) -> Result<Vec<LayerPrefix>, TensorError> {
    if cfg.prefix_len == 0 {
        return Ok(vec![LayerPrefix::None; cfg.layers]);
    }
    let slots = cfg.prefix_mode.slots();
    let d = cfg.width;
    let per_slot: Vec<NodeId> = match &bank.params {
        BankParams::Embedding(ids) => ids.iter().map(|&id| tape.param(store, id)).collect(),
        BankParams::Mlp { base, w1, b1, w2, b2 } => {
            let x = tape.param(store, *base);
            let w1 = tape.param(store, *w1);
            let b1 = tape.param(store, *b1);
            let hdn = tape.matmul(x, w1)?;
            let hdn = tape.add_row(hdn, b1)?;
            let hdn = tape.tanh(hdn);
            let w2 = tape.param(store, *w2);
            let b2 = tape.param(store, *b2);
            let all = tape.matmul(hdn, w2)?;
            let all = tape.add_row(all, b2)?;
            (0..cfg.layers * slots).map(|i| tape.slice_cols(all, i * d, d)).collect::<Result<_, _>>()?
        }
    };
    Ok(per_slot
        .chunks(slots)
        .map(|c| match cfg.prefix_mode {
            PrefixMode::Hidden => LayerPrefix::Hidden(c[0]),
            PrefixMode::KeyValue => LayerPrefix::KeyValue { keys: c[0], values: c[1] },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(reparam: Reparam) -> EncoderConfig {
        EncoderConfig { layers: 2, width: 8, heads: 2, prefix_len: 4, reparam, ..Default::default() }
    }

    #[test]
    fn embedding_mode_shapes() {
        let c = cfg(Reparam::Embedding);
        let mut store = ParamStore::new();
        let bank = PrefixBank::init(&mut store, Tower::Query, &c, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let layers = materialize_prefix(&mut tape, &store, &bank, &c).unwrap();
        assert_eq!(layers.len(), 2);
        for l in layers {
            let LayerPrefix::Hidden(n) = l else { panic!("expected hidden prefix") };
            assert_eq!(tape.value(n).shape(), (4, 8));
        }
    }

    #[test]
    fn mlp_has_more_parameters() {
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = PrefixBank::init(&mut s1, Tower::Query, &cfg(Reparam::Embedding), &mut rng);
        let mlp = PrefixBank::init(&mut s2, Tower::Query, &cfg(Reparam::Mlp { hidden: 16 }), &mut rng);
        assert!(mlp.parameter_count(&s2) > emb.parameter_count(&s1));
    }

    #[test]
    fn zero_mlp_gives_zero_prefixes() {
        let c = cfg(Reparam::Mlp { hidden: 16 });
        let mut store = ParamStore::new();
        let bank = PrefixBank::init(&mut store, Tower::Candidate, &c, &mut ChaCha8Rng::seed_from_u64(0));
        let base = store.find("prefix.candidate.mlp.base").unwrap();
        store.get_mut(base).value_mut().fill(0.0);
        let mut tape = Tape::new();
        for l in materialize_prefix(&mut tape, &store, &bank, &c).unwrap() {
            let LayerPrefix::Hidden(n) = l else { panic!() };
            assert!(tape.value(n).data().iter().all(|&v| v == 0.0));
            assert_eq!(tape.value(n).shape(), (4, 8));
        }
    }

    #[test]
    fn key_value_mode_doubles_slots() {
        let c = EncoderConfig { prefix_mode: PrefixMode::KeyValue, ..cfg(Reparam::Embedding) };
        let mut store = ParamStore::new();
        let bank = PrefixBank::init(&mut store, Tower::Query, &c, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(bank.parameter_count(&store), 2 * 2 * 4 * 8);
        let mut tape = Tape::new();
        let layers = materialize_prefix(&mut tape, &store, &bank, &c).unwrap();
        assert!(matches!(layers[1], LayerPrefix::KeyValue { .. }));
    }
}
