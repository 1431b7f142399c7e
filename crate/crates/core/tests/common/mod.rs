//! Helpers shared by the integration tests: a loop-based reference encoder,
//! random graph generators and a hash of parameter values.
#![allow(dead_code)]

use rand::Rng;
use sha2::{Digest, Sha256};

use tkgr_core::encoder::{PrefixMode, Reparam, Tower};
use tkgr_core::model::TwoTowerModel;
use tkgr_core::numerics::{ParamId, ParamStore};
use tkgr_core::tkg::{Quadruple, TimeValue, TimeVocab};

type Mat = Vec<Vec<f64>>;

fn param(store: &ParamStore, name: &str) -> Mat {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = store.get(id).value();
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().enumerate().map(|(k, v)| v * b[k][j]).sum()).collect())
        .collect()
}

fn add_bias(mut a: Mat, b: &Mat) -> Mat {
    for row in &mut a {
        for (v, bb) in row.iter_mut().zip(&b[0]) {
            *v += bb;
        }
    }
    a
}

fn linear(x: &Mat, store: &ParamStore, w: &str, b: &str) -> Mat {
    add_bias(mm(x, &param(store, w)), &param(store, b))
}

fn layer_norm(x: &Mat, gain: &Mat, bias: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-12).sqrt();
            row.iter().enumerate().map(|(c, v)| (v - mean) / sd * gain[0][c] + bias[0][c]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

/// Per-layer prefix as `(key_rows, value_rows)` inputs. In hidden mode both
/// are the same rows, fed through the layer's key and value projections.
fn prefixes(model: &TwoTowerModel, tower: Tower) -> Vec<(Mat, Mat)> {
    let cfg = &model.config;
    if cfg.prefix_len == 0 {
        return vec![(Vec::new(), Vec::new()); cfg.layers];
    }
    let t = tower.name();
    let slots = cfg.prefix_mode.slots();
    let rows: Vec<Mat> = match cfg.reparam {
        Reparam::Embedding => (0..cfg.layers)
            .flat_map(|j| match cfg.prefix_mode {
                PrefixMode::Hidden => vec![param(&model.store, &format!("prefix.{t}.layer{j}"))],
                PrefixMode::KeyValue => vec![
                    param(&model.store, &format!("prefix.{t}.layer{j}.key")),
                    param(&model.store, &format!("prefix.{t}.layer{j}.value")),
                ],
            })
            .collect(),
        Reparam::Mlp { .. } => {
            let s = &model.store;
            let base = param(s, &format!("prefix.{t}.mlp.base"));
            let h: Mat = add_bias(mm(&base, &param(s, &format!("prefix.{t}.mlp.w1"))), &param(s, &format!("prefix.{t}.mlp.b1")))
                .into_iter()
                .map(|r| r.into_iter().map(f64::tanh).collect())
                .collect();
            let all = add_bias(mm(&h, &param(s, &format!("prefix.{t}.mlp.w2"))), &param(s, &format!("prefix.{t}.mlp.b2")));
            let d = cfg.width;
            (0..cfg.layers * slots).map(|i| all.iter().map(|r| r[i * d..(i + 1) * d].to_vec()).collect()).collect()
        }
    };
    rows.chunks(slots).map(|c| (c[0].clone(), c[slots - 1].clone())).collect()
}

/// Mean-pooled final hidden state of one sequence, computed with plain loops.
/// `tower = None` runs the encoder without any prefix.
pub fn reference_pooled(model: &TwoTowerModel, tower: Option<Tower>, ids: &[u32]) -> Vec<f64> {
    let cfg = &model.config;
    let s = &model.store;
    let (d, heads) = (cfg.width, cfg.heads);
    let dh = d / heads;
    let tok = param(s, "encoder.embeddings.token");
    let pos = param(s, "encoder.embeddings.position");
    let x: Mat = ids.iter().enumerate().map(|(i, &id)| tok[id as usize].iter().zip(&pos[i]).map(|(a, b)| a + b).collect()).collect();
    let mut h = layer_norm(&x, &param(s, "encoder.embeddings.ln.gain"), &param(s, "encoder.embeddings.ln.bias"));
    let pre = match tower {
        Some(t) => prefixes(model, t),
        None => vec![(Vec::new(), Vec::new()); cfg.layers],
    };
    for (j, (pk, pv)) in pre.iter().enumerate() {
        let l = format!("encoder.layer{j}");
        let q = linear(&h, s, &format!("{l}.attn.wq"), &format!("{l}.attn.bq"));
        let (k, v) = match cfg.prefix_mode {
            PrefixMode::Hidden => {
                let mut rows = pk.clone();
                rows.extend(h.iter().cloned());
                (
                    linear(&rows, s, &format!("{l}.attn.wk"), &format!("{l}.attn.bk")),
                    linear(&rows, s, &format!("{l}.attn.wv"), &format!("{l}.attn.bv")),
                )
            }
            PrefixMode::KeyValue => {
                let mut k = pk.clone();
                k.extend(linear(&h, s, &format!("{l}.attn.wk"), &format!("{l}.attn.bk")));
                let mut v = pv.clone();
                v.extend(linear(&h, s, &format!("{l}.attn.wv"), &format!("{l}.attn.bv")));
                (k, v)
            }
        };
        let mut attn = vec![vec![0.0; d]; h.len()];
        for (i, qi) in q.iter().enumerate() {
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let logits: Vec<f64> =
                    k.iter().map(|kr| cols.clone().map(|c| qi[c] * kr[c]).sum::<f64>() / (dh as f64).sqrt()).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for (r, w) in e.iter().enumerate() {
                    for c in cols.clone() {
                        attn[i][c] += w / z * v[r][c];
                    }
                }
            }
        }
        let o = linear(&attn, s, &format!("{l}.attn.wo"), &format!("{l}.attn.bo"));
        let h1 = layer_norm(&add(&h, &o), &param(s, &format!("{l}.ln1.gain")), &param(s, &format!("{l}.ln1.bias")));
        let f: Mat = linear(&h1, s, &format!("{l}.ffn.w1"), &format!("{l}.ffn.b1"))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let f = linear(&f, s, &format!("{l}.ffn.w2"), &format!("{l}.ffn.b2"));
        h = layer_norm(&add(&h1, &f), &param(s, &format!("{l}.ln2.gain")), &param(s, &format!("{l}.ln2.bias")));
    }
    (0..d).map(|c| h.iter().map(|r| r[c]).sum::<f64>() / h.len() as f64).collect()
}

/// SHA-256 over the exact bits of the given parameters.
pub fn hash_params(store: &ParamStore, ids: &[ParamId]) -> [u8; 32] {
    let mut h = Sha256::new();
    for &id in ids {
        let p = store.get(id);
        h.update(p.name().as_bytes());
        for v in p.value().data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Random base-relation facts over step timestamps `0..times`; the time
/// vocabulary is interned in a shuffled order so ids and keys differ.
pub fn random_tkg<R: Rng>(rng: &mut R, entities: u32, relations: u32, times: u32, facts: usize) -> (Vec<Quadruple>, TimeVocab) {
    let mut tv = TimeVocab::default();
    let mut order: Vec<u32> = (0..times).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    for &k in &order {
        tv.intern(&k.to_string(), TimeValue::Step(i64::from(k)));
    }
    let q = (0..facts)
        .map(|_| Quadruple::new(rng.gen_range(0..entities), rng.gen_range(0..relations), rng.gen_range(0..entities), rng.gen_range(0..times)))
        .collect();
    (q, tv)
}

pub fn tsv(facts: &[[String; 4]]) -> String {
    facts.iter().map(|f| format!("{}\n", f.join("\t"))).collect()
}
