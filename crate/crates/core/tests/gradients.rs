use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tkgr_core::contrastive::{assemble_negatives, info_nce_node, PreBatchQueue};
use tkgr_core::numerics::{finite_difference_check, NodeId, ParamGrads, ParamId, ParamStore, Tape, Tensor, TensorError};
use tkgr_core::tkg::EntityId;

const EPS: f64 = 1e-5;

fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = shapes.iter().map(|&(n, r, c)| store.register(n, Tensor::uniform(r, c, -1.0, 1.0, &mut rng), true)).collect();
    (store, ids)
}

fn finish(tape: Tape, loss: NodeId) -> Result<(f64, ParamGrads), TensorError> {
    let g = tape.backward(loss)?;
    Ok((tape.value(loss).item(), g.params))
}

#[test]
fn matmul_matches_central_differences() {
    let (mut store, ids) = store_with(&[("a", 3, 4), ("b", 4, 2)], 1);
    let report = finite_difference_check(&mut store, EPS, |s| {
        let mut t = Tape::new();
        let a = t.param(s, ids[0]);
        let b = t.param(s, ids[1]);
        let y = t.matmul(a, b)?;
        let y = t.tanh(y);
        let l = t.sum(y);
        finish(t, l)
    })
    .unwrap();
    assert_eq!(report.coordinates, 20);
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn softmax_cross_entropy_matches_central_differences() {
    let (mut store, ids) = store_with(&[("scores", 3, 6), ("theta", 1, 1)], 2);
    let q = PreBatchQueue::new(0);
    let gold: Vec<EntityId> = [1, 2, 3].map(EntityId).to_vec();
    let heads: Vec<EntityId> = [4, 5, 6].map(EntityId).to_vec();
    let (layout, sets) = assemble_negatives(&heads, &gold, &q, true).unwrap();
    assert_eq!(layout.width(), 6);
    let report = finite_difference_check(&mut store, EPS, |s| {
        let mut t = Tape::new();
        let sc = t.param(s, ids[0]);
        let th = t.param(s, ids[1]);
        let l = info_nce_node(&mut t, sc, th, &layout, &sets, 0.1).map_err(|_| TensorError::DetachedLoss)?;
        finish(t, l)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn segmented_attention_matches_central_differences() {
    // two shared rows, then sequences of two and three rows
    let (mut store, ids) = store_with(&[("q", 5, 4), ("k", 7, 4), ("v", 7, 4)], 3);
    let report = finite_difference_check(&mut store, EPS, |s| {
        let mut t = Tape::new();
        let q = t.param(s, ids[0]);
        let k = t.param(s, ids[1]);
        let v = t.param(s, ids[2]);
        let a = t.segmented_attention(q, k, v, 2, 2, &[0..2, 2..5])?;
        let a = t.tanh(a);
        let l = t.sum(a);
        finish(t, l)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn segments_do_not_see_each_other() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = Tensor::randn(5, 4, 1.0, &mut rng);
    let k = Tensor::randn(7, 4, 1.0, &mut rng);
    let v = Tensor::randn(7, 4, 1.0, &mut rng);
    let out = |v: &Tensor| {
        let mut t = Tape::new();
        let (a, b, c) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let o = t.segmented_attention(a, b, c, 2, 2, &[0..2, 2..5]).unwrap();
        t.value(o).clone()
    };
    let base = out(&v);
    let mut v2 = v.clone();
    // value row of the second sequence's last position
    for c in 0..4 {
        v2.set(6, c, 10.0);
    }
    let moved = out(&v2);
    for r in 0..2 {
        assert_eq!(base.row_slice(r), moved.row_slice(r));
    }
    assert!((2..5).any(|r| base.row_slice(r) != moved.row_slice(r)));
}

#[test]
fn layer_ops_chain_matches_central_differences() {
    let (mut store, ids) = store_with(&[("table", 5, 6), ("gain", 1, 6), ("bias", 1, 6), ("w", 6, 6)], 5);
    let report = finite_difference_check(&mut store, EPS, |s| {
        let mut t = Tape::new();
        let table = t.param(s, ids[0]);
        let x = t.gather_rows(table, &[0, 3, 3, 1, 4])?;
        let (g, b) = (t.param(s, ids[1]), t.param(s, ids[2]));
        let x = t.layer_norm(x, g, b)?;
        let w = t.param(s, ids[3]);
        let x = t.matmul(x, w)?;
        let x = t.gelu(x);
        let x = t.segment_mean_rows(x, &[0..2, 2..5])?;
        let x = t.l2_normalize_rows(x)?;
        let x = t.slice_cols(x, 1, 4)?;
        let x = t.scale(x, 1.7);
        let l = t.sum(x);
        finish(t, l)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}
