use dashu_float::FBig;
use proptest::prelude::*;

use tkgr_core::contrastive::{assemble_negatives, cosine_score, info_nce_loss, info_nce_node, NegativeFamily, PreBatchQueue};
use tkgr_core::numerics::{Tape, Tensor};
use tkgr_core::tkg::EntityId;

fn big(n: i64) -> FBig {
    FBig::from(n).with_precision(128).value()
}

#[test]
fn cosine_of_axis_and_diagonal() {
    let c = cosine_score(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
    assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    assert!((c - 0.70710678).abs() < 1e-8);
}

#[test]
fn unit_temperature_closed_form() {
    let got = info_nce_loss(1.0, &[-1.0], 1.0, 0.0);
    assert!((got - (-2f64).exp().ln_1p()).abs() < 1e-15);
    assert!((got - 0.126928).abs() < 1e-6);
}

#[test]
fn sharp_temperature_matches_high_precision_oracle() {
    // ln(1 + e^{(-1 - 0.98) / 0.05}) with every constant kept exact
    let z = (big(-1) - big(98) / big(100)) / (big(5) / big(100));
    let oracle = z.exp().ln_1p().to_f64().value();
    assert!(oracle > 0.0 && oracle < 1e-16);

    let got = info_nce_loss(1.0, &[-1.0], 0.05, 0.02);
    assert!(((got - oracle) / oracle).abs() < 1e-12, "{got:e} vs {oracle:e}");

    let ids = [EntityId(0), EntityId(1)];
    let (layout, sets) = assemble_negatives(&ids, &[EntityId(5), EntityId(6)], &PreBatchQueue::new(0), false).unwrap();
    let mut tape = Tape::new();
    let s = tape.variable(Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap());
    let th = tape.variable(Tensor::scalar(0.05f64.ln()));
    let loss = info_nce_node(&mut tape, s, th, &layout, &sets, 0.02).unwrap();
    let fused = tape.value(loss).item();
    assert!(((fused - oracle) / oracle).abs() < 1e-12, "{fused:e} vs {oracle:e}");
}

#[test]
fn full_queue_negative_count() {
    let (b, k) = (4, 3);
    let mut queue = PreBatchQueue::new(k);
    let mut next = 100;
    for _ in 0..k {
        let ids: Vec<EntityId> = (0..b).map(|i| EntityId(next + i)).collect();
        next += b;
        queue.push_batch(Tensor::zeros(b as usize, 2), ids);
    }
    let golds: Vec<EntityId> = (0..b).map(EntityId).collect();
    let heads: Vec<EntityId> = (0..b).map(|i| EntityId(50 + i)).collect();
    let (_, sets) = assemble_negatives(&golds, &heads, &queue, true).unwrap();
    let b = b as usize;
    for s in &sets {
        assert_eq!(s.negatives.len(), (b - 1) + k * b + 1);
    }

    // a queued copy of gold 0 is dropped from query 0 only
    queue.push_batch(Tensor::zeros(b, 2), vec![EntityId(0), EntityId(900), EntityId(901), EntityId(902)]);
    let (_, sets) = assemble_negatives(&golds, &heads, &queue, true).unwrap();
    assert_eq!(sets[0].count(NegativeFamily::PreBatch), k * b - 1);
    assert_eq!(sets[1].count(NegativeFamily::PreBatch), k * b);
}

proptest! {
    #[test]
    fn loss_is_non_negative_and_falls_with_gold_score(
        gold in -1.0f64..1.0,
        bump in 0.0f64..0.5,
        negs in prop::collection::vec(-1.0f64..1.0, 0..12),
        tau in 0.01f64..2.0,
        margin in 0.0f64..0.3,
    ) {
        let l = info_nce_loss(gold, &negs, tau, margin);
        prop_assert!(l >= 0.0 && l.is_finite());
        prop_assert!(info_nce_loss(gold + bump, &negs, tau, margin) <= l);
        prop_assert!(info_nce_loss(gold, &negs, tau, margin + bump) >= l);
        if negs.is_empty() {
            prop_assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn fused_loss_is_the_mean_of_row_losses(
        scores in prop::collection::vec(-1.0f64..1.0, 9),
        tau in 0.02f64..1.0,
        margin in 0.0f64..0.2,
    ) {
        let ids = [EntityId(0), EntityId(1), EntityId(2)];
        let (layout, sets) = assemble_negatives(&ids, &ids, &PreBatchQueue::new(0), true).unwrap();
        prop_assert_eq!(layout.width(), 6);
        let mut full = Vec::new();
        for r in 0..3 {
            full.extend_from_slice(&scores[r * 3..r * 3 + 3]);
            full.extend_from_slice(&[0.0; 3]);
        }
        let m = Tensor::from_vec(3, 6, full).unwrap();
        let mut tape = Tape::new();
        let s = tape.variable(m.clone());
        let th = tape.variable(Tensor::scalar(tau.ln()));
        let loss = info_nce_node(&mut tape, s, th, &layout, &sets, margin).unwrap();
        let want: f64 = (0..3)
            .map(|i| {
                let negs: Vec<f64> = sets[i].negatives.iter().map(|n| m.get(i, n.column)).collect();
                info_nce_loss(m.get(i, i), &negs, tau, margin)
            })
            .sum::<f64>() / 3.0;
        prop_assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }
}
