mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tkgr_core::tkg::{EntityId, RelationId, TemporalKg, TimestampId};
use tkgr_core::verbalizer::{retrieve_history, HistoryConfig, HistoryOrder};

fn sorted_pairs(v: impl IntoIterator<Item = (u32, u32)>) -> Vec<(u32, u32)> {
    let mut v: Vec<_> = v.into_iter().collect();
    v.sort_unstable();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn history_matches_exhaustive_scan(
        seed in 0u64..1000,
        max_items in 0usize..6,
        strict in any::<bool>(),
        exclude in any::<bool>(),
        order in 0usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (facts, times) = common::random_tkg(&mut rng, 5, 2, 8, 60);
        let kg = TemporalKg::new(facts.clone(), &times);
        let order = [HistoryOrder::Descending, HistoryOrder::Ascending, HistoryOrder::Random][order];
        let cfg = HistoryConfig { order, max_items, strict_past: strict, exclude_gold: exclude, ..Default::default() };
        for q in facts.iter().take(10) {
            let ctx = retrieve_history(q.s, q.p, q.t, Some(q.o), &kg, &times, &cfg);
            let key = times.key(q.t);

            // every eligible past fact, by timestamp key
            let eligible: Vec<(i64, u32)> = facts
                .iter()
                .filter(|f| f.s == q.s && f.p == q.p)
                .filter(|f| if strict { times.key(f.t) < key } else { times.key(f.t) <= key })
                .filter(|f| !(exclude && f.o == q.o))
                .map(|f| (times.key(f.t), f.o.0))
                .collect();
            prop_assert_eq!(ctx.items.len(), eligible.len().min(max_items));
            prop_assert!(ctx.items.iter().all(|i| i.p == q.p));

            // kept items are the most recent ones
            let mut keys: Vec<i64> = eligible.iter().map(|e| e.0).collect();
            keys.sort_unstable();
            let cut = keys.len() - ctx.items.len();
            let mut got_keys: Vec<i64> = ctx.items.iter().map(|i| times.key(i.t)).collect();
            match order {
                HistoryOrder::Descending => prop_assert!(got_keys.windows(2).all(|w| w[0] >= w[1])),
                HistoryOrder::Ascending => prop_assert!(got_keys.windows(2).all(|w| w[0] <= w[1])),
                HistoryOrder::Random => {}
            }
            got_keys.sort_unstable();
            prop_assert_eq!(&got_keys[..], &keys[cut..]);
            if cut == 0 {
                let got = sorted_pairs(ctx.items.iter().map(|i| (times.key(i.t) as u32, i.o.0)));
                prop_assert_eq!(got, sorted_pairs(eligible.iter().map(|&(k, o)| (k as u32, o))));
            }
            if exclude {
                prop_assert!(ctx.items.iter().all(|i| i.o != q.o));
            }
        }
    }
}

#[test]
fn random_order_is_a_permutation_of_descending() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (facts, times) = common::random_tkg(&mut rng, 3, 1, 20, 80);
    let kg = TemporalKg::new(facts.clone(), &times);
    let (s, p) = (EntityId(0), RelationId(0));
    let t = TimestampId((0..times.len() as u32).max_by_key(|&i| times.key(TimestampId(i))).unwrap());
    let desc = HistoryConfig { max_items: 10, ..Default::default() };
    let rand = HistoryConfig { order: HistoryOrder::Random, ..desc.clone() };
    let a = retrieve_history(s, p, t, None, &kg, &times, &desc);
    let b = retrieve_history(s, p, t, None, &kg, &times, &rand);
    let key = |v: &[tkgr_core::verbalizer::HistoryItem]| sorted_pairs(v.iter().map(|i| (i.t.0, i.o.0)));
    assert_eq!(key(&a.items), key(&b.items));
    assert_eq!(b, retrieve_history(s, p, t, None, &kg, &times, &rand));
}
