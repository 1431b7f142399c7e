//! Generator for periodic toy temporal graphs: every `(s, p)` pair cycles
//! through a fixed list of objects, one fact per timestamp.

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub entities: usize,
    pub relations: usize,
    pub timestamps: usize,
    /// Number of distinct `(s, p)` pairs.
    pub pairs: usize,
    /// Objects each pair cycles through.
    pub cycle: usize,
    /// First validation timestamp index.
    pub valid_from: usize,
    /// First test timestamp index.
    pub test_from: usize,
    pub start: NaiveDate,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            entities: 50,
            relations: 5,
            timestamps: 60,
            pairs: 33,
            cycle: 3,
            valid_from: 48,
            test_from: 54,
            start: NaiveDate::from_ymd_opt(2014, 1, 1).expect("valid date"),
            seed: 0,
        }
    }
}

/// Surface-form facts `[s, p, o, t]` split by time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SyntheticTkg {
    pub train: Vec<[String; 4]>,
    pub valid: Vec<[String; 4]>,
    pub test: Vec<[String; 4]>,
}

impl SyntheticTkg {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_tsv(facts: &[[String; 4]]) -> String {
        facts.iter().map(|f| format!("{}\n", f.join("\t"))).collect()
    }
}

pub fn entity_name(i: usize) -> String {
    format!("e{i}")
}

pub fn relation_name(i: usize) -> String {
    format!("r{i}")
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticTkg {
    assert!(cfg.entities > cfg.cycle, "need more entities than cycle length");
    assert!(cfg.pairs <= cfg.entities * cfg.relations, "too many pairs");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut all_pairs: Vec<(usize, usize)> = (0..cfg.entities).flat_map(|s| (0..cfg.relations).map(move |p| (s, p))).collect();
    all_pairs.shuffle(&mut rng);
    all_pairs.truncate(cfg.pairs);
    all_pairs.sort_unstable();

    let patterns: Vec<(usize, usize, Vec<usize>, usize)> = all_pairs
        .into_iter()
        .map(|(s, p)| {
            let others: Vec<usize> = (0..cfg.entities).filter(|&e| e != s).collect();
            let objects: Vec<usize> = others.choose_multiple(&mut rng, cfg.cycle).copied().collect();
            (s, p, objects, rng.gen_range(0..cfg.cycle))
        })
        .collect();

    let mut out = SyntheticTkg::default();
    for t in 0..cfg.timestamps {
        let date = cfg.start.checked_add_days(Days::new(t as u64)).expect("date in range");
        let stamp = date.format("%Y-%m-%d").to_string();
        let bucket = if t >= cfg.test_from {
            &mut out.test
        } else if t >= cfg.valid_from {
            &mut out.valid
        } else {
            &mut out.train
        };
        for (s, p, objects, phase) in &patterns {
            let o = objects[(t + phase) % cfg.cycle];
            bucket.push([entity_name(*s), relation_name(*p), entity_name(o), stamp.clone()]);
        }
    }
    out
}
