use super::{Quadruple, TimeVocab, TimestampId, TkgError};

/// Train / valid / test facts with their time boundaries: train covers
/// `[t0, t1)`, valid `[t1, t2)`, test `[t2, t3]` when ordered strictly.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<Quadruple>,
    pub valid: Vec<Quadruple>,
    pub test: Vec<Quadruple>,
    pub t0: Option<TimestampId>,
    pub t1: Option<TimestampId>,
    pub t2: Option<TimestampId>,
    pub t3: Option<TimestampId>,
}

fn extreme(facts: &[Quadruple], times: &TimeVocab, max: bool) -> Option<TimestampId> {
    let it = facts.iter().map(|q| q.t);
    if max {
        it.max_by_key(|&t| times.key(t))
    } else {
        it.min_by_key(|&t| times.key(t))
    }
}

impl DatasetSplit {
    /// Builds a split; with `strict_extrapolation` every train timestamp must
    /// precede every valid timestamp, which must precede every test timestamp.
    pub fn new(
        train: Vec<Quadruple>,
        valid: Vec<Quadruple>,
        test: Vec<Quadruple>,
        times: &TimeVocab,
        strict_extrapolation: bool,
    ) -> Result<Self, TkgError> {
        if strict_extrapolation {
            let pairs = [("train", &train, "valid", &valid), ("valid", &valid, "test", &test), ("train", &train, "test", &test)];
            for (an, a, bn, b) in pairs {
                if let (Some(amax), Some(bmin)) = (extreme(a, times, true), extreme(b, times, false)) {
                    if times.key(amax) >= times.key(bmin) {
                        return Err(TkgError::SplitOrder(format!("{an} reaches {} but {bn} starts at {}", times.entry(amax).text, times.entry(bmin).text)));
                    }
                }
            }
        }
        Ok(DatasetSplit {
            t0: extreme(&train, times, false),
            t1: extreme(&valid, times, false),
            t2: extreme(&test, times, false),
            t3: extreme(&test, times, true),
            train,
            valid,
            test,
        })
    }

    pub fn all_facts(&self) -> Vec<Quadruple> {
        let mut all = Vec::with_capacity(self.train.len() + self.valid.len() + self.test.len());
        all.extend_from_slice(&self.train);
        all.extend_from_slice(&self.valid);
        all.extend_from_slice(&self.test);
        all
    }
}
