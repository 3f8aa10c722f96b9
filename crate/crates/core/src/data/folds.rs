//! Speaker-disjoint, class-stratified k-fold splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{subject_classes, SegmentRecord};
use crate::error::{Error, Result};
use crate::labels::DepressionClass;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<String>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test_subjects(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    /// Fold index of every subject.
    pub fn assignment(&self) -> BTreeMap<&str, usize> {
        self.folds
            .iter()
            .enumerate()
            .flat_map(|(i, f)| f.iter().map(move |s| (s.as_str(), i)))
            .collect()
    }
}

/// Deals the subjects of each class round-robin over `k` folds after a seeded
/// shuffle. Each class starts dealing where the previous one stopped, so fold
/// totals also differ by at most one.
pub fn split_speaker_folds(records: &[SegmentRecord], k: usize, seed: u64) -> Result<FoldSplit> {
    let classes = subject_classes(records)?;
    split_subjects(&classes, k, seed)
}

pub fn split_subjects(classes: &BTreeMap<String, DepressionClass>, k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if k > classes.len() {
        return Err(Error::Config(format!("k = {k} exceeds the {} subjects", classes.len())));
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in DepressionClass::ALL {
        let mut subjects: Vec<&String> = classes
            .iter()
            .filter(|(_, &c)| c == class)
            .map(|(s, _)| s)
            .collect();
        subjects.shuffle(&mut rng::stream(seed, &[0xF01D, class.index() as u64]));
        for s in subjects {
            folds[next % k].push(s.clone());
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(FoldSplit { folds })
}
