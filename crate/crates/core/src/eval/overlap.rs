use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{SampleId, Verdict};

/// One model's detections among truly vulnerable samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSets {
    pub name: String,
    /// Vulnerable samples the model flagged.
    pub correct: BTreeSet<SampleId>,
    /// Vulnerable samples the model called clean.
    pub false_negatives: BTreeSet<SampleId>,
}

/// An exclusive Venn region: ids in exactly the sets of `models`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub models: Vec<String>,
    /// Bit `i` set iff model `i` belongs to the region.
    pub mask: u8,
    pub correct: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub models: Vec<ModelSets>,
    /// All `2^n - 1` non-empty regions, by ascending mask.
    pub regions: Vec<Region>,
    pub union_correct: usize,
    pub union_false_negatives: usize,
}

impl OverlapReport {
    /// The region containing exactly the named models.
    pub fn region(&self, names: &[&str]) -> Option<&Region> {
        let mut mask = 0u8;
        for name in names {
            let i = self.models.iter().position(|m| m.name == *name)?;
            mask |= 1 << i;
        }
        self.regions.iter().find(|r| r.mask == mask)
    }

    /// Aligned text table, one row per region.
    pub fn render(&self) -> String {
        let label = |r: &Region| r.models.join(" & ");
        let width = self
            .regions
            .iter()
            .map(|r| label(r).len())
            .max()
            .unwrap_or(0)
            .max("region".len());
        let mut out = format!("{:<width$}  {:>8}  {:>8}\n", "region", "correct", "fn");
        for r in &self.regions {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>8}",
                label(r),
                r.correct,
                r.false_negatives
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}",
            "union", self.union_correct, self.union_false_negatives
        );
        out
    }
}

fn exclusive_sizes(sets: &[&BTreeSet<SampleId>]) -> (BTreeMap<u8, usize>, usize) {
    let union: BTreeSet<SampleId> = sets.iter().flat_map(|s| s.iter().copied()).collect();
    let mut sizes = BTreeMap::new();
    for id in &union {
        let mask = sets
            .iter()
            .enumerate()
            .filter(|(_, s)| s.contains(id))
            .fold(0u8, |m, (i, _)| m | (1 << i));
        *sizes.entry(mask).or_insert(0) += 1;
    }
    (sizes, union.len())
}

/// Venn analysis of two or three models' predictions on vulnerable samples.
pub fn compare_models(
    results: &[(&str, &BTreeMap<SampleId, Verdict>)],
    truths: &BTreeMap<SampleId, Verdict>,
) -> Result<OverlapReport> {
    if !(2..=3).contains(&results.len()) {
        return Err(Error::ModelCount(results.len()));
    }
    let mut models = Vec::with_capacity(results.len());
    for (name, preds) in results {
        // Key-set check shared with the confusion tally.
        super::confusion(preds, truths)?;
        let mut m = ModelSets {
            name: name.to_string(),
            correct: BTreeSet::new(),
            false_negatives: BTreeSet::new(),
        };
        for (&id, _) in truths.iter().filter(|(_, &t)| t == Verdict::Vulnerable) {
            match preds[&id] {
                Verdict::Vulnerable => m.correct.insert(id),
                Verdict::Clean => m.false_negatives.insert(id),
            };
        }
        models.push(m);
    }
    let (correct, union_correct) =
        exclusive_sizes(&models.iter().map(|m| &m.correct).collect::<Vec<_>>());
    let (fns, union_false_negatives) = exclusive_sizes(
        &models
            .iter()
            .map(|m| &m.false_negatives)
            .collect::<Vec<_>>(),
    );
    let regions = (1u8..(1 << models.len()))
        .map(|mask| Region {
            models: models
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, m)| m.name.clone())
                .collect(),
            mask,
            correct: correct.get(&mask).copied().unwrap_or(0),
            false_negatives: fns.get(&mask).copied().unwrap_or(0),
        })
        .collect();
    Ok(OverlapReport {
        models,
        regions,
        union_correct,
        union_false_negatives,
    })
}
