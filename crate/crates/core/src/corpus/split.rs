//! Stratified build/test and train/valid splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{AppRecord, Label};
use crate::error::{Error, Result};
use crate::seed;

/// Share of the build set used for training; the rest validates.
pub const TRAIN_SHARE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub build_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub train_ids: Vec<String>,
    pub valid_ids: Vec<String>,
    pub seed: u64,
}

/// Splits each stratum so that the pieces add up to `round(ratio · total)`,
/// handing leftover units to the strata with the largest remainders.
fn allocate(sizes: &[usize], ratio: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = (ratio * total as f64).round() as usize;
    let mut take: Vec<usize> = sizes
        .iter()
        .map(|&n| (ratio * n as f64).floor() as usize)
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ratio * sizes[a] as f64 - take[a] as f64;
        let fb = ratio * sizes[b] as f64 - take[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(take.iter().sum());
    for &i in order.iter().cycle().take(sizes.len() * 2) {
        if missing == 0 {
            break;
        }
        if take[i] < sizes[i] {
            take[i] += 1;
            missing -= 1;
        }
    }
    take
}

fn stratified(groups: &BTreeMap<Label, Vec<String>>, ratio: f64) -> (Vec<String>, Vec<String>) {
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    let take = allocate(&sizes, ratio);
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (ids, k) in groups.values().zip(take) {
        first.extend_from_slice(&ids[..k]);
        second.extend_from_slice(&ids[k..]);
    }
    first.sort();
    second.sort();
    (first, second)
}

/// Seeded split into build and test by `build_ratio`, then build into
/// train and valid at 80/20, both stratified by label.
pub fn split_dataset(records: &[AppRecord], build_ratio: f64, root: u64) -> Result<DatasetSplit> {
    if !(build_ratio > 0.0 && build_ratio < 1.0) {
        return Err(Error::invalid(format!(
            "build ratio must lie in (0, 1), got {build_ratio}"
        )));
    }
    if records.len() < 4 {
        return Err(Error::invalid(format!(
            "need at least 4 records to split, got {}",
            records.len()
        )));
    }
    let mut ids: Vec<&AppRecord> = records.iter().collect();
    ids.sort_by(|a, b| a.id.cmp(&b.id));
    if ids.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::Data("duplicate app ids".into()));
    }
    let mut rng = seed::child_rng(root, "split");
    let mut groups: BTreeMap<Label, Vec<String>> = BTreeMap::new();
    for r in ids {
        groups.entry(r.label).or_default().push(r.id.clone());
    }
    for g in groups.values_mut() {
        g.shuffle(&mut rng);
    }
    let (build_ids, test_ids) = stratified(&groups, build_ratio);

    let label_of: BTreeMap<&str, Label> =
        records.iter().map(|r| (r.id.as_str(), r.label)).collect();
    let mut build_groups: BTreeMap<Label, Vec<String>> = BTreeMap::new();
    for g in groups.values() {
        for id in g.iter().filter(|id| build_ids.binary_search(id).is_ok()) {
            build_groups
                .entry(label_of[id.as_str()])
                .or_default()
                .push(id.clone());
        }
    }
    let (train_ids, valid_ids) = stratified(&build_groups, TRAIN_SHARE);
    Ok(DatasetSplit {
        build_ids,
        test_ids,
        train_ids,
        valid_ids,
        seed: root,
    })
}

/// Seeded stratified split of labeled ids into train and valid at
/// [`TRAIN_SHARE`]; used when the build set is recomposed.
pub fn split_train_valid(
    items: &[(String, Label)],
    root: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if items.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 apps to split, got {}",
            items.len()
        )));
    }
    let mut sorted: Vec<&(String, Label)> = items.iter().collect();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Data("duplicate app ids".into()));
    }
    let mut rng = seed::child_rng(root, "split.train-valid");
    let mut groups: BTreeMap<Label, Vec<String>> = BTreeMap::new();
    for (id, label) in sorted {
        groups.entry(*label).or_default().push(id.clone());
    }
    for g in groups.values_mut() {
        g.shuffle(&mut rng);
    }
    Ok(stratified(&groups, TRAIN_SHARE))
}
