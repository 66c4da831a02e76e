use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_FOLDS: usize = 4;
pub const VAL_FRACTION: f64 = 0.10;
pub const TEST_FRACTION: f64 = 0.15;
pub const FEW_SHOT_FRACTIONS: [f64; 5] = [0.05, 0.10, 0.20, 0.40, 0.80];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Split>,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Splits `total` across groups proportionally by largest remainder, ties
/// to the earlier group.
fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
    let mut left = total - out.iter().sum::<usize>();
    for &g in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if out[g] < sizes[g] {
            out[g] += 1;
            left -= 1;
        }
    }
    out
}

fn classes(labels: &[u8], stratified: bool) -> Vec<Vec<usize>> {
    if !stratified {
        return vec![(0..labels.len()).collect()];
    }
    let mut by = vec![Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        by[(l == 1) as usize].push(i);
    }
    by
}

fn require_both(labels: &[u8], idx: &[usize], what: &str, fold: usize) -> Result<()> {
    let pos = idx.iter().filter(|&&i| labels[i] == 1).count();
    if pos == 0 || pos == idx.len() {
        return Err(Error::Data(format!("fold {fold}: {what} split lacks a class")));
    }
    Ok(())
}

/// Four independent 75:10:15 splits, label-stratified unless told otherwise.
pub fn make_folds(labels: &[u8], seed: u64, stratified: bool) -> Result<FoldPlan> {
    let n = labels.len();
    if n < 20 {
        return Err(Error::Data(format!("{n} examples; folds need at least 20")));
    }
    let groups = classes(labels, stratified);
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let n_test = round_half_up(n as f64 * TEST_FRACTION);
    let n_val = round_half_up(n as f64 * VAL_FRACTION);
    let test_k = apportion(&sizes, n_test);
    let rest: Vec<usize> = sizes.iter().zip(&test_k).map(|(s, t)| s - t).collect();
    let val_k = apportion(&rest, n_val);
    let mut folds = Vec::with_capacity(N_FOLDS);
    for f in 0..N_FOLDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(100 + f as u64);
        let mut split = Split {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (g, members) in groups.iter().enumerate() {
            let mut m = members.clone();
            m.shuffle(&mut rng);
            split.test.extend_from_slice(&m[..test_k[g]]);
            split.val.extend_from_slice(&m[test_k[g]..test_k[g] + val_k[g]]);
            split.train.extend_from_slice(&m[test_k[g] + val_k[g]..]);
        }
        for v in [&mut split.train, &mut split.val, &mut split.test] {
            v.sort_unstable();
        }
        require_both(labels, &split.train, "train", f)?;
        require_both(labels, &split.val, "val", f)?;
        require_both(labels, &split.test, "test", f)?;
        folds.push(split);
    }
    Ok(FoldPlan { seed, folds })
}

/// Class-stratified ordering of `train`: one example of each class first,
/// then the rest interleaved by their position within their class.
fn stratified_order(train: &[usize], labels: &[u8], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut by: Vec<Vec<usize>> = vec![Vec::new(), Vec::new()];
    for &i in train {
        by[(labels[i] == 1) as usize].push(i);
    }
    let mut head = Vec::new();
    let mut keyed: Vec<(f64, u64, usize)> = Vec::new();
    for members in by.iter_mut().filter(|m| !m.is_empty()) {
        members.shuffle(rng);
        head.push(members[0]);
        let n = members.len() as f64;
        for (j, &i) in members.iter().enumerate().skip(1) {
            keyed.push(((j as f64 + 0.5) / n, rand::Rng::gen(rng), i));
        }
    }
    head.shuffle(rng);
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    head.extend(keyed.into_iter().map(|k| k.2));
    head
}

/// Subsets of `train` per fraction, sizes rounded half up with at least one
/// example per class present. Nested unless `independent` is set.
pub fn few_shot_plan(
    train: &[usize],
    labels: &[u8],
    fractions: &[f64],
    seed: u64,
    independent: bool,
) -> Result<Vec<Vec<usize>>> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
    }
    let n_classes = train
        .iter()
        .map(|&i| labels[i])
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(200);
    let shared = stratified_order(train, labels, &mut rng);
    let mut out = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let order = if independent {
            stratified_order(train, labels, &mut rng)
        } else {
            shared.clone()
        };
        let k = round_half_up(f * train.len() as f64).max(n_classes).min(train.len());
        let mut subset = order[..k].to_vec();
        subset.sort_unstable();
        out.push(subset);
    }
    Ok(out)
}
