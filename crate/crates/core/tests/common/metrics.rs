//! Hand-computed cases and randomized properties of TP, FP and the
//! sibling partition.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use drivecluster::evaluation::{
    augment_index, cluster_purity, false_positive_rate, partition_indices, true_positive_rate, GradingVector, SiblingGroup,
};

pub const CASES: u32 = 256;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn group(origin: &str, n: usize) -> SiblingGroup {
    SiblingGroup {
        origin: origin.into(),
        derived_ids: (0..n).map(|d| format!("{origin}#{d}")).collect(),
        subsets: (0..n).map(|d| vec![d]).collect(),
    }
}

fn labels(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn grade(bits: u8) -> GradingVector {
    std::array::from_fn(|i| bits >> i & 1 == 1)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

/// Small clusterings whose scores are worked out by hand.
pub fn hand_cases() -> Result<usize, String> {
    let groups = [group("a", 2), group("b", 2), group("c", 3)];
    // a together, b split, c together: (2 + 3) / 7.
    let l = labels(&[("a#0", 0), ("a#1", 0), ("b#0", 0), ("b#1", 1), ("c#0", 2), ("c#1", 2), ("c#2", 2)]);
    let tp = true_positive_rate(&groups, &l).map_err(|e| e.to_string())?;
    if !close(tp, 5.0 / 7.0) {
        return Err(format!("TP {tp} != 5/7"));
    }
    let all_one = labels(&[("a#0", 0), ("a#1", 0), ("b#0", 0), ("b#1", 0), ("c#0", 0), ("c#1", 0), ("c#2", 0)]);
    if true_positive_rate(&groups, &all_one).map_err(|e| e.to_string())? != 1.0 {
        return Err("a single cluster must give TP 1".into());
    }
    let singletons: BTreeMap<String, usize> = all_one.keys().cloned().enumerate().map(|(i, k)| (k, i)).collect();
    if true_positive_rate(&groups, &singletons).map_err(|e| e.to_string())? != 0.0 {
        return Err("singleton clusters must give TP 0".into());
    }

    // Cluster 0 holds three of grading 1 and one of grading 2, cluster 1
    // holds two of grading 3 and one of 4 and one of 5: 1 + 2 wrong of 8.
    let l = labels(&[("p", 0), ("q", 0), ("r", 0), ("s", 0), ("t", 1), ("u", 1), ("v", 1), ("w", 1)]);
    let g: BTreeMap<String, GradingVector> = [("p", 1), ("q", 1), ("r", 1), ("s", 2), ("t", 3), ("u", 3), ("v", 4), ("w", 5)]
        .iter()
        .map(|(k, b)| (k.to_string(), grade(*b)))
        .collect();
    let fp = false_positive_rate(&l, &g).map_err(|e| e.to_string())?;
    if !close(fp, 3.0 / 8.0) {
        return Err(format!("FP {fp} != 3/8"));
    }
    // A two-way tie: the majority is the smaller vector, so exactly one is wrong.
    let l = labels(&[("x", 0), ("y", 0)]);
    let g: BTreeMap<String, GradingVector> = [("x", grade(1)), ("y", grade(2))].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    if !close(false_positive_rate(&l, &g).map_err(|e| e.to_string())?, 0.5) {
        return Err("tied cluster must give FP 1/2".into());
    }

    let truth: BTreeMap<String, String> = [("p", "L"), ("q", "L"), ("r", "R"), ("s", "R"), ("t", "R")]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let l = labels(&[("p", 0), ("q", 0), ("r", 0), ("s", 1), ("t", 1)]);
    if !close(cluster_purity(&l, &truth).map_err(|e| e.to_string())?, 4.0 / 5.0) {
        return Err("purity != 4/5".into());
    }
    Ok(6)
}

/// Random sibling groups, labels and gradings.
fn scenario() -> impl Strategy<Value = (Vec<SiblingGroup>, Vec<usize>, Vec<u8>)> {
    prop::collection::vec(1usize..6, 1..12).prop_flat_map(|sizes| {
        let groups: Vec<SiblingGroup> = sizes.iter().enumerate().map(|(i, &n)| group(&format!("s{i}"), n)).collect();
        let total: usize = sizes.iter().sum();
        (
            Just(groups),
            prop::collection::vec(0usize..5, total),
            prop::collection::vec(0u8..4, total),
        )
    })
}

fn maps(groups: &[SiblingGroup], ls: &[usize], gs: &[u8]) -> (BTreeMap<String, usize>, BTreeMap<String, GradingVector>) {
    let ids: Vec<&String> = groups.iter().flat_map(|g| &g.derived_ids).collect();
    (
        ids.iter().zip(ls).map(|(k, &v)| ((*k).clone(), v)).collect(),
        ids.iter().zip(gs).map(|(k, &v)| ((*k).clone(), grade(v))).collect(),
    )
}

fn check(cond: bool, what: &str) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(what.to_string()))
    }
}

/// Renaming clusters by a permutation and reordering groups leaves TP and FP unchanged.
pub fn permutation_invariance(cases: u32) -> Result<usize, String> {
    let strat = (scenario(), Just((0..5).collect::<Vec<usize>>()).prop_shuffle());
    runner(cases)
        .run(&strat, |((groups, ls, gs), perm)| {
            let (l, g) = maps(&groups, &ls, &gs);
            let renamed: BTreeMap<String, usize> = l.iter().map(|(k, &v)| (k.clone(), perm[v])).collect();
            let mut reversed = groups.clone();
            reversed.reverse();
            let tp = true_positive_rate(&groups, &l).unwrap();
            check(tp == true_positive_rate(&groups, &renamed).unwrap(), "TP changed under relabeling")?;
            check(tp == true_positive_rate(&reversed, &l).unwrap(), "TP changed under group reordering")?;
            check(
                false_positive_rate(&l, &g).unwrap() == false_positive_rate(&renamed, &g).unwrap(),
                "FP changed under relabeling",
            )
        })
        .map_err(|e| e.to_string())?;
    Ok(cases as usize)
}

/// The derived subsets are non-empty, disjoint, sorted, cover every frame
/// and differ in size by at most one.
pub fn partition(cases: u32) -> Result<usize, String> {
    runner(cases)
        .run(&(1usize..8, 0usize..200, any::<u64>()), |(n, extra, seed)| {
            let len = n + extra;
            let parts = partition_indices(len, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            check(parts.len() == n, "wrong number of subsets")?;
            check(parts.iter().all(|p| !p.is_empty() && p.windows(2).all(|w| w[0] < w[1])), "empty or unsorted subset")?;
            let union: BTreeSet<usize> = parts.iter().flatten().copied().collect();
            check(union.len() == len && parts.iter().map(Vec::len).sum::<usize>() == len, "subsets overlap or miss frames")?;
            check(union.iter().next_back() == Some(&(len - 1)), "index out of range")?;
            let (lo, hi) = (parts.iter().map(Vec::len).min().unwrap(), parts.iter().map(Vec::len).max().unwrap());
            check(hi - lo <= 1, "unbalanced subsets")?;
            let g = augment_index("x", len, n, seed).unwrap();
            check(g.derived_ids.len() == n && g.subsets.len() == n, "group shape")?;
            check(partition_indices(n - 1, n, &mut ChaCha8Rng::seed_from_u64(seed)).is_err(), "too-short sequence accepted")
        })
        .map_err(|e| e.to_string())?;
    Ok(cases as usize)
}

/// Merging two clusters never lowers TP.
pub fn merge_monotone(cases: u32) -> Result<usize, String> {
    runner(cases)
        .run(&(scenario(), 0usize..5, 0usize..5), |((groups, ls, gs), a, b)| {
            let (l, _) = maps(&groups, &ls, &gs);
            let merged: BTreeMap<String, usize> = l.iter().map(|(k, &v)| (k.clone(), if v == b { a } else { v })).collect();
            check(
                true_positive_rate(&groups, &merged).unwrap() >= true_positive_rate(&groups, &l).unwrap(),
                "merge lowered TP",
            )
        })
        .map_err(|e| e.to_string())?;
    Ok(cases as usize)
}

/// Clusters that are homogeneous in grading give FP = 0.
pub fn homogeneous_zero_fp(cases: u32) -> Result<usize, String> {
    runner(cases)
        .run(&(scenario(), prop::collection::vec(0u8..64, 5)), |((groups, ls, _), per_cluster)| {
            let gs: Vec<u8> = ls.iter().map(|&c| per_cluster[c]).collect();
            let (l, g) = maps(&groups, &ls, &gs);
            check(false_positive_rate(&l, &g).unwrap() == 0.0, "homogeneous clusters gave FP > 0")
        })
        .map_err(|e| e.to_string())?;
    Ok(cases as usize)
}

pub fn all(cases: u32) -> Result<Vec<(&'static str, usize)>, String> {
    Ok(vec![
        ("hand cases", hand_cases()?),
        ("permutation invariance", permutation_invariance(cases)?),
        ("partition", partition(cases)?),
        ("TP monotone under merges", merge_monotone(cases)?),
        ("FP zero when homogeneous", homogeneous_zero_fp(cases)?),
    ])
}
