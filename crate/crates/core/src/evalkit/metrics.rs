use std::collections::{BTreeSet, HashMap};

/// Lowercase, strip punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn assert_golds(golds: &[String]) {
    debug_assert!(!golds.is_empty(), "gold answer list must be non-empty");
}

pub fn exact_match(pred: &str, golds: &[String]) -> f64 {
    assert_golds(golds);
    let p = normalize_answer(pred);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

fn f1_single(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() && gt.is_empty() {
        return 1.0;
    }
    if pt.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Multiset token F1, best over the gold answers.
pub fn token_f1(pred: &str, golds: &[String]) -> f64 {
    assert_golds(golds);
    golds.iter().map(|g| f1_single(pred, g)).fold(0.0, f64::max)
}

/// 1 when some normalized gold occurs inside the normalized prediction.
pub fn accuracy(pred: &str, golds: &[String]) -> f64 {
    assert_golds(golds);
    let p = normalize_answer(pred);
    if golds.iter().any(|g| p.contains(normalize_answer(g).as_str())) {
        1.0
    } else {
        0.0
    }
}

/// |retrieved ∩ gold| / |gold|, and 1 for an empty gold set.
pub fn paragraph_recall<T: Ord>(retrieved: &BTreeSet<T>, gold: &BTreeSet<T>) -> f64 {
    if gold.is_empty() {
        return 1.0;
    }
    gold.iter().filter(|g| retrieved.contains(g)).count() as f64 / gold.len() as f64
}

/// Intersection over union; 0 when both sets are empty.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("average pairwise overlap needs at least 2 sets, got {0}")]
pub struct TooFewSets(pub usize);

/// Mean Jaccard over all unordered pairs.
pub fn jac_avg<T: Ord>(sets: &[BTreeSet<T>]) -> Result<f64, TooFewSets> {
    let m = sets.len();
    if m < 2 {
        return Err(TooFewSets(m));
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            total += jaccard(&sets[i], &sets[j]);
        }
    }
    Ok(2.0 * total / (m * (m - 1)) as f64)
}
