//! Class ranking and the adaptive top-k horizon for inverse learning.

use serde::{Deserialize, Serialize};

/// Class indices sorted by descending probability, ties by ascending index.
pub fn ranking(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

/// Rank of every class (1 = most confident), indexed by class.
pub fn ranks(probs: &[f64]) -> Vec<usize> {
    let mut r = vec![0; probs.len()];
    for (pos, c) in ranking(probs).into_iter().enumerate() {
        r[c] = pos + 1;
    }
    r
}

/// Rank of class `c` in `probs`, in `1..=probs.len()`.
pub fn rank_of(probs: &[f64], c: usize) -> usize {
    let p = probs[c];
    1 + probs
        .iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < c))
        .count()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Smallest `k` such that every pseudo-label (argmax of the weak row) lies in
/// the top-`k` of the matching strong row. Rows are `classes` wide.
pub fn select_k(weak_probs: &[f64], strong_probs: &[f64], classes: usize) -> usize {
    debug_assert_eq!(weak_probs.len(), strong_probs.len());
    weak_probs
        .chunks(classes)
        .zip(strong_probs.chunks(classes))
        .map(|(w, s)| rank_of(s, argmax(w)))
        .max()
        .unwrap_or(classes)
        .clamp(1, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KScope {
    /// Fresh `k` from each batch.
    Batch,
    /// `k` for the epoch is the largest batch `k` seen in the previous epoch;
    /// the first epoch falls back to batch scope.
    Epoch,
}

impl std::str::FromStr for KScope {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "batch" => Ok(KScope::Batch),
            "epoch" => Ok(KScope::Epoch),
            _ => Err(crate::Error::Config(format!(
                "inv.k_scope must be batch|epoch, got `{s}`"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(ranks(&[0.5, 0.3, 0.2]), vec![1, 2, 3]);
        assert_eq!(ranks(&[0.4, 0.4, 0.2]), vec![1, 2, 3]);
        assert_eq!(ranks(&[0.25; 4]), vec![1, 2, 3, 4]);
        assert_eq!(rank_of(&[0.4, 0.4, 0.2], 1), 2);
        assert_eq!(rank_of(&[0.1, 0.2, 0.7], 0), 3);
    }

    #[test]
    fn k_is_the_worst_containment_rank() {
        // pseudo-labels 0, 1, 2; strong ranks of those labels 1, 3, 2
        let weak = [0.9, 0.05, 0.05, 0.1, 0.8, 0.1, 0.1, 0.1, 0.8];
        let strong = [0.7, 0.2, 0.1, 0.5, 0.1, 0.4, 0.5, 0.2, 0.3];
        assert_eq!(select_k(&weak, &strong, 3), 3);
        assert_eq!(select_k(&weak, &weak, 3), 1);
    }

    proptest! {
        #[test]
        fn rank_of_agrees_with_ranking(row in proptest::collection::vec(0u8..5, 1..9)) {
            let p: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let r = ranks(&p);
            for c in 0..p.len() {
                prop_assert_eq!(r[c], rank_of(&p, c));
            }
        }
    }
}
