//! Ground-truth communities and attack/utility summary statistics.

use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, ItemId, UserId};
use crate::error::{Error, Result};

/// Jaccard index of two sorted, deduplicated id lists.
pub fn jaccard(a: &[ItemId], b: &[ItemId]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// True community for a target item set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub target_items: Vec<ItemId>,
    /// Top-K users, non-increasing Jaccard, ties by lower id.
    pub community: Vec<UserId>,
    /// Jaccard of every candidate user, indexed by user id; `None` for the
    /// excluded target owner.
    pub jaccards: Vec<Option<f64>>,
}

impl GroundTruth {
    pub fn k(&self) -> usize {
        self.community.len()
    }

    pub fn contains(&self, u: UserId) -> bool {
        self.community.contains(&u)
    }
}

/// Ranks every candidate user by Jaccard similarity between its train set
/// and `target_items`. `exclude` removes the adversary whose own train set
/// is the target.
pub fn ground_truth(
    dataset: &InteractionDataset,
    target_items: &[ItemId],
    k: usize,
    exclude: Option<UserId>,
) -> Result<GroundTruth> {
    let n_candidates = dataset.n_users() - exclude.map_or(0, |_| 1);
    if k == 0 || k > n_candidates {
        return Err(Error::Config(format!(
            "community size K={k} must be in 1..={n_candidates}"
        )));
    }
    let mut target = target_items.to_vec();
    target.sort_unstable();
    target.dedup();
    let jaccards: Vec<Option<f64>> = (0..dataset.n_users())
        .map(|u| (Some(u) != exclude).then(|| jaccard(&target, dataset.train(u))))
        .collect();
    let mut ranked: Vec<(UserId, f64)> = jaccards
        .iter()
        .enumerate()
        .filter_map(|(u, j)| j.map(|j| (u, j)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(GroundTruth {
        target_items: target,
        community: ranked.into_iter().take(k).map(|(u, _)| u).collect(),
        jaccards,
    })
}

/// `|predicted ∩ truth| / k`.
pub fn accuracy_at_round(predicted: &[UserId], truth: &[UserId], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let hits = predicted.iter().filter(|u| truth.contains(u)).count();
    hits as f64 / k as f64
}

/// Per-checkpoint accuracy and observed-model bound of one adversary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdversaryTrace {
    pub accuracies: Vec<f64>,
    pub upper_bounds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    /// Mean accuracy over adversaries at each checkpoint.
    pub aac: Vec<f64>,
    pub max_aac: f64,
    /// Checkpoint index where `max_aac` was reached (first on ties).
    pub max_index: usize,
    /// Minimum accuracy among the best decile of adversaries at `max_index`.
    pub best10: f64,
    /// Set when fewer than ten adversaries ran; `best10` is then the best one.
    pub best10_from_single: bool,
    pub random_bound: f64,
    pub upper_bound: f64,
    pub n_adversaries: usize,
    /// Standard error of the per-adversary accuracies at `max_index`.
    pub std_error: f64,
}

/// Expected accuracy of guessing K users uniformly among N.
pub fn random_bound(k: usize, n_users: usize) -> f64 {
    k as f64 / n_users as f64
}

/// Minimum of the top `ceil(n/10)` values; for fewer than ten values the
/// maximum, flagged.
pub fn best_decile_min(values: &[f64]) -> (f64, bool) {
    if values.is_empty() {
        return (0.0, true);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    if values.len() < 10 {
        return (sorted[0], true);
    }
    let top = values.len().div_ceil(10);
    (sorted[top - 1], false)
}

pub fn aggregate_report(traces: &[AdversaryTrace], k: usize, n_users: usize) -> Result<AttackSummary> {
    if traces.is_empty() {
        return Err(Error::Config("aggregate_report needs at least one adversary".into()));
    }
    let rounds = traces[0].accuracies.len();
    if traces.iter().any(|t| t.accuracies.len() != rounds || t.upper_bounds.len() != rounds) {
        return Err(Error::Shape("adversary traces disagree on checkpoint count".into()));
    }
    let n = traces.len() as f64;
    let aac: Vec<f64> = (0..rounds)
        .map(|r| traces.iter().map(|t| t.accuracies[r]).sum::<f64>() / n)
        .collect();
    let (max_index, max_aac) = aac
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let (best10, flagged, std_error) = if rounds == 0 {
        (0.0, true, 0.0)
    } else {
        let at_max: Vec<f64> = traces.iter().map(|t| t.accuracies[max_index]).collect();
        let (b, f) = best_decile_min(&at_max);
        let var = if at_max.len() > 1 {
            at_max.iter().map(|a| (a - max_aac).powi(2)).sum::<f64>() / (at_max.len() - 1) as f64
        } else {
            0.0
        };
        (b, f, (var / at_max.len() as f64).sqrt())
    };
    let upper_bound = traces
        .iter()
        .map(|t| t.upper_bounds.iter().copied().fold(0.0, f64::max))
        .sum::<f64>()
        / n;
    Ok(AttackSummary {
        aac,
        max_aac: if rounds == 0 { 0.0 } else { max_aac },
        max_index,
        best10,
        best10_from_single: flagged,
        random_bound: random_bound(k, n_users),
        upper_bound,
        n_adversaries: traces.len(),
        std_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(sets: Vec<Vec<ItemId>>, n_items: usize) -> InteractionDataset {
        let n = sets.len();
        InteractionDataset::from_sets("t", n_items, sets, vec![vec![]; n]).unwrap()
    }

    #[test]
    fn jaccard_bounds() {
        assert_eq!(jaccard(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(jaccard(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(jaccard(&[1, 2, 3], &[2, 3, 4]), 0.5);
    }

    #[test]
    fn owner_is_excluded() {
        let d = ds(vec![vec![0, 1], vec![0, 1], vec![0], vec![3]], 4);
        let gt = ground_truth(&d, d.train(0), 2, Some(0)).unwrap();
        assert_eq!(gt.community, vec![1, 2]);
        assert_eq!(gt.jaccards[0], None);
        assert!(ground_truth(&d, d.train(0), 4, Some(0)).is_err());
    }

    #[test]
    fn ties_go_to_lower_ids() {
        let d = ds(vec![vec![5], vec![0], vec![0], vec![0]], 6);
        let gt = ground_truth(&d, &[0], 2, None).unwrap();
        assert_eq!(gt.community, vec![1, 2]);
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy_at_round(&[1, 2, 3, 4], &[1, 2, 3, 4], 4), 1.0);
        assert_eq!(accuracy_at_round(&[5, 6], &[1, 2], 2), 0.0);
        assert_eq!(accuracy_at_round(&[1, 2, 3, 9], &[1, 2, 3, 4], 4), 0.75);
        // fewer predictions than K still divide by K
        assert_eq!(accuracy_at_round(&[1], &[1, 2], 2), 0.5);
    }

    #[test]
    fn random_bound_movielens() {
        assert!((random_bound(50, 943) * 100.0 - 5.3).abs() < 0.05);
    }

    #[test]
    fn singleton_statistics() {
        let t = AdversaryTrace {
            accuracies: vec![0.4, 0.4, 0.4],
            upper_bounds: vec![1.0, 1.0, 1.0],
        };
        let s = aggregate_report(&[t], 50, 943).unwrap();
        assert_eq!(s.max_aac, 0.4);
        assert_eq!(s.best10, 0.4);
        assert!(s.best10_from_single);
    }

    #[test]
    fn best_decile_against_sort_oracle() {
        let accs: Vec<f64> = (0..20).map(|i| ((i * 7) % 20) as f64 / 20.0).collect();
        let traces: Vec<AdversaryTrace> = accs
            .iter()
            .map(|&a| AdversaryTrace {
                accuracies: vec![a / 2.0, a],
                upper_bounds: vec![1.0, 1.0],
            })
            .collect();
        let s = aggregate_report(&traces, 5, 100).unwrap();
        assert_eq!(s.max_index, 1);
        let mut sorted = accs.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        // best 10% of 20 adversaries = top 2; their minimum is the 2nd best
        assert_eq!(s.best10, sorted[1]);
        assert!(!s.best10_from_single);
    }

    #[test]
    fn upper_bound_takes_max_over_rounds() {
        let traces = vec![
            AdversaryTrace { accuracies: vec![0.0, 0.1], upper_bounds: vec![0.2, 0.6] },
            AdversaryTrace { accuracies: vec![0.0, 0.1], upper_bounds: vec![0.4, 0.4] },
        ];
        let s = aggregate_report(&traces, 5, 100).unwrap();
        assert!((s.upper_bound - 0.5).abs() < 1e-12);
    }
}
