//! Distance-toleranced one-to-one correspondence between predicted and
//! ground-truth edge pixels, solved as maximum bipartite matching
//! (Hopcroft–Karp) on the tolerance graph.

use serde::{Deserialize, Serialize};

/// Per-image, per-threshold correspondence counts. Under one-to-one matching
/// `tp_pred == tp_gt`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp_pred: usize,
    pub n_pred: usize,
    pub tp_gt: usize,
    pub n_gt: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: &MatchCounts) {
        self.tp_pred += other.tp_pred;
        self.n_pred += other.n_pred;
        self.tp_gt += other.tp_gt;
        self.n_gt += other.n_gt;
    }
}

/// Adjacency between pred pixels and gt pixels within `max_dist`
/// (Euclidean). A uniform grid of cell size >= max_dist restricts candidate
/// pairs to the 3x3 cell neighborhood.
fn tolerance_adjacency(
    pred: &[(usize, usize)],
    gt: &[(usize, usize)],
    max_dist: f64,
) -> Vec<Vec<usize>> {
    let cell = max_dist.ceil().max(1.0) as usize;
    let mut grid: std::collections::HashMap<(usize, usize), Vec<usize>> =
        std::collections::HashMap::new();
    for (j, &(y, x)) in gt.iter().enumerate() {
        grid.entry((y / cell, x / cell)).or_default().push(j);
    }
    let d2max = max_dist * max_dist;
    pred.iter()
        .map(|&(py, px)| {
            let (cy, cx) = (py / cell, px / cell);
            let mut adj = Vec::new();
            for ny in cy.saturating_sub(1)..=cy + 1 {
                for nx in cx.saturating_sub(1)..=cx + 1 {
                    if let Some(cands) = grid.get(&(ny, nx)) {
                        for &j in cands {
                            let (gy, gx) = gt[j];
                            let dy = py as f64 - gy as f64;
                            let dx = px as f64 - gx as f64;
                            if dy * dy + dx * dx <= d2max {
                                adj.push(j);
                            }
                        }
                    }
                }
            }
            adj.sort_unstable();
            adj
        })
        .collect()
}

/// Hopcroft–Karp maximum matching size for the given adjacency.
fn max_matching(adj: &[Vec<usize>], n_right: usize) -> usize {
    const NIL: usize = usize::MAX;
    let n_left = adj.len();
    let mut pair_l = vec![NIL; n_left];
    let mut pair_r = vec![NIL; n_right];
    let mut dist = vec![0u32; n_left];
    let mut matching = 0usize;

    loop {
        // BFS layers from free left vertices
        let mut queue = std::collections::VecDeque::new();
        let mut found_augmenting = false;
        for u in 0..n_left {
            if pair_l[u] == NIL {
                dist[u] = 0;
                queue.push_back(u);
            } else {
                dist[u] = u32::MAX;
            }
        }
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                let w = pair_r[v];
                if w == NIL {
                    found_augmenting = true;
                } else if dist[w] == u32::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        if !found_augmenting {
            break;
        }
        // DFS augmentation along layered paths
        fn try_augment(
            u: usize,
            adj: &[Vec<usize>],
            pair_l: &mut [usize],
            pair_r: &mut [usize],
            dist: &mut [u32],
        ) -> bool {
            for idx in 0..adj[u].len() {
                let v = adj[u][idx];
                let w = pair_r[v];
                let reachable = w == NIL
                    || (dist[w] != u32::MAX
                        && dist[w] == dist[u] + 1
                        && try_augment(w, adj, pair_l, pair_r, dist));
                if reachable {
                    pair_l[u] = v;
                    pair_r[v] = u;
                    return true;
                }
            }
            dist[u] = u32::MAX;
            false
        }
        for u in 0..n_left {
            if pair_l[u] == NIL && try_augment(u, adj, &mut pair_l, &mut pair_r, &mut dist) {
                matching += 1;
            }
        }
    }
    matching
}

/// Match predicted positives against ground-truth positives one-to-one,
/// maximizing the number of pairs with distance <= `max_dist`.
pub fn match_edges(
    pred: &[(usize, usize)],
    gt: &[(usize, usize)],
    max_dist: f64,
) -> MatchCounts {
    let adj = tolerance_adjacency(pred, gt, max_dist);
    let tp = max_matching(&adj, gt.len());
    MatchCounts {
        tp_pred: tp,
        n_pred: pred.len(),
        tp_gt: tp,
        n_gt: gt.len(),
    }
}

/// Exhaustive maximum-matching enumeration; exponential, test-oracle only.
pub fn match_edges_brute_force(
    pred: &[(usize, usize)],
    gt: &[(usize, usize)],
    max_dist: f64,
) -> MatchCounts {
    let adj = tolerance_adjacency(pred, gt, max_dist);
    fn recurse(u: usize, adj: &[Vec<usize>], used: &mut Vec<bool>) -> usize {
        if u == adj.len() {
            return 0;
        }
        // skip u
        let mut best = recurse(u + 1, adj, used);
        for &v in &adj[u] {
            if !used[v] {
                used[v] = true;
                best = best.max(1 + recurse(u + 1, adj, used));
                used[v] = false;
            }
        }
        best
    }
    let mut used = vec![false; gt.len()];
    let tp = recurse(0, &adj, &mut used);
    MatchCounts {
        tp_pred: tp,
        n_pred: pred.len(),
        tp_gt: tp,
        n_gt: gt.len(),
    }
}

/// Positive pixel coordinates of a binary map.
pub fn positives_u8(map: &ndarray::Array2<u8>) -> Vec<(usize, usize)> {
    map.indexed_iter()
        .filter(|(_, &v)| v != 0)
        .map(|((y, x), _)| (y, x))
        .collect()
}

/// Pixels of a float map at or above a threshold.
pub fn positives_at(map: &ndarray::Array2<f32>, threshold: f64) -> Vec<(usize, usize)> {
    map.indexed_iter()
        .filter(|(_, &v)| f64::from(v) >= threshold)
        .map(|((y, x), _)| (y, x))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_fully_match() {
        let pts = vec![(0, 0), (3, 4), (7, 7)];
        let c = match_edges(&pts, &pts, 0.0);
        assert_eq!(c.tp_pred, 3);
        assert_eq!(c.tp_gt, 3);
        assert_eq!(c.n_pred, 3);
        assert_eq!(c.n_gt, 3);
    }

    #[test]
    fn unit_distance_within_tolerance_matches() {
        let c = match_edges(&[(0, 0)], &[(0, 1)], 1.4);
        assert_eq!(c.tp_pred, 1);
        let c = match_edges(&[(0, 0)], &[(1, 1)], 1.4);
        assert_eq!(c.tp_pred, 0, "sqrt(2) exceeds 1.4");
    }

    #[test]
    fn one_to_one_caps_double_claims() {
        let c = match_edges(&[(2, 2), (2, 3)], &[(2, 2)], 2.0);
        assert_eq!(c.tp_pred, 1);
        assert_eq!(c.n_pred, 2);
        assert_eq!(c.tp_gt, 1);
        assert_eq!(c.n_gt, 1);
    }

    #[test]
    fn matches_brute_force_on_random_small_instances() {
        let mut state = 99u64;
        let mut next = move |m: usize| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) as usize) % m
        };
        for trial in 0..200 {
            let n_pred = next(7);
            let n_gt = next(13 - n_pred.min(12));
            let pred: Vec<_> = (0..n_pred).map(|_| (next(8), next(8))).collect();
            let gt: Vec<_> = (0..n_gt).map(|_| (next(8), next(8))).collect();
            let max_dist = [0.0, 1.0, 1.5, 2.5][next(4)];
            let fast = match_edges(&pred, &gt, max_dist);
            let slow = match_edges_brute_force(&pred, &gt, max_dist);
            assert_eq!(fast, slow, "trial {trial}: {pred:?} vs {gt:?} @ {max_dist}");
        }
    }

    #[test]
    fn tolerance_is_monotonic() {
        let pred = vec![(0, 0), (4, 4), (2, 7)];
        let gt = vec![(1, 1), (5, 5), (0, 7)];
        let mut prev = 0;
        for dist in [0.0, 1.0, 1.5, 2.0, 3.0, 10.0] {
            let c = match_edges(&pred, &gt, dist);
            assert!(c.tp_pred >= prev, "matches dropped at dist {dist}");
            prev = c.tp_pred;
        }
        assert_eq!(prev, 3);
    }
}
