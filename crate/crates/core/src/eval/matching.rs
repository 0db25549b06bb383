//! One-to-one correspondence between predicted and ground-truth edge pixels.

/// Outcome of matching one binary prediction against one binary ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Identifier reported with every evaluation.
pub const MATCHER_VERSION: &str = "greedy-augment-v2";

/// Candidate pairs within `max_dist`, as `(squared distance, pred idx, gt idx)`
/// over the lists of edge pixels.
pub(crate) fn candidate_pairs(
    pred: &[bool],
    gt: &[bool],
    h: usize,
    w: usize,
    max_dist: f64,
) -> (Vec<usize>, Vec<usize>, Vec<(u32, usize, usize)>) {
    let pred_px: Vec<usize> = (0..h * w).filter(|&i| pred[i]).collect();
    let mut gt_index = vec![usize::MAX; h * w];
    let mut gt_px = Vec::new();
    for i in (0..h * w).filter(|&i| gt[i]) {
        gt_index[i] = gt_px.len();
        gt_px.push(i);
    }
    let r = max_dist.max(0.0).floor() as isize;
    let r2 = max_dist * max_dist;
    let mut pairs = Vec::new();
    for (pi, &p) in pred_px.iter().enumerate() {
        let (py, px) = ((p / w) as isize, (p % w) as isize);
        for dy in -r..=r {
            for dx in -r..=r {
                let d2 = (dy * dy + dx * dx) as f64;
                if d2 > r2 {
                    continue;
                }
                let (y, x) = (py + dy, px + dx);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let gi = gt_index[y as usize * w + x as usize];
                if gi != usize::MAX {
                    pairs.push((d2 as u32, pi, gi));
                }
            }
        }
    }
    (pred_px, gt_px, pairs)
}

const NONE: usize = usize::MAX;

/// One-to-one matching of edge pixels within `max_dist`.
///
/// Pairs are first taken greedily by ascending distance (ties by pixel
/// order). The greedy matching is then grown to maximum cardinality with
/// Hopcroft-Karp augmenting phases, so `tp` equals that of an optimal
/// assignment while short pairs are preferred.
pub fn match_edges(pred: &[bool], gt: &[bool], h: usize, w: usize, max_dist: f64) -> MatchCounts {
    assert_eq!(pred.len(), h * w, "prediction size");
    assert_eq!(gt.len(), h * w, "ground-truth size");
    let (pred_px, gt_px, mut pairs) = candidate_pairs(pred, gt, h, w, max_dist);
    pairs.sort_unstable();
    let mut pred_match = vec![NONE; pred_px.len()];
    let mut gt_match = vec![NONE; gt_px.len()];
    let mut adj = vec![Vec::new(); pred_px.len()];
    for &(_, pi, gi) in &pairs {
        adj[pi].push(gi);
        if pred_match[pi] == NONE && gt_match[gi] == NONE {
            pred_match[pi] = gi;
            gt_match[gi] = pi;
        }
    }
    augment_to_maximum(&adj, &mut pred_match, &mut gt_match);
    let tp = pred_match.iter().filter(|&&g| g != NONE).count();
    MatchCounts {
        tp,
        fp: pred_px.len() - tp,
        fn_: gt_px.len() - tp,
    }
}

/// Hopcroft-Karp phases starting from an existing matching. `adj[u]` lists
/// the ground-truth candidates of prediction `u`, nearest first.
fn augment_to_maximum(adj: &[Vec<usize>], pred_match: &mut [usize], gt_match: &mut [usize]) {
    let n = adj.len();
    let mut layer = vec![u32::MAX; n];
    let mut queue = Vec::with_capacity(n);
    let mut next = vec![0usize; n];
    let mut stack = Vec::new();
    loop {
        queue.clear();
        for u in 0..n {
            layer[u] = u32::MAX;
            if pred_match[u] == NONE && !adj[u].is_empty() {
                layer[u] = 0;
                queue.push(u);
            }
        }
        let mut reachable = false;
        let mut head = 0;
        while head < queue.len() {
            let u = queue[head];
            head += 1;
            for &v in &adj[u] {
                match gt_match[v] {
                    NONE => reachable = true,
                    x if layer[x] == u32::MAX => {
                        layer[x] = layer[u] + 1;
                        queue.push(x);
                    }
                    _ => {}
                }
            }
        }
        if !reachable {
            return;
        }
        next.iter_mut().for_each(|i| *i = 0);
        let mut grew = false;
        for root in 0..n {
            if pred_match[root] != NONE || layer[root] != 0 {
                continue;
            }
            stack.clear();
            stack.push(root);
            while let Some(&u) = stack.last() {
                if next[u] == adj[u].len() {
                    layer[u] = u32::MAX;
                    stack.pop();
                    continue;
                }
                let v = adj[u][next[u]];
                next[u] += 1;
                match gt_match[v] {
                    NONE => {
                        // flip the path: every stacked prediction takes the
                        // candidate it last stepped through
                        for &x in &stack {
                            let y = adj[x][next[x] - 1];
                            pred_match[x] = y;
                            gt_match[y] = x;
                        }
                        grew = true;
                        break;
                    }
                    x if layer[x] == layer[u] + 1 => stack.push(x),
                    _ => {}
                }
            }
        }
        if !grew {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_maps_match_fully() {
        let m: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
        let c = match_edges(&m, &m, 8, 8, 1.5);
        assert_eq!(c, MatchCounts { tp: m.iter().filter(|&&b| b).count(), fp: 0, fn_: 0 });
    }

    #[test]
    fn shifted_line_matches_within_radius() {
        let gt: Vec<bool> = (0..100).map(|i| i % 10 == 4).collect();
        let pred: Vec<bool> = (0..100).map(|i| i % 10 == 5).collect();
        assert_eq!(match_edges(&pred, &gt, 10, 10, 2.0).tp, 10);
        assert_eq!(match_edges(&pred, &gt, 10, 10, 0.5).tp, 0);
    }

    #[test]
    fn augmenting_recovers_what_greedy_misses() {
        // p0 is nearest to g0 but is the only prediction that can reach g1
        let mut pred = vec![false; 12];
        let mut gt = vec![false; 12];
        pred[1] = true; // (0, 1)
        pred[4] = true; // (1, 0)
        gt[0] = true; // (0, 0)
        gt[3] = true; // (0, 3)
        assert_eq!(match_edges(&pred, &gt, 3, 4, 2.0).tp, 2);
    }
}
