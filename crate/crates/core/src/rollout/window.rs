//! Spatial subsetting of large scenes into decoder-sized agent windows.

use serde::{Deserialize, Serialize};

use crate::geometry::AgentState;

/// One agent subset. `members[0..]` is the acting order inside the window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub center: usize,
    pub members: Vec<usize>,
}

/// The `max_agents` valid agents nearest to `center` (itself included),
/// nearest first, ties by index.
pub fn nearest_subset(states: &[AgentState], center: usize, max_agents: usize) -> Vec<usize> {
    let c = states[center];
    let mut idx: Vec<usize> = (0..states.len()).filter(|&i| states[i].valid && i != center).collect();
    idx.sort_by(|&a, &b| {
        states[a].center_distance(&c).total_cmp(&states[b].center_distance(&c)).then(a.cmp(&b))
    });
    let mut out = vec![center];
    out.extend(idx);
    out.truncate(max_agents.max(1));
    out
}

/// Greedy cover of all valid agents by nearest-neighbour subsets.
///
/// The subset around `sdc` comes first. Each further window is the subset of
/// the uncovered agent whose subset overlaps the covered set most (ties: lower
/// index). Inside a window, agents covered by earlier windows come first,
/// then the rest; both groups nearest-to-center first.
pub fn select_windows(states: &[AgentState], max_agents: usize, sdc: usize) -> Vec<Window> {
    let n = states.len();
    let valid: Vec<usize> = (0..n).filter(|&i| states[i].valid).collect();
    if valid.is_empty() {
        return Vec::new();
    }
    let first = if states.get(sdc).is_some_and(|s| s.valid) { sdc } else { valid[0] };
    let subsets: Vec<Option<Vec<usize>>> = (0..n)
        .map(|i| states[i].valid.then(|| nearest_subset(states, i, max_agents)))
        .collect();
    let mut covered = vec![false; n];
    let mut windows = Vec::new();
    let mut push = |center: usize, covered: &mut Vec<bool>| {
        let subset = subsets[center].as_ref().expect("valid center");
        let (mut before, mut rest): (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());
        for &m in subset {
            if covered[m] {
                before.push(m);
            } else {
                rest.push(m);
            }
        }
        for &m in subset {
            covered[m] = true;
        }
        before.extend(rest);
        windows.push(Window { center, members: before });
    };
    push(first, &mut covered);
    loop {
        let mut best: Option<(usize, usize)> = None;
        for &u in &valid {
            if covered[u] {
                continue;
            }
            let overlap = subsets[u].as_ref().expect("valid").iter().filter(|&&m| covered[m]).count();
            if best.is_none_or(|(_, o)| overlap > o) {
                best = Some((u, overlap));
            }
        }
        match best {
            Some((u, _)) => push(u, &mut covered),
            None => break,
        }
    }
    windows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::rng_from_seed;
    use rand::Rng;

    #[test]
    fn small_scene_is_one_window() {
        let states: Vec<AgentState> = (0..5).map(|i| AgentState::new(i as f64 * 3.0, 0.0, 0.0)).collect();
        let w = select_windows(&states, 8, 2);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].center, 2);
        assert_eq!(w[0].members, vec![2, 1, 3, 0, 4]);
    }

    #[test]
    fn distant_clusters_split() {
        let mut states = Vec::new();
        for i in 0..4 {
            states.push(AgentState::new(i as f64, 0.0, 0.0));
        }
        for i in 0..4 {
            states.push(AgentState::new(500.0 + i as f64, 0.0, 0.0));
        }
        let w = select_windows(&states, 4, 0);
        assert_eq!(w.len(), 2);
        let mut a = w[0].members.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3]);
        let mut b = w[1].members.clone();
        b.sort();
        assert_eq!(b, vec![4, 5, 6, 7]);
    }

    #[test]
    fn cover_and_order_hold_on_random_scenes() {
        let mut rng = rng_from_seed(3);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let states: Vec<AgentState> = (0..n)
                .map(|_| AgentState::new(rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0), 0.0))
                .collect();
            let k = rng.random_range(1..10);
            let w = select_windows(&states, k, 0);
            assert_eq!(w[0].center, 0);
            let mut covered = vec![false; n];
            for win in &w {
                assert!(win.members.len() <= k && !win.members.is_empty());
                let split = win.members.iter().position(|&m| !covered[m]).expect("each window adds an agent");
                assert!(win.members[split..].iter().all(|&m| !covered[m]));
                for &m in &win.members {
                    covered[m] = true;
                }
            }
            assert!(covered.iter().all(|&c| c));
        }
    }

    #[test]
    fn invalid_agents_are_skipped() {
        let states = vec![AgentState::new(0.0, 0.0, 0.0), AgentState::invalid(), AgentState::new(1.0, 0.0, 0.0)];
        let w = select_windows(&states, 4, 1);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].members, vec![0, 2]);
    }
}
