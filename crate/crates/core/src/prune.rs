//! Reduce a match to star-shaped components by repeatedly deleting the most
//! expensive removable edge.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::data::{Match, Pair};

/// Edges whose endpoints both have degree at least 2.
pub fn removable_edges(m: &Match) -> Vec<(usize, usize)> {
    let dt = m.treated_degrees();
    let dc = m.control_degrees();
    m.pairs()
        .iter()
        .filter(|p| dt[p.treated] >= 2 && dc[p.control] >= 2)
        .map(|p| (p.treated, p.control))
        .collect()
}

/// Heap key: larger distance first, then smaller `(treated, control)`.
#[derive(Debug, Clone, Copy)]
struct Key {
    distance: f64,
    treated: usize,
    control: usize,
}

impl PartialEq for Key {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .distance
            .total_cmp(&self.distance)
            .then(self.treated.cmp(&other.treated))
            .then(self.control.cmp(&other.control))
    }
}

/// Pruned match together with the deleted edges in deletion order.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneTrace {
    pub pruned: Match,
    pub deleted: Vec<(usize, usize)>,
}

pub fn prune(m: &Match) -> Match {
    prune_with_trace(m).pruned
}

pub fn prune_with_trace(m: &Match) -> PruneTrace {
    let mut dt = m.treated_degrees();
    let mut dc = m.control_degrees();
    let mut adj_t: Vec<Vec<Pair>> = vec![Vec::new(); m.treated_count()];
    let mut adj_c: Vec<Vec<Pair>> = vec![Vec::new(); m.control_count()];
    for &p in m.pairs() {
        adj_t[p.treated].push(p);
        adj_c[p.control].push(p);
    }
    let key = |p: &Pair| Key {
        distance: p.distance,
        treated: p.treated,
        control: p.control,
    };
    let mut removable: BTreeSet<Key> = m
        .pairs()
        .iter()
        .filter(|p| dt[p.treated] >= 2 && dc[p.control] >= 2)
        .map(key)
        .collect();
    let mut gone = BTreeSet::new();
    let mut deleted = Vec::new();

    // A degree only ever drops, so once an edge stops being removable it
    // never becomes removable again.
    while let Some(top) = removable.pop_first() {
        let (t, c) = (top.treated, top.control);
        gone.insert((t, c));
        deleted.push((t, c));
        dt[t] -= 1;
        dc[c] -= 1;
        if dt[t] == 1 {
            for p in &adj_t[t] {
                removable.remove(&key(p));
            }
        }
        if dc[c] == 1 {
            for p in &adj_c[c] {
                removable.remove(&key(p));
            }
        }
    }

    let kept = m
        .pairs()
        .iter()
        .filter(|p| !gone.contains(&(p.treated, p.control)))
        .copied()
        .collect();
    PruneTrace {
        pruned: Match::new(m.treated_count(), m.control_count(), kept)
            .expect("a subset of a valid match is valid"),
        deleted,
    }
}

/// Connected components of the match graph, each as sorted treated and
/// control index lists. Unmatched units are not included.
pub fn components(m: &Match) -> Vec<(Vec<usize>, Vec<usize>)> {
    let n_t = m.treated_count();
    let mut parent: Vec<usize> = (0..n_t + m.control_count()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for p in m.pairs() {
        let a = find(&mut parent, p.treated);
        let b = find(&mut parent, n_t + p.control);
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let dt = m.treated_degrees();
    let dc = m.control_degrees();
    let mut groups: std::collections::BTreeMap<usize, (Vec<usize>, Vec<usize>)> = Default::default();
    for (i, &d) in dt.iter().enumerate() {
        if d > 0 {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().0.push(i);
        }
    }
    for (j, &d) in dc.iter().enumerate() {
        if d > 0 {
            let r = find(&mut parent, n_t + j);
            groups.entry(r).or_default().1.push(j);
        }
    }
    groups.into_values().collect()
}

/// Whether every component has a single treated or a single control unit.
pub fn is_star_forest(m: &Match) -> bool {
    components(m)
        .iter()
        .all(|(t, c)| t.len() == 1 || c.len() == 1)
}
