//! Optimal matching under multiplicity bounds via minimum-cost flow.
//!
//! The network is `source -> t_i` with bounds `[m_t, M_t]`, `t_i -> c_j`
//! with capacity 1 and cost `d_ij`, and `c_j -> sink` with bounds
//! `[m_c, M_c]`. A flow of value `k` is a match with `k` pairs; `f(k)` is the
//! cheapest such match.
//!
//! `f` is convex in `k`, so both the total objective `min f(k)` and the
//! average objective `min f(k)/k` are found by binary search on `k`. The
//! values of `f` come from one incremental shortest-path sweep; the reported
//! match is then re-solved at the chosen `k` with [`mcf_exact_pairs`].

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Debug;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::data::{Match, MatchSpec, Pair};
use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};

/// Absolute tolerance for comparing costs.
pub const COST_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Total,
    #[serde(alias = "avg")]
    Average,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" => Ok(Objective::Total),
            "avg" | "average" => Ok(Objective::Average),
            other => Err(Error::InvalidConfig(format!(
                "unknown objective {other:?} (expected avg or total)"
            ))),
        }
    }
}

/// An optimal match together with its objective values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSolution {
    pub matching: Match,
    pub total: f64,
    /// `None` only for the empty match.
    pub average: Option<f64>,
}

impl MatchSolution {
    pub fn from_match(matching: Match) -> Self {
        Self {
            total: matching.total_distance(),
            average: matching.average_distance(),
            matching,
        }
    }

    /// Number of pairs `|Pi|`.
    pub fn k(&self) -> usize {
        self.matching.len()
    }
}

/// Arc costs the shortest-path solver can work with.
pub trait Cost: Copy + Debug + Add<Output = Self> + Sub<Output = Self> {
    fn zero() -> Self;
    fn compare(&self, other: &Self) -> Ordering;
}

impl Cost for f64 {
    fn zero() -> Self {
        0.0
    }

    fn compare(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
}

impl Cost for i64 {
    fn zero() -> Self {
        0
    }

    fn compare(&self, other: &Self) -> Ordering {
        self.cmp(other)
    }
}

/// Lexicographic pair of costs: the first component dominates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lex<A, B>(pub A, pub B);

impl<A: Cost, B: Cost> Add for Lex<A, B> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Lex(self.0 + o.0, self.1 + o.1)
    }
}

impl<A: Cost, B: Cost> Sub for Lex<A, B> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Lex(self.0 - o.0, self.1 - o.1)
    }
}

impl<A: Cost, B: Cost> Cost for Lex<A, B> {
    fn zero() -> Self {
        Lex(A::zero(), B::zero())
    }

    fn compare(&self, other: &Self) -> Ordering {
        self.0.compare(&other.0).then(self.1.compare(&other.1))
    }
}

struct HeapItem<C> {
    dist: C,
    node: usize,
}

impl<C: Cost> PartialEq for HeapItem<C> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<C: Cost> Eq for HeapItem<C> {}

impl<C: Cost> PartialOrd for HeapItem<C> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<C: Cost> Ord for HeapItem<C> {
    // Reversed so `BinaryHeap` pops the smallest distance, then the
    // smallest node id.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .compare(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Residual network with node potentials, solved by successive shortest
/// paths. Arcs are stored in pairs: arc `e` and its reverse `e ^ 1`.
pub struct Network<C> {
    adj: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<i64>,
    cost: Vec<C>,
    pot: Vec<C>,
}

impl<C: Cost> Network<C> {
    pub fn new(nodes: usize) -> Self {
        Self {
            adj: vec![Vec::new(); nodes],
            to: Vec::new(),
            cap: Vec::new(),
            cost: Vec::new(),
            pot: vec![C::zero(); nodes],
        }
    }

    pub fn add_arc(&mut self, from: usize, to: usize, cap: i64, cost: C) -> usize {
        let e = self.to.len();
        self.adj[from].push(e);
        self.to.push(to);
        self.cap.push(cap);
        self.cost.push(cost);
        self.adj[to].push(e + 1);
        self.to.push(from);
        self.cap.push(0);
        self.cost.push(C::zero() - cost);
        e
    }

    /// Flow currently on arc `e`.
    pub fn flow(&self, e: usize) -> i64 {
        self.cap[e ^ 1]
    }

    /// Set potentials to shortest-path distances from `source` (Bellman-Ford),
    /// needed when some arc costs are negative. The network must not contain
    /// a negative cycle.
    pub fn init_potentials(&mut self, source: usize) {
        let n = self.adj.len();
        let mut dist: Vec<Option<C>> = vec![None; n];
        dist[source] = Some(C::zero());
        for _ in 0..n {
            let mut changed = false;
            for u in 0..n {
                let Some(du) = dist[u] else { continue };
                for &e in &self.adj[u] {
                    if self.cap[e] <= 0 {
                        continue;
                    }
                    let nd = du + self.cost[e];
                    let v = self.to[e];
                    if dist[v].is_none_or(|dv| nd.compare(&dv) == Ordering::Less) {
                        dist[v] = Some(nd);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        for (p, d) in self.pot.iter_mut().zip(dist) {
            *p = d.unwrap_or(C::zero());
        }
    }

    /// Dijkstra on reduced costs. On success updates the potentials of all
    /// reached nodes and returns the parent arc of every node.
    fn shortest_path(&mut self, s: usize, t: usize) -> Option<Vec<usize>> {
        let n = self.adj.len();
        let mut dist: Vec<Option<C>> = vec![None; n];
        let mut parent = vec![usize::MAX; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[s] = Some(C::zero());
        heap.push(HeapItem { dist: C::zero(), node: s });
        while let Some(HeapItem { dist: du, node: u }) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            for &e in &self.adj[u] {
                if self.cap[e] <= 0 {
                    continue;
                }
                let v = self.to[e];
                if done[v] {
                    continue;
                }
                let reduced = self.cost[e] + self.pot[u] - self.pot[v];
                let nd = du + reduced;
                if dist[v].is_none_or(|dv| nd.compare(&dv) == Ordering::Less) {
                    dist[v] = Some(nd);
                    parent[v] = e;
                    heap.push(HeapItem { dist: nd, node: v });
                }
            }
        }
        dist[t]?;
        for v in 0..n {
            if let Some(d) = dist[v] {
                self.pot[v] = self.pot[v] + d;
            }
        }
        Some(parent)
    }

    /// Push up to `limit` units along one shortest `s -> t` path. Returns the
    /// amount pushed and its cost, or `None` when `t` is unreachable.
    pub fn augment(&mut self, s: usize, t: usize, limit: i64) -> Option<(i64, C)> {
        let parent = self.shortest_path(s, t)?;
        let mut bottleneck = limit;
        let mut v = t;
        while v != s {
            let e = parent[v];
            bottleneck = bottleneck.min(self.cap[e]);
            v = self.to[e ^ 1];
        }
        let mut path_cost = C::zero();
        let mut v = t;
        while v != s {
            let e = parent[v];
            self.cap[e] -= bottleneck;
            self.cap[e ^ 1] += bottleneck;
            path_cost = path_cost + self.cost[e];
            v = self.to[e ^ 1];
        }
        Some((bottleneck, path_cost))
    }

    /// Min-cost flow of value at most `target`; returns `(value, cost)`.
    pub fn min_cost_flow(&mut self, s: usize, t: usize, target: i64) -> (i64, C) {
        let mut value = 0;
        let mut cost = C::zero();
        while value < target {
            let Some((pushed, unit)) = self.augment(s, t, target - value) else {
                break;
            };
            value += pushed;
            for _ in 0..pushed {
                cost = cost + unit;
            }
        }
        (value, cost)
    }
}

/// Reject instances whose bounds cannot all hold, naming the bound.
pub fn check_feasible(n_t: usize, n_c: usize, spec: &MatchSpec) -> Result<()> {
    spec.validate()?;
    if n_t == 0 || n_c == 0 {
        return Err(Error::Infeasible(format!(
            "matching needs both groups nonempty (treated {n_t}, control {n_c})"
        )));
    }
    if spec.min_treated > n_c {
        return Err(Error::Infeasible(format!(
            "m_t = {} exceeds the number of controls {n_c}",
            spec.min_treated
        )));
    }
    if spec.min_control > n_t {
        return Err(Error::Infeasible(format!(
            "m_c = {} exceeds the number of treated units {n_t}",
            spec.min_control
        )));
    }
    if n_t * spec.min_treated > n_c * spec.max_control {
        return Err(Error::Infeasible(format!(
            "treated lower bound n_t*m_t = {} exceeds control capacity n_c*M_c = {}",
            n_t * spec.min_treated,
            n_c * spec.max_control
        )));
    }
    if n_c * spec.min_control > n_t * spec.max_treated {
        return Err(Error::Infeasible(format!(
            "control lower bound n_c*m_c = {} exceeds treated capacity n_t*M_t = {}",
            n_c * spec.min_control,
            n_t * spec.max_treated
        )));
    }
    Ok(())
}

/// Minimum match cost `f(k)` for every feasible pair count `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostCurve {
    k_min: usize,
    costs: Vec<f64>,
}

impl CostCurve {
    pub fn k_min(&self) -> usize {
        self.k_min
    }

    pub fn k_max(&self) -> usize {
        self.k_min + self.costs.len() - 1
    }

    /// `f(k)`, or `None` outside `[k_min, k_max]`.
    pub fn cost(&self, k: usize) -> Option<f64> {
        k.checked_sub(self.k_min).and_then(|i| self.costs.get(i)).copied()
    }

    /// Feasible `(k, f(k))` pairs in increasing `k`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.costs.iter().enumerate().map(|(i, &c)| (self.k_min + i, c))
    }
}

/// Compute `f(k)` for all `k` with a single sweep of unit augmentations.
///
/// Each lower-bounded arc is split into a part of capacity `m` with cost
/// `(-1, 0)` and the remainder with cost `(0, 0)`; pair arcs cost `(0, d)`.
/// After `k` augmentations the flow is lexicographically cheapest among
/// flows of value `k`, so it meets every lower bound exactly when any flow of
/// value `k` does, and then its distance part is `f(k)`.
pub fn cost_curve(d: &DistanceMatrix, spec: &MatchSpec) -> Result<CostCurve> {
    let (n_t, n_c) = (d.n_treated(), d.n_control());
    check_feasible(n_t, n_c, spec)?;
    let required = (n_t * spec.min_treated + n_c * spec.min_control) as i64;
    let (source, sink) = (0, n_t + n_c + 1);
    let mut net = Network::<Lex<i64, f64>>::new(n_t + n_c + 2);
    let bounded = |net: &mut Network<Lex<i64, f64>>, from, to, lo: usize, hi: usize| {
        if lo > 0 {
            net.add_arc(from, to, lo as i64, Lex(-1, 0.0));
        }
        if hi > lo {
            net.add_arc(from, to, (hi - lo) as i64, Lex(0, 0.0));
        }
    };
    for i in 0..n_t {
        bounded(&mut net, source, 1 + i, spec.min_treated, spec.max_treated);
    }
    for i in 0..n_t {
        for j in 0..n_c {
            net.add_arc(1 + i, 1 + n_t + j, 1, Lex(0, d.get(i, j)));
        }
    }
    for j in 0..n_c {
        bounded(&mut net, 1 + n_t + j, sink, spec.min_control, spec.max_control);
    }
    net.init_potentials(source);

    let mut total = Lex(0i64, 0.0);
    let mut k = 0usize;
    let mut k_min = None;
    let mut costs = Vec::new();
    loop {
        if total.0 == -required {
            k_min.get_or_insert(k);
            costs.push(total.1);
        } else if k_min.is_some() {
            break;
        }
        match net.augment(source, sink, 1) {
            Some((_, c)) => {
                total = total + c;
                k += 1;
            }
            None => break,
        }
    }
    let k_min = k_min.ok_or_else(|| {
        Error::Infeasible("no match satisfies all lower multiplicity bounds".into())
    })?;
    Ok(CostCurve { k_min, costs })
}

/// Cheapest match with exactly `k` pairs, via the circulation form of the
/// lower-bounded network (node excesses fed from a super source).
///
/// Among equally cheap matches the one with the smallest total positional
/// offset `sum |i n_c - j n_t|` is returned, so ties resolve the same way
/// on every run and favour pairing units in corresponding positions.
pub fn mcf_exact_pairs(d: &DistanceMatrix, spec: &MatchSpec, k: usize) -> Result<(f64, Match)> {
    match exact_pairs(d, spec, k)? {
        Some(found) => Ok(found),
        None => {
            let curve = cost_curve(d, spec)?;
            Err(Error::InfeasiblePairCount {
                k,
                k_min: curve.k_min(),
                k_max: curve.k_max(),
            })
        }
    }
}

fn exact_pairs(d: &DistanceMatrix, spec: &MatchSpec, k: usize) -> Result<Option<(f64, Match)>> {
    let (n_t, n_c) = (d.n_treated(), d.n_control());
    check_feasible(n_t, n_c, spec)?;
    let (mt, mc) = (spec.min_treated as i64, spec.min_control as i64);
    let lower_t = n_t as i64 * mt;
    let lower_c = n_c as i64 * mc;
    let k = k as i64;
    if k < lower_t || k < lower_c {
        return Ok(None);
    }

    let (source, sink) = (0, n_t + n_c + 1);
    let (super_s, super_t) = (n_t + n_c + 2, n_t + n_c + 3);
    let mut net = Network::<Lex<f64, i64>>::new(n_t + n_c + 4);
    let free = Lex(0.0, 0);
    let mut excess = vec![0i64; n_t + n_c + 2];

    // The return arc sink -> source carries exactly k units.
    excess[source] += k;
    excess[sink] -= k;
    for i in 0..n_t {
        net.add_arc(source, 1 + i, (spec.max_treated - spec.min_treated) as i64, free);
        excess[source] -= mt;
        excess[1 + i] += mt;
    }
    let mut pair_arcs = Vec::with_capacity(n_t * n_c);
    for i in 0..n_t {
        for j in 0..n_c {
            let offset = (i * n_c).abs_diff(j * n_t) as i64;
            pair_arcs.push(net.add_arc(1 + i, 1 + n_t + j, 1, Lex(d.get(i, j), offset)));
        }
    }
    for j in 0..n_c {
        net.add_arc(1 + n_t + j, sink, (spec.max_control - spec.min_control) as i64, free);
        excess[1 + n_t + j] -= mc;
        excess[sink] += mc;
    }
    let mut demand = 0;
    for (v, &e) in excess.iter().enumerate() {
        if e > 0 {
            net.add_arc(super_s, v, e, free);
            demand += e;
        } else if e < 0 {
            net.add_arc(v, super_t, -e, free);
        }
    }
    let (value, _) = net.min_cost_flow(super_s, super_t, demand);
    if value < demand {
        return Ok(None);
    }
    let mut pairs = Vec::with_capacity(k as usize);
    for i in 0..n_t {
        for j in 0..n_c {
            if net.flow(pair_arcs[i * n_c + j]) > 0 {
                pairs.push(Pair {
                    treated: i,
                    control: j,
                    distance: d.get(i, j),
                });
            }
        }
    }
    let m = Match::new(n_t, n_c, pairs)?;
    Ok(Some((m.total_distance(), m)))
}

/// Smallest `k` in `[lo, hi]` with `pred(k)` true, for a monotone `pred`;
/// `None` if it is false everywhere.
fn first_true(lo: usize, hi: usize, mut pred: impl FnMut(usize) -> bool) -> Option<usize> {
    if lo > hi {
        return None;
    }
    let (mut a, mut b) = (lo, hi + 1);
    while a < b {
        let mid = a + (b - a) / 2;
        if pred(mid) {
            b = mid;
        } else {
            a = mid + 1;
        }
    }
    (a <= hi).then_some(a)
}

/// The optimal pair count for `objective`, largest among ties.
pub fn optimal_pair_count(curve: &CostCurve, objective: Objective) -> usize {
    let f = |k: usize| curve.cost(k).expect("k within the feasible range");
    let (k_min, k_max) = (curve.k_min(), curve.k_max());
    if k_min == k_max {
        return k_max;
    }
    match objective {
        // f is convex: the last minimizer is the first k whose increment
        // f(k+1) - f(k) is positive.
        Objective::Total => first_true(k_min, k_max - 1, |k| f(k + 1) - f(k) > COST_TOL)
            .unwrap_or(k_max),
        // f(k)/k increases at k exactly when the increment exceeds the
        // current average; that predicate is monotone in k for convex f.
        Objective::Average => {
            let lo = k_min.max(1);
            if lo >= k_max {
                return k_max;
            }
            first_true(lo, k_max - 1, |k| {
                f(k + 1) - f(k) - f(k) / k as f64 > COST_TOL
            })
            .unwrap_or(k_max)
        }
    }
}

pub fn min_total_match(d: &DistanceMatrix, spec: &MatchSpec) -> Result<MatchSolution> {
    solve(d, spec, Objective::Total)
}

pub fn min_avg_match(d: &DistanceMatrix, spec: &MatchSpec) -> Result<MatchSolution> {
    solve(d, spec, Objective::Average)
}

pub fn solve(d: &DistanceMatrix, spec: &MatchSpec, objective: Objective) -> Result<MatchSolution> {
    let curve = cost_curve(d, spec)?;
    if objective == Objective::Average && curve.k_max() == 0 {
        return Err(Error::EmptyMatch);
    }
    let k = optimal_pair_count(&curve, objective);
    let (_, matching) = mcf_exact_pairs(d, spec, k)?;
    Ok(MatchSolution::from_match(matching))
}
