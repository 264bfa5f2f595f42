//! Exhaustive matching oracle for small instances.
//!
//! Units of one side are decided one at a time, each choosing the subset of
//! the other side it is paired with. The state is the degree vector of the
//! other side, which also determines the pair count, so one pass yields the
//! exact minimum total distance for every `k`. This covers the same search
//! space as enumerating all `2^(n_t n_c)` edge subsets.

use crate::data::{Match, MatchSpec, Pair};
use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};
use crate::flow::{check_feasible, MatchSolution, Objective, COST_TOL};

/// Largest instance accepted, in candidate edges `n_t * n_c`.
pub const MAX_EDGES: usize = 36;

pub fn brute_force_match(d: &DistanceMatrix, spec: &MatchSpec, objective: Objective) -> Result<MatchSolution> {
    let (n_t, n_c) = (d.n_treated(), d.n_control());
    if n_t * n_c > MAX_EDGES {
        return Err(Error::TooLarge(format!(
            "brute force is limited to {MAX_EDGES} candidate pairs, got {n_t}x{n_c}"
        )));
    }
    check_feasible(n_t, n_c, spec)?;
    let curve = brute_force_curve(d, spec);
    let best = pick(&curve, objective).ok_or_else(|| {
        Error::Infeasible("no edge subset satisfies the multiplicity bounds".into())
    })?;
    let edges = curve[best].clone().expect("picked a feasible k").1;
    let pairs = edges
        .into_iter()
        .map(|(t, c)| Pair {
            treated: t,
            control: c,
            distance: d.get(t, c),
        })
        .collect();
    Ok(MatchSolution::from_match(Match::new(n_t, n_c, pairs)?))
}

/// Largest `k` attaining the optimum, as the flow solver does.
fn pick(curve: &[Option<(f64, Vec<(usize, usize)>)>], objective: Objective) -> Option<usize> {
    let value = |k: usize, f: f64| match objective {
        Objective::Total => Some(f),
        Objective::Average => (k > 0).then(|| f / k as f64),
    };
    let best = curve
        .iter()
        .enumerate()
        .filter_map(|(k, e)| e.as_ref().and_then(|(f, _)| value(k, *f)))
        .fold(f64::INFINITY, f64::min);
    (0..curve.len()).rev().find(|&k| {
        curve[k]
            .as_ref()
            .and_then(|(f, _)| value(k, *f))
            .is_some_and(|v| v <= best + COST_TOL)
    })
}

/// Entry `k` is the cheapest valid match with `k` pairs (cost and edge list),
/// or `None` if there is none.
pub fn brute_force_curve(d: &DistanceMatrix, spec: &MatchSpec) -> Vec<Option<(f64, Vec<(usize, usize)>)>> {
    let (n_t, n_c) = (d.n_treated(), d.n_control());
    let cap_t = spec.max_treated.min(n_c);
    let cap_c = spec.max_control.min(n_t);
    // Keep whichever side gives the smaller state space as the state side.
    let work = |cap: usize, n: usize| {
        (cap + 1)
            .checked_pow(n as u32)
            .and_then(|v| v.checked_mul(1 << n))
            .unwrap_or(usize::MAX)
    };
    let cost_rows = work(cap_c, n_c);
    let cost_cols = work(cap_t, n_t);
    let transpose = cost_cols < cost_rows;
    let (stages, states_side) = if transpose { (n_c, n_t) } else { (n_t, n_c) };
    let (stage_lo, stage_hi, state_lo, state_hi) = if transpose {
        (spec.min_control, cap_c, spec.min_treated, cap_t)
    } else {
        (spec.min_treated, cap_t, spec.min_control, cap_c)
    };
    let dist = |stage: usize, other: usize| {
        if transpose {
            d.get(other, stage)
        } else {
            d.get(stage, other)
        }
    };

    let radix = state_hi + 1;
    let n_states = radix.pow(states_side as u32);
    let digit = |state: usize, j: usize| (state / radix.pow(j as u32)) % radix;
    let masks: Vec<(usize, usize)> = (0usize..1 << states_side)
        .map(|m| (m, m.count_ones() as usize))
        .filter(|&(_, c)| c >= stage_lo && c <= stage_hi)
        .collect();

    // best[stage][state] and the (previous state, mask) that reached it.
    let mut best = vec![f64::INFINITY; n_states];
    best[0] = 0.0;
    let mut back: Vec<Vec<(usize, usize)>> = Vec::with_capacity(stages);
    for s in 0..stages {
        let mut next = vec![f64::INFINITY; n_states];
        let mut from = vec![(usize::MAX, 0); n_states];
        for state in 0..n_states {
            let base = best[state];
            if base == f64::INFINITY {
                continue;
            }
            'mask: for &(mask, _) in &masks {
                let mut target = state;
                let mut cost = base;
                for j in 0..states_side {
                    if mask >> j & 1 == 1 {
                        if digit(state, j) == state_hi {
                            continue 'mask;
                        }
                        target += radix.pow(j as u32);
                        cost += dist(s, j);
                    }
                }
                if cost < next[target] {
                    next[target] = cost;
                    from[target] = (state, mask);
                }
            }
        }
        best = next;
        back.push(from);
    }

    let max_k = stages * stage_hi;
    let mut curve: Vec<Option<(f64, usize)>> = vec![None; max_k + 1];
    for (state, &cost) in best.iter().enumerate() {
        if cost == f64::INFINITY {
            continue;
        }
        let degs: Vec<usize> = (0..states_side).map(|j| digit(state, j)).collect();
        if degs.iter().any(|&g| g < state_lo) {
            continue;
        }
        let k: usize = degs.iter().sum();
        if curve[k].is_none_or(|(c, _)| cost < c) {
            curve[k] = Some((cost, state));
        }
    }

    curve
        .into_iter()
        .map(|entry| {
            entry.map(|(cost, mut state)| {
                let mut edges = Vec::new();
                for s in (0..stages).rev() {
                    let (prev, mask) = back[s][state];
                    for j in 0..states_side {
                        if mask >> j & 1 == 1 {
                            edges.push(if transpose { (j, s) } else { (s, j) });
                        }
                    }
                    state = prev;
                }
                edges.sort_unstable();
                (cost, edges)
            })
        })
        .collect()
}
