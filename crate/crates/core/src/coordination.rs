//! Coordination units: consistency scoring of structurally similar agents and
//! greedy grouping into units that share one operator invocation.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::graph::SocialGraph;
use crate::opinion::{AgentState, OpinionScale};

/// Influence-weighted distribution of neighbor categories, renormalized to
/// the simplex. An empty neighborhood (or zero total weight) gives the uniform
/// distribution.
pub fn neighborhood_distribution(
    graph: &SocialGraph,
    node: usize,
    states: &[AgentState],
    weights: &[f64],
    scale: &OpinionScale,
) -> Vec<f64> {
    let mut dist = vec![0.0; scale.k()];
    for (&(j, _), &w) in graph.neighbors(node).iter().zip(weights) {
        dist[states[j].category.0] += w;
    }
    normalize_or_uniform(dist)
}

/// Neighbor category counts, normalized; the summary used by the bound analysis.
pub fn unweighted_distribution(
    graph: &SocialGraph,
    node: usize,
    states: &[AgentState],
    scale: &OpinionScale,
) -> Vec<f64> {
    let mut dist = vec![0.0; scale.k()];
    for &(j, _) in graph.neighbors(node) {
        dist[states[j].category.0] += 1.0;
    }
    normalize_or_uniform(dist)
}

fn normalize_or_uniform(mut dist: Vec<f64>) -> Vec<f64> {
    let total: f64 = dist.iter().sum();
    if total > 0.0 {
        dist.iter_mut().for_each(|x| *x /= total);
    } else {
        let u = 1.0 / dist.len() as f64;
        dist.iter_mut().for_each(|x| *x = u);
    }
    dist
}

/// Base-2 Jensen-Shannon divergence, in `[0, 1]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut d = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = (a + b) / 2.0;
        let term = |x: f64| if x > 0.0 { x * (x / m).log2() } else { 0.0 };
        // order-independent sum keeps the result exactly symmetric
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        d += term(lo) + term(hi);
    }
    (d / 2.0).clamp(0.0, 1.0)
}

pub fn info_similarity(p: &[f64], q: &[f64]) -> f64 {
    1.0 - js_divergence(p, q)
}

/// Agent state on `[0, 1]^2`: normalized opinion and stubbornness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector {
    pub opinion: f64,
    pub stubbornness: f64,
}

impl StateVector {
    pub fn of(agent: &AgentState, scale: &OpinionScale) -> Self {
        Self { opinion: scale.normalize(agent.opinion), stubbornness: agent.stubbornness }
    }
}

pub fn state_distance(a: StateVector, b: StateVector) -> f64 {
    (a.opinion - b.opinion).hypot(a.stubbornness - b.stubbornness)
}

/// `kappa = s_info * exp(-lambda * s_state)`.
pub fn consistency(s_info: f64, s_state: f64, lambda: f64) -> f64 {
    s_info * (-lambda * s_state).exp()
}

/// Pairwise consistency over candidate pairs, keyed by `(min, max)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KappaTable {
    scores: HashMap<(usize, usize), f64>,
}

impl KappaTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, i: usize, j: usize, kappa: f64) {
        self.scores.insert(key(i, j), kappa);
    }

    /// `None` for non-candidate pairs; `Some(1.0)` on the diagonal.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i == j {
            return Some(1.0);
        }
        self.scores.get(&key(i, j)).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Pairs sorted by descending kappa, ties by `(i, j)` ascending.
    pub fn ranked(&self) -> Vec<(usize, usize, f64)> {
        let mut v: Vec<_> = self.scores.iter().map(|(&(i, j), &k)| (i, j, k)).collect();
        v.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        v
    }
}

fn key(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

/// Parameters of the refinement stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinationParams {
    pub tau: f64,
    pub lambda: f64,
    pub beta: f64,
}

/// Scores every candidate pair against the current states.
pub fn score_candidates(
    candidates: &[(usize, usize)],
    dists: &[Vec<f64>],
    states: &[StateVector],
    lambda: f64,
) -> KappaTable {
    let scored: Vec<(usize, usize, f64)> = candidates
        .par_iter()
        .map(|&(i, j)| {
            let s_info = info_similarity(&dists[i], &dists[j]);
            let s_state = state_distance(states[i], states[j]);
            (i, j, consistency(s_info, s_state, lambda))
        })
        .collect();
    let mut table = KappaTable::new();
    for (i, j, k) in scored {
        table.insert(i, j, k);
    }
    table
}

/// Greedy clique agglomeration over `n` nodes.
///
/// Pairs are visited by descending kappa; two units merge when every cross
/// pair is a candidate with kappa >= tau. Units come back sorted by their
/// smallest member, members ascending.
pub fn form_units(n: usize, kappa: &KappaTable, tau: f64) -> Vec<Vec<usize>> {
    let ranked: Vec<_> = kappa.ranked().into_iter().filter(|&(_, _, k)| k >= tau).collect();
    let mut qualifying: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(i, j, _) in &ranked {
        qualifying[i].push(j);
        qualifying[j].push(i);
    }
    let mut unit_of: Vec<usize> = (0..n).collect();
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut mark = vec![false; n];
    for &(i, j, _) in &ranked {
        let (ua, ub) = (unit_of[i], unit_of[j]);
        if ua == ub {
            continue;
        }
        for &b in &members[ub] {
            mark[b] = true;
        }
        let need = members[ub].len();
        let ok = members[ua]
            .iter()
            .all(|&a| qualifying[a].iter().filter(|&&x| mark[x]).count() == need);
        for &b in &members[ub] {
            mark[b] = false;
        }
        if ok {
            let (keep, gone) = if ua < ub { (ua, ub) } else { (ub, ua) };
            let moved = std::mem::take(&mut members[gone]);
            for &m in &moved {
                unit_of[m] = keep;
            }
            members[keep].extend(moved);
        }
    }
    let mut units: Vec<Vec<usize>> = members.into_iter().filter(|m| !m.is_empty()).collect();
    for u in &mut units {
        u.sort_unstable();
    }
    units.sort_by_key(|u| u[0]);
    units
}

/// `argmax_i (1/|C|) sum_j kappa_ij + beta * g(i)` with `kappa_ii = 1`;
/// ties go to the lowest index.
pub fn select_representative(unit: &[usize], kappa: &KappaTable, global: &[f64], beta: f64) -> usize {
    assert!(!unit.is_empty(), "empty unit");
    let size = unit.len() as f64;
    let mut best = unit[0];
    let mut best_score = f64::NEG_INFINITY;
    let mut sorted = unit.to_vec();
    sorted.sort_unstable();
    for &i in &sorted {
        let avg: f64 = unit.iter().map(|&j| kappa.get(i, j).unwrap_or(0.0)).sum::<f64>() / size;
        let score = avg + beta * global[i];
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}

/// Units, representatives and the kappa table of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinationPartition {
    pub units: Vec<Vec<usize>>,
    pub representatives: Vec<usize>,
    pub unit_of: Vec<usize>,
    pub kappa: KappaTable,
}

impl CoordinationPartition {
    /// Every node alone.
    pub fn singletons(n: usize) -> Self {
        Self {
            units: (0..n).map(|i| vec![i]).collect(),
            representatives: (0..n).collect(),
            unit_of: (0..n).collect(),
            kappa: KappaTable::new(),
        }
    }

    pub fn from_units(units: Vec<Vec<usize>>, kappa: KappaTable, global: &[f64], beta: f64) -> Self {
        let n: usize = units.iter().map(Vec::len).sum();
        let mut unit_of = vec![usize::MAX; n];
        for (u, members) in units.iter().enumerate() {
            for &m in members {
                unit_of[m] = u;
            }
        }
        let representatives = units
            .iter()
            .map(|u| select_representative(u, &kappa, global, beta))
            .collect();
        Self { units, representatives, unit_of, kappa }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn is_representative(&self, node: usize) -> bool {
        self.representatives[self.unit_of[node]] == node
    }

    /// Units with more than one member whose internal pairs are not all
    /// candidates with kappa >= tau.
    pub fn violations(&self, tau: f64) -> Vec<usize> {
        self.units
            .iter()
            .enumerate()
            .filter(|(_, u)| {
                u.len() > 1
                    && u.iter().enumerate().any(|(a, &i)| {
                        u[a + 1..].iter().any(|&j| self.kappa.get(i, j).is_none_or(|k| k < tau))
                    })
            })
            .map(|(idx, _)| idx)
            .collect()
    }
}

/// Full refinement for one step: distributions, kappa, units, representatives.
pub fn build_partition(
    graph: &SocialGraph,
    states: &[AgentState],
    candidates: &[(usize, usize)],
    neighbor_weights: &(dyn Fn(usize) -> Vec<f64> + Sync),
    global: &[f64],
    scale: &OpinionScale,
    params: CoordinationParams,
) -> CoordinationPartition {
    let n = graph.len();
    let dists: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| neighborhood_distribution(graph, i, states, &neighbor_weights(i), scale))
        .collect();
    let svs: Vec<StateVector> = states.iter().map(|a| StateVector::of(a, scale)).collect();
    let kappa = score_candidates(candidates, &dists, &svs, params.lambda);
    let units = form_units(n, &kappa, params.tau);
    CoordinationPartition::from_units(units, kappa, global, params.beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate;
    use proptest::prelude::*;

    fn states_with(scale: &OpinionScale, opinions: &[f64]) -> Vec<AgentState> {
        opinions
            .iter()
            .enumerate()
            .map(|(i, &x)| AgentState::new(format!("n{i}"), x, 0.5, scale).unwrap())
            .collect()
    }

    #[test]
    fn distribution_examples() {
        let scale = OpinionScale::default();
        let g = generate::star(4);
        // hub's neighbors 1..3
        let st = states_with(&scale, &[0.0, 0.1, 0.0, -0.1]);
        assert_eq!(neighborhood_distribution(&g, 0, &st, &[0.2, 0.5, 0.3], &scale), vec![0.0, 0.0, 1.0, 0.0, 0.0]);

        let g = generate::star(3);
        let st = states_with(&scale, &[0.0, -1.0, 1.0]);
        assert_eq!(neighborhood_distribution(&g, 0, &st, &[0.3, 0.3], &scale), vec![0.5, 0.0, 0.0, 0.0, 0.5]);

        let st = states_with(&scale, &[0.0, -0.9, -0.5]);
        let d = neighborhood_distribution(&g, 0, &st, &[0.3, 0.1], &scale);
        let expected = [0.75, 0.25, 0.0, 0.0, 0.0];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }

        let lonely = crate::graph::parse_edge_list("@node a\n", crate::graph::EdgeListFormat::DIRECTED).unwrap();
        let st = states_with(&scale, &[0.0]);
        assert_eq!(neighborhood_distribution(&lonely, 0, &st, &[], &scale), vec![0.2; 5]);
    }

    #[test]
    fn js_examples() {
        let p = [0.5, 0.5, 0.0, 0.0, 0.0];
        let q = [1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(info_similarity(&p, &p), 1.0);
        assert_eq!(info_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        // m = (0.75, 0.25): JS = 0.5 [0.5 log2(0.5/0.75) + 0.5 log2(0.5/0.25)] + 0.5 [1 log2(1/0.75)]
        let js = 0.5 * (0.5 * (0.5f64 / 0.75).log2() + 0.5 * 2.0f64.log2()) + 0.5 * (1.0f64 / 0.75).log2();
        assert!((info_similarity(&p, &q) - (1.0 - js)).abs() < 1e-12);
        assert!((js - 0.311_278_124_459_132_8).abs() < 1e-12);
    }

    #[test]
    fn state_and_consistency_examples() {
        let a = StateVector { opinion: 0.5, stubbornness: 0.2 };
        let b = StateVector { opinion: 0.5, stubbornness: 0.6 };
        assert_eq!(state_distance(a, a), 0.0);
        assert!((state_distance(a, b) - 0.4).abs() < 1e-12);
        let o = StateVector { opinion: 0.0, stubbornness: 0.0 };
        let c = StateVector { opinion: 0.3, stubbornness: 0.4 };
        assert!((state_distance(o, c) - 0.5).abs() < 1e-12);

        assert_eq!(consistency(1.0, 0.0, 3.0), 1.0);
        assert_eq!(consistency(0.0, 0.2, 1.0), 0.0);
        assert!((consistency(0.8, 0.5, 1.0) - 0.4852).abs() < 1e-4);
    }

    fn full_table(n: usize, f: impl Fn(usize, usize) -> f64) -> KappaTable {
        let mut t = KappaTable::new();
        for i in 0..n {
            for j in (i + 1)..n {
                t.insert(i, j, f(i, j));
            }
        }
        t
    }

    #[test]
    fn unit_formation_extremes() {
        let t = full_table(4, |_, _| 1.0);
        assert_eq!(form_units(4, &t, 0.9), vec![vec![0, 1, 2, 3]]);
        let t = full_table(4, |_, _| 0.5);
        assert_eq!(form_units(4, &t, 0.9).len(), 4);
        let t = full_table(4, |_, _| 1.0);
        assert_eq!(form_units(4, &t, 1.0 + 1e-9).len(), 4);
    }

    /// All set partitions of `0..n`.
    fn set_partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
        let mut out = vec![vec![]];
        for x in 0..n {
            let mut next = Vec::new();
            for p in &out {
                for b in 0..p.len() {
                    let mut q: Vec<Vec<usize>> = p.clone();
                    q[b].push(x);
                    next.push(q);
                }
                let mut q = p.clone();
                q.push(vec![x]);
                next.push(q);
            }
            out = next;
        }
        out
    }

    fn brute_force_best(n: usize, t: &KappaTable, tau: f64) -> Vec<Vec<usize>> {
        let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
        for p in set_partitions(n) {
            let valid = p.iter().all(|b| {
                b.iter().enumerate().all(|(a, &i)| b[a + 1..].iter().all(|&j| t.get(i, j).is_some_and(|k| k >= tau)))
            });
            if !valid {
                continue;
            }
            let score: f64 = p
                .iter()
                .map(|b| {
                    b.iter()
                        .enumerate()
                        .map(|(a, &i)| b[a + 1..].iter().map(|&j| t.get(i, j).unwrap()).sum::<f64>())
                        .sum::<f64>()
                })
                .sum();
            if best.as_ref().is_none_or(|(s, _)| score > *s + 1e-12) {
                best = Some((score, p));
            }
        }
        let mut p = best.unwrap().1;
        for b in &mut p {
            b.sort_unstable();
        }
        p.sort_by_key(|b| b[0]);
        p
    }

    #[test]
    fn greedy_matches_exhaustive_search() {
        // node 0 strongly tied to 2..4, pair (0,1) violates tau
        let t = full_table(5, |i, j| match (i, j) {
            (0, 1) => 0.5,
            (0, _) => 0.97,
            _ => 0.95,
        });
        let greedy = form_units(5, &t, 0.9);
        assert_eq!(greedy, brute_force_best(5, &t, 0.9));
        assert_eq!(greedy, vec![vec![0, 2, 3, 4], vec![1]]);
    }

    #[test]
    fn representative_examples() {
        let t = KappaTable::new();
        assert_eq!(select_representative(&[3], &t, &[0.0; 4], 0.5), 3);

        let t = full_table(3, |_, _| 0.9);
        assert_eq!(select_representative(&[2, 0, 1], &t, &[1.0, 1.0, 1.0], 0.5), 0);
        // equal kappa averages, node 1 has the largest g: 0.9*2/3+1/3 + 0.5*2 wins
        assert_eq!(select_representative(&[0, 1, 2], &t, &[1.0, 2.0, 1.0], 0.5), 1);
    }

    proptest! {
        #[test]
        fn js_properties(a in proptest::collection::vec(0.0f64..1.0, 5), b in proptest::collection::vec(0.0f64..1.0, 5)) {
            let p = normalize_or_uniform(a);
            let q = normalize_or_uniform(b);
            let s_pq = info_similarity(&p, &q);
            prop_assert_eq!(s_pq, info_similarity(&q, &p));
            prop_assert!((0.0..=1.0).contains(&s_pq));
            prop_assert_eq!(info_similarity(&p, &p), 1.0);
            let max_gap = p.iter().zip(&q).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if max_gap > 1e-12 {
                prop_assert!(s_pq < 1.0);
            }
        }

        #[test]
        fn kappa_monotone(s_info in 0.0f64..=1.0, d1 in 0.0f64..2.0, d2 in 0.0f64..2.0, lambda in 0.0f64..5.0) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(consistency(s_info, hi, lambda) <= consistency(s_info, lo, lambda));
            prop_assert!(consistency(s_info * 0.5, lo, lambda) <= consistency(s_info, lo, lambda));
            prop_assert!(consistency(s_info, lo, lambda) <= 1.0);
        }

        #[test]
        fn units_are_cliques(seed in 0u64..10_000, n in 2usize..12, tau in 0.0f64..1.2) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut t = KappaTable::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.random_bool(0.7) {
                        t.insert(i, j, rng.random_range(0.0..=1.0));
                    }
                }
            }
            let units = form_units(n, &t, tau);
            let mut seen: Vec<usize> = units.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            let part = CoordinationPartition::from_units(units, t, &vec![0.0; n], 0.5);
            prop_assert!(part.violations(tau).is_empty());
            for (u, &r) in part.units.iter().zip(&part.representatives) {
                prop_assert!(u.contains(&r));
            }
            if tau > 1.0 {
                prop_assert_eq!(part.len(), n);
            }
        }

        #[test]
        fn representative_follows_relabeling(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            use rand::seq::SliceRandom;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let vals: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.5..1.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
            let t = full_table(n, |i, j| vals[i * n + j]);
            let r = select_representative(&[0, 1, 2, 3, 4], &t, &g, 0.5);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut t2 = KappaTable::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    t2.insert(perm[i], perm[j], vals[i * n + j]);
                }
            }
            let mut g2 = vec![0.0; n];
            for i in 0..n {
                g2[perm[i]] = g[i];
            }
            prop_assert_eq!(select_representative(&[0, 1, 2, 3, 4], &t2, &g2, 0.5), perm[r]);
        }
    }
}
