//! Seeded synthetic graphs and agent populations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{GraphBuilder, GraphError, SocialGraph};
use crate::opinion::{AgentProfile, OpinionScale};

/// Graph families for `generate_graph`. Both produce undirected graphs stored
/// with each edge in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum GraphModel {
    /// Ring lattice where each node links to its `k` nearest neighbors, each
    /// lattice edge rewired with probability `p`. Odd `k` adds the chord
    /// `i -- i + (k+1)/2` for even `i`.
    SmallWorld { k: usize, p: f64 },
    /// Preferential attachment: each new node attaches `m` edges.
    ScaleFree { m: usize },
}

pub fn node_name(i: usize) -> String {
    format!("n{i}")
}

fn empty_builder(n: usize) -> GraphBuilder {
    GraphBuilder::with_nodes((0..n).map(node_name)).expect("generated ids are valid")
}

pub fn generate_graph(model: GraphModel, n: usize, seed: u64) -> Result<SocialGraph, GraphError> {
    if n < 2 {
        return Err(GraphError::InvalidParams(format!("need n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match model {
        GraphModel::SmallWorld { k, p } => small_world(n, k, p, &mut rng),
        GraphModel::ScaleFree { m } => scale_free(n, m, &mut rng),
    }
}

fn small_world(n: usize, k: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<SocialGraph, GraphError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(GraphError::InvalidParams(format!("rewiring probability {p} not in [0, 1]")));
    }
    if k < 2 || k >= n {
        return Err(GraphError::InvalidParams(format!("need 2 <= k < n, got k={k}, n={n}")));
    }
    let half = k / 2;
    let mut lattice: Vec<(usize, usize)> = Vec::new();
    for j in 1..=half {
        for i in 0..n {
            lattice.push((i, (i + j) % n));
        }
    }
    if k % 2 == 1 {
        let reach = half + 1;
        for i in (0..n).step_by(2) {
            lattice.push((i, (i + reach) % n));
        }
    }
    let mut adj = vec![std::collections::BTreeSet::new(); n];
    let mut present: Vec<(usize, usize)> = Vec::new();
    for &(a, b) in &lattice {
        if a != b && adj[a].insert(b) {
            adj[b].insert(a);
            present.push((a, b));
        }
    }
    // Watts–Strogatz rewiring that keeps the edge count.
    for e in present.iter_mut() {
        if !rng.random_bool(p) {
            continue;
        }
        let (u, v) = *e;
        if adj[u].len() >= n - 1 {
            continue;
        }
        let mut w = rng.random_range(0..n);
        while w == u || adj[u].contains(&w) {
            w = rng.random_range(0..n);
        }
        adj[u].remove(&v);
        adj[v].remove(&u);
        adj[u].insert(w);
        adj[w].insert(u);
        *e = (u, w);
    }
    let mut b = empty_builder(n);
    for &(u, v) in &present {
        b.add_undirected_idx(u, v, 1.0);
    }
    Ok(b.build())
}

fn scale_free(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<SocialGraph, GraphError> {
    if m < 1 || m >= n {
        return Err(GraphError::InvalidParams(format!("need 1 <= m < n, got m={m}, n={n}")));
    }
    let mut b = empty_builder(n);
    let mut repeated: Vec<usize> = Vec::new();
    let mut targets: Vec<usize> = (0..m).collect();
    for source in m..n {
        for &t in &targets {
            b.add_undirected_idx(source, t, 1.0);
        }
        repeated.extend_from_slice(&targets);
        repeated.extend(std::iter::repeat_n(source, m));
        let mut chosen = std::collections::BTreeSet::new();
        while chosen.len() < m {
            chosen.insert(repeated[rng.random_range(0..repeated.len())]);
        }
        targets = chosen.into_iter().collect();
    }
    Ok(b.build())
}

/// Undirected star: node `n0` is the hub.
pub fn star(n: usize) -> SocialGraph {
    let mut b = empty_builder(n);
    for leaf in 1..n {
        b.add_undirected_idx(0, leaf, 1.0);
    }
    b.build()
}

pub fn path(n: usize) -> SocialGraph {
    let mut b = empty_builder(n);
    for i in 1..n {
        b.add_undirected_idx(i - 1, i, 1.0);
    }
    b.build()
}

pub fn cycle(n: usize) -> SocialGraph {
    let mut b = empty_builder(n);
    for i in 0..n {
        b.add_undirected_idx(i, (i + 1) % n, 1.0);
    }
    b.build()
}

pub fn complete(n: usize) -> SocialGraph {
    let mut b = empty_builder(n);
    for i in 0..n {
        for j in (i + 1)..n {
            b.add_undirected_idx(i, j, 1.0);
        }
    }
    b.build()
}

/// How opinion clusters are laid out over node indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterLayout {
    /// Consecutive index blocks share a cluster (communities on ring lattices).
    #[default]
    Contiguous,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentGenParams {
    /// Cluster centers on the opinion scale; empty means uniform opinions.
    pub clusters: Vec<f64>,
    pub spread: f64,
    pub layout: ClusterLayout,
    pub stubbornness: (f64, f64),
}

impl Default for AgentGenParams {
    fn default() -> Self {
        Self {
            clusters: vec![-0.7, 0.0, 0.7],
            spread: 0.05,
            layout: ClusterLayout::Contiguous,
            stubbornness: (0.3, 0.4),
        }
    }
}

pub fn generate_agents(
    graph: &SocialGraph,
    scale: &OpinionScale,
    params: &AgentGenParams,
    seed: u64,
) -> Result<Vec<AgentProfile>, GraphError> {
    let (s_lo, s_hi) = params.stubbornness;
    if !(0.0 <= s_lo && s_lo <= s_hi && s_hi <= 1.0) {
        return Err(GraphError::InvalidParams(format!("stubbornness range ({s_lo}, {s_hi}) invalid")));
    }
    if !(params.spread >= 0.0 && params.spread.is_finite()) {
        return Err(GraphError::InvalidParams(format!("spread {} invalid", params.spread)));
    }
    if params.clusters.iter().any(|&c| !scale.contains(c)) {
        return Err(GraphError::InvalidParams("cluster center outside opinion range".into()));
    }
    let n = graph.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = params.clusters.len();
    let mut assignment: Vec<usize> = (0..n).map(|i| if k == 0 { 0 } else { i * k / n }).collect();
    if params.layout == ClusterLayout::Random {
        assignment.shuffle(&mut rng);
    }
    let noise = Normal::new(0.0, params.spread).expect("spread validated");
    let mut out = Vec::with_capacity(n);
    for (i, &cluster) in assignment.iter().enumerate() {
        let opinion = if k == 0 {
            rng.random_range(scale.min()..=scale.max())
        } else {
            scale.clamp(params.clusters[cluster] + noise.sample(&mut rng))
        };
        let stubbornness = if s_hi > s_lo { rng.random_range(s_lo..=s_hi) } else { s_lo };
        let category = scale.categorize_clamped(opinion);
        out.push(AgentProfile {
            id: graph.node_id(i).to_string(),
            persona: format!("member of community {}", cluster + 1),
            opinion,
            stubbornness,
            message: format!("My position on this topic: {}.", scale.label(category)),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_free_m1_is_tree() {
        let g = generate_graph(GraphModel::ScaleFree { m: 1 }, 5, 7).unwrap();
        assert_eq!(g.edge_count() / 2, 4);
    }

    #[test]
    fn same_seed_same_edges() {
        for model in [GraphModel::ScaleFree { m: 3 }, GraphModel::SmallWorld { k: 4, p: 0.3 }] {
            let a = generate_graph(model, 60, 11).unwrap();
            let b = generate_graph(model, 60, 11).unwrap();
            assert_eq!(a.edges(), b.edges());
        }
    }

    #[test]
    fn small_world_edge_count() {
        let g = generate_graph(GraphModel::SmallWorld { k: 6, p: 0.1 }, 500, 3).unwrap();
        assert_eq!(g.edge_count(), 3000);
        let g = generate_graph(GraphModel::SmallWorld { k: 7, p: 0.1 }, 500, 3).unwrap();
        assert_eq!(g.edge_count(), 3500);
    }

    #[test]
    fn scale_free_edge_count() {
        // m * (n - m) undirected edges
        let g = generate_graph(GraphModel::ScaleFree { m: 3 }, 100, 1).unwrap();
        assert_eq!(g.edge_count(), 2 * 3 * 97);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(generate_graph(GraphModel::SmallWorld { k: 4, p: 1.5 }, 10, 0).is_err());
        assert!(generate_graph(GraphModel::ScaleFree { m: 0 }, 10, 0).is_err());
        assert!(generate_graph(GraphModel::ScaleFree { m: 1 }, 1, 0).is_err());
    }

    #[test]
    fn clustered_agents_show_modes() {
        let g = generate_graph(GraphModel::SmallWorld { k: 4, p: 0.1 }, 300, 5).unwrap();
        let scale = OpinionScale::default();
        let agents = generate_agents(&g, &scale, &AgentGenParams::default(), 9).unwrap();
        let mut hist = [0usize; 5];
        for a in &agents {
            hist[scale.categorize(a.opinion).unwrap().0] += 1;
        }
        // centers -0.7, 0, 0.7 land in c1, c3, c5
        assert!(hist[0] > hist[1] && hist[2] > hist[1] && hist[2] > hist[3] && hist[4] > hist[3]);
        assert_eq!(agents, generate_agents(&g, &scale, &AgentGenParams::default(), 9).unwrap());
    }
}
