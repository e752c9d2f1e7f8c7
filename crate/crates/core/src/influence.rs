//! Topology-induced influence: personalized PageRank profiles, global influence
//! scores and neighbor importance tiers.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{SocialGraph, TransitionMatrix};

#[derive(Debug, Error)]
pub enum InfluenceError {
    #[error("alpha must be in [0, 1), got {0}")]
    BadAlpha(f64),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("power iteration from source {source_node} did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged { source_node: usize, iterations: usize, residual: f64 },
    #[error("source {0} out of range")]
    BadSource(usize),
    #[error("ppr matrix: {0}")]
    Matrix(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PprConfig {
    /// Continuation probability of the walk.
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PprConfig {
    fn default() -> Self {
        Self { alpha: 0.85, tol: 1e-10, max_iter: 1000 }
    }
}

impl PprConfig {
    pub fn validate(&self) -> Result<(), InfluenceError> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(InfluenceError::BadAlpha(self.alpha));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(InfluenceError::BadTolerance(self.tol));
        }
        Ok(())
    }
}

/// Fixed point of `pi = (1 - alpha) e_source + alpha W pi`, by power iteration
/// until the L1 change between sweeps is at most `tol`.
pub fn personalized_pagerank(
    graph: &SocialGraph,
    source: usize,
    cfg: &PprConfig,
) -> Result<Vec<f64>, InfluenceError> {
    cfg.validate()?;
    if source >= graph.len() {
        return Err(InfluenceError::BadSource(source));
    }
    ppr_with_matrix(&graph.transition_matrix(), source, cfg)
}

pub(crate) fn ppr_with_matrix(
    w: &TransitionMatrix,
    source: usize,
    cfg: &PprConfig,
) -> Result<Vec<f64>, InfluenceError> {
    let n = w.dim();
    let restart = 1.0 - cfg.alpha;
    let mut pi = vec![0.0; n];
    pi[source] = 1.0;
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        w.mul_vec(&pi, &mut next);
        for x in next.iter_mut() {
            *x *= cfg.alpha;
        }
        next[source] += restart;
        residual = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if residual <= cfg.tol {
            return Ok(pi);
        }
    }
    Err(InfluenceError::NotConverged { source_node: source, iterations: cfg.max_iter, residual })
}

/// All profiles, row `i` = `pi^i`.
pub fn ppr_matrix(graph: &SocialGraph, cfg: &PprConfig) -> Result<Vec<Vec<f64>>, InfluenceError> {
    cfg.validate()?;
    let w = graph.transition_matrix();
    (0..graph.len())
        .into_par_iter()
        .map(|s| ppr_with_matrix(&w, s, cfg))
        .collect()
}

/// `g(i) = sum_k pi^k_i`: the total mass node `i` receives across every
/// personalized profile.
pub fn global_influence(graph: &SocialGraph, cfg: &PprConfig) -> Result<Vec<f64>, InfluenceError> {
    Ok(InfluenceTable::from_ppr(graph, cfg, 1)?.global)
}

/// Splits neighbor scores into `num_tiers` tiers (1 = most important).
///
/// Cut point `t` is the `(1 - t/num_tiers)` quantile of the scores (linear
/// interpolation). A score lands below every cut point it does not exceed,
/// except that the maximum score is always tier 1, so equal scores share the
/// higher tier.
pub fn influence_tiers(scores: &[f64], num_tiers: usize) -> Vec<usize> {
    if scores.is_empty() {
        return Vec::new();
    }
    let num_tiers = num_tiers.max(1);
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let max = sorted[sorted.len() - 1];
    let cuts: Vec<f64> = (1..num_tiers)
        .map(|t| quantile(&sorted, 1.0 - t as f64 / num_tiers as f64))
        .collect();
    scores
        .iter()
        .map(|&s| {
            if s == max {
                1
            } else {
                1 + cuts.iter().filter(|&&c| s <= c).count()
            }
        })
        .collect()
}

fn quantile(sorted: &[f64], level: f64) -> f64 {
    let pos = level * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Influence data the simulation consumes, cached once per run.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceTable {
    /// `weights[i][k]` = `pi^i_j` for the k-th entry of `graph.neighbors(i)`.
    weights: Vec<Vec<f64>>,
    /// Tier per neighbor, aligned with `weights`.
    tiers: Vec<Vec<usize>>,
    global: Vec<f64>,
    num_tiers: usize,
}

impl InfluenceTable {
    pub fn from_ppr(graph: &SocialGraph, cfg: &PprConfig, num_tiers: usize) -> Result<Self, InfluenceError> {
        cfg.validate()?;
        let n = graph.len();
        let w = graph.transition_matrix();
        let mut weights = Vec::with_capacity(n);
        let mut global = vec![0.0; n];
        // Bounded memory; summation order of `global` stays fixed.
        const CHUNK: usize = 256;
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let rows: Vec<Vec<f64>> = (start..end)
                .into_par_iter()
                .map(|s| ppr_with_matrix(&w, s, cfg))
                .collect::<Result<_, _>>()?;
            for (offset, row) in rows.iter().enumerate() {
                let i = start + offset;
                for (g, &x) in global.iter_mut().zip(row) {
                    *g += x;
                }
                weights.push(graph.neighbors(i).iter().map(|&(j, _)| row[j]).collect());
            }
        }
        Ok(Self::assemble(weights, global, num_tiers))
    }

    /// Builds the table from a precomputed dense matrix (row = source).
    pub fn from_matrix(graph: &SocialGraph, matrix: &[Vec<f64>], num_tiers: usize) -> Result<Self, InfluenceError> {
        let n = graph.len();
        if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
            return Err(InfluenceError::Matrix(format!("expected {n}x{n} matrix")));
        }
        let mut global = vec![0.0; n];
        for row in matrix {
            for (g, &x) in global.iter_mut().zip(row) {
                *g += x;
            }
        }
        let weights = (0..n)
            .map(|i| graph.neighbors(i).iter().map(|&(j, _)| matrix[i][j]).collect())
            .collect();
        Ok(Self::assemble(weights, global, num_tiers))
    }

    /// The ablation where every `pi^i_j` is equal: neighbors weigh the same,
    /// all sit in tier 1, and every node has the same global influence.
    pub fn uniform(graph: &SocialGraph, num_tiers: usize) -> Self {
        let n = graph.len();
        let share = 1.0 / n as f64;
        let weights = (0..n).map(|i| vec![share; graph.neighbors(i).len()]).collect();
        Self::assemble(weights, vec![1.0; n], num_tiers)
    }

    fn assemble(weights: Vec<Vec<f64>>, global: Vec<f64>, num_tiers: usize) -> Self {
        let tiers = weights.iter().map(|w: &Vec<f64>| influence_tiers(w, num_tiers)).collect();
        Self { weights, tiers, global, num_tiers: num_tiers.max(1) }
    }

    pub fn len(&self) -> usize {
        self.global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global.is_empty()
    }

    pub fn neighbor_weights(&self, i: usize) -> &[f64] {
        &self.weights[i]
    }

    pub fn neighbor_tiers(&self, i: usize) -> &[usize] {
        &self.tiers[i]
    }

    pub fn global(&self) -> &[f64] {
        &self.global
    }

    pub fn num_tiers(&self) -> usize {
        self.num_tiers
    }
}

pub fn write_ppr_csv(mut out: impl Write, graph: &SocialGraph, matrix: &[Vec<f64>]) -> std::io::Result<()> {
    write!(out, "source")?;
    for id in graph.node_ids() {
        write!(out, ",{id}")?;
    }
    writeln!(out)?;
    for (i, row) in matrix.iter().enumerate() {
        write!(out, "{}", graph.node_id(i))?;
        for x in row {
            write!(out, ",{x}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Reads a matrix written by [`write_ppr_csv`]; columns and rows must match the graph's ids.
pub fn read_ppr_csv(input: impl BufRead, graph: &SocialGraph) -> Result<Vec<Vec<f64>>, InfluenceError> {
    let bad = |m: String| InfluenceError::Matrix(m);
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .map_err(|e| bad(e.to_string()))?;
    let cols: Vec<&str> = header.split(',').skip(1).collect();
    if cols != graph.node_ids() {
        return Err(bad("header does not match graph node order".into()));
    }
    let mut rows = Vec::with_capacity(graph.len());
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default();
        if graph.index_of(id) != Some(rows.len()) {
            return Err(bad(format!("row {} has unexpected source {id:?}", i + 1)));
        }
        let row = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad(format!("row {}: bad value {f:?}", i + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != graph.len() {
            return Err(bad(format!("row {} has {} values", i + 1, row.len())));
        }
        rows.push(row);
    }
    if rows.len() != graph.len() {
        return Err(bad(format!("expected {} rows, got {}", graph.len(), rows.len())));
    }
    Ok(rows)
}
