//! Directed weighted social graph, edge-list ingestion and the column-stochastic
//! transition matrix used by the random walk with restart.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: negative or non-positive weight {weight}")]
    BadWeight { line: usize, weight: f64 },
    #[error("invalid node id {0:?}: ids must be non-empty and contain no commas or whitespace")]
    BadNodeId(String),
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A merged directed edge. Endpoints are dense node indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// How an edge list should be interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EdgeListFormat {
    /// When false each line `a,b` contributes both `a->b` and `b->a`.
    pub directed: bool,
}

impl EdgeListFormat {
    pub const DIRECTED: Self = Self { directed: true };
    pub const UNDIRECTED: Self = Self { directed: false };
}

/// Immutable directed graph over agents.
///
/// Nodes are addressed by dense indices `0..len()` in declaration order; the
/// string ids are kept for I/O. Edges are unique per `(src, dst)` and sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct SocialGraph {
    node_ids: Vec<String>,
    index: HashMap<String, usize>,
    edges: Vec<Edge>,
    out_adj: Vec<Vec<(usize, f64)>>,
    in_adj: Vec<Vec<(usize, f64)>>,
    undirected: Vec<Vec<usize>>,
}

impl SocialGraph {
    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn node_id(&self, idx: usize) -> &str {
        &self.node_ids[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// The neighborhood N(i) = { j | (i, j) in E } with edge weights, sorted by index.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.out_adj[i]
    }

    pub fn in_neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.in_adj[i]
    }

    /// Distinct adjacent nodes ignoring direction and self-loops.
    pub fn undirected_neighbors(&self, i: usize) -> &[usize] {
        &self.undirected[i]
    }

    pub fn undirected_degree(&self, i: usize) -> usize {
        self.undirected[i].len()
    }

    pub fn out_weight(&self, i: usize) -> f64 {
        self.out_adj[i].iter().map(|&(_, w)| w).sum()
    }

    pub fn max_out_degree(&self) -> usize {
        self.out_adj.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Same topology with nodes renumbered: node `i` of `self` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> SocialGraph {
        assert_eq!(perm.len(), self.len());
        let mut ids = vec![String::new(); self.len()];
        for (old, &new) in perm.iter().enumerate() {
            ids[new] = self.node_ids[old].clone();
        }
        let mut b = GraphBuilder::new();
        for id in &ids {
            b.add_node(id).expect("ids already validated");
        }
        for e in &self.edges {
            b.add_edge_idx(perm[e.src], perm[e.dst], e.weight);
        }
        b.build()
    }

    /// Column-stochastic W with `W[j][i] = w(i->j) / out_weight(i)`; columns of
    /// dangling nodes are uniform.
    pub fn transition_matrix(&self) -> TransitionMatrix {
        let n = self.len();
        let mut columns = Vec::with_capacity(n);
        for i in 0..n {
            let total = self.out_weight(i);
            if total > 0.0 {
                columns.push(Some(
                    self.out_adj[i].iter().map(|&(j, w)| (j, w / total)).collect(),
                ));
            } else {
                columns.push(None);
            }
        }
        TransitionMatrix { n, columns }
    }
}

/// Sparse column-stochastic transition matrix.
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    n: usize,
    /// `None` marks a dangling column (uniform).
    columns: Vec<Option<Vec<(usize, f64)>>>,
}

impl TransitionMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn column(&self, i: usize) -> Option<&[(usize, f64)]> {
        self.columns[i].as_deref()
    }

    pub fn is_dangling(&self, i: usize) -> bool {
        self.columns[i].is_none()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        match &self.columns[col] {
            None => 1.0 / self.n as f64,
            Some(entries) => entries
                .iter()
                .find(|&&(j, _)| j == row)
                .map_or(0.0, |&(_, w)| w),
        }
    }

    /// Row-major dense copy, `dense[row][col]`.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n]; self.n];
        for col in 0..self.n {
            match &self.columns[col] {
                None => {
                    for row in out.iter_mut() {
                        row[col] = 1.0 / self.n as f64;
                    }
                }
                Some(entries) => {
                    for &(row, w) in entries {
                        out[row][col] += w;
                    }
                }
            }
        }
        out
    }

    /// `out = W * v`.
    pub fn mul_vec(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let mut dangling = 0.0;
        for (col, &mass) in v.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            match &self.columns[col] {
                None => dangling += mass,
                Some(entries) => {
                    for &(row, w) in entries {
                        out[row] += w * mass;
                    }
                }
            }
        }
        if dangling != 0.0 {
            let share = dangling / self.n as f64;
            out.iter_mut().for_each(|x| *x += share);
        }
    }
}

fn validate_id(id: &str) -> Result<(), GraphError> {
    if id.is_empty() || id.contains(',') || id.chars().any(char::is_whitespace) {
        return Err(GraphError::BadNodeId(id.to_string()));
    }
    Ok(())
}

/// Incremental constructor; duplicate edges merge by summing weights.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    node_ids: Vec<String>,
    index: HashMap<String, usize>,
    edges: BTreeMap<(usize, usize), f64>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_nodes<S: AsRef<str>>(ids: impl IntoIterator<Item = S>) -> Result<Self, GraphError> {
        let mut b = Self::new();
        for id in ids {
            b.add_node(id.as_ref())?;
        }
        Ok(b)
    }

    /// Declares a node (idempotent) and returns its index.
    pub fn add_node(&mut self, id: &str) -> Result<usize, GraphError> {
        if let Some(&i) = self.index.get(id) {
            return Ok(i);
        }
        validate_id(id)?;
        let i = self.node_ids.len();
        self.node_ids.push(id.to_string());
        self.index.insert(id.to_string(), i);
        Ok(i)
    }

    pub fn add_edge(&mut self, src: &str, dst: &str, weight: f64) -> Result<(), GraphError> {
        let s = self.add_node(src)?;
        let d = self.add_node(dst)?;
        self.add_edge_idx(s, d, weight);
        Ok(())
    }

    pub fn add_edge_idx(&mut self, src: usize, dst: usize, weight: f64) {
        debug_assert!(src < self.node_ids.len() && dst < self.node_ids.len());
        *self.edges.entry((src, dst)).or_insert(0.0) += weight;
    }

    pub fn add_undirected_idx(&mut self, a: usize, b: usize, weight: f64) {
        self.add_edge_idx(a, b, weight);
        if a != b {
            self.add_edge_idx(b, a, weight);
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn build(self) -> SocialGraph {
        let n = self.node_ids.len();
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        let mut undirected: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut edges = Vec::with_capacity(self.edges.len());
        for (&(src, dst), &weight) in &self.edges {
            edges.push(Edge { src, dst, weight });
            out_adj[src].push((dst, weight));
            in_adj[dst].push((src, weight));
            if src != dst {
                undirected[src].push(dst);
                undirected[dst].push(src);
            }
        }
        for list in &mut in_adj {
            list.sort_by_key(|&(j, _)| j);
        }
        for list in &mut undirected {
            list.sort_unstable();
            list.dedup();
        }
        SocialGraph {
            node_ids: self.node_ids,
            index: self.index,
            edges,
            out_adj,
            in_adj,
            undirected,
        }
    }
}

/// Parses the text edge-list format.
///
/// `#` starts a comment line, `@node <id>` declares a node, every other
/// non-blank line is `src,dst[,weight]`.
pub fn parse_edge_list(text: &str, format: EdgeListFormat) -> Result<SocialGraph, GraphError> {
    let mut b = GraphBuilder::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("@node") {
            let id = rest.trim();
            if id.is_empty() {
                return Err(GraphError::Parse { line: line_no, msg: "empty node declaration".into() });
            }
            b.add_node(id).map_err(|e| GraphError::Parse { line: line_no, msg: e.to_string() })?;
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (src, dst, weight) = match fields.as_slice() {
            [s, d] => (*s, *d, 1.0),
            [s, d, w] => {
                let weight: f64 = w.parse().map_err(|_| GraphError::Parse {
                    line: line_no,
                    msg: format!("bad weight {w:?}"),
                })?;
                (*s, *d, weight)
            }
            _ => {
                return Err(GraphError::Parse {
                    line: line_no,
                    msg: format!("expected src,dst[,weight], got {line:?}"),
                })
            }
        };
        if !(weight.is_finite() && weight > 0.0) {
            return Err(GraphError::BadWeight { line: line_no, weight });
        }
        let s = b.add_node(src).map_err(|e| GraphError::Parse { line: line_no, msg: e.to_string() })?;
        let d = b.add_node(dst).map_err(|e| GraphError::Parse { line: line_no, msg: e.to_string() })?;
        if format.directed {
            b.add_edge_idx(s, d, weight);
        } else {
            b.add_undirected_idx(s, d, weight);
        }
    }
    Ok(b.build())
}

pub fn load_graph(path: impl AsRef<Path>, format: EdgeListFormat) -> Result<SocialGraph, GraphError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_edge_list(&text, format)
}

/// Canonical directed edge list: all nodes declared first, then one line per
/// edge in `(src, dst)` index order, weight omitted when it is exactly 1.
pub fn write_edge_list(graph: &SocialGraph) -> String {
    let mut out = String::new();
    for id in graph.node_ids() {
        let _ = writeln!(out, "@node {id}");
    }
    for e in graph.edges() {
        let (s, d) = (graph.node_id(e.src), graph.node_id(e.dst));
        if e.weight == 1.0 {
            let _ = writeln!(out, "{s},{d}");
        } else {
            let _ = writeln!(out, "{s},{d},{}", e.weight);
        }
    }
    out
}

pub fn save_graph(graph: &SocialGraph, path: impl AsRef<Path>) -> Result<(), GraphError> {
    let path = path.as_ref();
    std::fs::write(path, write_edge_list(graph)).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}
