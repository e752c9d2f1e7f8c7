//! Structural role signatures and topology-aware candidate filtering.
//!
//! The built-in signature of a node concatenates, for every hop distance
//! `0..=max_hop`, seven statistics of the degree multiset of the nodes at
//! exactly that distance (undirected view): count, min, max, mean and the
//! three quartiles. Automorphic nodes therefore share a signature. Externally
//! trained embeddings can replace it through [`load_embeddings`].

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::graph::SocialGraph;

pub const RING_STATS: usize = 7;
pub const DEFAULT_MAX_HOP: usize = 2;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no embedding for node {0:?}")]
    MissingNode(String),
    #[error("embedding for unknown node {0:?}")]
    UnknownNode(String),
    #[error("ragged embeddings: node {node:?} has dimension {got}, expected {expected}")]
    Ragged { node: String, got: usize, expected: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One row per node, in graph index order; all rows share a dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Signatures {
    vectors: Vec<Vec<f64>>,
}

impl Signatures {
    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Self {
        Self { vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        cosine(&self.vectors[i], &self.vectors[j])
    }
}

/// Cosine similarity; zero vectors have similarity 0 with everything.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

fn ring_summary(degrees: &mut [f64], out: &mut Vec<f64>) {
    if degrees.is_empty() {
        out.extend([0.0; RING_STATS]);
        return;
    }
    degrees.sort_by(f64::total_cmp);
    let n = degrees.len();
    let q = |level: f64| {
        let pos = level * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        degrees[lo] + (pos - lo as f64) * (degrees[hi] - degrees[lo])
    };
    let mean = degrees.iter().sum::<f64>() / n as f64;
    out.extend([n as f64, degrees[0], degrees[n - 1], mean, q(0.25), q(0.5), q(0.75)]);
}

pub fn structural_signature(graph: &SocialGraph, node: usize, max_hop: usize) -> Vec<f64> {
    let n = graph.len();
    let mut dist = vec![usize::MAX; n];
    let mut rings: Vec<Vec<f64>> = vec![Vec::new(); max_hop + 1];
    dist[node] = 0;
    let mut queue = VecDeque::from([node]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u];
        rings[d].push(graph.undirected_degree(u) as f64);
        if d == max_hop {
            continue;
        }
        for &v in graph.undirected_neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = d + 1;
                queue.push_back(v);
            }
        }
    }
    let mut out = Vec::with_capacity((max_hop + 1) * RING_STATS);
    for ring in rings.iter_mut() {
        ring_summary(ring, &mut out);
    }
    out
}

pub fn compute_signatures(graph: &SocialGraph, max_hop: usize) -> Signatures {
    let vectors = (0..graph.len())
        .into_par_iter()
        .map(|i| structural_signature(graph, i, max_hop.max(1)))
        .collect();
    Signatures { vectors }
}

/// Reads `node_id v1 v2 ... vd` lines; every graph node must appear once.
pub fn read_embeddings(input: impl BufRead, graph: &SocialGraph) -> Result<Signatures, EmbedError> {
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; graph.len()];
    let mut dim: Option<usize> = None;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let id = fields.next().unwrap_or_default();
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| EmbedError::Parse { line: i + 1, msg: format!("bad value {f:?}") })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let expected = *dim.get_or_insert(values.len());
        if values.len() != expected || expected == 0 {
            return Err(EmbedError::Ragged { node: id.to_string(), got: values.len(), expected });
        }
        let idx = graph.index_of(id).ok_or_else(|| EmbedError::UnknownNode(id.to_string()))?;
        if slots[idx].replace(values).is_some() {
            return Err(EmbedError::Parse { line: i + 1, msg: format!("duplicate node {id:?}") });
        }
    }
    let vectors = slots
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| EmbedError::MissingNode(graph.node_id(i).to_string())))
        .collect::<Result<_, _>>()?;
    Ok(Signatures { vectors })
}

pub fn load_embeddings(path: impl AsRef<std::path::Path>, graph: &SocialGraph) -> Result<Signatures, EmbedError> {
    let file = std::fs::File::open(path)?;
    read_embeddings(std::io::BufReader::new(file), graph)
}

pub fn write_embeddings(mut out: impl Write, graph: &SocialGraph, sigs: &Signatures) -> std::io::Result<()> {
    for (i, v) in sigs.vectors.iter().enumerate() {
        write!(out, "{}", graph.node_id(i))?;
        for x in v {
            write!(out, " {x}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// All unordered pairs `(i, j)`, `i < j`, with `cos(mu_i, mu_j) >= gamma`,
/// sorted lexicographically.
pub fn candidate_pairs(sigs: &Signatures, gamma: f64) -> Vec<(usize, usize)> {
    let n = sigs.len();
    let sq_norms: Vec<f64> = sigs.vectors.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>()).collect();
    (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let sq_norms = &sq_norms;
            ((i + 1)..n).filter_map(move |j| {
                let c = if sq_norms[i] == 0.0 || sq_norms[j] == 0.0 {
                    0.0
                } else {
                    let dot: f64 = sigs.vectors[i].iter().zip(&sigs.vectors[j]).map(|(a, b)| a * b).sum();
                    (dot / (sq_norms[i] * sq_norms[j]).sqrt()).clamp(-1.0, 1.0)
                };
                (c >= gamma).then_some((i, j))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate;
    use crate::graph::{parse_edge_list, EdgeListFormat};

    #[test]
    fn star_leaves_identical() {
        let g = generate::star(6);
        let s = compute_signatures(&g, 2);
        assert_eq!(s.dim(), 21);
        assert_eq!(s.get(1), s.get(4));
        assert_eq!(s.cosine(1, 4), 1.0);
    }

    #[test]
    fn isolated_node_has_empty_rings() {
        let g = parse_edge_list("@node x\na,b\n", EdgeListFormat::UNDIRECTED).unwrap();
        let v = structural_signature(&g, 0, 2);
        assert_eq!(&v[..RING_STATS], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(v[RING_STATS..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn path_ring_enumeration() {
        // endpoint: ring0 {1}, ring1 {2}, ring2 {2}; middle: ring0 {2}, ring1 {2,2}, ring2 {1,1}
        let g = generate::path(5);
        let end = structural_signature(&g, 0, 2);
        let mid = structural_signature(&g, 2, 2);
        let expect_end = [1., 1., 1., 1., 1., 1., 1., 1., 2., 2., 2., 2., 2., 2., 1., 2., 2., 2., 2., 2., 2.];
        let expect_mid = [1., 2., 2., 2., 2., 2., 2., 2., 2., 2., 2., 2., 2., 2., 2., 1., 1., 1., 1., 1., 1.];
        assert_eq!(end, expect_end);
        assert_eq!(mid, expect_mid);
        assert_eq!(end, structural_signature(&g, 4, 2));
    }

    #[test]
    fn candidate_pair_examples() {
        let star = compute_signatures(&generate::star(5), 2);
        let pairs = candidate_pairs(&star, 1.0);
        let expected: Vec<(usize, usize)> = (1..5).flat_map(|i| ((i + 1)..5).map(move |j| (i, j))).collect();
        assert_eq!(pairs, expected);
        assert_eq!(candidate_pairs(&star, -1.0).len(), 10);

        // Hand-computed cosines on the 5-path: endpoint-endpoint = 1,
        // endpoint-middle = 53 / sqrt(57 * 63) ~ 0.8845.
        let path = compute_signatures(&generate::path(5), 2);
        let c = path.cosine(0, 2);
        assert!((c - 53.0 / (57.0f64 * 63.0).sqrt()).abs() < 1e-12);
        let pairs = candidate_pairs(&path, 0.99);
        assert!(pairs.contains(&(0, 4)));
        assert!(!pairs.contains(&(0, 2)));
    }

    #[test]
    fn zero_vectors_never_match() {
        let s = Signatures::from_vectors(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(s.cosine(0, 2), 0.0);
        assert_eq!(candidate_pairs(&s, 0.5), vec![]);
        assert_eq!(candidate_pairs(&s, -1.0).len(), 3);
    }

    #[test]
    fn embeddings_file_checks() {
        let g = generate::path(3);
        let ok = "n0 1 2\nn1 3 4\nn2 5 6\n";
        let s = read_embeddings(ok.as_bytes(), &g).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &g, &s).unwrap();
        assert_eq!(read_embeddings(buf.as_slice(), &g).unwrap(), s);

        match read_embeddings("n0 1 2\nn2 5 6\n".as_bytes(), &g) {
            Err(EmbedError::MissingNode(id)) => assert_eq!(id, "n1"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_embeddings("n0 1 2\nn1 3\nn2 5 6\n".as_bytes(), &g),
            Err(EmbedError::Ragged { .. })
        ));
    }
}
