//! Opinion scale, categories and per-agent state.

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::SocialGraph;

#[derive(Debug, Error)]
pub enum OpinionError {
    #[error("opinion {value} outside [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },
    #[error("invalid opinion scale: {0}")]
    InvalidScale(String),
    #[error("stubbornness {0} outside [0, 1]")]
    BadStubbornness(f64),
    #[error("profile line {line}: {msg}")]
    Profile { line: usize, msg: String },
    #[error("no profile for node {0:?}")]
    MissingAgent(String),
    #[error("profile for unknown node {0:?}")]
    UnknownAgent(String),
    #[error("duplicate profile for node {0:?}")]
    DuplicateAgent(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Zero-based opinion category; displayed one-based as `c1..cK`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Category(pub usize);

impl Category {
    pub fn number(self) -> usize {
        self.0 + 1
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.number())
    }
}

const FIVE_LABELS: [&str; 5] = ["strongly oppose", "oppose", "neutral", "support", "strongly support"];

/// `K` equal-width bins over a closed value range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScaleSpec", into = "ScaleSpec")]
pub struct OpinionScale {
    min: f64,
    max: f64,
    labels: Vec<String>,
    midpoints: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScaleSpec {
    #[serde(default = "default_k")]
    categories: usize,
    #[serde(default = "default_min")]
    min: f64,
    #[serde(default = "default_max")]
    max: f64,
}

fn default_k() -> usize {
    5
}
fn default_min() -> f64 {
    -1.0
}
fn default_max() -> f64 {
    1.0
}

impl TryFrom<ScaleSpec> for OpinionScale {
    type Error = OpinionError;
    fn try_from(s: ScaleSpec) -> Result<Self, Self::Error> {
        OpinionScale::new(s.categories, s.min, s.max)
    }
}

impl From<OpinionScale> for ScaleSpec {
    fn from(s: OpinionScale) -> Self {
        ScaleSpec { categories: s.k(), min: s.min, max: s.max }
    }
}

impl Default for OpinionScale {
    fn default() -> Self {
        OpinionScale::new(5, -1.0, 1.0).expect("default scale is valid")
    }
}

impl OpinionScale {
    pub fn new(k: usize, min: f64, max: f64) -> Result<Self, OpinionError> {
        if k < 2 {
            return Err(OpinionError::InvalidScale(format!("need at least 2 categories, got {k}")));
        }
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(OpinionError::InvalidScale(format!("bad range [{min}, {max}]")));
        }
        let width = (max - min) / k as f64;
        let midpoints = (0..k).map(|c| min + width * (c as f64 + 0.5)).collect();
        let labels = if k == 5 {
            FIVE_LABELS.iter().map(|s| s.to_string()).collect()
        } else {
            (1..=k).map(|c| format!("level {c} of {k}")).collect()
        };
        Ok(Self { min, max, labels, midpoints })
    }

    pub fn k(&self) -> usize {
        self.midpoints.len()
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn bin_width(&self) -> f64 {
        self.width() / self.k() as f64
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, c: Category) -> &str {
        &self.labels[c.0]
    }

    pub fn midpoints(&self) -> &[f64] {
        &self.midpoints
    }

    pub fn midpoint(&self, c: Category) -> f64 {
        self.midpoints[c.0]
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }

    pub fn clamp(&self, x: f64) -> f64 {
        if x.is_nan() {
            return self.min + self.width() / 2.0;
        }
        x.clamp(self.min, self.max)
    }

    /// Maps `x` into `[0, 1]`.
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.min) / self.width()
    }

    /// Equal-width bin of `x`; a value on an inner boundary belongs to the upper
    /// bin and the range maximum maps to the last category.
    pub fn categorize(&self, x: f64) -> Result<Category, OpinionError> {
        if !self.contains(x) {
            return Err(OpinionError::OutOfRange { value: x, min: self.min, max: self.max });
        }
        let pos = ((x - self.min) / self.bin_width()).floor() as usize;
        Ok(Category(pos.min(self.k() - 1)))
    }

    /// `categorize` after clamping; never fails.
    pub fn categorize_clamped(&self, x: f64) -> Category {
        self.categorize(self.clamp(x)).expect("clamped value is in range")
    }

    pub fn category_by_label(&self, label: &str) -> Option<Category> {
        let needle = label.trim();
        self.labels
            .iter()
            .position(|l| l.eq_ignore_ascii_case(needle))
            .map(Category)
    }
}

/// Per-agent simulation state `x_i^t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub id: String,
    pub opinion: f64,
    pub category: Category,
    pub stubbornness: f64,
    pub persona: String,
    pub message: String,
    pub recent_messages: VecDeque<String>,
}

impl AgentState {
    pub fn new(
        id: impl Into<String>,
        opinion: f64,
        stubbornness: f64,
        scale: &OpinionScale,
    ) -> Result<Self, OpinionError> {
        if !(0.0..=1.0).contains(&stubbornness) {
            return Err(OpinionError::BadStubbornness(stubbornness));
        }
        let category = scale.categorize(opinion)?;
        Ok(Self {
            id: id.into(),
            opinion,
            category,
            stubbornness,
            persona: String::new(),
            message: String::new(),
            recent_messages: VecDeque::new(),
        })
    }

    pub fn with_persona(mut self, persona: impl Into<String>) -> Self {
        self.persona = persona.into();
        self
    }

    pub fn with_message(mut self, message: impl Into<String>) -> Self {
        self.message = message.into();
        self
    }

    /// Sets the opinion (clamped) and recomputes the category.
    pub fn set_opinion(&mut self, value: f64, scale: &OpinionScale) {
        self.opinion = scale.clamp(value);
        self.category = scale.categorize_clamped(self.opinion);
    }

    pub fn push_received(&mut self, text: String, capacity: usize) {
        if capacity == 0 {
            return;
        }
        while self.recent_messages.len() >= capacity {
            self.recent_messages.pop_front();
        }
        self.recent_messages.push_back(text);
    }

    pub fn to_profile(&self) -> AgentProfile {
        AgentProfile {
            id: self.id.clone(),
            persona: self.persona.clone(),
            opinion: self.opinion,
            stubbornness: self.stubbornness,
            message: self.message.clone(),
        }
    }
}

/// One line of the agent profile file (JSON Lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentProfile {
    pub id: String,
    #[serde(default)]
    pub persona: String,
    pub opinion: f64,
    pub stubbornness: f64,
    #[serde(default)]
    pub message: String,
}

impl AgentProfile {
    pub fn into_state(self, scale: &OpinionScale) -> Result<AgentState, OpinionError> {
        Ok(AgentState::new(self.id, self.opinion, self.stubbornness, scale)?
            .with_persona(self.persona)
            .with_message(self.message))
    }
}

pub fn read_profiles(reader: impl BufRead) -> Result<Vec<AgentProfile>, OpinionError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| OpinionError::Profile { line: i + 1, msg: e.to_string() })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let p: AgentProfile = serde_json::from_str(trimmed)
            .map_err(|e| OpinionError::Profile { line: i + 1, msg: e.to_string() })?;
        out.push(p);
    }
    Ok(out)
}

pub fn write_profiles(mut writer: impl Write, profiles: &[AgentProfile]) -> std::io::Result<()> {
    for p in profiles {
        serde_json::to_writer(&mut writer, p)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Orders profiles by graph node index; every node needs exactly one profile.
pub fn align_agents(
    graph: &SocialGraph,
    profiles: Vec<AgentProfile>,
    scale: &OpinionScale,
) -> Result<Vec<AgentState>, OpinionError> {
    let mut slots: Vec<Option<AgentState>> = vec![None; graph.len()];
    for p in profiles {
        let idx = graph
            .index_of(&p.id)
            .ok_or_else(|| OpinionError::UnknownAgent(p.id.clone()))?;
        if slots[idx].is_some() {
            return Err(OpinionError::DuplicateAgent(p.id));
        }
        slots[idx] = Some(p.into_state(scale)?);
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| OpinionError::MissingAgent(graph.node_id(i).to_string())))
        .collect()
}

pub fn load_agents(
    path: impl AsRef<Path>,
    graph: &SocialGraph,
    scale: &OpinionScale,
) -> Result<Vec<AgentState>, OpinionError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| OpinionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let profiles = read_profiles(std::io::BufReader::new(file))?;
    align_agents(graph, profiles, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn categorize_center_and_bounds() {
        let s = OpinionScale::default();
        assert_eq!(s.categorize(0.0).unwrap().to_string(), "c3");
        assert_eq!(s.categorize(-1.0).unwrap().to_string(), "c1");
        assert_eq!(s.categorize(1.0).unwrap().to_string(), "c5");
        assert_eq!(s.categorize(0.55).unwrap().to_string(), "c4");
        assert_eq!(s.categorize(0.6).unwrap(), Category(4));
        assert!(s.categorize(1.0001).is_err());
        assert!(s.categorize(f64::NAN).is_err());
    }

    #[test]
    fn midpoints_inside_range() {
        let s = OpinionScale::default();
        let expected = [-0.8, -0.4, 0.0, 0.4, 0.8];
        for (m, e) in s.midpoints().iter().zip(expected) {
            assert!((m - e).abs() < 1e-12);
        }
        assert!(OpinionScale::new(1, -1.0, 1.0).is_err());
        assert!(OpinionScale::new(3, 1.0, 1.0).is_err());
    }

    #[test]
    fn recent_buffer_is_bounded() {
        let s = OpinionScale::default();
        let mut a = AgentState::new("a", 0.0, 0.5, &s).unwrap();
        for i in 0..15 {
            a.push_received(format!("m{i}"), 10);
        }
        assert_eq!(a.recent_messages.len(), 10);
        assert_eq!(a.recent_messages.front().unwrap(), "m5");
    }

    #[test]
    fn profiles_align_with_graph() {
        let g = crate::graph::parse_edge_list("a,b\n", crate::graph::EdgeListFormat::UNDIRECTED).unwrap();
        let scale = OpinionScale::default();
        let text = "{\"id\":\"b\",\"opinion\":0.5,\"stubbornness\":0.2}\n{\"id\":\"a\",\"persona\":\"teacher\",\"opinion\":-0.5,\"stubbornness\":0.9,\"message\":\"hi\"}\n";
        let agents = align_agents(&g, read_profiles(text.as_bytes()).unwrap(), &scale).unwrap();
        assert_eq!(agents[0].id, "a");
        assert_eq!(agents[0].persona, "teacher");
        assert_eq!(agents[1].category, Category(3));

        let missing = "{\"id\":\"a\",\"opinion\":0,\"stubbornness\":0}\n";
        assert!(matches!(
            align_agents(&g, read_profiles(missing.as_bytes()).unwrap(), &scale),
            Err(OpinionError::MissingAgent(id)) if id == "b"
        ));
    }

    proptest! {
        #[test]
        fn categorize_is_monotone(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
            let s = OpinionScale::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(s.categorize(lo).unwrap() <= s.categorize(hi).unwrap());
        }
    }
}
