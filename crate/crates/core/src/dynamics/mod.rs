//! Update operators, tiered message aggregation and stepping.

mod engine;
mod llm_operator;
mod prompt;
mod trajectory;

pub use engine::{
    call_seed, run_simulation, run_simulation_with, step_coordinated, step_full, step_full_in_order, Engine,
    EngineInputs, SimError, StepEnv, StepOutput,
};
pub use llm_operator::LlmOperator;
pub use prompt::{build_prompt, mock_responder, parse_response, ParseError, SYSTEM_PROMPT};
pub use trajectory::{RunSummary, StepRecord, Trajectory, TrajectoryError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::SocialGraph;
use crate::influence::InfluenceTable;
use crate::llm::TokenUsage;
use crate::opinion::{AgentState, Category, OpinionScale};

#[derive(Debug, Clone, PartialEq)]
pub struct ContextEntry {
    pub sender: usize,
    pub sender_id: String,
    pub message: String,
    pub category: Category,
    pub opinion: f64,
    pub weight: f64,
}

/// What one agent sees in one step: neighbor messages grouped by tier,
/// tier masses, and the weighted category distribution of the neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedContext {
    pub tiers: Vec<Vec<ContextEntry>>,
    pub tier_weights: Vec<f64>,
    pub neighborhood_dist: Vec<f64>,
}

impl AggregatedContext {
    pub fn entries(&self) -> impl Iterator<Item = &ContextEntry> {
        self.tiers.iter().flatten()
    }

    pub fn is_empty(&self) -> bool {
        self.tiers.iter().all(Vec::is_empty)
    }
}

pub fn aggregate_messages(
    graph: &SocialGraph,
    node: usize,
    states: &[AgentState],
    influence: &InfluenceTable,
    scale: &OpinionScale,
) -> AggregatedContext {
    let num_tiers = influence.num_tiers();
    let weights = influence.neighbor_weights(node);
    let tiers_of = influence.neighbor_tiers(node);
    let mut tiers: Vec<Vec<ContextEntry>> = vec![Vec::new(); num_tiers];
    for ((&(j, _), &w), &t) in graph.neighbors(node).iter().zip(weights).zip(tiers_of) {
        let s = &states[j];
        tiers[t - 1].push(ContextEntry {
            sender: j,
            sender_id: s.id.clone(),
            message: s.message.clone(),
            category: s.category,
            opinion: s.opinion,
            weight: w,
        });
    }
    for tier in &mut tiers {
        tier.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.sender_id.cmp(&b.sender_id)));
    }
    let tier_weights = tiers.iter().map(|t| t.iter().map(|e| e.weight).sum()).collect();
    let neighborhood_dist = crate::coordination::neighborhood_distribution(graph, node, states, weights, scale);
    AggregatedContext { tiers, tier_weights, neighborhood_dist }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateResult {
    pub new_opinion: f64,
    pub category: Category,
    pub new_message: String,
    pub new_stubbornness: Option<f64>,
    pub usage: Option<TokenUsage>,
}

impl UpdateResult {
    /// Clamps the opinion and derives its category.
    pub fn new(opinion: f64, message: impl Into<String>, scale: &OpinionScale) -> Self {
        let new_opinion = scale.clamp(opinion);
        Self {
            new_opinion,
            category: scale.categorize_clamped(new_opinion),
            new_message: message.into(),
            new_stubbornness: None,
            usage: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallInfo {
    pub step: usize,
    pub node: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OperatorError {
    /// The agent keeps its state for this step.
    #[error("update failed: {msg}")]
    Transient { msg: String, usage: TokenUsage },
    /// The run cannot continue.
    #[error("fatal operator failure: {0}")]
    Fatal(String),
}

/// Constants of `|U(a) - U(b)| <= L_x * d_state + L_v * d_JS` for the
/// categorical reduction of an operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzConstants {
    pub l_x: f64,
    pub l_v: f64,
}

/// Population facts the constants may depend on.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundEnv {
    pub scale: OpinionScale,
    pub s_min: f64,
    pub s_max: f64,
    pub max_out_degree: usize,
}

impl BoundEnv {
    pub fn of(graph: &SocialGraph, states: &[AgentState], scale: &OpinionScale) -> Self {
        let s_min = states.iter().map(|a| a.stubbornness).fold(f64::INFINITY, f64::min);
        let s_max = states.iter().map(|a| a.stubbornness).fold(f64::NEG_INFINITY, f64::max);
        Self { scale: scale.clone(), s_min, s_max, max_out_degree: graph.max_out_degree() }
    }
}

pub trait UpdateOperator: Send + Sync {
    fn name(&self) -> &str;

    fn update(&self, agent: &AgentState, ctx: &AggregatedContext, call: CallInfo) -> Result<UpdateResult, OperatorError>;

    /// Known only for deterministic oracles.
    fn lipschitz(&self, _env: &BoundEnv) -> Option<LipschitzConstants> {
        None
    }

    /// The update as a function of own state and the unweighted neighbor
    /// category distribution only.
    fn reduced_update(&self, _opinion: f64, _stubbornness: f64, _dist: &[f64]) -> Option<f64> {
        None
    }

    /// Cap on simultaneous invocations; `None` means unbounded.
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

pub fn oracle_message(x: f64, scale: &OpinionScale) -> String {
    format!("My position: {} ({x:+.2}).", scale.label(scale.categorize_clamped(x)))
}

/// `sum_j w_j (x_j - x) / sum_j w_j`; written as an offset so that a
/// consensus is reproduced exactly.
fn weighted_offset<'a>(x: f64, entries: impl Iterator<Item = &'a ContextEntry>) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for e in entries {
        num += e.weight * (e.opinion - x);
        den += e.weight;
    }
    (den > 0.0).then(|| num / den)
}

/// Friedkin-Johnsen: `x' = s x + (1 - s) * sum_j w_j x_j` with the neighbor
/// weights renormalized to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FjOracle {
    pub scale: OpinionScale,
}

impl FjOracle {
    pub fn new(scale: OpinionScale) -> Self {
        Self { scale }
    }
}

impl UpdateOperator for FjOracle {
    fn name(&self) -> &str {
        "fj"
    }

    fn update(&self, agent: &AgentState, ctx: &AggregatedContext, _call: CallInfo) -> Result<UpdateResult, OperatorError> {
        let x = agent.opinion;
        let next = match weighted_offset(x, ctx.entries()) {
            Some(off) => x + (1.0 - agent.stubbornness) * off,
            None => x,
        };
        Ok(UpdateResult::new(next, oracle_message(next, &self.scale), &self.scale))
    }

    // With opinions normalized by the range width R, the reduced update
    // s*x + (1-s)*M(v) has |d/dx^| = sR and |d/ds| = |x - M| <= R, so
    // sqrt(s^2 + 1) R bounds it in state distance. Sharing a delta instead
    // of a value swaps s for 1 - s; the max covers both.
    //
    // For the distribution term |M(v) - M(w)| <= R_mid * TV(v, w), Pinsker
    // gives TV^2 <= 2 ln2 JS (bits), and distinct count distributions over
    // at most D items are at least 1/D^2 apart in TV, so TV <= 2 ln2 D^2 JS.
    fn lipschitz(&self, env: &BoundEnv) -> Option<LipschitzConstants> {
        let r = env.scale.width();
        let mids = env.scale.midpoints();
        let r_mid = mids[mids.len() - 1] - mids[0];
        let s_hi = env.s_max.max(1.0 - env.s_min);
        let d = env.max_out_degree.max(env.scale.k()) as f64;
        Some(LipschitzConstants {
            l_x: r * (s_hi * s_hi + 1.0).sqrt(),
            l_v: (1.0 - env.s_min) * r_mid * 2.0 * std::f64::consts::LN_2 * d * d,
        })
    }

    fn reduced_update(&self, opinion: f64, stubbornness: f64, dist: &[f64]) -> Option<f64> {
        let m: f64 = dist.iter().zip(self.scale.midpoints()).map(|(p, c)| p * c).sum();
        Some(self.scale.clamp(stubbornness * opinion + (1.0 - stubbornness) * m))
    }
}

/// Bounded confidence: FJ restricted to neighbors within `epsilon` of the
/// agent's own opinion.
#[derive(Debug, Clone, PartialEq)]
pub struct BcOracle {
    pub scale: OpinionScale,
    pub epsilon: f64,
}

impl BcOracle {
    pub fn new(scale: OpinionScale, epsilon: f64) -> Self {
        Self { scale, epsilon }
    }
}

impl UpdateOperator for BcOracle {
    fn name(&self) -> &str {
        "bc"
    }

    fn update(&self, agent: &AgentState, ctx: &AggregatedContext, _call: CallInfo) -> Result<UpdateResult, OperatorError> {
        let x = agent.opinion;
        let close = ctx.entries().filter(|e| (e.opinion - x).abs() <= self.epsilon);
        let next = match weighted_offset(x, close) {
            Some(off) => x + (1.0 - agent.stubbornness) * off,
            None => x,
        };
        Ok(UpdateResult::new(next, oracle_message(next, &self.scale), &self.scale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate;
    use crate::influence::{InfluenceTable, PprConfig};

    fn states(scale: &OpinionScale, xs: &[f64], s: f64) -> Vec<AgentState> {
        xs.iter()
            .enumerate()
            .map(|(i, &x)| AgentState::new(format!("n{i}"), x, s, scale).unwrap().with_message(format!("m{i}")))
            .collect()
    }

    fn call() -> CallInfo {
        CallInfo { step: 0, node: 0, seed: 0 }
    }

    fn entry(j: usize, x: f64, w: f64, scale: &OpinionScale) -> ContextEntry {
        ContextEntry {
            sender: j,
            sender_id: format!("n{j}"),
            message: String::new(),
            category: scale.categorize_clamped(x),
            opinion: x,
            weight: w,
        }
    }

    fn ctx(entries: Vec<ContextEntry>) -> AggregatedContext {
        AggregatedContext { tiers: vec![entries], tier_weights: vec![], neighborhood_dist: vec![] }
    }

    #[test]
    fn aggregation_examples() {
        let scale = OpinionScale::default();
        let g = crate::graph::parse_edge_list("@node a\n", crate::graph::EdgeListFormat::DIRECTED).unwrap();
        let st = states(&scale, &[0.0], 0.5);
        let c = aggregate_messages(&g, 0, &st, &InfluenceTable::uniform(&g, 2), &scale);
        assert!(c.is_empty());
        assert_eq!(c.neighborhood_dist, vec![0.2; 5]);

        let g = generate::star(5);
        let st = states(&scale, &[0.5, 0.0, 0.0, 0.0, 0.0], 0.5);
        let table = InfluenceTable::from_ppr(&g, &PprConfig::default(), 2).unwrap();
        let c = aggregate_messages(&g, 3, &st, &table, &scale);
        assert_eq!(c.tiers[0].len(), 1);
        assert_eq!(c.tiers[0][0].message, "m0");
        assert!(c.tiers[1].is_empty());

        // weights 0.4, 0.05, 0.04 over three out-neighbors
        let g = crate::graph::parse_edge_list("a,b\na,c\na,d\n", crate::graph::EdgeListFormat::DIRECTED).unwrap();
        let mut m = vec![vec![0.0; 4]; 4];
        m[0] = vec![0.51, 0.04, 0.4, 0.05];
        let table = InfluenceTable::from_matrix(&g, &m, 2).unwrap();
        let st = states(&scale, &[0.0; 4], 0.5);
        let c = aggregate_messages(&g, 0, &st, &table, &scale);
        let ids = |t: usize| c.tiers[t].iter().map(|e| e.sender_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(0), ["n2"]);
        assert_eq!(ids(1), ["n3", "n1"]);
        assert!((c.tier_weights[1] - 0.09).abs() < 1e-15);
        assert_eq!(c.entries().count(), 3);
    }

    #[test]
    fn fj_examples() {
        let scale = OpinionScale::default();
        let fj = FjOracle::new(scale.clone());
        let leaf = AgentState::new("leaf", 0.0, 0.0, &scale).unwrap();
        let r = fj.update(&leaf, &ctx(vec![entry(0, 1.0, 0.3, &scale)]), call()).unwrap();
        assert_eq!(r.new_opinion, 1.0);

        let a = AgentState::new("a", 0.0, 0.5, &scale).unwrap();
        let r = fj.update(&a, &ctx(vec![entry(1, 0.8, 0.75, &scale), entry(2, -0.4, 0.25, &scale)]), call()).unwrap();
        assert!((r.new_opinion - 0.25).abs() < 1e-15);
        assert_eq!(r.category, scale.categorize(0.25).unwrap());

        let lone = fj.update(&a, &ctx(vec![]), call()).unwrap();
        assert_eq!(lone.new_opinion, 0.0);
    }

    #[test]
    fn fixed_point_both_oracles() {
        let scale = OpinionScale::default();
        let a = AgentState::new("a", 0.3, 0.4, &scale).unwrap();
        let c = ctx(vec![entry(1, 0.3, 0.2, &scale), entry(2, 0.3, 0.7, &scale)]);
        for op in [&FjOracle::new(scale.clone()) as &dyn UpdateOperator, &BcOracle::new(scale.clone(), 0.5)] {
            assert_eq!(op.update(&a, &c, call()).unwrap().new_opinion, 0.3);
        }
    }

    #[test]
    fn bc_ignores_distant_neighbors() {
        let scale = OpinionScale::default();
        let bc = BcOracle::new(scale.clone(), 0.5);
        let a = AgentState::new("a", 0.0, 0.0, &scale).unwrap();
        let r = bc.update(&a, &ctx(vec![entry(1, 0.4, 1.0, &scale), entry(2, -0.9, 5.0, &scale)]), call()).unwrap();
        assert_eq!(r.new_opinion, 0.4);
        let r = bc.update(&a, &ctx(vec![entry(2, -0.9, 5.0, &scale)]), call()).unwrap();
        assert_eq!(r.new_opinion, 0.0);
    }

    #[test]
    fn fj_output_moves_at_most_s_times_input() {
        let scale = OpinionScale::default();
        let fj = FjOracle::new(scale.clone());
        let c = ctx(vec![entry(1, 0.9, 0.6, &scale), entry(2, -0.2, 0.4, &scale)]);
        for s in [0.0, 0.3, 0.8, 1.0] {
            for (x1, x2) in [(-1.0, 1.0), (0.1, 0.15), (-0.4, 0.7)] {
                let u1 = fj.update(&AgentState::new("a", x1, s, &scale).unwrap(), &c, call()).unwrap().new_opinion;
                let u2 = fj.update(&AgentState::new("a", x2, s, &scale).unwrap(), &c, call()).unwrap().new_opinion;
                assert!((u1 - u2).abs() <= s * (x1 - x2).abs() + 1e-15);
            }
        }
    }

    #[test]
    fn uniform_weights_give_plain_average() {
        let scale = OpinionScale::default();
        let g = generate::complete(4);
        let st = states(&scale, &[0.9, -0.3, 0.2, 0.5], 0.25);
        let table = InfluenceTable::uniform(&g, 2);
        let fj = FjOracle::new(scale.clone());
        for i in 0..4 {
            let c = aggregate_messages(&g, i, &st, &table, &scale);
            let got = fj.update(&st[i], &c, call()).unwrap().new_opinion;
            let others: Vec<f64> = (0..4).filter(|&j| j != i).map(|j| st[j].opinion).collect();
            let avg = others.iter().sum::<f64>() / 3.0;
            assert!((got - (0.25 * st[i].opinion + 0.75 * avg)).abs() < 1e-12);
        }
    }

    #[test]
    fn reduced_update_matches_fj_on_midpoint_opinions() {
        let scale = OpinionScale::default();
        let fj = FjOracle::new(scale.clone());
        // neighbors sitting on bin midpoints with equal weights
        let c = ctx(vec![entry(1, 0.8, 1.0, &scale), entry(2, -0.4, 1.0, &scale)]);
        let a = AgentState::new("a", 0.1, 0.3, &scale).unwrap();
        let full = fj.update(&a, &c, call()).unwrap().new_opinion;
        let red = fj.reduced_update(0.1, 0.3, &[0.0, 0.5, 0.0, 0.0, 0.5]).unwrap();
        assert!((full - red).abs() < 1e-15);
        assert!(BcOracle::new(scale, 0.5).reduced_update(0.0, 0.0, &[]).is_none());
    }
}
