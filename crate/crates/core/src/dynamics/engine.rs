//! Synchronous stepping: every agent reads the step-t snapshot and the
//! results form the step-(t+1) snapshot.

use rayon::prelude::*;
use thiserror::Error;

use super::{aggregate_messages, CallInfo, OperatorError, StepRecord, Trajectory, UpdateOperator, UpdateResult};
use crate::config::{ConfigError, Sharing, SimulationConfig};
use crate::coordination::{build_partition, CoordinationPartition};
use crate::embed::{candidate_pairs, compute_signatures, Signatures};
use crate::graph::SocialGraph;
use crate::influence::{InfluenceError, InfluenceTable};
use crate::llm::{TokenLedger, TokenUsage};
use crate::opinion::{AgentState, OpinionScale};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("influence: {0}")]
    Influence(#[from] InfluenceError),
    #[error("input: {0}")]
    Input(String),
    #[error("run aborted at step {step}: {source}")]
    Aborted {
        step: usize,
        source: OperatorError,
        partial: Box<Trajectory>,
    },
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one operator call, independent of execution order.
pub fn call_seed(run_seed: u64, step: usize, node: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(run_seed) ^ step as u64) ^ node as u64)
}

/// Read-only inputs shared by every update in a step.
#[derive(Clone, Copy)]
pub struct StepEnv<'a> {
    pub graph: &'a SocialGraph,
    pub influence: &'a InfluenceTable,
    pub operator: &'a dyn UpdateOperator,
    pub scale: &'a OpinionScale,
    pub seed: u64,
    /// Index of the step being computed (the first transition is step 1).
    pub step: usize,
    pub buffer_capacity: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub states: Vec<AgentState>,
    pub invocations: usize,
    pub failures: usize,
    pub usage: Vec<TokenUsage>,
}

fn invoke(states: &[AgentState], env: &StepEnv, node: usize) -> Result<UpdateResult, OperatorError> {
    let ctx = aggregate_messages(env.graph, node, states, env.influence, env.scale);
    let call = CallInfo { step: env.step, node, seed: call_seed(env.seed, env.step, node) };
    env.operator.update(&states[node], &ctx, call)
}

fn apply_own(next: &mut AgentState, r: &UpdateResult, scale: &OpinionScale) {
    next.set_opinion(r.new_opinion, scale);
    next.message.clone_from(&r.new_message);
    if let Some(s) = r.new_stubbornness.filter(|s| (0.0..=1.0).contains(s)) {
        next.stubbornness = s;
    }
}

/// Splits invocation outcomes into usage and failures; a fatal error wins.
fn tally(
    outcomes: &[(usize, Result<UpdateResult, OperatorError>)],
) -> Result<(usize, Vec<TokenUsage>), OperatorError> {
    let mut failures = 0;
    let mut usage = Vec::new();
    for (node, r) in outcomes {
        match r {
            Ok(u) => usage.extend(u.usage),
            Err(OperatorError::Fatal(msg)) => return Err(OperatorError::Fatal(format!("node {node}: {msg}"))),
            Err(OperatorError::Transient { msg, usage: u }) => {
                log::warn!("keeping previous state: {msg}");
                failures += 1;
                if u.total() > 0 {
                    usage.push(*u);
                }
            }
        }
    }
    Ok((failures, usage))
}

fn deliver_messages(states: &[AgentState], next: &mut [AgentState], graph: &SocialGraph, capacity: usize) {
    if capacity == 0 {
        return;
    }
    for (i, agent) in next.iter_mut().enumerate() {
        for &(j, _) in graph.neighbors(i) {
            let msg = states[j].message.trim();
            if !msg.is_empty() {
                agent.push_received(format!("{}: {msg}", states[j].id), capacity);
            }
        }
    }
}

fn finish_full(
    states: &[AgentState],
    env: &StepEnv,
    outcomes: Vec<(usize, Result<UpdateResult, OperatorError>)>,
) -> Result<StepOutput, OperatorError> {
    let (failures, usage) = tally(&outcomes)?;
    let mut next = states.to_vec();
    for (node, r) in &outcomes {
        if let Ok(r) = r {
            apply_own(&mut next[*node], r, env.scale);
        }
    }
    deliver_messages(states, &mut next, env.graph, env.buffer_capacity);
    Ok(StepOutput { states: next, invocations: outcomes.len(), failures, usage })
}

/// One invocation per agent, evaluated in parallel.
pub fn step_full(states: &[AgentState], env: &StepEnv) -> Result<StepOutput, OperatorError> {
    let outcomes = (0..states.len()).into_par_iter().map(|i| (i, invoke(states, env, i))).collect();
    finish_full(states, env, outcomes)
}

/// Same as [`step_full`] but evaluated sequentially in the given order.
pub fn step_full_in_order(states: &[AgentState], env: &StepEnv, order: &[usize]) -> Result<StepOutput, OperatorError> {
    let mut outcomes: Vec<_> = order.iter().map(|&i| (i, invoke(states, env, i))).collect();
    outcomes.sort_by_key(|(i, _)| *i);
    finish_full(states, env, outcomes)
}

/// One invocation per unit on its representative; the result is shared with
/// every member according to `sharing`.
pub fn step_coordinated(
    states: &[AgentState],
    env: &StepEnv,
    partition: &CoordinationPartition,
    sharing: Sharing,
) -> Result<StepOutput, OperatorError> {
    let outcomes: Vec<_> = partition
        .representatives
        .par_iter()
        .map(|&r| (r, invoke(states, env, r)))
        .collect();
    let (failures, usage) = tally(&outcomes)?;
    let mut next = states.to_vec();
    for (unit, (rep, outcome)) in partition.units.iter().zip(&outcomes) {
        let Ok(r) = outcome else { continue };
        let delta = r.new_opinion - states[*rep].opinion;
        for &m in unit {
            if m == *rep {
                apply_own(&mut next[m], r, env.scale);
                continue;
            }
            let value = match sharing {
                Sharing::Delta => states[m].opinion + delta,
                Sharing::Value => r.new_opinion,
            };
            next[m].set_opinion(value, env.scale);
            next[m].message.clone_from(&r.new_message);
        }
    }
    deliver_messages(states, &mut next, env.graph, env.buffer_capacity);
    Ok(StepOutput { states: next, invocations: outcomes.len(), failures, usage })
}

/// Optional precomputed inputs; anything absent is derived from the graph.
#[derive(Debug, Clone, Default)]
pub struct EngineInputs {
    pub signatures: Option<Signatures>,
    pub ppr: Option<Vec<Vec<f64>>>,
}

/// Holds the evolving population and the per-run caches.
pub struct Engine<'a> {
    graph: &'a SocialGraph,
    operator: &'a dyn UpdateOperator,
    config: SimulationConfig,
    ppr: Option<InfluenceTable>,
    aggregation: InfluenceTable,
    candidates: Vec<(usize, usize)>,
    states: Vec<AgentState>,
    step: usize,
    pool: Option<rayon::ThreadPool>,
    last_usage: Vec<TokenUsage>,
}

impl<'a> Engine<'a> {
    pub fn new(
        config: &SimulationConfig,
        graph: &'a SocialGraph,
        agents: Vec<AgentState>,
        operator: &'a dyn UpdateOperator,
    ) -> Result<Self, SimError> {
        Self::with_inputs(config, graph, agents, operator, EngineInputs::default())
    }

    pub fn with_inputs(
        config: &SimulationConfig,
        graph: &'a SocialGraph,
        agents: Vec<AgentState>,
        operator: &'a dyn UpdateOperator,
        inputs: EngineInputs,
    ) -> Result<Self, SimError> {
        config.validate()?;
        if agents.len() != graph.len() {
            return Err(SimError::Input(format!("{} agents for {} nodes", agents.len(), graph.len())));
        }
        if let Some((i, a)) = agents.iter().enumerate().find(|(i, a)| a.id != graph.node_id(*i)) {
            return Err(SimError::Input(format!("agent {:?} at index {i} does not match node {:?}", a.id, graph.node_id(i))));
        }
        let mode = config.mode;
        let ppr = if mode.coordinated() || mode.role_differentiated() {
            Some(match &inputs.ppr {
                Some(m) => InfluenceTable::from_matrix(graph, m, config.num_tiers)?,
                None => InfluenceTable::from_ppr(graph, &config.ppr, config.num_tiers)?,
            })
        } else {
            None
        };
        let aggregation = match (&ppr, mode.role_differentiated()) {
            (Some(t), true) => t.clone(),
            _ => InfluenceTable::uniform(graph, config.num_tiers),
        };
        let candidates = if mode.coordinated() {
            let sigs = match inputs.signatures {
                Some(s) if s.len() == graph.len() => s,
                Some(s) => return Err(SimError::Input(format!("{} signatures for {} nodes", s.len(), graph.len()))),
                None => compute_signatures(graph, config.max_hop),
            };
            candidate_pairs(&sigs, config.gamma)
        } else {
            Vec::new()
        };
        let pool = match operator.max_concurrency() {
            Some(n) => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| SimError::Input(format!("thread pool: {e}")))?,
            ),
            None => None,
        };
        Ok(Self { graph, operator, config: config.clone(), ppr, aggregation, candidates, states: agents, step: 0, pool, last_usage: Vec::new() })
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    pub fn candidates(&self) -> &[(usize, usize)] {
        &self.candidates
    }

    /// PPR table; present in every mode except `full`.
    /// Usage of each invocation in the most recent step.
    pub fn last_usage(&self) -> &[TokenUsage] {
        &self.last_usage
    }

    pub fn ppr(&self) -> Option<&InfluenceTable> {
        self.ppr.as_ref()
    }

    /// Units for the current states (singletons unless coordinating).
    pub fn partition(&self) -> CoordinationPartition {
        match (&self.ppr, self.config.mode.coordinated()) {
            (Some(ppr), true) => build_partition(
                self.graph,
                &self.states,
                &self.candidates,
                &|i| ppr.neighbor_weights(i).to_vec(),
                ppr.global(),
                &self.config.scale,
                self.config.coordination(),
            ),
            _ => CoordinationPartition::singletons(self.graph.len()),
        }
    }

    /// Advances one step and returns its record.
    pub fn step(&mut self) -> Result<StepRecord, OperatorError> {
        let partition = self.partition();
        self.step_with(partition)
    }

    /// Advances one step with a caller-supplied partition.
    pub fn step_with(&mut self, partition: CoordinationPartition) -> Result<StepRecord, OperatorError> {
        let env = StepEnv {
            graph: self.graph,
            influence: &self.aggregation,
            operator: self.operator,
            scale: &self.config.scale,
            seed: self.config.seed,
            step: self.step + 1,
            buffer_capacity: self.config.buffer_capacity,
        };
        let coordinated = self.config.mode.coordinated();
        let sharing = self.config.sharing;
        let states = &self.states;
        let run = || {
            if coordinated {
                step_coordinated(states, &env, &partition, sharing)
            } else {
                step_full(states, &env)
            }
        };
        let out = match &self.pool {
            Some(pool) => pool.install(run),
            None => run(),
        }?;
        self.step += 1;
        self.states = out.states;
        let mut rec = StepRecord::capture(self.step, &self.states, &partition);
        rec.invocations = out.invocations;
        rec.failures = out.failures;
        for u in &out.usage {
            rec.usage += *u;
        }
        rec.units = partition.len();
        self.last_usage = out.usage;
        Ok(rec)
    }
}

/// Runs `config.steps` steps from the given agents.
pub fn run_simulation(
    config: &SimulationConfig,
    graph: &SocialGraph,
    agents: Vec<AgentState>,
    operator: &dyn UpdateOperator,
) -> Result<Trajectory, SimError> {
    run_simulation_with(config, graph, agents, operator, EngineInputs::default())
}

pub fn run_simulation_with(
    config: &SimulationConfig,
    graph: &SocialGraph,
    agents: Vec<AgentState>,
    operator: &dyn UpdateOperator,
    inputs: EngineInputs,
) -> Result<Trajectory, SimError> {
    let mut engine = Engine::with_inputs(config, graph, agents, operator, inputs)?;
    let n = graph.len();
    let mut traj = Trajectory {
        config: config.clone(),
        node_ids: graph.node_ids().to_vec(),
        records: vec![StepRecord::capture(0, engine.states(), &CoordinationPartition::singletons(n))],
        ledger: TokenLedger::default(),
    };
    for _ in 0..config.steps {
        match engine.step() {
            Ok(rec) => {
                for u in engine.last_usage() {
                    traj.ledger.record(rec.step, config.mode.as_str(), *u);
                }
                log::debug!("step {}: {} invocations, {} units", rec.step, rec.invocations, rec.units);
                traj.records.push(rec);
            }
            Err(source) => {
                let step = engine.step_index() + 1;
                log::error!("aborting at step {step}: {source}");
                return Err(SimError::Aborted { step, source, partial: Box::new(traj) });
            }
        }
    }
    Ok(traj)
}
