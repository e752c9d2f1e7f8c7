//! Macro opinion metrics, run comparison and empirical bound checks.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::config::{Sharing, SimulationConfig};
use crate::coordination::{js_divergence, state_distance, unweighted_distribution, CoordinationPartition, StateVector};
use crate::dynamics::{BoundEnv, Engine, LipschitzConstants, SimError, Trajectory, UpdateOperator};
use crate::graph::SocialGraph;
use crate::opinion::{AgentState, OpinionScale};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no opinions")]
    Empty,
    #[error("graph has no edges")]
    NoEdges,
    #[error("no node has a neighbor")]
    NoNeighbors,
    #[error("trajectories differ: {0}")]
    Mismatch(String),
    #[error("operator {0:?} declares no Lipschitz constants")]
    NoConstants(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Population standard deviation.
pub fn polarization(opinions: &[f64]) -> Result<f64, MetricError> {
    if opinions.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = opinions.len() as f64;
    let mean = opinions.iter().sum::<f64>() / n;
    Ok((opinions.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Mean `|x_i - x_j|` over edges.
pub fn global_disagreement(opinions: &[f64], graph: &SocialGraph) -> Result<f64, MetricError> {
    let edges = graph.edges();
    if edges.is_empty() {
        return Err(MetricError::NoEdges);
    }
    Ok(edges.iter().map(|e| (opinions[e.src] - opinions[e.dst]).abs()).sum::<f64>() / edges.len() as f64)
}

/// Pearson correlation between each node's opinion and its neighbors' mean,
/// over nodes that have neighbors. Zero variance on either side gives 1.
pub fn nci(opinions: &[f64], graph: &SocialGraph) -> Result<f64, MetricError> {
    let pairs: Vec<(f64, f64)> = (0..graph.len())
        .filter(|&i| !graph.neighbors(i).is_empty())
        .map(|i| {
            let nb = graph.neighbors(i);
            (opinions[i], nb.iter().map(|&(j, _)| opinions[j]).sum::<f64>() / nb.len() as f64)
        })
        .collect();
    if pairs.is_empty() {
        return Err(MetricError::NoNeighbors);
    }
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for &(a, b) in &pairs {
        cov += (a - ma) * (b - mb);
        va += (a - ma).powi(2);
        vb += (b - mb).powi(2);
    }
    // relative threshold: round-off on a constant series is not variance
    let tiny = |v: f64, m: f64| v <= 1e-24 * n * m.abs().max(1.0).powi(2);
    if tiny(va, ma) || tiny(vb, mb) {
        return Ok(1.0);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub pol: f64,
    pub gd: f64,
    pub nci: f64,
}

pub fn step_metrics(step: usize, opinions: &[f64], graph: &SocialGraph) -> Result<StepMetrics, MetricError> {
    Ok(StepMetrics {
        step,
        pol: polarization(opinions)?,
        gd: global_disagreement(opinions, graph)?,
        nci: nci(opinions, graph)?,
    })
}

pub fn metrics_series(traj: &Trajectory, graph: &SocialGraph) -> Result<Vec<StepMetrics>, MetricError> {
    traj.records.iter().map(|r| step_metrics(r.step, &r.opinions, graph)).collect()
}

pub fn write_metrics_csv(out: impl Write, series: &[StepMetrics]) -> Result<(), MetricError> {
    let mut w = csv::Writer::from_writer(out);
    for m in series {
        w.serialize(m)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn check_compatible(a: &Trajectory, b: &Trajectory) -> Result<(), MetricError> {
    if a.node_ids != b.node_ids {
        return Err(MetricError::Mismatch("different agents".into()));
    }
    if a.records.len() != b.records.len() {
        return Err(MetricError::Mismatch(format!("{} vs {} steps", a.steps(), b.steps())));
    }
    Ok(())
}

/// `1 - |mean_a(t) - mean_b(t)| / range_width` for every step.
pub fn trajectory_similarity(a: &Trajectory, b: &Trajectory, range_width: f64) -> Result<Vec<f64>, MetricError> {
    check_compatible(a, b)?;
    Ok(a.records
        .iter()
        .zip(&b.records)
        .map(|(ra, rb)| (1.0 - (ra.mean_opinion() - rb.mean_opinion()).abs() / range_width).clamp(0.0, 1.0))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitVariance {
    pub step: usize,
    pub unit: usize,
    pub size: usize,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyDiagnostics {
    /// Per node, mean over steps of `|x_base - x_coord|`.
    pub node_mean_abs_diff: Vec<f64>,
    /// For each step's units in the coordinated run, the population variance
    /// of the members' opinions in the base run at that step.
    pub unit_variance: Vec<UnitVariance>,
}

impl ConsistencyDiagnostics {
    /// Fraction of multi-member units whose base-run variance is below `threshold`.
    pub fn share_below(&self, threshold: f64) -> Option<f64> {
        let multi: Vec<_> = self.unit_variance.iter().filter(|u| u.size > 1).collect();
        if multi.is_empty() {
            return None;
        }
        Some(multi.iter().filter(|u| u.variance < threshold).count() as f64 / multi.len() as f64)
    }
}

pub fn consistency_diagnostics(base: &Trajectory, coord: &Trajectory) -> Result<ConsistencyDiagnostics, MetricError> {
    check_compatible(base, coord)?;
    let n = base.node_ids.len();
    let steps = base.records.len() as f64;
    let mut node_mean_abs_diff = vec![0.0; n];
    for (rb, rc) in base.records.iter().zip(&coord.records) {
        for (i, d) in node_mean_abs_diff.iter_mut().enumerate() {
            *d += (rb.opinions[i] - rc.opinions[i]).abs() / steps;
        }
    }
    let mut unit_variance = Vec::new();
    for (rb, rc) in base.records.iter().zip(&coord.records).skip(1) {
        let units = rc.unit_of.iter().copied().max().map_or(0, |m| m + 1);
        let mut members: Vec<Vec<f64>> = vec![Vec::new(); units];
        for (i, &u) in rc.unit_of.iter().enumerate() {
            members[u].push(rb.opinions[i]);
        }
        for (unit, xs) in members.iter().enumerate().filter(|(_, xs)| !xs.is_empty()) {
            let p = polarization(xs)?;
            unit_variance.push(UnitVariance { step: rc.step, unit, size: xs.len(), variance: p * p });
        }
    }
    Ok(ConsistencyDiagnostics { node_mean_abs_diff, unit_variance })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundDiagnostic {
    pub unit: usize,
    pub size: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub deviation: f64,
    pub bound: f64,
    pub pass: bool,
}

pub const BOUND_SLACK: f64 = 1e-9;

/// Checks the shared-update error of every unit against
/// `L_x * delta_C + L_v * epsilon_C`, using the operator's reduced form on
/// unweighted neighbor category distributions.
pub fn verify_bound(
    graph: &SocialGraph,
    partition: &CoordinationPartition,
    states: &[AgentState],
    operator: &dyn UpdateOperator,
    scale: &OpinionScale,
    sharing: Sharing,
) -> Result<Vec<BoundDiagnostic>, MetricError> {
    let LipschitzConstants { l_x, l_v } = operator
        .lipschitz(&BoundEnv::of(graph, states, scale))
        .ok_or_else(|| MetricError::NoConstants(operator.name().to_string()))?;
    let reduce = |i: usize, dist: &[f64]| {
        operator
            .reduced_update(states[i].opinion, states[i].stubbornness, dist)
            .ok_or_else(|| MetricError::NoConstants(operator.name().to_string()))
    };
    let mut out = Vec::with_capacity(partition.len());
    for (unit, (members, &rep)) in partition.units.iter().zip(&partition.representatives).enumerate() {
        let v_rep = unweighted_distribution(graph, rep, states, scale);
        let sv_rep = StateVector::of(&states[rep], scale);
        let u_rep = reduce(rep, &v_rep)?;
        let (mut delta, mut epsilon, mut deviation) = (0.0f64, 0.0f64, 0.0f64);
        for &m in members {
            let v_m = unweighted_distribution(graph, m, states, scale);
            let truth = reduce(m, &v_m)?;
            let shared = match sharing {
                Sharing::Delta => scale.clamp(states[m].opinion + (u_rep - states[rep].opinion)),
                Sharing::Value => u_rep,
            };
            delta = delta.max(state_distance(StateVector::of(&states[m], scale), sv_rep));
            epsilon = epsilon.max(js_divergence(&v_m, &v_rep));
            deviation = deviation.max((truth - shared).abs());
        }
        let bound = l_x * delta + l_v * epsilon;
        out.push(BoundDiagnostic {
            unit,
            size: members.len(),
            delta,
            epsilon,
            deviation,
            bound,
            pass: deviation <= bound + BOUND_SLACK,
        });
    }
    Ok(out)
}

/// Runs a coordinated simulation and checks the bound on the partition of
/// every step. Returns `(step, diagnostics)` pairs.
pub fn verify_run_bounds(
    config: &SimulationConfig,
    graph: &SocialGraph,
    agents: Vec<AgentState>,
    operator: &dyn UpdateOperator,
) -> Result<Vec<(usize, Vec<BoundDiagnostic>)>, BoundRunError> {
    let mut engine = Engine::new(config, graph, agents, operator)?;
    let mut report = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let partition = engine.partition();
        let diags = verify_bound(graph, &partition, engine.states(), operator, &config.scale, config.sharing)?;
        report.push((engine.step_index() + 1, diags));
        engine.step_with(partition).map_err(|e| BoundRunError::Operator(e.to_string()))?;
    }
    Ok(report)
}

#[derive(Debug, Error)]
pub enum BoundRunError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("operator: {0}")]
    Operator(String),
}

pub fn write_bound_csv<'a>(
    out: impl Write,
    rows: impl IntoIterator<Item = (usize, &'a BoundDiagnostic)>,
) -> Result<(), MetricError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "unit", "size", "delta", "epsilon", "deviation", "bound", "pass"])?;
    for (step, d) in rows {
        w.write_record([
            step.to_string(),
            d.unit.to_string(),
            d.size.to_string(),
            d.delta.to_string(),
            d.epsilon.to_string(),
            d.deviation.to_string(),
            d.bound.to_string(),
            d.pass.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;
    use crate::dynamics::{run_simulation, FjOracle, LlmOperator};
    use crate::generate::{self, generate_agents, generate_graph, AgentGenParams, GraphModel};
    use crate::graph::{parse_edge_list, EdgeListFormat};
    use proptest::prelude::*;

    #[test]
    fn polarization_examples() {
        assert_eq!(polarization(&[0.3; 4]).unwrap(), 0.0);
        assert_eq!(polarization(&[-1.0, 1.0]).unwrap(), 1.0);
        assert!(polarization(&[]).is_err());
    }

    #[test]
    fn gd_examples() {
        let single = parse_edge_list("a,b\n", EdgeListFormat::UNDIRECTED).unwrap();
        assert_eq!(global_disagreement(&[-1.0, 1.0], &single).unwrap(), 2.0);
        assert_eq!(global_disagreement(&[0.2, 0.2], &single).unwrap(), 0.0);
        let tri = generate::complete(3);
        assert!((global_disagreement(&[-1.0, 0.0, 1.0], &tri).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        let lonely = parse_edge_list("@node a\n", EdgeListFormat::DIRECTED).unwrap();
        assert!(global_disagreement(&[0.0], &lonely).is_err());
    }

    #[test]
    fn nci_examples() {
        let pairs = parse_edge_list("a,b\nc,d\n", EdgeListFormat::UNDIRECTED).unwrap();
        assert_eq!(nci(&[1.0, 1.0, -1.0, -1.0], &pairs).unwrap(), 1.0);
        assert_eq!(nci(&[0.4; 4], &pairs).unwrap(), 1.0);
        let cyc = generate::cycle(6);
        let alternating = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        assert!((nci(&alternating, &cyc).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_and_consistency() {
        let scale = OpinionScale::default();
        let g = generate_graph(GraphModel::SmallWorld { k: 4, p: 0.1 }, 30, 2).unwrap();
        let agents: Vec<_> = generate_agents(&g, &scale, &AgentGenParams::default(), 1)
            .unwrap()
            .into_iter()
            .map(|p| p.into_state(&scale).unwrap())
            .collect();
        let fj = FjOracle::new(scale.clone());
        let config = SimulationConfig { steps: 3, ..Default::default() };
        let a = run_simulation(&config, &g, agents, &fj).unwrap();
        assert!(trajectory_similarity(&a, &a, 2.0).unwrap().iter().all(|&s| s == 1.0));
        let diag = consistency_diagnostics(&a, &a).unwrap();
        assert!(diag.node_mean_abs_diff.iter().all(|&d| d == 0.0));

        let mut b = a.clone();
        for x in &mut b.records[1].opinions {
            *x += 1.0;
        }
        assert_eq!(trajectory_similarity(&a, &b, 2.0).unwrap()[1], 0.5);
        let mut short = a.clone();
        short.records.pop();
        assert!(trajectory_similarity(&a, &short, 2.0).is_err());
    }

    #[test]
    fn similarity_means_arithmetic() {
        let mut a = Trajectory {
            config: SimulationConfig::default(),
            node_ids: vec!["x".into()],
            records: vec![],
            ledger: Default::default(),
        };
        let scale = OpinionScale::default();
        let st = [AgentState::new("x", -0.2, 0.5, &scale).unwrap()];
        a.records.push(crate::dynamics::StepRecord::capture(0, &st, &CoordinationPartition::singletons(1)));
        let mut b = a.clone();
        b.records[0].opinions[0] = 0.3;
        assert!((trajectory_similarity(&a, &b, 2.0).unwrap()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn identical_members_have_zero_variance() {
        let mut a = Trajectory {
            config: SimulationConfig::default(),
            node_ids: vec!["x".into(), "y".into()],
            records: vec![],
            ledger: Default::default(),
        };
        let scale = OpinionScale::default();
        let st = [AgentState::new("x", 0.1, 0.5, &scale).unwrap(), AgentState::new("y", 0.1, 0.5, &scale).unwrap()];
        let mut kappa = crate::coordination::KappaTable::new();
        kappa.insert(0, 1, 1.0);
        let p = CoordinationPartition::from_units(vec![vec![0, 1]], kappa, &[1.0, 1.0], 0.5);
        a.records.push(crate::dynamics::StepRecord::capture(0, &st, &p));
        a.records.push(crate::dynamics::StepRecord::capture(1, &st, &p));
        let d = consistency_diagnostics(&a, &a).unwrap();
        assert_eq!(d.unit_variance, vec![UnitVariance { step: 1, unit: 0, size: 2, variance: 0.0 }]);
        assert_eq!(d.share_below(0.25), Some(1.0));
    }

    #[test]
    fn bound_trivial_cases() {
        let scale = OpinionScale::default();
        let g = generate::cycle(6);
        let states: Vec<_> = (0..6).map(|i| AgentState::new(format!("n{i}"), 0.2, 0.4, &scale).unwrap()).collect();
        let fj = FjOracle::new(scale.clone());
        let single = verify_bound(&g, &CoordinationPartition::singletons(6), &states, &fj, &scale, Sharing::Delta).unwrap();
        assert!(single.iter().all(|d| d.delta == 0.0 && d.epsilon == 0.0 && d.deviation == 0.0 && d.bound == 0.0));

        let mut kappa = crate::coordination::KappaTable::new();
        for i in 0..6 {
            for j in (i + 1)..6 {
                kappa.insert(i, j, 1.0);
            }
        }
        let p = CoordinationPartition::from_units(vec![(0..6).collect()], kappa, &[1.0; 6], 0.5);
        let d = verify_bound(&g, &p, &states, &fj, &scale, Sharing::Delta).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].deviation, 0.0);
        assert!(d[0].pass);
    }

    #[test]
    fn llm_operator_has_no_constants() {
        let scale = OpinionScale::default();
        let client = std::sync::Arc::new(crate::llm::ChatClient::new(
            Box::new(crate::llm::MockTransport::canned("{}")),
            Default::default(),
            crate::llm::RateLimiter::unlimited(),
        ));
        let op = LlmOperator::new(client, &Default::default(), scale.clone());
        let g = generate::cycle(3);
        let states: Vec<_> = (0..3).map(|i| AgentState::new(format!("n{i}"), 0.0, 0.4, &scale).unwrap()).collect();
        let r = verify_bound(&g, &CoordinationPartition::singletons(3), &states, &op, &scale, Sharing::Delta);
        assert!(matches!(r, Err(MetricError::NoConstants(_))));
    }

    #[test]
    fn coordinated_run_bounds_hold() {
        let scale = OpinionScale::default();
        let g = generate_graph(GraphModel::SmallWorld { k: 4, p: 0.1 }, 50, 3).unwrap();
        let agents: Vec<_> = generate_agents(&g, &scale, &AgentGenParams::default(), 3)
            .unwrap()
            .into_iter()
            .map(|p| p.into_state(&scale).unwrap())
            .collect();
        let fj = FjOracle::new(scale.clone());
        for sharing in [Sharing::Delta, Sharing::Value] {
            let config = SimulationConfig { steps: 5, mode: Mode::Coordinated, sharing, ..Default::default() };
            let report = verify_run_bounds(&config, &g, agents.clone(), &fj).unwrap();
            assert!(report.iter().flat_map(|(_, d)| d).all(|d| d.pass));
        }
    }

    #[test]
    fn bound_csv_layout() {
        let d = BoundDiagnostic { unit: 2, size: 3, delta: 0.5, epsilon: 0.25, deviation: 0.1, bound: 1.0, pass: true };
        let mut buf = Vec::new();
        write_bound_csv(&mut buf, [(1, &d)]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,unit,size,delta,epsilon,deviation,bound,pass\n1,2,3,0.5,0.25,0.1,1,true\n"
        );
    }

    proptest! {
        #[test]
        fn metric_invariances(xs in proptest::collection::vec(-1.0f64..1.0, 8), shift in -0.5f64..0.5, scale in 0.1f64..3.0) {
            let g = generate::cycle(8);
            let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            let scaled: Vec<f64> = xs.iter().map(|x| x * scale).collect();
            let p = polarization(&xs).unwrap();
            prop_assert!((polarization(&shifted).unwrap() - p).abs() < 1e-12);
            prop_assert!((polarization(&scaled).unwrap() - scale * p).abs() < 1e-12);
            let gd = global_disagreement(&xs, &g).unwrap();
            prop_assert!((global_disagreement(&shifted, &g).unwrap() - gd).abs() < 1e-12);
            let c = nci(&xs, &g).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
            let affine: Vec<f64> = xs.iter().map(|x| x * scale + shift).collect();
            prop_assert!((nci(&affine, &g).unwrap() - c).abs() < 1e-9);
        }
    }
}
