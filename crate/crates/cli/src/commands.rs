use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use netsim_core::config::{OperatorKind, SimulationConfig};
use netsim_core::dynamics::{
    mock_responder, run_simulation_with, BcOracle, EngineInputs, FjOracle, LlmOperator, SimError, Trajectory,
    UpdateOperator,
};
use netsim_core::generate::{generate_agents, generate_graph, AgentGenParams, GraphModel};
use netsim_core::graph::{load_graph, write_edge_list, EdgeListFormat, SocialGraph};
use netsim_core::influence::{influence_tiers, ppr_matrix, read_ppr_csv, write_ppr_csv, InfluenceTable};
use netsim_core::llm::{
    token_savings, ChatClient, ChatTransport, EndpointConfig, HttpTransport, MockTransport, RateLimiter,
};
use netsim_core::metrics::{
    consistency_diagnostics, metrics_series, trajectory_similarity, verify_run_bounds, write_bound_csv,
    write_metrics_csv, BoundRunError, MetricError, StepMetrics,
};
use netsim_core::opinion::{load_agents, write_profiles, AgentState, OpinionScale};

use crate::error::{config, input, other, CliError};
use crate::manifest::{
    digest_file, read_manifest, tool_version, unix_now, verify_digest, FileDigest, OutDir, RunManifest, RunStatus,
    MANIFEST,
};
use crate::settings::RunFile;

pub const TRAJECTORY: &str = "trajectory.csv";
pub const METRICS: &str = "metrics.csv";

struct Inputs {
    graph: SocialGraph,
    agents: Vec<AgentState>,
    ppr: Option<Vec<Vec<f64>>>,
    digests: BTreeMap<String, FileDigest>,
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| config(format!("{key} is not set (use --{} or the run file)", key.trim_start_matches("input."))))
}

fn edge_format(run: &RunFile) -> EdgeListFormat {
    EdgeListFormat { directed: run.input.directed }
}

fn read_graph(run: &RunFile) -> Result<(SocialGraph, FileDigest), CliError> {
    let path = required(&run.input.graph, "input.graph")?;
    let graph = load_graph(path, edge_format(run)).map_err(input)?;
    if graph.is_empty() {
        return Err(input(format!("{}: graph has no nodes", path.display())));
    }
    Ok((graph, digest_file(path)?))
}

fn read_inputs(run: &RunFile) -> Result<Inputs, CliError> {
    let (graph, gd) = read_graph(run)?;
    let mut digests = BTreeMap::from([("graph".to_string(), gd)]);
    let agents_path = required(&run.input.agents, "input.agents")?;
    let agents = load_agents(agents_path, &graph, &run.simulation.scale).map_err(input)?;
    digests.insert("agents".into(), digest_file(agents_path)?);
    let ppr = match &run.input.ppr {
        Some(p) => {
            let f = std::fs::File::open(p).map_err(|e| input(format!("{}: {e}", p.display())))?;
            let m = read_ppr_csv(BufReader::new(f), &graph).map_err(input)?;
            digests.insert("ppr".into(), digest_file(p)?);
            Some(m)
        }
        None => None,
    };
    Ok(Inputs { graph, agents, ppr, digests })
}

fn build_operator(cfg: &SimulationConfig) -> Result<Box<dyn UpdateOperator>, CliError> {
    let scale = cfg.scale.clone();
    let llm = &cfg.llm;
    let transport: Box<dyn ChatTransport> = match cfg.operator {
        OperatorKind::Fj => return Ok(Box::new(FjOracle::new(scale))),
        OperatorKind::Bc => return Ok(Box::new(BcOracle::new(scale, cfg.bc_epsilon))),
        OperatorKind::MockLlm => Box::new(MockTransport::new(mock_responder(scale.clone()))),
        OperatorKind::Llm => {
            let endpoint = EndpointConfig::from_env(
                &llm.base_url_env,
                &llm.api_key_env,
                &llm.default_base_url,
                Duration::from_secs(llm.timeout_secs),
            );
            if endpoint.api_key.is_none() && std::env::var(&llm.base_url_env).is_err() {
                return Err(config(format!(
                    "operator llm needs {} (or {} pointing at a keyless endpoint)",
                    llm.api_key_env, llm.base_url_env
                )));
            }
            Box::new(HttpTransport::new(&endpoint).map_err(config)?)
        }
    };
    let client = ChatClient::new(transport, llm.retry, RateLimiter::new(llm.max_concurrency, llm.requests_per_minute))
        .with_mode_label(cfg.mode.as_str());
    Ok(Box::new(LlmOperator::new(Arc::new(client), llm, scale)))
}

fn metric_err(e: MetricError) -> CliError {
    match e {
        MetricError::Csv(e) => other(e),
        e => input(e),
    }
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> Result<(), CliError>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

pub fn simulate(run: RunFile, out: &Path, force: bool) -> Result<(), CliError> {
    let started = unix_now();
    let inputs = read_inputs(&run)?;
    let operator = build_operator(&run.simulation)?;
    let dir = OutDir::prepare(out, &[TRAJECTORY, METRICS, MANIFEST], force)?;
    let engine_inputs = EngineInputs { signatures: None, ppr: inputs.ppr.clone() };
    let cfg = &run.simulation;
    let (traj, status) =
        match run_simulation_with(cfg, &inputs.graph, inputs.agents.clone(), operator.as_ref(), engine_inputs) {
            Ok(t) => (t, RunStatus::Complete),
            Err(SimError::Aborted { step, source, partial }) => {
                (*partial, RunStatus::Aborted { step, error: source.to_string() })
            }
            Err(SimError::Config(e)) => return Err(config(e)),
            Err(e @ SimError::Input(_)) => return Err(input(e)),
            Err(e) => return Err(other(e)),
        };
    let series = metrics_series(&traj, &inputs.graph).map_err(metric_err)?;
    let traj_bytes = csv_bytes(|b| traj.write_csv(b).map_err(other))?;
    let metric_bytes = csv_bytes(|b| write_metrics_csv(b, &series).map_err(metric_err))?;
    let mut outputs = BTreeMap::new();
    outputs.insert("trajectory".to_string(), dir.write(TRAJECTORY, &traj_bytes)?);
    outputs.insert("metrics".to_string(), dir.write(METRICS, &metric_bytes)?);
    let manifest = RunManifest {
        tool: tool_version(),
        status: status.clone(),
        seed: cfg.seed,
        mode: cfg.mode,
        operator: cfg.operator,
        run: run.clone(),
        inputs: inputs.digests,
        outputs,
        started_unix: started,
        finished_unix: unix_now(),
        summary: traj.summary(),
    };
    dir.write_json(MANIFEST, &manifest)?;

    let last = traj.final_record();
    let fin = series.last().expect("series covers step 0");
    println!(
        "{} steps, {} agents, {} invocations ({} units at the last step), {} tokens; final Pol {:.4} GD {:.4} NCI {:.4}",
        traj.steps(),
        traj.node_ids.len(),
        traj.total_invocations(),
        last.units,
        traj.ledger.total_tokens(),
        fin.pol,
        fin.gd,
        fin.nci
    );
    match status {
        RunStatus::Complete => Ok(()),
        RunStatus::Aborted { step, error } => {
            Err(CliError::Operator(format!("run aborted at step {step} ({error}); partial trajectory written")))
        }
    }
}

/// Re-runs a recorded simulation after checking that its inputs are unchanged.
pub fn simulate_from_manifest(path: &Path, out: &Path, force: bool) -> Result<(), CliError> {
    let (m, _) = read_manifest(path)?;
    let mut run = m.run;
    for (key, d) in &m.inputs {
        verify_digest(d)?;
        let slot = match key.as_str() {
            "graph" => &mut run.input.graph,
            "agents" => &mut run.input.agents,
            "ppr" => &mut run.input.ppr,
            other_key => return Err(input(format!("manifest lists unknown input {other_key:?}"))),
        };
        *slot = Some(d.path.clone());
    }
    simulate(run, out, force)
}

fn load_run(dir: &Path) -> Result<(RunManifest, Trajectory), CliError> {
    let (m, base) = read_manifest(dir)?;
    let csv_path = m.outputs.get("trajectory").map_or_else(|| base.join(TRAJECTORY), |d| d.path.clone());
    let csv_path = if csv_path.exists() { csv_path } else { base.join(TRAJECTORY) };
    let f = std::fs::File::open(&csv_path).map_err(|e| input(format!("{}: {e}", csv_path.display())))?;
    let traj = Trajectory::from_parts(BufReader::new(f), &m.summary).map_err(input)?;
    Ok((m, traj))
}

#[derive(Serialize)]
struct CompareRow {
    step: usize,
    pol_a: f64,
    pol_b: f64,
    gd_a: f64,
    gd_b: f64,
    nci_a: f64,
    nci_b: f64,
    d_pol: f64,
    d_gd: f64,
    d_nci: f64,
    similarity: f64,
}

#[derive(Serialize)]
struct CompareReport {
    run_a: PathBuf,
    run_b: PathBuf,
    steps: usize,
    final_abs_d_pol: f64,
    final_abs_d_gd: f64,
    final_abs_d_nci: f64,
    min_similarity: f64,
    mean_similarity: f64,
    units_below_0_25: Option<f64>,
    invocations_a: usize,
    invocations_b: usize,
    tokens_a: u64,
    tokens_b: u64,
    token_savings_percent: Option<f64>,
}

const UNIT_VARIANCE_THRESHOLD: f64 = 0.25;

/// Compares run `b` against baseline `a`. Units come from `b`.
pub fn compare(a: &Path, b: &Path, out: &Path, force: bool) -> Result<(), CliError> {
    let (ma, ta) = load_run(a)?;
    let (_, tb) = load_run(b)?;
    let gd = ma.inputs.get("graph").ok_or_else(|| input("run A manifest records no graph"))?;
    verify_digest(gd)?;
    let graph = load_graph(&gd.path, edge_format(&ma.run)).map_err(input)?;
    let sa = metrics_series(&ta, &graph).map_err(metric_err)?;
    let sb = metrics_series(&tb, &graph).map_err(metric_err)?;
    let sim = trajectory_similarity(&ta, &tb, ma.run.simulation.scale.width()).map_err(metric_err)?;
    let diag = consistency_diagnostics(&ta, &tb).map_err(metric_err)?;

    let rows: Vec<CompareRow> = sa
        .iter()
        .zip(&sb)
        .zip(&sim)
        .map(|((x, y), &s): ((&StepMetrics, &StepMetrics), &f64)| CompareRow {
            step: x.step,
            pol_a: x.pol,
            pol_b: y.pol,
            gd_a: x.gd,
            gd_b: y.gd,
            nci_a: x.nci,
            nci_b: y.nci,
            d_pol: y.pol - x.pol,
            d_gd: y.gd - x.gd,
            d_nci: y.nci - x.nci,
            similarity: s,
        })
        .collect();
    let dir = OutDir::prepare(out, &["comparison.csv", "node_diff.csv", "unit_variance.csv", "report.json"], force)?;
    let serialize_all = |items: &mut dyn Iterator<Item = Result<(), csv::Error>>| items.collect::<Result<(), _>>();
    let mut w = csv::Writer::from_writer(Vec::new());
    serialize_all(&mut rows.iter().map(|r| w.serialize(r))).map_err(other)?;
    dir.write("comparison.csv", &w.into_inner().map_err(other)?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["agent_id", "mean_abs_diff"]).map_err(other)?;
    for (id, d) in ta.node_ids.iter().zip(&diag.node_mean_abs_diff) {
        w.write_record([id.clone(), d.to_string()]).map_err(other)?;
    }
    dir.write("node_diff.csv", &w.into_inner().map_err(other)?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    serialize_all(&mut diag.unit_variance.iter().map(|u| w.serialize(u))).map_err(other)?;
    dir.write("unit_variance.csv", &w.into_inner().map_err(other)?)?;

    let last = rows.last().expect("series covers step 0");
    let report = CompareReport {
        run_a: a.to_path_buf(),
        run_b: b.to_path_buf(),
        steps: ta.steps(),
        final_abs_d_pol: last.d_pol.abs(),
        final_abs_d_gd: last.d_gd.abs(),
        final_abs_d_nci: last.d_nci.abs(),
        min_similarity: sim.iter().copied().fold(f64::INFINITY, f64::min),
        mean_similarity: sim.iter().sum::<f64>() / sim.len() as f64,
        units_below_0_25: diag.share_below(UNIT_VARIANCE_THRESHOLD),
        invocations_a: ta.total_invocations(),
        invocations_b: tb.total_invocations(),
        tokens_a: ta.ledger.total_tokens(),
        tokens_b: tb.ledger.total_tokens(),
        token_savings_percent: token_savings(&ta.ledger, &tb.ledger).ok(),
    };
    dir.write_json("report.json", &report)?;
    let pct = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}%"));
    println!(
        "final |dPol| {:.4} |dGD| {:.4} |dNCI| {:.4}; similarity min {:.4}; units below {UNIT_VARIANCE_THRESHOLD}: {}; invocations {} vs {}; token savings {}",
        report.final_abs_d_pol,
        report.final_abs_d_gd,
        report.final_abs_d_nci,
        report.min_similarity,
        pct(report.units_below_0_25.map(|s| s * 100.0)),
        report.invocations_a,
        report.invocations_b,
        pct(report.token_savings_percent),
    );
    Ok(())
}

pub fn verify_bound(run: RunFile, out: &Path, force: bool) -> Result<(), CliError> {
    let cfg = &run.simulation;
    if !matches!(cfg.operator, OperatorKind::Fj | OperatorKind::Bc) {
        return Err(config("bound checking needs a deterministic oracle operator (fj or bc)"));
    }
    if !cfg.mode.coordinated() {
        return Err(config("bound checking needs mode coordinated or hybrid"));
    }
    let inputs = read_inputs(&run)?;
    let operator = build_operator(cfg)?;
    let dir = OutDir::prepare(out, &["bound.csv"], force)?;
    let report = verify_run_bounds(cfg, &inputs.graph, inputs.agents, operator.as_ref()).map_err(|e| match e {
        BoundRunError::Sim(SimError::Config(e)) => config(e),
        BoundRunError::Operator(e) => CliError::Operator(e),
        e => input(e),
    })?;
    let rows: Vec<_> = report.iter().flat_map(|(s, ds)| ds.iter().map(move |d| (*s, d))).collect();
    let bytes = csv_bytes(|b| write_bound_csv(b, rows.iter().copied()).map_err(metric_err))?;
    dir.write("bound.csv", &bytes)?;
    let multi = rows.iter().filter(|(_, d)| d.size > 1).count();
    let violations = rows.iter().filter(|(_, d)| !d.pass).count();
    println!("{} units checked over {} steps ({multi} multi-member), {violations} violations", rows.len(), report.len());
    if violations > 0 {
        return Err(other(format!("{violations} units exceed the bound")));
    }
    Ok(())
}

pub fn ppr_dump(run: RunFile, out: &Path, force: bool) -> Result<(), CliError> {
    let (graph, _) = read_graph(&run)?;
    let cfg = &run.simulation;
    let dir = OutDir::prepare(out, &["ppr.csv", "influence.csv"], force)?;
    let matrix = ppr_matrix(&graph, &cfg.ppr).map_err(input)?;
    let table = InfluenceTable::from_matrix(&graph, &matrix, cfg.num_tiers).map_err(input)?;
    let tiers = influence_tiers(table.global(), cfg.num_tiers);
    let mut buf = Vec::new();
    write_ppr_csv(&mut buf, &graph, &matrix).map_err(other)?;
    dir.write("ppr.csv", &buf)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["agent_id", "global_influence", "tier"]).map_err(other)?;
    for (i, id) in graph.node_ids().iter().enumerate() {
        w.write_record([id.clone(), table.global()[i].to_string(), tiers[i].to_string()]).map_err(other)?;
    }
    dir.write("influence.csv", &w.into_inner().map_err(other)?)?;
    println!("PPR for {} nodes written to {}", graph.len(), out.display());
    Ok(())
}

pub struct GenSpec {
    pub model: GraphModel,
    pub n: usize,
    pub agents: AgentGenParams,
    pub scale: OpinionScale,
    pub seed: u64,
}

/// Writes `graph.csv`, `agents.jsonl` and a `run.toml` that points at them.
pub fn gen(spec: &GenSpec, out: &Path, force: bool) -> Result<(), CliError> {
    let dir = OutDir::prepare(out, &["graph.csv", "agents.jsonl", "run.toml"], force)?;
    // both generators draw from streams derived from the one seed
    let graph_seed = netsim_core::dynamics::call_seed(spec.seed, 0, 0);
    let agent_seed = netsim_core::dynamics::call_seed(spec.seed, 0, 1);
    let graph = generate_graph(spec.model, spec.n, graph_seed).map_err(config)?;
    let profiles = generate_agents(&graph, &spec.scale, &spec.agents, agent_seed).map_err(config)?;
    dir.write("graph.csv", write_edge_list(&graph).as_bytes())?;
    let mut buf = Vec::new();
    write_profiles(&mut buf, &profiles).map_err(other)?;
    dir.write("agents.jsonl", &buf)?;
    let run = RunFile {
        input: crate::settings::InputConfig {
            graph: Some("graph.csv".into()),
            agents: Some("agents.jsonl".into()),
            directed: true,
            ppr: None,
        },
        simulation: SimulationConfig { seed: spec.seed, scale: spec.scale.clone(), ..Default::default() },
    };
    dir.write("run.toml", toml::to_string(&run).map_err(other)?.as_bytes())?;

    let mut hist = vec![0usize; spec.scale.k()];
    for p in &profiles {
        hist[spec.scale.categorize_clamped(p.opinion).0] += 1;
    }
    let hist: Vec<String> = hist.iter().enumerate().map(|(c, n)| format!("c{}={n}", c + 1)).collect();
    println!(
        "{} nodes, {} directed edges; categories {}",
        graph.len(),
        graph.edge_count(),
        hist.join(" ")
    );
    Ok(())
}
