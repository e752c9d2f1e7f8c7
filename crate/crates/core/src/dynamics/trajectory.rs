//! Per-step run record and its CSV / JSON forms.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SimulationConfig;
use crate::coordination::CoordinationPartition;
use crate::llm::{StepUsage, TokenLedger, TokenUsage};
use crate::opinion::{AgentState, Category};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("trajectory row {row}: {msg}")]
    Row { row: usize, msg: String },
}

/// State after `step` and the partition that produced it. Step 0 holds the
/// initial states with singleton units.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub opinions: Vec<f64>,
    pub categories: Vec<Category>,
    pub unit_of: Vec<usize>,
    pub representative: Vec<bool>,
    pub invocations: usize,
    pub units: usize,
    pub failures: usize,
    pub usage: TokenUsage,
}

impl StepRecord {
    pub fn capture(step: usize, states: &[AgentState], partition: &CoordinationPartition) -> Self {
        Self {
            step,
            opinions: states.iter().map(|a| a.opinion).collect(),
            categories: states.iter().map(|a| a.category).collect(),
            unit_of: partition.unit_of.clone(),
            representative: (0..states.len()).map(|i| partition.is_representative(i)).collect(),
            invocations: 0,
            units: partition.len(),
            failures: 0,
            usage: TokenUsage::default(),
        }
    }

    pub fn mean_opinion(&self) -> f64 {
        self.opinions.iter().sum::<f64>() / self.opinions.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub config: SimulationConfig,
    pub node_ids: Vec<String>,
    pub records: Vec<StepRecord>,
    pub ledger: TokenLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub invocations: usize,
    pub units: usize,
    pub failures: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Everything about a run except the per-agent rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: SimulationConfig,
    pub agents: usize,
    pub total_invocations: usize,
    pub totals: StepUsage,
    pub steps: Vec<StepSummary>,
    pub ledger: TokenLedger,
}

#[derive(Serialize, Deserialize)]
struct Row {
    step: usize,
    agent_id: String,
    opinion: f64,
    category: usize,
    unit_id: usize,
    is_representative: bool,
}

impl Trajectory {
    pub fn final_record(&self) -> &StepRecord {
        self.records.last().expect("trajectory holds the initial step")
    }

    pub fn steps(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn total_invocations(&self) -> usize {
        self.records.iter().map(|r| r.invocations).sum()
    }

    /// Rows ordered by step then node index; categories are one-based.
    pub fn write_csv(&self, out: impl Write) -> Result<(), TrajectoryError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            for (i, id) in self.node_ids.iter().enumerate() {
                w.serialize(Row {
                    step: r.step,
                    agent_id: id.clone(),
                    opinion: r.opinions[i],
                    category: r.categories[i].number(),
                    unit_id: r.unit_of[i],
                    is_representative: r.representative[i],
                })?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            config: self.config.clone(),
            agents: self.node_ids.len(),
            total_invocations: self.total_invocations(),
            totals: self.ledger.cumulative(),
            steps: self
                .records
                .iter()
                .map(|r| StepSummary {
                    step: r.step,
                    invocations: r.invocations,
                    units: r.units,
                    failures: r.failures,
                    prompt_tokens: r.usage.prompt_tokens,
                    completion_tokens: r.usage.completion_tokens,
                })
                .collect(),
            ledger: self.ledger.clone(),
        }
    }

    /// Rebuilds a trajectory from its CSV rows and run summary.
    pub fn from_parts(csv_input: impl Read, summary: &RunSummary) -> Result<Self, TrajectoryError> {
        let rows: Vec<Row> = csv::Reader::from_reader(csv_input).deserialize().collect::<Result<_, _>>()?;
        let n = summary.agents;
        if n == 0 || !rows.len().is_multiple_of(n) {
            return Err(TrajectoryError::Row { row: rows.len(), msg: format!("row count not a multiple of {n} agents") });
        }
        let node_ids: Vec<String> = rows[..n].iter().map(|r| r.agent_id.clone()).collect();
        let mut records = Vec::with_capacity(rows.len() / n);
        for (t, chunk) in rows.chunks(n).enumerate() {
            let mut rec = StepRecord {
                step: t,
                opinions: Vec::with_capacity(n),
                categories: Vec::with_capacity(n),
                unit_of: Vec::with_capacity(n),
                representative: Vec::with_capacity(n),
                invocations: 0,
                units: 0,
                failures: 0,
                usage: TokenUsage::default(),
            };
            if let Some(s) = summary.steps.iter().find(|s| s.step == t) {
                rec.invocations = s.invocations;
                rec.units = s.units;
                rec.failures = s.failures;
                rec.usage = TokenUsage { prompt_tokens: s.prompt_tokens, completion_tokens: s.completion_tokens };
            }
            for (i, row) in chunk.iter().enumerate() {
                let row_no = t * n + i + 1;
                if row.step != t || row.agent_id != node_ids[i] || row.category == 0 {
                    return Err(TrajectoryError::Row { row: row_no, msg: "out of order or malformed".into() });
                }
                rec.opinions.push(row.opinion);
                rec.categories.push(Category(row.category - 1));
                rec.unit_of.push(row.unit_id);
                rec.representative.push(row.is_representative);
            }
            records.push(rec);
        }
        Ok(Self { config: summary.config.clone(), node_ids, records, ledger: summary.ledger.clone() })
    }
}
