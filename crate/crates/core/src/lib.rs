//! Topology-aware multi-agent opinion dynamics.

pub mod config;
pub mod coordination;
pub mod dynamics;
pub mod embed;
pub mod generate;
pub mod graph;
pub mod influence;
pub mod llm;
pub mod opinion;
pub mod metrics;
