pub mod gateway;
pub mod model;
pub mod protocol;
pub mod ingestion;
pub mod agents;
pub mod orchestrator;
pub mod analysis;
pub mod evaluation;
pub mod cli;
