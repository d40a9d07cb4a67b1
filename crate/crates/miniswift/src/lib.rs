//! Desk-scale scientific workflow runner: a typed dataflow language over
//! files, an event-driven futures engine, pluggable execution providers
//! (local sandboxed processes, simulated clusters, a lightweight dispatch
//! service), restart logs, and benchmark models.

pub mod ast;
pub mod clock;
pub mod engine;
pub mod falkon;
pub mod lexer;
pub mod mapper;
pub mod node;
pub mod parser;
pub mod local;
pub mod plan;
pub mod provenance;
pub mod provider;
pub mod rlog;
pub mod scheduler;
pub mod simbatch;
pub mod synth;
pub mod typecheck;
pub mod types;
pub mod util;
