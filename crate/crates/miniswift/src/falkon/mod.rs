//! Lightweight task dispatch service: a wire protocol, the dispatch
//! service itself, the worker that executes tasks, an in-process pool
//! presenting service plus workers as one execution provider, and a
//! virtual-clock model of the whole thing for simulation runs.

pub mod pool;
pub mod protocol;
pub mod service;
pub mod sim;
pub mod worker;
