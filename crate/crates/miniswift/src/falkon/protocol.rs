//! Wire protocol: newline-delimited JSON over TCP, one message per line.
//! Six message kinds cover the whole exchange; a crash-free task costs
//! exactly two application messages (TASK out, RESULT back), which is the
//! property the dispatch benchmarks count.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

/// Staging instruction. For stage-ins `from` is an absolute source path
/// and `to` is sandbox-relative; for stage-outs `from` is sandbox-relative
/// and `to` is an absolute destination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePair {
    pub from: String,
    pub to: String,
}

/// Task as it travels to a worker. `exe` values starting with "builtin:"
/// are handled inside the worker without spawning a process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTask {
    pub task_id: u64,
    pub exe: String,
    pub args: Vec<String>,
    /// Sandbox directory label; the worker roots the task's work dir here.
    pub dir: String,
    pub stageins: Vec<StagePair>,
    pub stageouts: Vec<StagePair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Msg {
    #[serde(rename = "REGISTER")]
    Register { worker_id: String, slots: u32 },
    #[serde(rename = "REGISTERED")]
    Registered,
    #[serde(rename = "TASK")]
    Task(WireTask),
    #[serde(rename = "RESULT")]
    Result { task_id: u64, exit: i32, duration_ms: u64, host: String },
    #[serde(rename = "HEARTBEAT")]
    Heartbeat { worker_id: String },
    /// From a worker: deregistering now. From the service: deregister and
    /// exit (idle timeout or shutdown).
    #[serde(rename = "BYE")]
    Bye,
}

pub fn write_msg(w: &mut impl Write, msg: &Msg) -> io::Result<()> {
    let line = serde_json::to_string(msg).expect("protocol messages serialize");
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()
}

/// Read one message; Ok(None) on clean EOF.
pub fn read_msg(r: &mut impl BufRead) -> io::Result<Option<Msg>> {
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        if line.trim().is_empty() {
            continue;
        }
        return serde_json::from_str(&line)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("bad message: {e}")));
    }
}
