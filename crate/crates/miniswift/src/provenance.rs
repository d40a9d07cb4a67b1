//! Invocation provenance: one JSON record per task attempt, written under
//! `<run-dir>/provenance/`. Records are self-contained (command line,
//! host, usage, staged files with sizes and digests), so a run directory
//! can answer "where did this file come from" long after the run.
//! Failure to write a record degrades the run's record keeping, never the
//! run itself.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileStat {
    pub logical: String,
    pub physical: String,
    pub size_bytes: u64,
    pub digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub task_id: u64,
    pub attempt: u32,
    pub app: String,
    pub site: String,
    pub host: String,
    pub working_dir: String,
    pub command_line: Vec<String>,
    pub environment: BTreeMap<String, String>,
    pub exit_code: Option<i32>,
    pub signal: Option<i32>,
    pub success: bool,
    pub user_cpu_s: f64,
    pub system_cpu_s: f64,
    pub max_rss_kb: u64,
    /// False when the attempt ran under a simulated provider.
    pub usage_measured: bool,
    pub wallclock_ms: u64,
    pub submitted_at_s: f64,
    pub started_at_s: f64,
    pub ended_at_s: f64,
    pub stage_ins: Vec<FileStat>,
    pub stage_outs: Vec<FileStat>,
    #[serde(default)]
    pub message: String,
}

const ENV_ALLOWLIST: &[&str] = &["PATH", "HOME", "USER", "HOSTNAME", "HOST", "LANG", "TZ"];

/// Environment subset recorded with each invocation: a fixed allowlist
/// plus caller-declared names, or everything under `full`.
pub fn environment_subset(declared: &[String], full: bool) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if full {
        for (k, v) in std::env::vars() {
            out.insert(k, v);
        }
        return out;
    }
    for name in ENV_ALLOWLIST.iter().copied().map(str::to_string).chain(declared.iter().cloned()) {
        if let Ok(v) = std::env::var(&name) {
            out.insert(name, v);
        }
    }
    out
}

pub fn provenance_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("provenance")
}

/// Best effort: a record that cannot be written is reported on stderr and
/// dropped. Returns the path when the write succeeded.
pub fn write_record(run_dir: &Path, rec: &InvocationRecord) -> Option<PathBuf> {
    let dir = provenance_dir(run_dir);
    let path = dir.join(format!("{}.{}.json", rec.task_id, rec.attempt));
    let attempt = || -> std::io::Result<()> {
        fs::create_dir_all(&dir)?;
        let json = serde_json::to_string_pretty(rec).expect("records serialize");
        fs::write(&path, json)
    };
    match attempt() {
        Ok(()) => Some(path),
        Err(e) => {
            eprintln!("warning: cannot write provenance record {}: {e}", path.display());
            None
        }
    }
}

/// Load every parsable record in a run directory, sorted by task and
/// attempt. Unreadable files are skipped with a warning.
pub fn load_records(run_dir: &Path) -> Vec<InvocationRecord> {
    let dir = provenance_dir(run_dir);
    let mut out = Vec::new();
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(_) => return out,
    };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        match fs::read_to_string(&path).map_err(|e| e.to_string()).and_then(|s| {
            serde_json::from_str::<InvocationRecord>(&s).map_err(|e| e.to_string())
        }) {
            Ok(rec) => out.push(rec),
            Err(e) => eprintln!("warning: skipping provenance file {}: {e}", path.display()),
        }
    }
    out.sort_by_key(|r| (r.task_id, r.attempt));
    out
}

/// Derivation chain for a dataset: the record that produced it, then the
/// record that produced the deepest of that record's inputs, and so on
/// back to mapper-bound data. Empty when nothing in the run produced the
/// path (an input mapped straight from disk).
pub fn derivation_of<'a>(records: &'a [InvocationRecord], logical: &str) -> Vec<&'a InvocationRecord> {
    // Successful attempts win; later attempts shadow earlier ones.
    let mut producer: HashMap<&str, &InvocationRecord> = HashMap::new();
    for rec in records {
        if !rec.success {
            continue;
        }
        for out in &rec.stage_outs {
            producer.insert(out.logical.as_str(), rec);
        }
    }

    fn depth<'a>(
        rec: &'a InvocationRecord,
        producer: &HashMap<&'a str, &'a InvocationRecord>,
        memo: &mut HashMap<u64, (usize, Option<&'a str>)>,
        visiting: &mut Vec<u64>,
    ) -> (usize, Option<&'a str>) {
        if let Some(&hit) = memo.get(&rec.task_id) {
            return hit;
        }
        if visiting.contains(&rec.task_id) {
            return (0, None);
        }
        visiting.push(rec.task_id);
        let mut best: (usize, Option<&str>) = (0, None);
        for input in &rec.stage_ins {
            if let Some(up) = producer.get(input.logical.as_str()) {
                let (d, _) = depth(up, producer, memo, visiting);
                if d + 1 > best.0 {
                    best = (d + 1, Some(input.logical.as_str()));
                }
            }
        }
        visiting.pop();
        memo.insert(rec.task_id, best);
        best
    }

    let mut chain = Vec::new();
    let mut memo = HashMap::new();
    let mut cur = producer.get(logical).copied();
    let mut seen = Vec::new();
    while let Some(rec) = cur {
        if seen.contains(&rec.task_id) {
            break;
        }
        seen.push(rec.task_id);
        chain.push(rec);
        let (_, via) = depth(rec, &producer, &mut memo, &mut Vec::new());
        cur = via.and_then(|l| producer.get(l).copied());
    }
    chain
}
