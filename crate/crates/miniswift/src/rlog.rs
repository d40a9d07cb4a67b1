//! Restart log: one JSON record per line, appended as the run progresses.
//! A dataset-produced line is written only after the named file durably
//! exists, so a reader can trust every complete line. A torn final line
//! (the usual crash artifact) is tolerated on read; torn lines anywhere
//! else mean the file was edited and are an error.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LogRecord {
    RunStarted {
        plan_digest: String,
        stmt_digests: Vec<String>,
        timestamp: f64,
    },
    DatasetProduced {
        logical_path: String,
        physical_path: String,
        digest: String,
        timestamp: f64,
    },
    RunFinished {
        status: String,
        timestamp: f64,
    },
}

pub struct RestartLog {
    w: BufWriter<File>,
}

impl RestartLog {
    pub fn append(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RestartLog { w: BufWriter::new(f) })
    }

    /// Write and flush one record; the line is complete on return.
    pub fn write(&mut self, rec: &LogRecord) -> std::io::Result<()> {
        let line = serde_json::to_string(rec).expect("log records serialize");
        self.w.write_all(line.as_bytes())?;
        self.w.write_all(b"\n")?;
        self.w.flush()
    }

    pub fn sync(&mut self) -> std::io::Result<()> {
        self.w.flush()?;
        self.w.get_ref().sync_all()
    }
}

/// Read a log back. The final line may be torn and is then ignored.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, String> {
    let f = File::open(path).map_err(|e| format!("cannot open {}: {e}", path.display()))?;
    let reader = BufReader::new(f);
    let mut out = Vec::new();
    let mut lines = reader.lines().peekable();
    let mut lineno = 0usize;
    while let Some(line) = lines.next() {
        lineno += 1;
        let line = line.map_err(|e| format!("{}:{lineno}: {e}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogRecord>(&line) {
            Ok(rec) => out.push(rec),
            Err(e) => {
                if lines.peek().is_none() {
                    break;
                }
                return Err(format!("{}:{lineno}: bad record: {e}", path.display()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("restart.log");
        let recs = vec![
            LogRecord::RunStarted {
                plan_digest: "00ff".into(),
                stmt_digests: vec!["aa".into(), "bb".into()],
                timestamp: 0.0,
            },
            LogRecord::DatasetProduced {
                logical_path: "roRun.v[0].hdr".into(),
                physical_path: "/tmp/x.hdr".into(),
                digest: "1234".into(),
                timestamp: 1.5,
            },
            LogRecord::RunFinished { status: "completed".into(), timestamp: 2.0 },
        ];
        {
            let mut log = RestartLog::append(&path).unwrap();
            for r in &recs {
                log.write(r).unwrap();
            }
        }
        assert_eq!(read_log(&path).unwrap(), recs);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"kind\":\"run-started\""));
        assert!(text.contains("\"kind\":\"dataset-produced\""));
    }

    #[test]
    fn append_extends_existing_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("restart.log");
        {
            let mut log = RestartLog::append(&path).unwrap();
            log.write(&LogRecord::RunFinished { status: "interrupted".into(), timestamp: 1.0 }).unwrap();
        }
        {
            let mut log = RestartLog::append(&path).unwrap();
            log.write(&LogRecord::RunFinished { status: "completed".into(), timestamp: 2.0 }).unwrap();
        }
        assert_eq!(read_log(&path).unwrap().len(), 2);
    }

    #[test]
    fn torn_last_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("restart.log");
        let good = r#"{"kind":"run-started","plan_digest":"x","stmt_digests":[],"timestamp":0.0}"#;
        std::fs::write(&path, format!("{good}\n{{\"kind\":\"dataset-prod")).unwrap();
        let recs = read_log(&path).unwrap();
        assert_eq!(recs.len(), 1);
    }

    #[test]
    fn torn_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("restart.log");
        let good = r#"{"kind":"run-finished","status":"completed","timestamp":1.0}"#;
        std::fs::write(&path, format!("{{broken\n{good}\n")).unwrap();
        assert!(read_log(&path).unwrap_err().contains("bad record"));
    }
}
