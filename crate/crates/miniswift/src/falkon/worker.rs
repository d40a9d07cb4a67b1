//! Worker side of the dispatch protocol. A worker registers, heartbeats,
//! executes tasks in per-task sandboxes, and reports results; on connection
//! loss it reconnects with backoff and registers afresh. Execution is
//! idempotent, so a task replayed after a presumed crash just runs again.

use std::fs;
use std::io::{self, BufReader};
use std::net::{Shutdown, TcpStream};
use std::os::unix::process::ExitStatusExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;

use super::protocol::{read_msg, write_msg, Msg, WireTask};
use crate::local::stage_in_one;
use crate::synth;
use crate::util::derived_rng;

/// Exit code reported when the sandbox itself failed (staging, spawn).
pub const EXIT_SANDBOX: i32 = 70;
/// Exit code reported when the app exited 0 but a declared output is missing.
pub const EXIT_MISSING_OUTPUT: i32 = 71;

#[derive(Debug, Clone)]
pub struct WorkerCfg {
    /// Service address, host:port.
    pub connect: String,
    pub slots: u32,
    pub worker_id: String,
    /// Per-task sandboxes are created under here.
    pub work_root: PathBuf,
    /// Binary invoked as `<runner> app <name> <args..>` for bare app names.
    pub runner: PathBuf,
    /// Passed through to synthetic apps that keep cross-attempt state.
    pub state_dir: Option<PathBuf>,
    pub heartbeat_interval_s: f64,
    pub reconnect: bool,
    /// Consecutive failed connect attempts tolerated before giving up.
    pub reconnect_max_failures: u32,
    /// Probability of dropping the connection after executing a task and
    /// before reporting it, which is how crash recovery gets exercised.
    pub crash_rate: f64,
    pub seed: u64,
    pub keep_sandbox: bool,
}

impl WorkerCfg {
    pub fn new(connect: String, slots: u32, runner: PathBuf) -> Self {
        let host = std::env::var("HOSTNAME").unwrap_or_else(|_| "localhost".into());
        let pid = std::process::id();
        WorkerCfg {
            connect,
            slots: slots.max(1),
            worker_id: format!("{host}-{pid}"),
            work_root: std::env::temp_dir().join(format!("miniswift-worker-{pid}")),
            runner,
            state_dir: None,
            heartbeat_interval_s: 5.0,
            reconnect: true,
            reconnect_max_failures: 30,
            crash_rate: 0.0,
            seed: 0,
            keep_sandbox: false,
        }
    }
}

enum Session {
    /// Told to exit by the service.
    Bye,
    /// Connection dropped (service gone, or our own injected crash).
    Lost,
}

/// Run until the service says BYE. With `reconnect` set, connection loss
/// leads to backoff and re-registration; without it the first loss returns.
pub fn run_worker(cfg: WorkerCfg) -> io::Result<()> {
    let mut backoff = Duration::from_millis(100);
    let mut failed_connects = 0u32;
    let mut session = 0u64;
    loop {
        match serve_once(&cfg, session) {
            Ok(Session::Bye) => return Ok(()),
            Ok(Session::Lost) => {
                failed_connects = 0;
                backoff = Duration::from_millis(100);
            }
            Err(e) => {
                failed_connects += 1;
                if failed_connects > cfg.reconnect_max_failures {
                    return Err(e);
                }
            }
        }
        if !cfg.reconnect {
            return Ok(());
        }
        session += 1;
        thread::sleep(backoff);
        backoff = (backoff * 2).min(Duration::from_secs(2));
    }
}

fn serve_once(cfg: &WorkerCfg, session: u64) -> io::Result<Session> {
    let stream = TcpStream::connect(&cfg.connect)?;
    let _ = stream.set_nodelay(true);
    let out = Arc::new(Mutex::new(stream.try_clone()?));
    let closer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);

    {
        let mut o = out.lock().unwrap();
        write_msg(
            &mut *o,
            &Msg::Register { worker_id: cfg.worker_id.clone(), slots: cfg.slots },
        )?;
    }
    match read_msg(&mut reader)? {
        Some(Msg::Registered) => {}
        other => {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("expected REGISTERED, got {other:?}"),
            ))
        }
    }

    let alive = Arc::new(AtomicBool::new(true));

    let hb_out = Arc::clone(&out);
    let hb_alive = Arc::clone(&alive);
    let hb_id = cfg.worker_id.clone();
    let interval = cfg.heartbeat_interval_s.max(0.01);
    thread::spawn(move || {
        let mut since_beat = 0.0;
        while hb_alive.load(Ordering::SeqCst) {
            thread::sleep(Duration::from_millis(20));
            since_beat += 0.02;
            if since_beat < interval {
                continue;
            }
            since_beat = 0.0;
            let mut o = hb_out.lock().unwrap();
            if write_msg(&mut *o, &Msg::Heartbeat { worker_id: hb_id.clone() }).is_err() {
                return;
            }
        }
    });

    let (task_tx, task_rx) = mpsc::channel::<WireTask>();
    let task_rx = Arc::new(Mutex::new(task_rx));
    for slot in 0..cfg.slots {
        let rx = Arc::clone(&task_rx);
        let out = Arc::clone(&out);
        let alive = Arc::clone(&alive);
        let closer = closer.try_clone()?;
        let cfg = cfg.clone();
        let mut rng = derived_rng(
            cfg.seed,
            &format!("worker:{}:s{}:x{}", cfg.worker_id, session, slot),
        );
        thread::spawn(move || loop {
            let task = match rx.lock().unwrap().recv() {
                Ok(t) => t,
                Err(_) => return,
            };
            let (exit, duration_ms, host) = execute_task(&cfg, &task);
            if cfg.crash_rate > 0.0 && rng.gen_bool(cfg.crash_rate.clamp(0.0, 1.0)) {
                // Executed but never reported: the service must requeue it
                // and still count its eventual success exactly once.
                alive.store(false, Ordering::SeqCst);
                let _ = closer.shutdown(Shutdown::Both);
                return;
            }
            let mut o = out.lock().unwrap();
            let sent = write_msg(
                &mut *o,
                &Msg::Result { task_id: task.task_id, exit, duration_ms, host },
            );
            if sent.is_err() {
                return;
            }
        });
    }

    loop {
        match read_msg(&mut reader) {
            Ok(Some(Msg::Task(t))) => {
                if task_tx.send(t).is_err() {
                    alive.store(false, Ordering::SeqCst);
                    return Ok(Session::Lost);
                }
            }
            Ok(Some(Msg::Bye)) => {
                alive.store(false, Ordering::SeqCst);
                let _ = closer.shutdown(Shutdown::Both);
                return Ok(Session::Bye);
            }
            Ok(Some(_)) => {}
            Ok(None) | Err(_) => {
                alive.store(false, Ordering::SeqCst);
                return Ok(Session::Lost);
            }
        }
    }
}

fn execute_task(cfg: &WorkerCfg, task: &WireTask) -> (i32, u64, String) {
    let host = std::env::var("HOSTNAME").unwrap_or_else(|_| "localhost".into());
    let start = Instant::now();
    if task.exe == "builtin:noop" {
        return (0, start.elapsed().as_millis() as u64, host);
    }
    let dir = cfg.work_root.join(&task.dir);
    let exit = match run_in_sandbox(cfg, task, &dir) {
        Ok(code) => code,
        Err(_) => EXIT_SANDBOX,
    };
    if exit == 0 && !cfg.keep_sandbox {
        let _ = fs::remove_dir_all(&dir);
    }
    (exit, start.elapsed().as_millis() as u64, host)
}

fn run_in_sandbox(cfg: &WorkerCfg, task: &WireTask, dir: &Path) -> io::Result<i32> {
    fs::create_dir_all(dir)?;
    for p in &task.stageins {
        stage_in_one(Path::new(&p.from), &dir.join(&p.to))?;
    }
    let bare = !task.exe.contains('/');
    let mut cmd = if bare {
        let mut c = Command::new(&cfg.runner);
        c.arg("app").arg(&task.exe).args(&task.args);
        c
    } else {
        let mut c = Command::new(&task.exe);
        c.args(&task.args);
        c
    };
    let ins: String =
        task.stageins.iter().map(|p| p.to.as_str()).collect::<Vec<_>>().join("\n");
    let outs: String =
        task.stageouts.iter().map(|p| p.from.as_str()).collect::<Vec<_>>().join("\n");
    cmd.current_dir(dir)
        .env(synth::ENV_INPUTS, ins)
        .env(synth::ENV_OUTPUTS, outs)
        .stdin(Stdio::null())
        .stdout(Stdio::from(fs::File::create(dir.join("stdout.txt"))?))
        .stderr(Stdio::from(fs::File::create(dir.join("stderr.txt"))?));
    if let Some(state) = &cfg.state_dir {
        cmd.env(synth::ENV_STATE, state);
    }
    let status = cmd.spawn()?.wait()?;
    let exit = status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0));
    if exit != 0 {
        return Ok(exit);
    }
    for p in &task.stageouts {
        let src = dir.join(&p.from);
        if !src.exists() {
            return Ok(EXIT_MISSING_OUTPUT);
        }
        let dest = Path::new(&p.to);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::copy(&src, dest)?;
    }
    Ok(0)
}
