//! Synthetic applications. Real scientific codes are stand-ins here: every
//! app writes output bytes that are a pure function of the app name, its
//! argument vector, and the digests of its staged-in files. A task
//! therefore produces byte-identical outputs whether it runs as a local
//! subprocess in a sandbox or in-process under a simulated provider, which
//! is what makes cross-provider digest comparisons meaningful.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::provider::TaskExec;
use crate::util::digest_hex;

pub const ENV_INPUTS: &str = "MINISWIFT_SYNTH_INPUTS";
pub const ENV_OUTPUTS: &str = "MINISWIFT_SYNTH_OUTPUTS";
pub const ENV_STATE: &str = "MINISWIFT_SYNTH_STATE";

/// Bytes for one output of a synthetic app call.
///
/// `mOverlaps` is special-cased to pass its first input through unchanged
/// so that a downstream table mapper can parse what it writes. Everything
/// else gets a small canonical text block.
pub fn output_bytes(
    exe: &str,
    args: &[String],
    inputs: &[(String, Vec<u8>)],
    out_rel: &str,
) -> Vec<u8> {
    if exe == "mOverlaps" {
        return inputs.first().map(|(_, b)| b.clone()).unwrap_or_default();
    }
    let mut s = String::new();
    let _ = writeln!(s, "synth\t{exe}\t{out_rel}");
    for a in args {
        let _ = writeln!(s, "arg\t{a}");
    }
    for (rel, bytes) in inputs {
        let _ = writeln!(s, "in\t{rel}\t{}", digest_hex(bytes));
    }
    s.into_bytes()
}

/// In-process execution for simulated providers: read staged-in sources,
/// write outputs straight to their stage-out destinations.
pub fn execute_direct(member: &TaskExec) -> Result<(), String> {
    let mut inputs = Vec::with_capacity(member.stage_ins.len());
    for (src, rel) in &member.stage_ins {
        let bytes = fs::read(src)
            .map_err(|e| format!("{}: cannot read input {}: {e}", member.executable, src.display()))?;
        inputs.push((rel.clone(), bytes));
    }
    for (rel, dest) in &member.stage_outs {
        let bytes = output_bytes(&member.executable, &member.args, &inputs, rel);
        if let Some(dir) = dest.parent() {
            fs::create_dir_all(dir)
                .map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
        }
        fs::write(dest, bytes)
            .map_err(|e| format!("{}: cannot write output {}: {e}", member.executable, dest.display()))?;
    }
    Ok(())
}

fn arg_value<'a>(args: &'a [String], key: &str) -> Option<&'a str> {
    args.iter().find_map(|a| a.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

/// Subprocess entry point, reached as `miniswift app <name> <args..>` with
/// the sandbox as working directory. Input and output names come from the
/// environment as newline-joined sandbox-relative paths.
pub fn app_main(exe: &str, args: &[String]) -> i32 {
    let split = |v: Result<String, std::env::VarError>| -> Vec<String> {
        v.map(|s| s.split('\n').filter(|p| !p.is_empty()).map(str::to_string).collect())
            .unwrap_or_default()
    };
    let in_rels = split(std::env::var(ENV_INPUTS));
    let out_rels = split(std::env::var(ENV_OUTPUTS));

    if let Some(ms) = arg_value(args, "--sleep-ms").and_then(|v| v.parse::<u64>().ok()) {
        std::thread::sleep(std::time::Duration::from_millis(ms));
    }

    if exe == "synth_flaky" {
        match flaky_gate(args) {
            Ok(None) => {}
            Ok(Some(code)) => return code,
            Err(e) => {
                eprintln!("synth_flaky: {e}");
                return 3;
            }
        }
    }

    let mut inputs = Vec::with_capacity(in_rels.len());
    for rel in &in_rels {
        match fs::read(rel) {
            Ok(bytes) => inputs.push((rel.clone(), bytes)),
            Err(e) => {
                eprintln!("{exe}: cannot read input {rel}: {e}");
                return 2;
            }
        }
    }
    for rel in &out_rels {
        let bytes = output_bytes(exe, args, &inputs, rel);
        if let Some(dir) = Path::new(rel).parent() {
            if !dir.as_os_str().is_empty() {
                if let Err(e) = fs::create_dir_all(dir) {
                    eprintln!("{exe}: cannot create {}: {e}", dir.display());
                    return 2;
                }
            }
        }
        if let Err(e) = fs::write(rel, bytes) {
            eprintln!("{exe}: cannot write output {rel}: {e}");
            return 2;
        }
    }
    0
}

/// `synth_flaky key=<k> fails=<n> class=<transient|host>` fails its first
/// n attempts, keyed by a counter file shared across sandboxes, then
/// behaves like a normal synthetic app. Returns Some(exit) to fail now.
fn flaky_gate(args: &[String]) -> io::Result<Option<i32>> {
    let key = arg_value(args, "key").unwrap_or("task");
    let fails: u32 = arg_value(args, "fails").and_then(|v| v.parse().ok()).unwrap_or(1);
    let class = arg_value(args, "class").unwrap_or("transient");
    let state = std::env::var(ENV_STATE)
        .map_err(|_| io::Error::new(io::ErrorKind::NotFound, format!("{ENV_STATE} not set")))?;
    fs::create_dir_all(&state)?;
    let path = Path::new(&state).join(key);
    let seen: u32 = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse().ok()).unwrap_or(0);
    fs::write(&path, format!("{}", seen + 1))?;
    if seen < fails {
        match class {
            "host" => eprintln!("node failure: worker host unhealthy, attempt {}", seen + 1),
            _ => eprintln!("transient glitch on attempt {}, please retry", seen + 1),
        }
        return Ok(Some(3));
    }
    Ok(None)
}
