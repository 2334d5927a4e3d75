use std::fs;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use super::{CostRecord, TaskManifest, TaskOutput, TaskResult, TaskStatus};
use crate::model::TaskSpec;

struct Exit {
    status: libc::c_int,
    usage: libc::rusage,
    timed_out: bool,
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn cpu_seconds(ru: &libc::rusage) -> f64 {
    let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 / 1e6;
    tv(ru.ru_utime) + tv(ru.ru_stime)
}

/// Reap `pid`, killing its whole process group once `timeout` has passed.
fn wait_for(pid: libc::pid_t, timeout: Duration) -> std::io::Result<Exit> {
    let start = Instant::now();
    let mut pause = Duration::from_millis(1);
    let mut status = 0;
    // SAFETY: rusage is plain old data; zero is a valid bit pattern.
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    let mut timed_out = false;
    loop {
        let flags = if timed_out { 0 } else { libc::WNOHANG };
        // SAFETY: pid is our own child and both out-pointers are valid.
        let r = unsafe { libc::wait4(pid, &mut status, flags, &mut usage) };
        if r == pid {
            return Ok(Exit {
                status,
                usage,
                timed_out,
            });
        }
        if r < 0 {
            let err = std::io::Error::last_os_error();
            if err.kind() == std::io::ErrorKind::Interrupted {
                continue;
            }
            return Err(err);
        }
        if start.elapsed() >= timeout {
            // SAFETY: the child leads its own process group (process_group(0)).
            unsafe { libc::kill(-pid, libc::SIGKILL) };
            timed_out = true;
            continue;
        }
        std::thread::sleep(pause);
        pause = (pause * 2).min(Duration::from_millis(10));
    }
}

fn failure(task: &str, status: TaskStatus, cost: CostRecord, error: String) -> TaskResult {
    TaskResult {
        status,
        cost,
        error: Some(error),
        ..TaskResult::skipped(task)
    }
}

/// Run one automated task as a process and collect what it reports.
///
/// `workdir` is the directory the command line is interpreted in. Outputs in
/// the returned result are absolute paths; builtin cost metrics are always
/// measured by the engine and override anything the task reports.
pub fn run_task(task: &TaskSpec, manifest: &TaskManifest, workdir: &Path) -> TaskResult {
    let name = task.name.as_str();
    let Some(command) = &task.implementation else {
        return failure(name, TaskStatus::Failed, CostRecord::default(), "task has no implementation".into());
    };
    let out_dir = &manifest.output_dir;
    let manifest_path = out_dir.join("manifest.json");
    let result_path = out_dir.join("result.json");
    let prepared = fs::create_dir_all(out_dir)
        .and_then(|_| fs::write(&manifest_path, serde_json::to_vec(manifest).expect("manifest serializes")))
        .and_then(|_| match fs::remove_file(&result_path) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        })
        .and_then(|_| fs::File::create(out_dir.join("log.txt")));
    let log = match prepared {
        Ok(f) => f,
        Err(e) => return failure(name, TaskStatus::Failed, CostRecord::default(), format!("cannot prepare {}: {e}", out_dir.display())),
    };

    let line = format!("{command} --manifest {}", shell_quote(&manifest_path.to_string_lossy()));
    tracing::debug!(task = name, %line, "spawning");
    let start = Instant::now();
    let spawned = log.try_clone().and_then(|stdout| {
        Command::new("sh")
            .arg("-c")
            .arg(&line)
            .current_dir(workdir)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(log)
            .process_group(0)
            .spawn()
    });
    let child = match spawned {
        Ok(c) => c,
        Err(e) => return failure(name, TaskStatus::Failed, CostRecord::default(), format!("cannot spawn: {e}")),
    };
    let timeout = Duration::from_secs(task.timeout_s);
    let exit = wait_for(child.id() as libc::pid_t, timeout);
    let wall_s = start.elapsed().as_secs_f64();
    let exit = match exit {
        Ok(e) => e,
        Err(e) => {
            let cost = CostRecord { wall_s, ..Default::default() };
            return failure(name, TaskStatus::Failed, cost, format!("cannot wait for process: {e}"));
        }
    };
    let maxrss_kb = exit.usage.ru_maxrss as f64;
    let cost = CostRecord {
        wall_s,
        cpu_s: cpu_seconds(&exit.usage),
        peak_mem_mb: (maxrss_kb > 0.0).then_some(maxrss_kb / 1024.0),
        interaction_min: 0.0,
    };

    if exit.timed_out {
        return failure(name, TaskStatus::TimedOut, cost, format!("exceeded {}s timeout", task.timeout_s));
    }
    if !libc::WIFEXITED(exit.status) {
        let signal = libc::WTERMSIG(exit.status);
        return failure(name, TaskStatus::Failed, cost, format!("killed by signal {signal}; see log.txt"));
    }
    let code = libc::WEXITSTATUS(exit.status);
    if code != 0 {
        return failure(name, TaskStatus::Failed, cost, format!("exit status {code}; see log.txt"));
    }
    let parsed = fs::read_to_string(&result_path)
        .map_err(|e| e.to_string())
        .and_then(|text| serde_json::from_str::<TaskOutput>(&text).map_err(|e| e.to_string()));
    let output = match parsed {
        Ok(o) => o,
        Err(e) => return failure(name, TaskStatus::Failed, cost, format!("malformed result: {e}")),
    };

    let mut metrics = output.metrics;
    metrics.insert("wall_s".into(), cost.wall_s);
    metrics.insert("cpu_s".into(), cost.cpu_s);
    match cost.peak_mem_mb {
        Some(m) => metrics.insert("peak_mem_mb".into(), m),
        None => metrics.remove("peak_mem_mb"),
    };
    TaskResult {
        task: name.to_string(),
        status: TaskStatus::Ok,
        outputs: output
            .outputs
            .into_iter()
            .map(|(k, rel)| (k, out_dir.join(rel).to_string_lossy().into_owned()))
            .collect(),
        metrics,
        cost,
        error: None,
    }
}
