use std::collections::BTreeMap;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::SandboxError;

/// Exit code reported for commands killed at their deadline (128 + SIGKILL).
pub const KILL_EXIT_CODE: i32 = 137;

const DEFAULT_PATH: &str = "/usr/local/bin:/usr/bin:/bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    /// Wall-clock seconds.
    pub duration: f64,
    pub timed_out: bool,
}

impl ExecResult {
    pub fn success(&self) -> bool {
        self.exit_code == 0 && !self.timed_out
    }
}

pub fn truncation_marker(omitted: usize) -> String {
    format!("\n[output truncated: {omitted} bytes omitted]\n")
}

#[derive(Default)]
struct Capture {
    buf: Vec<u8>,
    omitted: usize,
}

impl Capture {
    fn render(&self) -> String {
        let mut s = String::from_utf8_lossy(&self.buf).into_owned();
        if self.omitted > 0 {
            s.push_str(&truncation_marker(self.omitted));
        }
        s
    }
}

fn drain<R: Read + Send + 'static>(
    mut src: R,
    cap: usize,
    sink: Arc<Mutex<Capture>>,
    done: mpsc::Sender<()>,
) {
    thread::spawn(move || {
        let mut chunk = [0u8; 64 * 1024];
        loop {
            match src.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let mut c = sink.lock().expect("capture lock");
                    let room = cap.saturating_sub(c.buf.len());
                    let keep = room.min(n);
                    c.buf.extend_from_slice(&chunk[..keep]);
                    c.omitted += n - keep;
                }
            }
        }
        let _ = done.send(());
    });
}

fn kill_group(pgid: u32) {
    // SAFETY: plain syscall; a stale or foreign group id only yields ESRCH/EPERM.
    unsafe {
        libc::kill(-(pgid as libc::pid_t), libc::SIGKILL);
    }
}

fn exit_code(status: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

/// Runs `argv` in `cwd` with a scrubbed environment, its own process group,
/// a hard deadline and capped output capture.
pub fn run_process(
    argv: &[String],
    cwd: &Path,
    env: &BTreeMap<String, String>,
    timeout: Duration,
    output_cap: usize,
    grace: Duration,
) -> Result<ExecResult, SandboxError> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| SandboxError::Spawn("empty command".into()))?;
    let path = std::env::var("PATH").unwrap_or_else(|_| DEFAULT_PATH.to_string());
    let start = Instant::now();
    let mut child = Command::new(program)
        .args(args)
        .current_dir(cwd)
        .env_clear()
        .env("PATH", path)
        .env("HOME", cwd)
        .env("LANG", "C.UTF-8")
        .envs(env)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()
        .map_err(|e| SandboxError::Spawn(format!("{program}: {e}")))?;
    let pgid = child.id();

    let out = Arc::new(Mutex::new(Capture::default()));
    let err = Arc::new(Mutex::new(Capture::default()));
    let (tx, rx) = mpsc::channel();
    drain(child.stdout.take().expect("piped"), output_cap, out.clone(), tx.clone());
    drain(child.stderr.take().expect("piped"), output_cap, err.clone(), tx);

    let deadline = start + timeout;
    let mut nap = Duration::from_millis(1);
    let (status, timed_out) = loop {
        match child.try_wait() {
            Ok(Some(status)) => break (Some(status), false),
            Ok(None) => {}
            Err(e) => return Err(SandboxError::Spawn(e.to_string())),
        }
        let now = Instant::now();
        if now >= deadline {
            kill_group(pgid);
            let _ = child.wait();
            break (None, true);
        }
        thread::sleep(nap.min(deadline - now));
        nap = (nap * 2).min(Duration::from_millis(20));
    };
    // Background processes left in the group would hold the pipes open.
    kill_group(pgid);

    let reap_deadline = Instant::now() + grace;
    for _ in 0..2 {
        let left = reap_deadline.saturating_duration_since(Instant::now());
        if rx.recv_timeout(left).is_err() {
            break;
        }
    }

    let exit_code = match status {
        Some(s) => exit_code(s),
        None => KILL_EXIT_CODE,
    };
    let stdout = out.lock().expect("capture lock").render();
    let stderr = err.lock().expect("capture lock").render();
    Ok(ExecResult {
        exit_code,
        stdout,
        stderr,
        duration: start.elapsed().as_secs_f64(),
        timed_out,
    })
}
