#![allow(dead_code)]

use std::fs;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;
use std::time::{Duration, Instant};

use chunkd::protocol::loopback;
use chunkd::registry::BackendSpec;

pub const CHUNKD: &str = env!("CARGO_BIN_EXE_chunkd");
pub const MOCK: &str = env!("CARGO_BIN_EXE_chunkd-mock");
pub const PROMPT: &str = "mock>";

pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

/// A stateful mock REPL that prints a banner and a prompt line after every
/// command; the prompt is filtered by `prompt_pattern`.
pub fn mock_spec(name: &str, port: u16, extra_args: &[&str]) -> BackendSpec {
    let mut repl_args: Vec<String> = ["--banner", "mock ready", "--prompt", PROMPT]
        .iter()
        .map(|s| s.to_string())
        .collect();
    repl_args.extend(extra_args.iter().map(|s| s.to_string()));
    BackendSpec {
        repl_args,
        port: Some(port),
        sentinel_template: "echo {}".into(),
        file_run_template: "source {}".into(),
        prompt_pattern: Some(PROMPT.into()),
        timeout: Duration::from_secs(10),
        ..BackendSpec::new(name, MOCK)
    }
}

/// Config block for a mock backend; `port: None` makes it batch-only.
pub fn mock_block(name: &str, port: Option<u16>, extra_args: &str) -> String {
    let mut block = format!("backend {name}\n  executable = {MOCK}\n");
    if let Some(port) = port {
        block.push_str(&format!(
            "  port = {port}\n  repl_args = --banner mock-ready --prompt {PROMPT} {extra_args}\n  prompt_pattern = {PROMPT}\n  \
             sentinel_template = echo {{}}\n  file_run_template = source {{}}\n  timeout_s = 10\n"
        ));
    }
    block
}

pub fn chunkd(dir: &Path, args: &[&str]) -> Output {
    Command::new(CHUNKD)
        .args(args)
        .current_dir(dir)
        .env_remove("CHUNKD_CONFIG")
        .output()
        .expect("run chunkd")
}

pub fn wait_closed(port: u16, within: Duration) -> bool {
    let deadline = Instant::now() + within;
    loop {
        if TcpStream::connect_timeout(&loopback(port), Duration::from_millis(100)).is_err() {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn is_sentinel(line: &str) -> bool {
    line.strip_prefix("echo ")
        .is_some_and(|t| t.len() == 32 && t.bytes().all(|b| b.is_ascii_hexdigit()))
}

/// Lines a recording mock received, minus sentinel commands and blanks.
pub fn recorded_code(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .filter(|l| !l.is_empty() && !is_sentinel(l))
        .map(str::to_string)
        .collect()
}

/// Stops the named daemons when dropped, so failing checks do not leak them.
pub struct StopGuard {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub backends: Vec<String>,
}

impl Drop for StopGuard {
    fn drop(&mut self) {
        let mut args = vec!["stop", "--config", self.config.to_str().unwrap()];
        args.extend(self.backends.iter().map(String::as_str));
        let _ = chunkd(&self.dir, &args);
    }
}

pub fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}
