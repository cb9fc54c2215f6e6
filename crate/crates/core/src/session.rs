//! One live interpreter process driven over a pipe.
//!
//! The engine's standard output and standard error share a single pipe. After
//! each code payload the session writes the backend's sentinel command, which
//! makes the engine print a fresh random token; everything read before that
//! token is the payload's output.

use std::fmt;
use std::io::{self, Read, Write};
use std::os::unix::process::CommandExt;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant, SystemTime};

use log::{debug, warn};
use rand::Rng;
use regex::Regex;
use thiserror::Error;

use crate::registry::BackendSpec;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("cannot start `{executable}`: {reason}")]
    SpawnFailure { executable: String, reason: String },
    #[error("engine did not become ready within {0:?}")]
    StartupTimeout(Duration),
    #[error("engine exited before finishing the request")]
    EngineDied,
    #[error("execution exceeded {0:?}; engine killed")]
    ExecTimeout(Duration),
    #[error("session is dead; restart it")]
    SessionDead,
    #[error("session is busy")]
    Busy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Starting,
    Ready,
    Busy,
    Dead,
}

/// 32 hex characters, fresh per request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentinelToken(String);

impl SentinelToken {
    pub fn generate() -> Self {
        SentinelToken(format!("{:032x}", rand::thread_rng().gen::<u128>()))
    }

    /// A token that does not occur anywhere in `code`.
    pub fn avoiding(code: &str) -> Self {
        loop {
            let token = Self::generate();
            if !code.contains(token.as_str()) {
                return token;
            }
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SentinelToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub struct Session {
    spec: BackendSpec,
    prompt: Option<Regex>,
    child: Option<Child>,
    input: Option<Sender<Vec<u8>>>,
    output: Option<Receiver<Vec<u8>>>,
    state: SessionState,
    started_at: SystemTime,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("backend", &self.spec.name)
            .field("pid", &self.pid())
            .field("state", &self.state)
            .finish()
    }
}

impl Session {
    /// Launches the engine and drains its startup banner.
    pub fn start(spec: BackendSpec) -> Result<Self, SessionError> {
        let prompt = spec.prompt_pattern.as_deref().map(|p| {
            Regex::new(&format!("^(?:{p})$")).expect("prompt_pattern validated by registry")
        });
        let mut session = Session {
            spec,
            prompt,
            child: None,
            input: None,
            output: None,
            state: SessionState::Dead,
            started_at: SystemTime::now(),
        };
        session.launch()?;
        Ok(session)
    }

    pub fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn started_at(&self) -> SystemTime {
        self.started_at
    }

    pub fn pid(&self) -> Option<u32> {
        self.child.as_ref().map(Child::id)
    }

    /// Kills the current engine, if any, and starts a fresh one.
    pub fn restart(&mut self) -> Result<(), SessionError> {
        self.kill();
        self.launch()
    }

    fn launch(&mut self) -> Result<(), SessionError> {
        self.state = SessionState::Starting;
        self.started_at = SystemTime::now();
        let spawn_err = |e: io::Error| SessionError::SpawnFailure {
            executable: self.spec.executable.clone(),
            reason: e.to_string(),
        };

        let (reader, writer) = io::pipe().map_err(spawn_err)?;
        let writer_err = writer.try_clone().map_err(spawn_err)?;
        let mut cmd = Command::new(&self.spec.executable);
        cmd.args(&self.spec.repl_args)
            .stdin(Stdio::piped())
            .stdout(writer)
            .stderr(writer_err)
            .process_group(0);
        let spawned = cmd.spawn();
        // The command holds the parent's copies of the pipe's write end; they
        // must be closed for the reader to ever see end-of-file.
        drop(cmd);
        let mut child = spawned.map_err(|e| {
            self.state = SessionState::Dead;
            SessionError::SpawnFailure {
                executable: self.spec.executable.clone(),
                reason: e.to_string(),
            }
        })?;
        debug!("{}: spawned engine pid {}", self.spec.name, child.id());

        let stdin = child.stdin.take().expect("stdin is piped");
        self.input = Some(spawn_writer(stdin));
        self.output = Some(spawn_reader(reader));
        self.child = Some(child);
        self.state = SessionState::Ready;

        match self.execute("") {
            Ok(banner) => {
                if !banner.is_empty() {
                    debug!("{}: drained {} banner bytes", self.spec.name, banner.len());
                }
                Ok(())
            }
            Err(SessionError::ExecTimeout(t)) => Err(SessionError::StartupTimeout(t)),
            Err(SessionError::EngineDied) => Err(SessionError::SpawnFailure {
                executable: self.spec.executable.clone(),
                reason: "engine exited during startup".into(),
            }),
            Err(e) => Err(e),
        }
    }

    /// Runs `code` in the engine and returns what it printed.
    ///
    /// Lines that fully match the backend's prompt pattern and the echo of the
    /// sentinel command are removed; all other bytes are returned unchanged.
    pub fn execute(&mut self, code: &str) -> Result<Vec<u8>, SessionError> {
        match self.state {
            SessionState::Dead => return Err(SessionError::SessionDead),
            SessionState::Busy => return Err(SessionError::Busy),
            SessionState::Starting | SessionState::Ready => {}
        }
        let token = SentinelToken::avoiding(code);
        let sentinel = self.spec.sentinel_command(token.as_str());

        let mut payload = Vec::with_capacity(code.len() + sentinel.len() + 2);
        payload.extend_from_slice(code.as_bytes());
        if !code.is_empty() && !code.ends_with('\n') {
            payload.push(b'\n');
        }
        payload.extend_from_slice(sentinel.as_bytes());
        payload.push(b'\n');

        self.discard_pending();
        self.state = SessionState::Busy;
        let deadline = Instant::now() + self.spec.timeout;

        let sent = self
            .input
            .as_ref()
            .map(|tx| tx.send(payload).is_ok())
            .unwrap_or(false);
        if !sent {
            self.mark_dead();
            return Err(SessionError::EngineDied);
        }

        let mut buf: Vec<u8> = Vec::new();
        let mut scanned = 0;
        loop {
            if let Some(end) = self.find_terminator(&buf, &mut scanned, token.as_str(), &sentinel) {
                buf.truncate(end);
                self.state = SessionState::Ready;
                return Ok(self.filter_output(&buf, token.as_str()));
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            let rx = self
                .output
                .as_ref()
                .expect("live session has an output channel");
            match rx.recv_timeout(remaining) {
                Ok(bytes) => buf.extend_from_slice(&bytes),
                Err(RecvTimeoutError::Timeout) => {
                    warn!(
                        "{}: timed out after {:?}",
                        self.spec.name, self.spec.timeout
                    );
                    self.kill();
                    return Err(SessionError::ExecTimeout(self.spec.timeout));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    self.mark_dead();
                    return Err(SessionError::EngineDied);
                }
            }
        }
    }

    /// Offset of the token occurrence that ends the output, if it has arrived.
    ///
    /// The token must be followed by a line break. A line consisting of the
    /// echoed sentinel command (or matching the prompt pattern) does not count.
    fn find_terminator(
        &self,
        buf: &[u8],
        scanned: &mut usize,
        token: &str,
        sentinel: &str,
    ) -> Option<usize> {
        let token = token.as_bytes();
        let mut from = *scanned;
        let mut pending = None;
        while let Some(rel) = find(&buf[from..], token) {
            let pos = from + rel;
            let after = pos + token.len();
            let eol = match (buf.get(after), buf.get(after + 1)) {
                (Some(b'\n'), _) => after,
                (Some(b'\r'), Some(b'\n')) => after,
                (None, _) | (Some(b'\r'), None) => {
                    // Line break not read yet.
                    pending = Some(pos);
                    break;
                }
                _ => {
                    from = pos + 1;
                    continue;
                }
            };
            let line_start = buf[..pos]
                .iter()
                .rposition(|&b| b == b'\n')
                .map_or(0, |i| i + 1);
            let line = String::from_utf8_lossy(&buf[line_start..eol]);
            if line == sentinel || self.is_prompt(&line) {
                from = pos + 1;
                continue;
            }
            return Some(pos);
        }
        // A token may straddle the end of what has been read so far.
        let tail = buf.len().saturating_sub(token.len());
        *scanned = pending.unwrap_or(from.max(tail));
        None
    }

    fn is_prompt(&self, line: &str) -> bool {
        self.prompt.as_ref().is_some_and(|re| re.is_match(line))
    }

    fn filter_output(&self, raw: &[u8], token: &str) -> Vec<u8> {
        if self.prompt.is_none() && find(raw, token.as_bytes()).is_none() {
            return raw.to_vec();
        }
        let mut out = Vec::with_capacity(raw.len());
        for line in raw.split_inclusive(|&b| b == b'\n') {
            let text = String::from_utf8_lossy(line);
            let bare = text.trim_end_matches('\n').trim_end_matches('\r');
            if self.is_prompt(bare) || bare.contains(token) {
                continue;
            }
            out.extend_from_slice(line);
        }
        out
    }

    fn discard_pending(&mut self) {
        let Some(rx) = self.output.as_ref() else {
            return;
        };
        let mut dropped = 0;
        while let Ok(bytes) = rx.try_recv() {
            dropped += bytes.len();
        }
        if dropped > 0 {
            debug!("{}: discarded {dropped} stray bytes", self.spec.name);
        }
    }

    fn mark_dead(&mut self) {
        self.state = SessionState::Dead;
        self.input = None;
        if let Some(child) = self.child.as_mut() {
            // Reap if it has exited; otherwise make sure it has.
            if !matches!(child.try_wait(), Ok(Some(_))) {
                self.kill();
                return;
            }
        }
        self.child = None;
        self.output = None;
    }

    /// Kills the engine's whole process group and reaps it.
    pub fn kill(&mut self) {
        self.input = None;
        if let Some(mut child) = self.child.take() {
            let pid = child.id() as libc::pid_t;
            // SAFETY: plain syscall; the group was created for this child.
            unsafe {
                libc::kill(-pid, libc::SIGKILL);
            }
            let _ = child.kill();
            let _ = child.wait();
        }
        self.output = None;
        self.state = SessionState::Dead;
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.kill();
    }
}

fn spawn_writer(mut stdin: std::process::ChildStdin) -> Sender<Vec<u8>> {
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    thread::spawn(move || {
        for bytes in rx {
            if stdin.write_all(&bytes).and_then(|_| stdin.flush()).is_err() {
                break;
            }
        }
    });
    tx
}

fn spawn_reader(mut reader: io::PipeReader) -> Receiver<Vec<u8>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut chunk = vec![0u8; 8192];
        loop {
            match reader.read(&mut chunk) {
                Ok(0) => break,
                Ok(n) => {
                    if tx.send(chunk[..n].to_vec()).is_err() {
                        break;
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(_) => break,
            }
        }
    });
    rx
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    if needle.is_empty() || haystack.len() < needle.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}
