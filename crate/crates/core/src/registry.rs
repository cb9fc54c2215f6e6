//! Interpreter backends and how to reach them.
//!
//! A [`Registry`] maps backend names (`R`, `julia`, `matlab`, `sh`, ...) to a
//! [`BackendSpec`] describing how to launch the interpreter in batch mode, how
//! to run it as a persistent REPL behind a TCP port, and which commands make
//! the engine print a sentinel token or source a file.
//!
//! Registries are built from [`default_registry`] and optionally overlaid with
//! a plain-text config file, see [`load_config`] for the format.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

/// Placeholder substituted into `sentinel_template` and `file_run_template`.
pub const PLACEHOLDER: &str = "{}";

pub const DEFAULT_R_PORT: u16 = 65432;
pub const DEFAULT_JULIA_PORT: u16 = 65431;
pub const DEFAULT_MATLAB_PORT: u16 = 65430;

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("config line {line}: {reason}")]
    MalformedConfig { line: usize, reason: String },
    #[error("port {port} is used by both `{first}` and `{second}`")]
    DuplicatePort {
        port: u16,
        first: String,
        second: String,
    },
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("backend `{0}` is batch-only and has no server port")]
    NotServerCapable(String),
    #[error("backend `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// How to launch and talk to one interpreter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendSpec {
    pub name: String,
    /// Program name (looked up on `PATH`) or absolute path.
    pub executable: String,
    /// Arguments placed before the source file in batch mode.
    pub batch_args: Vec<String>,
    /// Arguments for the long-lived interactive process.
    pub repl_args: Vec<String>,
    /// `None` marks a batch-only backend.
    pub port: Option<u16>,
    /// Engine command that prints its placeholder followed by a line break.
    pub sentinel_template: String,
    /// Engine command that executes the file named by its placeholder.
    pub file_run_template: String,
    /// Regular expression; output lines matching it in full are dropped.
    pub prompt_pattern: Option<String>,
    pub timeout: Duration,
}

impl BackendSpec {
    /// A batch-only spec with shell-style templates.
    pub fn new(name: &str, executable: &str) -> Self {
        BackendSpec {
            name: name.to_string(),
            executable: executable.to_string(),
            batch_args: Vec::new(),
            repl_args: Vec::new(),
            port: None,
            sentinel_template: "echo {}".to_string(),
            file_run_template: ". {}".to_string(),
            prompt_pattern: None,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn is_server_capable(&self) -> bool {
        self.port.is_some()
    }

    /// Port of a server-capable backend.
    pub fn server_port(&self) -> Result<u16, RegistryError> {
        self.port
            .ok_or_else(|| RegistryError::NotServerCapable(self.name.clone()))
    }

    pub fn sentinel_command(&self, token: &str) -> String {
        self.sentinel_template.replacen(PLACEHOLDER, token, 1)
    }

    pub fn file_run_command(&self, path: &str) -> String {
        self.file_run_template.replacen(PLACEHOLDER, path, 1)
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        let invalid = |reason: String| RegistryError::InvalidSpec {
            name: self.name.clone(),
            reason,
        };
        if self.name.is_empty() || self.name.chars().any(char::is_whitespace) {
            return Err(invalid("name must be a non-empty identifier".into()));
        }
        if self.executable.is_empty() {
            return Err(invalid("executable is empty".into()));
        }
        if self.port == Some(0) {
            return Err(invalid("port must be in 1..=65535".into()));
        }
        for (key, template) in [
            ("sentinel_template", &self.sentinel_template),
            ("file_run_template", &self.file_run_template),
        ] {
            let n = template.matches(PLACEHOLDER).count();
            if n != 1 {
                return Err(invalid(format!(
                    "{key} must contain exactly one `{PLACEHOLDER}` placeholder, found {n}"
                )));
            }
        }
        if self.timeout.is_zero() {
            return Err(invalid("timeout_s must be positive".into()));
        }
        if let Some(pattern) = &self.prompt_pattern {
            regex::Regex::new(pattern).map_err(|e| invalid(format!("bad prompt_pattern: {e}")))?;
        }
        Ok(())
    }
}

/// Immutable set of known backends; names and ports are pairwise distinct.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    backends: BTreeMap<String, BackendSpec>,
}

impl Registry {
    pub fn empty() -> Self {
        Registry::default()
    }

    /// Adds or replaces a backend, enforcing spec validity and port uniqueness.
    pub fn insert(&mut self, spec: BackendSpec) -> Result<(), RegistryError> {
        spec.validate()?;
        if let Some(port) = spec.port {
            if let Some(other) = self
                .backends
                .values()
                .find(|b| b.name != spec.name && b.port == Some(port))
            {
                return Err(RegistryError::DuplicatePort {
                    port,
                    first: other.name.clone(),
                    second: spec.name.clone(),
                });
            }
        }
        self.backends.insert(spec.name.clone(), spec);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&BackendSpec> {
        self.backends.get(name)
    }

    pub fn resolve(&self, name: &str) -> Result<&BackendSpec, RegistryError> {
        self.get(name)
            .ok_or_else(|| RegistryError::UnknownBackend(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &BackendSpec> {
        self.backends.values()
    }

    pub fn len(&self) -> usize {
        self.backends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backends.is_empty()
    }
}

fn args(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Built-in backends: `R`, `julia` and `matlab` servers plus a batch-only `sh`.
pub fn default_registry() -> Registry {
    let r = BackendSpec {
        batch_args: args("--no-echo --no-save --no-restore -f"),
        repl_args: args("--no-echo --no-save --no-restore --quiet"),
        port: Some(DEFAULT_R_PORT),
        sentinel_template: "cat('{}\\n')".into(),
        file_run_template: "source('{}', echo = FALSE, print.eval = TRUE)".into(),
        ..BackendSpec::new("R", "R")
    };
    let julia = BackendSpec {
        batch_args: args("--startup-file=no --color=no"),
        repl_args: args("--startup-file=no --color=no --banner=no --quiet"),
        port: Some(DEFAULT_JULIA_PORT),
        sentinel_template: "println(\"{}\")".into(),
        file_run_template: "include(\"{}\");".into(),
        ..BackendSpec::new("julia", "julia")
    };
    let matlab = BackendSpec {
        batch_args: args("-nodesktop -nosplash -batch"),
        repl_args: args("-nodesktop -nosplash -nodisplay"),
        port: Some(DEFAULT_MATLAB_PORT),
        sentinel_template: "disp('{}')".into(),
        file_run_template: "run('{}')".into(),
        ..BackendSpec::new("matlab", "matlab")
    };
    let sh = BackendSpec::new("sh", "sh");

    let mut registry = Registry::empty();
    for spec in [r, julia, matlab, sh] {
        registry
            .insert(spec)
            .expect("built-in backends are valid and use distinct ports");
    }
    registry
}

/// Loads a config file and overlays it on [`default_registry`].
///
/// ```text
/// # comment
/// backend R
///     executable=/opt/R/bin/R
///     port=65432
///     repl_args=--no-echo --no-save
///     sentinel_template=cat('{}\n')
/// ```
///
/// A `backend <name>` line opens a block; the indented `key=value` lines that
/// follow configure it. Unset keys take the built-in defaults of a generic
/// shell-like backend. A block fully replaces a same-named built-in.
pub fn load_config(path: &Path) -> Result<Registry, RegistryError> {
    let text = fs::read_to_string(path).map_err(|source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

/// [`load_config`] on in-memory text.
pub fn parse_config(text: &str) -> Result<Registry, RegistryError> {
    let mut registry = default_registry();
    let mut seen: Vec<String> = Vec::new();
    let mut current: Option<(usize, BackendSpec, bool)> = None;

    let finish = |registry: &mut Registry,
                  block: Option<(usize, BackendSpec, bool)>|
     -> Result<(), RegistryError> {
        if let Some((line, spec, has_exe)) = block {
            if !has_exe {
                return Err(RegistryError::MalformedConfig {
                    line,
                    reason: format!("backend `{}` has no executable=", spec.name),
                });
            }
            registry.insert(spec).map_err(|e| match e {
                RegistryError::InvalidSpec { reason, .. } => {
                    RegistryError::MalformedConfig { line, reason }
                }
                other => other,
            })?;
        }
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let malformed = |reason: String| RegistryError::MalformedConfig { line, reason };
        let indented = raw.starts_with(' ') || raw.starts_with('\t');

        if !indented {
            let mut words = trimmed.split_whitespace();
            match (words.next(), words.next(), words.next()) {
                (Some("backend"), Some(name), None) => {
                    if seen.iter().any(|n| n == name) {
                        return Err(malformed(format!("backend `{name}` defined twice")));
                    }
                    seen.push(name.to_string());
                    finish(&mut registry, current.take())?;
                    // Drop the same-named default first so its port does not
                    // collide with the replacement.
                    registry.backends.remove(name);
                    current = Some((line, BackendSpec::new(name, ""), false));
                }
                _ => {
                    return Err(malformed(format!(
                        "expected `backend <name>`, got `{trimmed}`"
                    )))
                }
            }
            continue;
        }

        let Some((_, spec, has_exe)) = current.as_mut() else {
            return Err(malformed("setting outside of a `backend` block".into()));
        };
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(malformed(format!("expected key=value, got `{trimmed}`")));
        };
        let value = value.trim();
        match key.trim() {
            "executable" => {
                spec.executable = value.to_string();
                *has_exe = !value.is_empty();
            }
            "port" => {
                spec.port = if value.is_empty() {
                    None
                } else {
                    let port: u16 = value
                        .parse()
                        .map_err(|_| malformed(format!("bad port `{value}`")))?;
                    if port == 0 {
                        return Err(malformed("port must be in 1..=65535".into()));
                    }
                    Some(port)
                };
            }
            "batch_args" => spec.batch_args = args(value),
            "repl_args" => spec.repl_args = args(value),
            "sentinel_template" => spec.sentinel_template = value.to_string(),
            "file_run_template" => spec.file_run_template = value.to_string(),
            "prompt_pattern" => {
                spec.prompt_pattern = (!value.is_empty()).then(|| value.to_string())
            }
            "timeout_s" => {
                let secs: f64 = value
                    .parse()
                    .map_err(|_| malformed(format!("bad timeout_s `{value}`")))?;
                if !(secs.is_finite() && secs > 0.0) {
                    return Err(malformed("timeout_s must be positive".into()));
                }
                spec.timeout = Duration::from_secs_f64(secs);
            }
            other => return Err(malformed(format!("unknown key `{other}`"))),
        }
    }
    finish(&mut registry, current.take())?;
    Ok(registry)
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.port {
            Some(port) => write!(f, "{} ({}, port {})", self.name, self.executable, port),
            None => write!(f, "{} ({}, batch only)", self.name, self.executable),
        }
    }
}
