//! Run-or-cache decisions and the `tmp/` output naming scheme.
//!
//! Every chunk output lives in `tmp/` next to the document. That directory is
//! the cache: in cache mode nothing executes and the last outputs are reused.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Output directory, relative to the document.
pub const TMP_DIR: &str = "tmp";
/// Stem of counter-named outputs: `tmp/codeOutput0`, `tmp/codeOutput1`, ...
pub const COUNTER_STEM: &str = "codeOutput";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("unsafe output name `{0}`: names may not contain path separators or `..`")]
    UnsafeName(String),
    #[error("line {line}: no cached output {} (run the document with --mode run first)", path.display())]
    MissingCache { path: PathBuf, line: usize },
    #[error("line {line}: no earlier counter-named output to include")]
    NoCounterOutput { line: usize },
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Run,
    Cache,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "run" => Ok(Mode::Run),
            "cache" => Ok(Mode::Cache),
            other => Err(format!("expected `run` or `cache`, got `{other}`")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Run => "run",
            Mode::Cache => "cache",
        })
    }
}

/// Per-chunk override: absent or empty follows the global mode, `run` forces
/// execution, and any other value (including `cache`) uses the cache.
pub fn decide_execution(global: Mode, chunk_override: Option<&str>) -> Mode {
    match chunk_override {
        None | Some("") => global,
        Some("run") => Mode::Run,
        Some(_) => Mode::Cache,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionPolicy {
    pub global: Mode,
    counter: u64,
    last_counter: Option<u64>,
}

impl ExecutionPolicy {
    pub fn new(global: Mode) -> Self {
        ExecutionPolicy {
            global,
            counter: 0,
            last_counter: None,
        }
    }

    /// Next counter value to be handed out.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    fn take_counter(&mut self) -> u64 {
        let n = self.counter;
        self.counter += 1;
        self.last_counter = Some(n);
        n
    }

    pub fn decide(&self, chunk_override: Option<&str>) -> Mode {
        decide_execution(self.global, chunk_override)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Explicit,
    Counter(u64),
}

/// A chunk output location, always `tmp/<name>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputName {
    path: PathBuf,
    pub origin: Origin,
}

impl OutputName {
    /// Path relative to the document directory.
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file_name(&self) -> &str {
        self.path
            .file_name()
            .and_then(|n| n.to_str())
            .expect("output names are UTF-8 file names")
    }

    pub fn under(&self, doc_dir: &Path) -> PathBuf {
        doc_dir.join(&self.path)
    }
}

fn check_name(name: &str) -> Result<(), CacheError> {
    let unsafe_name = name == "."
        || name.contains("..")
        || name.contains(['/', '\\'])
        || name.chars().any(char::is_control);
    if unsafe_name {
        Err(CacheError::UnsafeName(name.to_string()))
    } else {
        Ok(())
    }
}

/// `tmp/<explicit>`, or `tmp/codeOutput<N>` (consuming the counter) when empty.
pub fn resolve_output_name(
    explicit: &str,
    policy: &mut ExecutionPolicy,
) -> Result<OutputName, CacheError> {
    if explicit.is_empty() {
        let n = policy.take_counter();
        return Ok(OutputName {
            path: Path::new(TMP_DIR).join(format!("{COUNTER_STEM}{n}")),
            origin: Origin::Counter(n),
        });
    }
    check_name(explicit)?;
    Ok(OutputName {
        path: Path::new(TMP_DIR).join(explicit),
        origin: Origin::Explicit,
    })
}

/// Name for `\includeOutput`: an empty name refers to the most recent
/// counter-named output rather than consuming a new counter value.
pub fn resolve_include_name(
    explicit: &str,
    policy: &ExecutionPolicy,
    line: usize,
) -> Result<OutputName, CacheError> {
    if explicit.is_empty() {
        let n = policy
            .last_counter
            .ok_or(CacheError::NoCounterOutput { line })?;
        return Ok(OutputName {
            path: Path::new(TMP_DIR).join(format!("{COUNTER_STEM}{n}")),
            origin: Origin::Counter(n),
        });
    }
    check_name(explicit)?;
    Ok(OutputName {
        path: Path::new(TMP_DIR).join(explicit),
        origin: Origin::Explicit,
    })
}

/// Bytes of a previously produced output.
pub fn fetch_cached(doc_dir: &Path, name: &OutputName, line: usize) -> Result<Vec<u8>, CacheError> {
    let path = name.under(doc_dir);
    fs::read(&path).map_err(|source| {
        if source.kind() == io::ErrorKind::NotFound {
            CacheError::MissingCache {
                path: name.path().to_path_buf(),
                line,
            }
        } else {
            CacheError::Io { path, source }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_table() {
        use Mode::*;
        let cases = [
            (Run, None, Run),
            (Run, Some("run"), Run),
            (Run, Some("cache"), Cache),
            (Run, Some("please-skip"), Cache),
            (Cache, None, Cache),
            (Cache, Some("run"), Run),
            (Cache, Some("cache"), Cache),
            (Cache, Some("other"), Cache),
            (Run, Some(""), Run),
            (Cache, Some(""), Cache),
        ];
        for (global, ov, want) in cases {
            assert_eq!(decide_execution(global, ov), want, "{global:?} {ov:?}");
        }
    }

    #[test]
    fn explicit_name() {
        let mut p = ExecutionPolicy::new(Mode::Run);
        let name = resolve_output_name("paperYear", &mut p).unwrap();
        assert_eq!(name.path(), Path::new("tmp/paperYear"));
        assert_eq!(name.origin, Origin::Explicit);
        assert_eq!(p.counter(), 0);
    }

    #[test]
    fn counter_names() {
        let mut p = ExecutionPolicy::new(Mode::Run);
        let a = resolve_output_name("", &mut p).unwrap();
        assert_eq!(a.path(), Path::new("tmp/codeOutput0"));
        assert_eq!(p.counter(), 1);
        let inc = resolve_include_name("", &p, 3).unwrap();
        assert_eq!(inc, a);
        let b = resolve_output_name("", &mut p).unwrap();
        assert_eq!(b.path(), Path::new("tmp/codeOutput1"));
        assert_ne!(a, b);
    }

    #[test]
    fn include_without_counter() {
        let p = ExecutionPolicy::new(Mode::Run);
        assert!(matches!(
            resolve_include_name("", &p, 9),
            Err(CacheError::NoCounterOutput { line: 9 })
        ));
    }

    #[test]
    fn unsafe_names() {
        let mut p = ExecutionPolicy::new(Mode::Run);
        for bad in ["../etc/passwd", "a/b", "..", ".", "a\\b", "x\ny"] {
            assert!(
                matches!(
                    resolve_output_name(bad, &mut p),
                    Err(CacheError::UnsafeName(_))
                ),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn fetch() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("tmp")).unwrap();
        fs::write(dir.path().join("tmp/t"), "hi").unwrap();
        fs::write(dir.path().join("tmp/z"), "").unwrap();
        let mut p = ExecutionPolicy::new(Mode::Cache);
        let t = resolve_output_name("t", &mut p).unwrap();
        assert_eq!(fetch_cached(dir.path(), &t, 1).unwrap(), b"hi");
        let z = resolve_output_name("z", &mut p).unwrap();
        assert_eq!(fetch_cached(dir.path(), &z, 1).unwrap(), b"");
        let missing = resolve_output_name("gone", &mut p).unwrap();
        let err = fetch_cached(dir.path(), &missing, 42).unwrap_err();
        assert!(matches!(err, CacheError::MissingCache { line: 42, .. }));
        assert!(err.to_string().contains("line 42"));
    }
}
