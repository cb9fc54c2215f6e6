//! Batch mode: a fresh interpreter per chunk, output redirected to a file.

use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};

use thiserror::Error;

use crate::registry::BackendSpec;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("empty batch command")]
    EmptyCommand,
    #[error("cannot start `{program}`: {source}")]
    SpawnFailure {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error("cannot write output {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchCommand {
    pub program: String,
    pub args: Vec<String>,
    /// Relative paths are taken relative to `workdir`.
    pub output: PathBuf,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunResult {
    pub status: ExitStatus,
    pub bytes: u64,
}

impl RunResult {
    pub fn success(&self) -> bool {
        self.status.success()
    }
}

impl BatchCommand {
    /// `<executable> <batch_args...> <source>` for a registry backend.
    pub fn for_backend(spec: &BackendSpec, source: &Path, output: &Path) -> Self {
        let mut args = spec.batch_args.clone();
        args.push(source.to_string_lossy().into_owned());
        BatchCommand {
            program: spec.executable.clone(),
            args,
            output: output.to_path_buf(),
            workdir: PathBuf::from("."),
        }
    }

    pub fn in_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.workdir = dir.into();
        self
    }

    pub fn output_path(&self) -> PathBuf {
        self.workdir.join(&self.output)
    }
}

/// Splits a command such as `Rscript --save --restore` on whitespace and
/// appends the source file. No shell is involved, so quotes and globs are
/// passed through literally.
pub fn build_batch_command(
    command: &str,
    source: &Path,
    output: &Path,
) -> Result<BatchCommand, BatchError> {
    let mut words = command.split_whitespace().map(str::to_string);
    let program = words.next().ok_or(BatchError::EmptyCommand)?;
    let mut args: Vec<String> = words.collect();
    args.push(source.to_string_lossy().into_owned());
    Ok(BatchCommand {
        program,
        args,
        output: output.to_path_buf(),
        workdir: PathBuf::from("."),
    })
}

/// Runs the command to completion with stdout and stderr both going to the
/// output file. A nonzero exit is reported in the result, not as an error,
/// and the output file is kept.
pub fn run_batch(command: &BatchCommand) -> Result<RunResult, BatchError> {
    let path = command.output_path();
    let output_err = |source| BatchError::Output {
        path: path.clone(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(output_err)?;
    }
    let stdout = File::create(&path).map_err(output_err)?;
    let stderr = stdout.try_clone().map_err(output_err)?;

    let status = Command::new(&command.program)
        .args(&command.args)
        .current_dir(&command.workdir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .status()
        .map_err(|source| BatchError::SpawnFailure {
            program: command.program.clone(),
            source,
        })?;
    let bytes = fs::metadata(&path).map_err(output_err)?.len();
    Ok(RunResult { status, bytes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_override() {
        let cmd = build_batch_command(
            "Rscript --save --restore",
            Path::new("Code/JiJin2016.R"),
            Path::new("tmp/initprog"),
        )
        .unwrap();
        assert_eq!(cmd.program, "Rscript");
        assert_eq!(cmd.args, ["--save", "--restore", "Code/JiJin2016.R"]);
        assert_eq!(cmd.output, Path::new("tmp/initprog"));
    }

    #[test]
    fn split_plain() {
        let cmd = build_batch_command("sh", Path::new("s.sh"), Path::new("tmp/o")).unwrap();
        assert_eq!(cmd.program, "sh");
        assert_eq!(cmd.args, ["s.sh"]);
    }

    #[test]
    fn empty_command() {
        for text in ["", "   \t"] {
            assert!(matches!(
                build_batch_command(text, Path::new("a"), Path::new("b")),
                Err(BatchError::EmptyCommand)
            ));
        }
    }

    #[test]
    fn no_shell_interpretation() {
        let cmd = build_batch_command("echo $HOME '*'", Path::new("x"), Path::new("o")).unwrap();
        assert_eq!(cmd.args, ["$HOME", "'*'", "x"]);
    }

    #[test]
    fn runs_and_merges_stderr() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("s.sh"), "echo out\necho err >&2\nexit 3\n").unwrap();
        let cmd = build_batch_command("sh", Path::new("s.sh"), Path::new("tmp/o"))
            .unwrap()
            .in_dir(dir.path());
        let result = run_batch(&cmd).unwrap();
        assert_eq!(result.status.code(), Some(3));
        assert_eq!(fs::read(dir.path().join("tmp/o")).unwrap(), b"out\nerr\n");
        assert_eq!(result.bytes, 8);
    }

    #[test]
    fn silent_program() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("q.sh"), "true\n").unwrap();
        let cmd = build_batch_command("sh", Path::new("q.sh"), Path::new("tmp/q"))
            .unwrap()
            .in_dir(dir.path());
        let result = run_batch(&cmd).unwrap();
        assert!(result.success());
        assert_eq!(result.bytes, 0);
        assert!(dir.path().join("tmp/q").exists());
    }

    #[test]
    fn missing_program() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = build_batch_command("/no/such/prog", Path::new("x"), Path::new("o"))
            .unwrap()
            .in_dir(dir.path());
        assert!(matches!(
            run_batch(&cmd),
            Err(BatchError::SpawnFailure { .. })
        ));
    }

    #[test]
    fn deterministic() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("p.sh"),
            "for i in 1 2 3; do echo $i; done\n",
        )
        .unwrap();
        let run = |out: &str| {
            let cmd = build_batch_command("sh", Path::new("p.sh"), Path::new(out))
                .unwrap()
                .in_dir(dir.path());
            run_batch(&cmd).unwrap();
            fs::read(dir.path().join(out)).unwrap()
        };
        assert_eq!(run("tmp/a"), run("tmp/b"));
    }

    #[test]
    fn backend_command() {
        let spec = BackendSpec {
            batch_args: vec!["-e".into()],
            ..BackendSpec::new("sh", "sh")
        };
        let cmd = BatchCommand::for_backend(&spec, Path::new("a.sh"), Path::new("tmp/o"));
        assert_eq!(cmd.program, "sh");
        assert_eq!(cmd.args, ["-e", "a.sh"]);
    }
}
