use std::fs::{self, OpenOptions};
use std::io;
use std::net::IpAddr;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{self, Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use chunkd::cache::Mode;
use chunkd::directive::{extract_inline_code, slice_lines, InlineCode, OutputMode};
use chunkd::protocol::{loopback, send, ClientError, Request, Response};
use chunkd::registry::{default_registry, load_config, BackendSpec, Registry};
use chunkd::server::{serve, ServeOptions};
use chunkd::weave::{
    render_code_listing, render_output, woven_path, ChunkRequest, ChunkSource, OutputArtifact,
    WeaveError, WeaveOptions, WeaveReport, Weaver,
};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

const READY_WINDOW: Duration = Duration::from_secs(30);
const CONTROL_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Parser)]
#[command(
    name = "chunkd",
    version,
    about = "Execute code chunks in LaTeX documents"
)]
struct Cli {
    /// Backend configuration file, overlaid on the built-in backends.
    #[arg(long, global = true, env = "CHUNKD_CONFIG")]
    config: Option<PathBuf>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Start engine daemons for server-capable backends.
    Serve {
        backends: Vec<String>,
        /// Stay attached instead of detaching.
        #[arg(long)]
        foreground: bool,
        /// Listen address.
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        /// Where `chunkd.<port>.pid` and the daemon log go.
        #[arg(long, default_value = "tmp")]
        pid_dir: PathBuf,
    },
    /// Shut down running daemons (all server-capable backends by default).
    Stop { backends: Vec<String> },
    /// Run one chunk and write its output to tmp/NAME. Prints nothing on success.
    Exec {
        #[arg(long)]
        backend: String,
        #[arg(long, conflicts_with = "code", required_unless_present = "code")]
        file: Option<PathBuf>,
        #[arg(long)]
        code: Option<String>,
        #[arg(long)]
        out: String,
        #[arg(long, default_value = "run")]
        mode: Mode,
        /// Run in a fresh process with this command instead of the daemon.
        #[arg(long)]
        batch: Option<String>,
    },
    /// Run a short snippet and print its output as a LaTeX fragment.
    Inline {
        #[arg(long)]
        backend: String,
        #[arg(long)]
        code: String,
        #[arg(long, value_enum, default_value = "inline")]
        render: Render,
        #[arg(long, default_value = "")]
        out: String,
        #[arg(long, default_value = "run")]
        mode: Mode,
        #[arg(long)]
        batch: Option<String>,
    },
    /// Print a code listing, optionally restricted to a line range.
    Show {
        #[arg(long)]
        lang: String,
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        first: Option<usize>,
        #[arg(long)]
        last: Option<usize>,
        #[arg(long)]
        no_highlight: bool,
    },
    /// Execute or reuse every chunk of a document and write <stem>.woven.tex.
    Weave {
        document: PathBuf,
        #[arg(long, default_value = "run")]
        mode: Mode,
        /// Record chunk errors and continue instead of stopping at the first.
        #[arg(long)]
        keep_going: bool,
        #[arg(long, value_enum, default_value = "plain")]
        report: ReportFormat,
        #[arg(long)]
        no_highlight: bool,
        /// Fail instead of starting missing daemons.
        #[arg(long)]
        no_autostart: bool,
        /// Output path (default: next to the document).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Render {
    Inline,
    Vbox,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Plain,
    Tsv,
}

/// Errors that should exit with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    Usage(message.into()).into()
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => process::exit(code),
        Err(e) => {
            eprintln!("chunkd: {e:#}");
            process::exit(if e.is::<Usage>() { 2 } else { 1 });
        }
    }
}

fn load_registry(config: Option<&Path>) -> Result<Registry> {
    match config {
        Some(path) => load_config(path).map_err(|e| usage(format!("{}: {e}", path.display()))),
        None => Ok(default_registry()),
    }
}

fn absolute(path: &Path) -> io::Result<PathBuf> {
    if path.is_absolute() {
        Ok(path.to_path_buf())
    } else {
        Ok(std::env::current_dir()?.join(path))
    }
}

fn run(cli: Cli) -> Result<i32> {
    let config = cli.config.as_deref().map(absolute).transpose()?;
    let registry = load_registry(config.as_deref())?;
    let daemons = DaemonLauncher {
        config: config.clone(),
    };
    match cli.command {
        Cmd::Serve {
            backends,
            foreground,
            bind,
            pid_dir,
        } => {
            for name in &backends {
                let spec = registry.resolve(name).map_err(|e| usage(e.to_string()))?;
                spec.server_port().map_err(|e| usage(e.to_string()))?;
            }
            if backends.is_empty() {
                return Ok(0);
            }
            if foreground {
                let options = ServeOptions {
                    bind,
                    pid_dir: Some(pid_dir),
                };
                let failures = serve(&registry, &backends, &options);
                for (name, e) in &failures {
                    eprintln!("chunkd: {name}: {e}");
                }
                Ok(if failures.len() == backends.len() {
                    1
                } else {
                    0
                })
            } else {
                serve_detached(&registry, &backends, &daemons, bind, &pid_dir)
            }
        }
        Cmd::Stop { backends } => {
            let names: Vec<String> = if backends.is_empty() {
                registry
                    .iter()
                    .filter(|s| s.is_server_capable())
                    .map(|s| s.name.clone())
                    .collect()
            } else {
                backends
            };
            let mut code = 0;
            for name in &names {
                let port = registry
                    .resolve(name)
                    .and_then(BackendSpec::server_port)
                    .map_err(|e| usage(e.to_string()))?;
                match send(loopback(port), &Request::Shutdown, CONTROL_TIMEOUT) {
                    Ok(Response::Ok(_)) => info!("{name}: stopped"),
                    Ok(Response::Err { code: c, message }) => {
                        eprintln!("chunkd: {name}: {} {message}", c.as_str());
                        code = 1;
                    }
                    Err(ClientError::ConnectRefused(_)) => info!("{name}: not running"),
                    Err(e) => {
                        eprintln!("chunkd: {name}: {e}");
                        code = 1;
                    }
                }
            }
            Ok(code)
        }
        Cmd::Exec {
            backend,
            file,
            code,
            out,
            mode,
            batch,
        } => {
            let source = match (file, code) {
                (Some(path), _) => ChunkSource::File(path.to_string_lossy().into_owned()),
                (None, Some(code)) => ChunkSource::Code(InlineCode::Direct(code)),
                (None, None) => unreachable!("clap requires --file or --code"),
            };
            let weaver = Weaver::new(&registry, chunk_options(mode)).with_launcher(&daemons);
            let request = ChunkRequest {
                backend: &backend,
                batch_override: batch.as_deref(),
                source,
                output: &out,
            };
            match weaver.run_chunk(Path::new("."), request) {
                Ok(outcome) => {
                    print_warnings(&outcome.report);
                    Ok(0)
                }
                Err(failure) => {
                    eprintln!("chunkd: {} {}", failure.code, failure.message);
                    Ok(1)
                }
            }
        }
        Cmd::Inline {
            backend,
            code,
            render,
            out,
            mode,
            batch,
        } => {
            let code = extract_inline_code(&code).map_err(|e| usage(e.to_string()))?;
            let weaver = Weaver::new(&registry, chunk_options(mode)).with_launcher(&daemons);
            let request = ChunkRequest {
                backend: &backend,
                batch_override: batch.as_deref(),
                source: ChunkSource::Code(code),
                output: &out,
            };
            match weaver.run_chunk(Path::new("."), request) {
                Ok(outcome) => {
                    print_warnings(&outcome.report);
                    let mode = match render {
                        Render::Inline => OutputMode::Inline,
                        Render::Vbox => OutputMode::Vbox,
                    };
                    let fragment = render_output(&OutputArtifact {
                        bytes: outcome.bytes,
                        mode,
                    })?;
                    print!("{fragment}");
                    Ok(0)
                }
                Err(failure) => {
                    eprintln!("chunkd: {} {}", failure.code, failure.message);
                    Ok(1)
                }
            }
        }
        Cmd::Show {
            lang,
            file,
            first,
            last,
            no_highlight,
        } => {
            let text = fs::read_to_string(&file)
                .with_context(|| format!("cannot read {}", file.display()))?;
            let code = slice_lines(&text, first, last).map_err(|e| usage(e.to_string()))?;
            println!("{}", render_code_listing(&lang, &code, !no_highlight));
            Ok(0)
        }
        Cmd::Weave {
            document,
            mode,
            keep_going,
            report,
            no_highlight,
            no_autostart,
            output,
        } => {
            let options = WeaveOptions {
                mode,
                keep_going,
                highlight: !no_highlight,
            };
            let mut weaver = Weaver::new(&registry, options);
            if !no_autostart {
                weaver = weaver.with_launcher(&daemons);
            }
            weave(&weaver, &document, output.as_deref(), report)
        }
    }
}

fn chunk_options(mode: Mode) -> WeaveOptions {
    WeaveOptions {
        mode,
        ..WeaveOptions::default()
    }
}

fn print_warnings(report: &WeaveReport) {
    for (_, w) in &report.warnings {
        eprintln!("chunkd: warning: {w}");
    }
}

fn print_report(report: &WeaveReport, format: ReportFormat) {
    match format {
        ReportFormat::Plain => eprint!("{}", report.to_plain()),
        ReportFormat::Tsv => eprint!("{}", report.to_tsv()),
    }
}

fn weave(
    weaver: &Weaver<'_>,
    document: &Path,
    output: Option<&Path>,
    format: ReportFormat,
) -> Result<i32> {
    let text = fs::read_to_string(document)
        .with_context(|| format!("cannot read {}", document.display()))?;
    let dir = match document.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    match weaver.weave_str(&text, dir) {
        Ok(woven) => {
            let target = output
                .map(Path::to_path_buf)
                .unwrap_or_else(|| woven_path(document));
            fs::write(&target, &woven.text)
                .with_context(|| format!("cannot write {}", target.display()))?;
            print_report(&woven.report, format);
            Ok(if woven.report.errors.is_empty() { 0 } else { 1 })
        }
        Err(WeaveError::Chunk { report, .. }) => {
            print_report(&report, format);
            Ok(1)
        }
        Err(WeaveError::Parse(e)) => Err(usage(format!("{}: {e}", document.display()))),
        Err(e) => Err(e.into()),
    }
}

/// Starts `chunkd serve --foreground` as a detached process group.
struct DaemonLauncher {
    config: Option<PathBuf>,
}

impl DaemonLauncher {
    fn spawn(
        &self,
        names: &[String],
        bind: IpAddr,
        pid_dir: &Path,
        workdir: &Path,
    ) -> io::Result<Child> {
        let exe = std::env::current_exe()?;
        let log_dir = workdir.join(pid_dir);
        fs::create_dir_all(&log_dir)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_dir.join("chunkd.log"))?;
        let mut cmd = Command::new(exe);
        cmd.arg("serve")
            .args(names)
            .arg("--foreground")
            .arg("--bind")
            .arg(bind.to_string())
            .arg("--pid-dir")
            .arg(pid_dir)
            .current_dir(workdir)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(log)
            .process_group(0);
        match &self.config {
            Some(path) => cmd.arg("--config").arg(path),
            None => cmd.env_remove("CHUNKD_CONFIG"),
        };
        cmd.spawn()
    }
}

impl chunkd::weave::Launcher for DaemonLauncher {
    fn launch(&self, backend: &BackendSpec, workdir: &Path) -> io::Result<()> {
        let bind = IpAddr::from([127, 0, 0, 1]);
        self.spawn(
            std::slice::from_ref(&backend.name),
            bind,
            Path::new("tmp"),
            workdir,
        )
        .map(drop)
    }
}

fn ping(port: u16) -> Result<Response, ClientError> {
    send(loopback(port), &Request::Ping, CONTROL_TIMEOUT)
}

fn serve_detached(
    registry: &Registry,
    names: &[String],
    launcher: &DaemonLauncher,
    bind: IpAddr,
    pid_dir: &Path,
) -> Result<i32> {
    let mut pending = Vec::new();
    for name in names {
        let port = registry.resolve(name)?.server_port()?;
        match ping(port) {
            Ok(Response::Ok(_)) => warn!("{name}: already running on port {port}"),
            _ => pending.push((name.clone(), port)),
        }
    }
    if pending.is_empty() {
        return Ok(0);
    }
    let to_start: Vec<String> = pending.iter().map(|(n, _)| n.clone()).collect();
    let mut child = launcher.spawn(&to_start, bind, pid_dir, Path::new("."))?;

    let deadline = Instant::now() + READY_WINDOW;
    let mut failed = Vec::new();
    for (name, port) in pending {
        loop {
            match ping(port) {
                Ok(Response::Ok(_)) => break,
                Ok(Response::Err { code, message }) => {
                    failed.push(anyhow!("{name}: {} {message}", code.as_str()));
                    break;
                }
                Err(e) if matches!(child.try_wait(), Ok(Some(_))) => {
                    failed.push(anyhow!("{name}: daemon exited: {e}"));
                    break;
                }
                Err(_) if Instant::now() < deadline => thread::sleep(Duration::from_millis(50)),
                Err(e) => {
                    failed.push(anyhow!("{name}: not ready on port {port}: {e}"));
                    break;
                }
            }
        }
    }
    for e in &failed {
        eprintln!("chunkd: {e}");
    }
    if !failed.is_empty() {
        bail!(
            "{} backend(s) failed to start; see {}",
            failed.len(),
            pid_dir.join("chunkd.log").display()
        );
    }
    Ok(0)
}
