//! Document pass: execute or reuse every chunk, splice rendered outputs.
//!
//! Directives are handled strictly in document order because server-mode
//! chunks share engine state. `filecontents*` blocks are written before any
//! later directive runs. The woven text is the input with each directive
//! replaced by its rendering; all other bytes are untouched.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info};
use thiserror::Error;

use crate::batch::{build_batch_command, run_batch, BatchCommand};
use crate::cache::{
    fetch_cached, resolve_include_name, resolve_output_name, ExecutionPolicy, Mode, OutputName,
};
use crate::directive::{
    extract_inline_code, scan_document, slice_lines, DirectiveError, DirectiveKind, DocumentItem,
    InlineCode, OutputMode,
};
use crate::protocol::{loopback, send_run, ClientError, Response, RunRequest};
use crate::registry::{BackendSpec, Registry};

/// How long the weaver keeps retrying after auto-starting a daemon.
pub const AUTOSTART_WINDOW: Duration = Duration::from_secs(10);
/// Added to a backend's timeout to get the client-side response ceiling.
pub const CLIENT_SLACK: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("inline output spans several lines")]
    InlineMultiline,
}

/// Raw chunk output plus how to embed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputArtifact {
    pub bytes: Vec<u8>,
    pub mode: OutputMode,
}

pub const VBOX_BEGIN: &str = "\\begin{tcolorbox}[breakable]\n\\begin{Verbatim}[breaklines=true]\n";
pub const VBOX_END: &str = "\\end{Verbatim}\n\\end{tcolorbox}";

fn with_final_newline(body: &str) -> String {
    if body.is_empty() || body.ends_with('\n') {
        body.to_string()
    } else {
        format!("{body}\n")
    }
}

/// Renders a chunk output as a LaTeX fragment.
///
/// * `tex`: the bytes unchanged.
/// * `inline`: trailing line breaks removed; interior ones are an error.
/// * `vbox`: `tcolorbox` (breakable) around an fvextra `Verbatim` with
///   `breaklines=true`.
pub fn render_output(artifact: &OutputArtifact) -> Result<String, RenderError> {
    let text = String::from_utf8_lossy(&artifact.bytes);
    Ok(match artifact.mode {
        OutputMode::Tex => text.into_owned(),
        OutputMode::Inline => {
            let trimmed = text.trim_end_matches(['\n', '\r']);
            if trimmed.contains('\n') {
                return Err(RenderError::InlineMultiline);
            }
            trimmed.to_string()
        }
        OutputMode::Vbox => format!("{VBOX_BEGIN}{}{VBOX_END}", with_final_newline(&text)),
    })
}

/// A `minted` listing tagged with `language`, or a plain fvextra `Verbatim`
/// when highlighting is off.
pub fn render_code_listing(language: &str, code: &str, highlight: bool) -> String {
    let body = with_final_newline(code);
    if highlight {
        format!("\\begin{{minted}}{{{language}}}\n{body}\\end{{minted}}")
    } else {
        format!("\\begin{{Verbatim}}\n{body}\\end{{Verbatim}}")
    }
}

/// Starts a daemon for a backend whose port refused the connection.
pub trait Launcher {
    fn launch(&self, backend: &BackendSpec, workdir: &Path) -> io::Result<()>;
}

impl<F> Launcher for F
where
    F: Fn(&BackendSpec, &Path) -> io::Result<()>,
{
    fn launch(&self, backend: &BackendSpec, workdir: &Path) -> io::Result<()> {
        self(backend, workdir)
    }
}

#[derive(Debug, Clone)]
pub struct WeaveOptions {
    pub mode: Mode,
    pub keep_going: bool,
    /// `minted` listings when true, plain `Verbatim` otherwise.
    pub highlight: bool,
}

impl Default for WeaveOptions {
    fn default() -> Self {
        WeaveOptions {
            mode: Mode::Run,
            keep_going: false,
            highlight: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkFailure {
    pub line: usize,
    /// Stable machine-readable code such as `MISSING_CACHE` or `ENGINE_DIED`.
    pub code: String,
    pub message: String,
}

impl ChunkFailure {
    fn new(line: usize, code: &str, message: impl ToString) -> Self {
        ChunkFailure {
            line,
            code: code.to_string(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkTiming {
    pub line: usize,
    pub mode: Mode,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WeaveReport {
    pub chunks_run: usize,
    pub chunks_cached: usize,
    pub errors: Vec<ChunkFailure>,
    /// Non-fatal notes, e.g. nonzero batch exit statuses.
    pub warnings: Vec<(usize, String)>,
    pub timings: Vec<ChunkTiming>,
    /// Batch processes plus daemon launches.
    pub subprocesses: usize,
}

impl WeaveReport {
    pub fn to_plain(&self) -> String {
        let mut out = format!(
            "{} chunk(s) run, {} from cache, {} error(s), {} subprocess(es)\n",
            self.chunks_run,
            self.chunks_cached,
            self.errors.len(),
            self.subprocesses
        );
        for t in &self.timings {
            let _ = writeln!(
                out,
                "  line {:>5}  {:<5}  {:.3}s",
                t.line,
                t.mode,
                t.elapsed.as_secs_f64()
            );
        }
        for (line, w) in &self.warnings {
            let _ = writeln!(out, "warning: line {line}: {w}");
        }
        for e in &self.errors {
            let _ = writeln!(out, "error: line {}: {} {}", e.line, e.code, e.message);
        }
        out
    }

    /// One record per line, tab-separated, first field is the record type.
    pub fn to_tsv(&self) -> String {
        let clean = |s: &str| s.replace(['\t', '\n', '\r'], " ");
        let mut out = format!(
            "summary\t{}\t{}\t{}\t{}\n",
            self.chunks_run,
            self.chunks_cached,
            self.errors.len(),
            self.subprocesses
        );
        for t in &self.timings {
            let _ = writeln!(
                out,
                "chunk\t{}\t{}\t{:.6}",
                t.line,
                t.mode,
                t.elapsed.as_secs_f64()
            );
        }
        for (line, w) in &self.warnings {
            let _ = writeln!(out, "warning\t{line}\t{}", clean(w));
        }
        for e in &self.errors {
            let _ = writeln!(out, "error\t{}\t{}\t{}", e.line, e.code, clean(&e.message));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Woven {
    pub text: String,
    pub report: WeaveReport,
}

#[derive(Debug, Error)]
pub enum WeaveError {
    #[error(transparent)]
    Parse(#[from] DirectiveError),
    #[error("cannot read {}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {}: {} {}", failure.line, failure.code, failure.message)]
    Chunk {
        failure: ChunkFailure,
        report: Box<WeaveReport>,
    },
}

/// `<dir>/<stem>.woven.tex` for `<dir>/<stem>.tex`.
pub fn woven_path(document: &Path) -> PathBuf {
    let stem = document
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "document".into());
    document.with_file_name(format!("{stem}.woven.tex"))
}

pub struct Weaver<'a> {
    registry: &'a Registry,
    options: WeaveOptions,
    launcher: Option<&'a dyn Launcher>,
}

impl<'a> Weaver<'a> {
    pub fn new(registry: &'a Registry, options: WeaveOptions) -> Self {
        Weaver {
            registry,
            options,
            launcher: None,
        }
    }

    /// Enables daemon auto-start for server-mode chunks.
    pub fn with_launcher(mut self, launcher: &'a dyn Launcher) -> Self {
        self.launcher = Some(launcher);
        self
    }

    /// Weaves `document` and writes the result to [`woven_path`].
    pub fn weave_file(&self, document: &Path) -> Result<(PathBuf, Woven), WeaveError> {
        let text = fs::read_to_string(document).map_err(|source| WeaveError::Read {
            path: document.to_path_buf(),
            source,
        })?;
        let dir = document
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let woven = self.weave_str(&text, dir)?;
        let out = woven_path(document);
        fs::write(&out, &woven.text).map_err(|source| WeaveError::Write {
            path: out.clone(),
            source,
        })?;
        Ok((out, woven))
    }

    /// Executes (or, in cache mode, looks up) one chunk relative to `doc_dir`.
    pub fn run_chunk(
        &self,
        doc_dir: &Path,
        request: ChunkRequest<'_>,
    ) -> Result<ChunkOutcome, ChunkFailure> {
        let doc_dir = doc_dir
            .canonicalize()
            .map_err(|e| ChunkFailure::new(0, "IO", format!("{}: {e}", doc_dir.display())))?;
        let route = match request.batch_override {
            Some(command) => Route::Batch(command.to_string()),
            None => match self.registry.get(request.backend) {
                Some(spec) if spec.is_server_capable() => Route::Server(spec),
                _ => Route::Batch(request.backend.to_string()),
            },
        };
        let mut pass = Pass {
            weaver: self,
            doc_dir: &doc_dir,
            policy: ExecutionPolicy::new(self.options.mode),
            report: WeaveReport::default(),
        };
        let mode = pass.policy.global;
        let (name, bytes) = pass.chunk(
            0,
            request.output,
            mode,
            route,
            request.source,
            Some(request.backend),
        )?;
        Ok(ChunkOutcome {
            output: name.under(&doc_dir),
            bytes,
            report: pass.report,
        })
    }

    /// Weaves document text whose relative paths refer to `doc_dir`.
    pub fn weave_str(&self, text: &str, doc_dir: &Path) -> Result<Woven, WeaveError> {
        let doc_dir = doc_dir.canonicalize().map_err(|source| WeaveError::Read {
            path: doc_dir.to_path_buf(),
            source,
        })?;
        let items = scan_document(text)?;
        let mut pass = Pass {
            weaver: self,
            doc_dir: &doc_dir,
            policy: ExecutionPolicy::new(self.options.mode),
            report: WeaveReport::default(),
        };
        let mut woven = String::with_capacity(text.len());
        for item in &items {
            let directive = match item {
                DocumentItem::Text(t) => {
                    woven.push_str(t);
                    continue;
                }
                DocumentItem::Directive(d) => d,
            };
            match pass.process(&directive.kind, directive.line, &directive.text) {
                Ok(fragment) => woven.push_str(&fragment),
                Err(failure) => {
                    info!(
                        "line {}: {} {}",
                        failure.line, failure.code, failure.message
                    );
                    if !self.options.keep_going {
                        pass.report.errors.push(failure.clone());
                        return Err(WeaveError::Chunk {
                            failure,
                            report: Box::new(pass.report),
                        });
                    }
                    pass.report.errors.push(failure);
                }
            }
        }
        Ok(Woven {
            text: woven,
            report: pass.report,
        })
    }
}

struct Pass<'w, 'a> {
    weaver: &'w Weaver<'a>,
    doc_dir: &'w Path,
    policy: ExecutionPolicy,
    report: WeaveReport,
}

/// Where an executable chunk's code comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChunkSource {
    /// Path relative to the document directory.
    File(String),
    Code(InlineCode),
}

/// One chunk issued outside a document, e.g. by `chunkd exec`.
#[derive(Debug, Clone)]
pub struct ChunkRequest<'r> {
    /// Registry name. Server-capable backends go through their daemon,
    /// anything else runs in batch mode (an unknown name is a command).
    pub backend: &'r str,
    pub batch_override: Option<&'r str>,
    pub source: ChunkSource,
    /// Empty means `codeOutput0`.
    pub output: &'r str,
}

#[derive(Debug, Clone)]
pub struct ChunkOutcome {
    pub output: PathBuf,
    pub bytes: Vec<u8>,
    pub report: WeaveReport,
}

/// How an executable chunk runs when it is not served from the cache.
enum Route<'s> {
    /// Registry backend or whitespace-split command, fresh process.
    Batch(String),
    Server(&'s BackendSpec),
}

impl<'w, 'a> Pass<'w, 'a> {
    fn process(
        &mut self,
        kind: &DirectiveKind,
        line: usize,
        text: &str,
    ) -> Result<String, ChunkFailure> {
        match kind {
            DirectiveKind::FileBlock {
                path,
                body,
                overwrite,
            } => {
                self.write_file_block(path, body, *overwrite, line)?;
                Ok(text.to_string())
            }
            DirectiveKind::ShowCode {
                language,
                source,
                first,
                last,
            } => {
                let path = self.doc_dir.join(source);
                let code = fs::read_to_string(&path)
                    .map_err(|e| ChunkFailure::new(line, "IO", format!("{source}: {e}")))?;
                let code = slice_lines(&code, *first, *last)
                    .map_err(|e| ChunkFailure::new(line, "RANGE", e))?;
                Ok(render_code_listing(
                    language,
                    &code,
                    self.weaver.options.highlight,
                ))
            }
            DirectiveKind::IncludeOutput { output, mode } => {
                let name = resolve_include_name(output, &self.policy, line)
                    .map_err(|e| ChunkFailure::new(line, "BAD_NAME", e))?;
                let bytes = fetch_cached(self.doc_dir, &name, line)
                    .map_err(|e| ChunkFailure::new(line, "MISSING_CACHE", e))?;
                render(bytes, *mode, line)
            }
            DirectiveKind::RunExt {
                program,
                source,
                output,
                run_override,
            } => {
                let mode = self.policy.decide(run_override.as_deref());
                self.chunk(
                    line,
                    output,
                    mode,
                    Route::Batch(program.clone()),
                    ChunkSource::File(source.clone()),
                    None,
                )?;
                Ok(String::new())
            }
            DirectiveKind::ShortRun {
                backend,
                batch_override,
                source,
                output,
                run_override,
            } => {
                let mode = self.policy.decide(run_override.as_deref());
                let route = self.route(backend, batch_override.as_deref(), line)?;
                self.chunk(
                    line,
                    output,
                    mode,
                    route,
                    ChunkSource::File(source.clone()),
                    None,
                )?;
                Ok(String::new())
            }
            DirectiveKind::Inline {
                program,
                code,
                mode,
            } => {
                let inline =
                    extract_inline_code(code).map_err(|e| ChunkFailure::new(line, "QUOTE", e))?;
                let (_, bytes) = self.chunk(
                    line,
                    "",
                    self.policy.global,
                    Route::Batch(program.clone()),
                    ChunkSource::Code(inline),
                    Some(program),
                )?;
                render(bytes, *mode, line)
            }
            DirectiveKind::ShortInline {
                backend,
                batch_override,
                code,
                mode,
            } => {
                let inline =
                    extract_inline_code(code).map_err(|e| ChunkFailure::new(line, "QUOTE", e))?;
                let route = self.route(backend, batch_override.as_deref(), line)?;
                let (_, bytes) = self.chunk(
                    line,
                    "",
                    self.policy.global,
                    route,
                    ChunkSource::Code(inline),
                    Some(backend),
                )?;
                render(bytes, *mode, line)
            }
        }
    }

    fn route(
        &self,
        backend: &str,
        batch_override: Option<&str>,
        line: usize,
    ) -> Result<Route<'a>, ChunkFailure> {
        if let Some(command) = batch_override {
            return Ok(Route::Batch(command.to_string()));
        }
        let registry: &'a Registry = self.weaver.registry;
        let spec = registry
            .resolve(backend)
            .map_err(|e| ChunkFailure::new(line, "UNKNOWN_BACKEND", e))?;
        if !spec.is_server_capable() {
            return Err(ChunkFailure::new(
                line,
                "NOT_SERVER_CAPABLE",
                format!("backend `{backend}` has no server port"),
            ));
        }
        Ok(Route::Server(spec))
    }

    fn chunk(
        &mut self,
        line: usize,
        output: &str,
        mode: Mode,
        route: Route<'_>,
        source: ChunkSource,
        language: Option<&str>,
    ) -> Result<(OutputName, Vec<u8>), ChunkFailure> {
        let name = resolve_output_name(output, &mut self.policy)
            .map_err(|e| ChunkFailure::new(line, "BAD_NAME", e))?;
        let started = Instant::now();
        let bytes = match mode {
            Mode::Cache => {
                let bytes = fetch_cached(self.doc_dir, &name, line)
                    .map_err(|e| ChunkFailure::new(line, "MISSING_CACHE", e))?;
                self.report.chunks_cached += 1;
                bytes
            }
            Mode::Run => {
                self.execute(line, &name, route, source, language)?;
                self.report.chunks_run += 1;
                let path = name.under(self.doc_dir);
                fs::read(&path).map_err(|e| {
                    ChunkFailure::new(line, "IO", format!("{}: {e}", path.display()))
                })?
            }
        };
        self.report.timings.push(ChunkTiming {
            line,
            mode,
            elapsed: started.elapsed(),
        });
        Ok((name, bytes))
    }

    fn execute(
        &mut self,
        line: usize,
        name: &OutputName,
        route: Route<'_>,
        source: ChunkSource,
        language: Option<&str>,
    ) -> Result<(), ChunkFailure> {
        let io_fail = |e: io::Error| ChunkFailure::new(line, "IO", e);
        // Inline code that is not fenced, or any inline code headed for a
        // batch process, goes through a file next to the output.
        let code_file = |doc_dir: &Path, code: &str| -> Result<String, ChunkFailure> {
            let rel = format!(
                "{}.code{}",
                name.path().display(),
                extension_for(language.unwrap_or(""))
            );
            let path = doc_dir.join(&rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_fail)?;
            }
            fs::write(&path, with_final_newline(code)).map_err(io_fail)?;
            Ok(rel)
        };

        match route {
            Route::Batch(program) => {
                let source = match source {
                    ChunkSource::File(path) => path,
                    ChunkSource::Code(code) => code_file(self.doc_dir, code.code())?,
                };
                let command = match self.weaver.registry.get(&program) {
                    Some(spec) => BatchCommand::for_backend(spec, Path::new(&source), name.path()),
                    None => build_batch_command(&program, Path::new(&source), name.path())
                        .map_err(|e| ChunkFailure::new(line, "EMPTY_COMMAND", e))?,
                }
                .in_dir(self.doc_dir);
                debug!("line {line}: batch {} {:?}", command.program, command.args);
                self.report.subprocesses += 1;
                let result =
                    run_batch(&command).map_err(|e| ChunkFailure::new(line, "SPAWN", e))?;
                if !result.success() {
                    self.report.warnings.push((
                        line,
                        format!("`{}` exited with {}", command.program, result.status),
                    ));
                }
                Ok(())
            }
            Route::Server(spec) => {
                let output = name.under(self.doc_dir).to_string_lossy().into_owned();
                let request = match source {
                    ChunkSource::File(path) => {
                        RunRequest::file(&self.doc_dir.join(path).to_string_lossy(), output)
                    }
                    ChunkSource::Code(InlineCode::Direct(code)) => {
                        RunRequest::inline(&code, output)
                    }
                    ChunkSource::Code(InlineCode::ViaTempFile(code)) => {
                        let rel = code_file(self.doc_dir, &code)?;
                        RunRequest::file(&self.doc_dir.join(rel).to_string_lossy(), output)
                    }
                };
                match self.send_with_autostart(spec, request, line)? {
                    Response::Ok(_) => Ok(()),
                    Response::Err { code, message } => {
                        Err(ChunkFailure::new(line, code.as_str(), message))
                    }
                }
            }
        }
    }

    fn send_with_autostart(
        &mut self,
        spec: &BackendSpec,
        request: RunRequest,
        line: usize,
    ) -> Result<Response, ChunkFailure> {
        let port = spec.port.expect("server route requires a port");
        let addr = loopback(port);
        let timeout = spec.timeout + CLIENT_SLACK;
        let client_fail = |e: ClientError| {
            let code = match e {
                ClientError::ConnectRefused(_) => "CONNECT_REFUSED",
                ClientError::ResponseTimeout(..) => "RESPONSE_TIMEOUT",
                _ => "IO",
            };
            ChunkFailure::new(line, code, e)
        };
        match send_run(addr, request.clone(), timeout) {
            Err(ClientError::ConnectRefused(_)) => {}
            other => return other.map_err(client_fail),
        }
        let Some(launcher) = self.weaver.launcher else {
            return Err(ChunkFailure::new(
                line,
                "CONNECT_REFUSED",
                format!(
                    "no `{}` daemon on port {port} and auto-start is disabled",
                    spec.name
                ),
            ));
        };
        info!("starting `{}` daemon on port {port}", spec.name);
        self.report.subprocesses += 1;
        launcher
            .launch(spec, self.doc_dir)
            .map_err(|e| ChunkFailure::new(line, "SPAWN", e))?;

        let deadline = Instant::now() + AUTOSTART_WINDOW;
        let mut delay = Duration::from_millis(25);
        loop {
            thread::sleep(delay);
            match send_run(addr, request.clone(), timeout) {
                Err(ClientError::ConnectRefused(_)) if Instant::now() < deadline => {
                    delay = (delay * 2).min(Duration::from_secs(1));
                }
                other => return other.map_err(client_fail),
            }
        }
    }

    fn write_file_block(
        &self,
        path: &str,
        body: &str,
        overwrite: bool,
        line: usize,
    ) -> Result<(), ChunkFailure> {
        let rel = Path::new(path);
        if rel.is_absolute() || rel.components().any(|c| matches!(c, Component::ParentDir)) {
            return Err(ChunkFailure::new(
                line,
                "BAD_NAME",
                format!("filecontents target `{path}` must stay inside the document directory"),
            ));
        }
        let target = self.doc_dir.join(rel);
        if !overwrite {
            match fs::read_to_string(&target) {
                Ok(existing) if existing == body => return Ok(()),
                Ok(_) => {
                    return Err(ChunkFailure::new(
                        line,
                        "FILE_EXISTS",
                        format!("{path} exists with different contents; add [overwrite]"),
                    ))
                }
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(ChunkFailure::new(line, "IO", e)),
            }
        }
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| ChunkFailure::new(line, "IO", e))?;
        }
        fs::write(&target, body).map_err(|e| ChunkFailure::new(line, "IO", e))
    }
}

fn render(bytes: Vec<u8>, mode: OutputMode, line: usize) -> Result<String, ChunkFailure> {
    render_output(&OutputArtifact { bytes, mode })
        .map_err(|e| ChunkFailure::new(line, "INLINE_MULTILINE", e))
}

fn extension_for(language: &str) -> &'static str {
    match language {
        "R" | "Rscript" => ".R",
        "julia" => ".jl",
        "matlab" | "octave" => ".m",
        "sh" | "bash" => ".sh",
        "python" | "python3" => ".py",
        _ => "",
    }
}
