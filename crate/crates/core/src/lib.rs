//! Execute code chunks embedded in LaTeX documents through batch interpreters
//! or persistent engine daemons, caching outputs under `tmp/`.

pub mod batch;
pub mod cache;
pub mod directive;
pub mod protocol;
pub mod registry;
pub mod server;
pub mod session;
pub mod weave;

pub use batch::{build_batch_command, run_batch, BatchCommand, BatchError, RunResult};
pub use cache::{
    decide_execution, fetch_cached, resolve_output_name, ExecutionPolicy, Mode, OutputName,
};
pub use directive::{
    scan_document, slice_lines, Directive, DirectiveError, DirectiveKind, DocumentItem, OutputMode,
};
pub use protocol::{ErrorCode, Request, Response, RunRequest, SourceKind};
pub use registry::{
    default_registry, load_config, parse_config, BackendSpec, Registry, RegistryError,
};
pub use server::{serve, Daemon, ServeOptions, ServerError};
pub use session::{Session, SessionError, SessionState};
pub use weave::{
    render_code_listing, render_output, ChunkRequest, ChunkSource, OutputArtifact, WeaveOptions,
    WeaveReport, Weaver, Woven,
};
