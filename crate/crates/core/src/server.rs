//! The session daemon.
//!
//! Each served backend owns one [`Session`] and one TCP listener. Connections
//! are accepted concurrently, but execution against an engine is serialized by
//! the session's mutex. Distinct backends run in parallel.

use std::fs;
use std::io::{self, BufReader, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, TryLockError};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, error, info, warn};
use thiserror::Error;

use crate::protocol::{read_request, ErrorCode, Request, Response, RunRequest, SourceKind};
use crate::registry::{BackendSpec, Registry, RegistryError};
use crate::session::{Session, SessionError, SessionState};

const REQUEST_READ_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("port {0} is already in use")]
    AddressInUse(u16),
    #[error("cannot listen on port {port}: {source}")]
    Bind {
        port: u16,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Session(#[from] SessionError),
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub bind: IpAddr,
    /// Directory receiving `chunkd.<port>.pid` files while backends are up.
    pub pid_dir: Option<PathBuf>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            pid_dir: None,
        }
    }
}

/// A started session together with its bound listener.
#[derive(Debug)]
pub struct BoundSession {
    pub listener: TcpListener,
    pub session: Session,
}

/// Binds the backend's port, then launches its engine.
pub fn start_session(spec: &BackendSpec, bind: IpAddr) -> Result<BoundSession, ServerError> {
    let port = spec.server_port()?;
    let listener = TcpListener::bind((bind, port)).map_err(|source| {
        if source.kind() == io::ErrorKind::AddrInUse {
            ServerError::AddressInUse(port)
        } else {
            ServerError::Bind { port, source }
        }
    })?;
    let session = Session::start(spec.clone())?;
    Ok(BoundSession { listener, session })
}

/// Executes one RUN request and writes its output file.
///
/// The output is written to a sibling temporary file and renamed into place,
/// so a failed request never leaves a partial or stale-looking output behind.
pub fn handle_request(session: &mut Session, request: &RunRequest) -> Response {
    let Ok(payload) = std::str::from_utf8(&request.payload) else {
        return Response::err(ErrorCode::BadRequest, "payload is not UTF-8");
    };
    let code = match request.source {
        SourceKind::Inline => payload.to_string(),
        SourceKind::File => {
            if !Path::new(payload).is_file() {
                return Response::err(ErrorCode::Io, format!("no such source file {payload}"));
            }
            session.spec().file_run_command(payload)
        }
    };
    let output = match session.execute(&code) {
        Ok(bytes) => bytes,
        Err(e) => {
            let code = match e {
                SessionError::EngineDied => ErrorCode::EngineDied,
                SessionError::ExecTimeout(_) => ErrorCode::Timeout,
                SessionError::SessionDead => ErrorCode::SessionDead,
                _ => ErrorCode::Io,
            };
            return Response::err(code, e);
        }
    };
    match write_atomically(Path::new(&request.output), &output) {
        Ok(()) => Response::Ok(output.len() as u64),
        Err(e) => Response::err(ErrorCode::Io, format!("writing {}: {e}", request.output)),
    }
}

static TMP_SEQ: AtomicU64 = AtomicU64::new(0);

pub(crate) fn write_atomically(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(
        ".part-{}-{}",
        std::process::id(),
        TMP_SEQ.fetch_add(1, Ordering::Relaxed)
    ));
    let tmp = PathBuf::from(tmp);
    let result = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

struct Served {
    name: String,
    port: u16,
    wake_addr: SocketAddr,
    session: Mutex<Session>,
    stopping: AtomicBool,
    closed: AtomicBool,
    pid_file: Option<PathBuf>,
}

impl Served {
    fn lock(&self) -> MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn stop(&self) {
        if self.kill_engine() {
            self.close_listener();
        }
    }

    /// Marks the backend as stopping and kills its engine. False if another
    /// caller got there first.
    fn kill_engine(&self) -> bool {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return false;
        }
        info!("{}: shutting down", self.name);
        self.lock().kill();
        true
    }

    fn close_listener(&self) {
        // Unblock the accept loop so the listener is dropped.
        let _ = TcpStream::connect_timeout(&self.wake_addr, Duration::from_secs(1));
        for _ in 0..200 {
            if self.closed.load(Ordering::SeqCst) {
                break;
            }
            thread::sleep(Duration::from_millis(10));
        }
    }
}

/// A running daemon: one listener thread per started backend.
pub struct Daemon {
    served: Vec<Arc<Served>>,
    threads: Vec<JoinHandle<()>>,
    failures: Vec<(String, ServerError)>,
}

impl Daemon {
    /// Starts sessions for `names`; failures are recorded and skipped.
    pub fn start(registry: &Registry, names: &[String], options: &ServeOptions) -> Daemon {
        let mut daemon = Daemon {
            served: Vec::new(),
            threads: Vec::new(),
            failures: Vec::new(),
        };
        for name in names {
            let started = registry
                .resolve(name)
                .map_err(ServerError::from)
                .and_then(|spec| start_session(spec, options.bind).map(|b| (spec, b)));
            let (spec, bound) = match started {
                Ok(ok) => ok,
                Err(e) => {
                    error!("{name}: {e}");
                    daemon.failures.push((name.clone(), e));
                    continue;
                }
            };
            let port = spec.port.expect("started sessions have a port");
            let wake_ip = if options.bind.is_unspecified() {
                IpAddr::V4(Ipv4Addr::LOCALHOST)
            } else {
                options.bind
            };
            let pid_file = options.pid_dir.as_ref().and_then(|dir| {
                let path = dir.join(format!("chunkd.{port}.pid"));
                match fs::create_dir_all(dir)
                    .and_then(|_| fs::write(&path, format!("{}\n", std::process::id())))
                {
                    Ok(()) => Some(path),
                    Err(e) => {
                        warn!("cannot write {}: {e}", path.display());
                        None
                    }
                }
            });
            info!("{name}: serving on {}:{port}", options.bind);
            let served = Arc::new(Served {
                name: name.clone(),
                port,
                wake_addr: SocketAddr::new(wake_ip, port),
                session: Mutex::new(bound.session),
                stopping: AtomicBool::new(false),
                closed: AtomicBool::new(false),
                pid_file,
            });
            let listener = bound.listener;
            let handle = {
                let served = Arc::clone(&served);
                thread::Builder::new()
                    .name(format!("chunkd-{name}"))
                    .spawn(move || accept_loop(listener, served))
                    .expect("spawn listener thread")
            };
            daemon.served.push(served);
            daemon.threads.push(handle);
        }
        daemon
    }

    /// `(backend, port)` for every backend that started.
    pub fn ports(&self) -> Vec<(String, u16)> {
        self.served
            .iter()
            .map(|s| (s.name.clone(), s.port))
            .collect()
    }

    pub fn failures(&self) -> &[(String, ServerError)] {
        &self.failures
    }

    /// Stops every backend.
    pub fn shutdown(&self) {
        for served in &self.served {
            served.stop();
        }
    }

    /// Blocks until every backend has been shut down.
    pub fn wait(self) -> Vec<(String, ServerError)> {
        for handle in self.threads {
            let _ = handle.join();
        }
        self.failures
    }
}

/// Runs the daemon in the current thread until all backends are shut down.
/// Returns the backends that failed to start.
pub fn serve(
    registry: &Registry,
    names: &[String],
    options: &ServeOptions,
) -> Vec<(String, ServerError)> {
    Daemon::start(registry, names, options).wait()
}

fn accept_loop(listener: TcpListener, served: Arc<Served>) {
    for conn in listener.incoming() {
        if served.stopping.load(Ordering::SeqCst) {
            break;
        }
        match conn {
            Ok(stream) => {
                let served = Arc::clone(&served);
                thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, &served) {
                        debug!("{}: connection error: {e}", served.name);
                    }
                });
            }
            Err(e) => warn!("{}: accept failed: {e}", served.name),
        }
    }
    drop(listener);
    served.closed.store(true, Ordering::SeqCst);
    if let Some(path) = &served.pid_file {
        let _ = fs::remove_file(path);
    }
    info!("{}: listener on port {} closed", served.name, served.port);
}

fn handle_connection(stream: TcpStream, served: &Served) -> io::Result<()> {
    stream.set_read_timeout(Some(REQUEST_READ_TIMEOUT))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut stream = stream;
    let request = match read_request(&mut reader) {
        Ok(r) => r,
        Err(e) => {
            if served.stopping.load(Ordering::SeqCst) {
                return Ok(());
            }
            stream.write_all(&Response::err(ErrorCode::BadRequest, e).encode())?;
            return Ok(());
        }
    };

    let mut stop_after = false;
    let response = match request {
        Request::Ping => match served.session.try_lock() {
            Ok(s) if s.state() == SessionState::Dead => {
                Response::err(ErrorCode::SessionDead, "engine is not running")
            }
            Err(TryLockError::Poisoned(p)) if p.get_ref().state() == SessionState::Dead => {
                Response::err(ErrorCode::SessionDead, "engine is not running")
            }
            _ => Response::Ok(0),
        },
        Request::Shutdown => {
            stop_after = true;
            Response::Ok(0)
        }
        Request::Restart => {
            if served.stopping.load(Ordering::SeqCst) {
                Response::err(ErrorCode::SessionDead, "backend is shutting down")
            } else {
                match served.lock().restart() {
                    Ok(()) => Response::Ok(0),
                    Err(e) => Response::err(ErrorCode::StartupFailed, e),
                }
            }
        }
        Request::Run(run) => {
            let mut session = served.lock();
            debug!(
                "{}: RUN {} -> {}",
                served.name,
                run.source.as_str(),
                run.output
            );
            handle_request(&mut session, &run)
        }
    };
    // The engine is dead before the acknowledgement; the listener closes
    // after it, since closing the last one lets the daemon process exit.
    let close = stop_after && served.kill_engine();
    let sent = stream
        .write_all(&response.encode())
        .and_then(|_| stream.flush());
    if close {
        let _ = stream.shutdown(std::net::Shutdown::Both);
        served.close_listener();
    }
    sent
}
