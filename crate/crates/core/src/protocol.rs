//! Request/response framing between chunk clients and the session daemon.
//!
//! One request per connection. A request is a few UTF-8 header lines followed
//! by a length-delimited payload:
//!
//! ```text
//! CHUNKD/1 RUN
//! source: inline
//! output: /abs/path/tmp/paperYear
//! length: 22
//!
//! print(table(paperYear))
//! ```
//!
//! `source:` and `output:` appear only for `RUN`. The daemon answers with a
//! single line, `OK <bytes>` or `ERR <CODE> <message>`, and closes.

use std::fmt;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, TcpStream};
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

pub const MAGIC: &str = "CHUNKD/1";

const MAX_HEADER_LINE: usize = 64 * 1024;
const MAX_PAYLOAD: usize = 256 * 1024 * 1024;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload length mismatch: declared {declared}, got {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unknown verb `{0}`")]
    UnknownVerb(String),
    #[error("malformed response `{0}`")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connection refused at {0}")]
    ConnectRefused(SocketAddr),
    #[error("no response from {0} within {1:?}")]
    ResponseTimeout(SocketAddr, Duration),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("i/o error talking to {0}: {1}")]
    Io(SocketAddr, #[source] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verb {
    Run,
    Ping,
    Shutdown,
    Restart,
}

impl Verb {
    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Run => "RUN",
            Verb::Ping => "PING",
            Verb::Shutdown => "SHUTDOWN",
            Verb::Restart => "RESTART",
        }
    }
}

impl FromStr for Verb {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "RUN" => Ok(Verb::Run),
            "PING" => Ok(Verb::Ping),
            "SHUTDOWN" => Ok(Verb::Shutdown),
            "RESTART" => Ok(Verb::Restart),
            other => Err(ProtocolError::UnknownVerb(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    /// The payload is code.
    Inline,
    /// The payload is the path of a file the engine should run.
    File,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Inline => "inline",
            SourceKind::File => "file",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunRequest {
    pub source: SourceKind,
    /// Where the daemon writes the chunk output.
    pub output: String,
    pub payload: Vec<u8>,
}

impl RunRequest {
    pub fn inline(code: &str, output: impl Into<String>) -> Self {
        RunRequest {
            source: SourceKind::Inline,
            output: output.into(),
            payload: code.as_bytes().to_vec(),
        }
    }

    pub fn file(path: &str, output: impl Into<String>) -> Self {
        RunRequest {
            source: SourceKind::File,
            output: output.into(),
            payload: path.as_bytes().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Run(RunRequest),
    Ping,
    Shutdown,
    /// Replace a dead (or live) engine with a fresh one.
    Restart,
}

impl Request {
    pub fn verb(&self) -> Verb {
        match self {
            Request::Run(_) => Verb::Run,
            Request::Ping => Verb::Ping,
            Request::Shutdown => Verb::Shutdown,
            Request::Restart => Verb::Restart,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        let mut out = format!("{MAGIC} {}\n", self.verb().as_str()).into_bytes();
        match self {
            Request::Run(run) => {
                if run.output.is_empty() {
                    return Err(ProtocolError::InvalidRequest("empty output path".into()));
                }
                if run.output.contains(['\n', '\r']) {
                    return Err(ProtocolError::InvalidRequest(
                        "output path contains a line break".into(),
                    ));
                }
                out.extend_from_slice(format!("source: {}\n", run.source.as_str()).as_bytes());
                out.extend_from_slice(format!("output: {}\n", run.output).as_bytes());
                out.extend_from_slice(format!("length: {}\n\n", run.payload.len()).as_bytes());
                out.extend_from_slice(&run.payload);
            }
            _ => out.extend_from_slice(b"length: 0\n\n"),
        }
        Ok(out)
    }

    /// Decodes a complete request; trailing bytes are a length mismatch.
    pub fn decode(bytes: &[u8]) -> Result<Request, ProtocolError> {
        let mut reader = bytes;
        let request = read_request(&mut reader)?;
        if !reader.is_empty() {
            let declared = match &request {
                Request::Run(r) => r.payload.len(),
                _ => 0,
            };
            return Err(ProtocolError::LengthMismatch {
                declared,
                actual: declared + reader.len(),
            });
        }
        Ok(request)
    }
}

fn read_header_line<R: BufRead>(r: &mut R) -> Result<String, ProtocolError> {
    let mut line = Vec::new();
    r.take(MAX_HEADER_LINE as u64 + 1)
        .read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(ProtocolError::MalformedHeader(
            if line.len() > MAX_HEADER_LINE {
                "header line too long".into()
            } else {
                "unexpected end of header".into()
            },
        ));
    }
    line.pop();
    String::from_utf8(line)
        .map_err(|_| ProtocolError::MalformedHeader("header is not UTF-8".into()))
}

fn expect_field<'a>(line: &'a str, key: &str) -> Result<&'a str, ProtocolError> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(": "))
        .ok_or_else(|| {
            ProtocolError::MalformedHeader(format!("expected `{key}: ...`, got `{line}`"))
        })
}

/// Reads one request from a stream, consuming exactly its bytes.
pub fn read_request<R: BufRead>(r: &mut R) -> Result<Request, ProtocolError> {
    let first = read_header_line(r)?;
    let verb = match first.split_once(' ') {
        Some((MAGIC, verb)) => verb.parse::<Verb>()?,
        _ => {
            return Err(ProtocolError::MalformedHeader(format!(
                "expected `{MAGIC} <VERB>`, got `{first}`"
            )))
        }
    };

    let mut source = None;
    let mut output = None;
    if verb == Verb::Run {
        let line = read_header_line(r)?;
        source = Some(match expect_field(&line, "source")? {
            "inline" => SourceKind::Inline,
            "file" => SourceKind::File,
            other => {
                return Err(ProtocolError::MalformedHeader(format!(
                    "unknown source `{other}`"
                )))
            }
        });
        let line = read_header_line(r)?;
        let path = expect_field(&line, "output")?;
        if path.is_empty() {
            return Err(ProtocolError::MalformedHeader("empty output path".into()));
        }
        output = Some(path.to_string());
    }

    let line = read_header_line(r)?;
    let declared: usize = expect_field(&line, "length")?
        .parse()
        .ok()
        .filter(|n| *n <= MAX_PAYLOAD)
        .ok_or_else(|| ProtocolError::MalformedHeader(format!("bad length in `{line}`")))?;
    let blank = read_header_line(r)?;
    if !blank.is_empty() {
        return Err(ProtocolError::MalformedHeader(format!(
            "expected blank line, got `{blank}`"
        )));
    }

    let mut payload = Vec::with_capacity(declared.min(1 << 20));
    r.take(declared as u64).read_to_end(&mut payload)?;
    if payload.len() != declared {
        return Err(ProtocolError::LengthMismatch {
            declared,
            actual: payload.len(),
        });
    }

    match verb {
        Verb::Run => Ok(Request::Run(RunRequest {
            source: source.expect("parsed for RUN"),
            output: output.expect("parsed for RUN"),
            payload,
        })),
        other if declared != 0 => Err(ProtocolError::MalformedHeader(format!(
            "{} takes no payload",
            other.as_str()
        ))),
        Verb::Ping => Ok(Request::Ping),
        Verb::Shutdown => Ok(Request::Shutdown),
        Verb::Restart => Ok(Request::Restart),
    }
}

/// Machine-readable failure codes carried by `ERR` responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    EngineDied,
    Timeout,
    Io,
    SessionDead,
    BadRequest,
    StartupFailed,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::EngineDied => "ENGINE_DIED",
            ErrorCode::Timeout => "TIMEOUT",
            ErrorCode::Io => "IO",
            ErrorCode::SessionDead => "SESSION_DEAD",
            ErrorCode::BadRequest => "BAD_REQUEST",
            ErrorCode::StartupFailed => "STARTUP_FAILED",
        }
    }
}

impl FromStr for ErrorCode {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "ENGINE_DIED" => ErrorCode::EngineDied,
            "TIMEOUT" => ErrorCode::Timeout,
            "IO" => ErrorCode::Io,
            "SESSION_DEAD" => ErrorCode::SessionDead,
            "BAD_REQUEST" => ErrorCode::BadRequest,
            "STARTUP_FAILED" => ErrorCode::StartupFailed,
            _ => return Err(()),
        })
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    /// Number of output bytes written (0 for non-RUN verbs).
    Ok(u64),
    Err {
        code: ErrorCode,
        message: String,
    },
}

impl Response {
    pub fn err(code: ErrorCode, message: impl fmt::Display) -> Self {
        Response::Err {
            code,
            message: message.to_string(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Response::Ok(n) => format!("OK {n}\n").into_bytes(),
            Response::Err { code, message } => {
                let message = message.replace(['\n', '\r'], " ");
                format!("ERR {code} {message}\n").into_bytes()
            }
        }
    }

    pub fn decode(line: &str) -> Result<Response, ProtocolError> {
        let bad = || ProtocolError::MalformedResponse(line.to_string());
        let line = line.strip_suffix('\n').unwrap_or(line);
        if let Some(n) = line.strip_prefix("OK ") {
            return n.parse().map(Response::Ok).map_err(|_| bad());
        }
        if let Some(rest) = line.strip_prefix("ERR ") {
            let (code, message) = rest.split_once(' ').unwrap_or((rest, ""));
            let code = code.parse().map_err(|_| bad())?;
            return Ok(Response::Err {
                code,
                message: message.to_string(),
            });
        }
        Err(bad())
    }
}

/// `127.0.0.1:<port>`.
pub fn loopback(port: u16) -> SocketAddr {
    SocketAddr::V4(SocketAddrV4::new(Ipv4Addr::LOCALHOST, port))
}

/// Sends one request and blocks until the response arrives or `timeout` passes.
pub fn send(
    addr: SocketAddr,
    request: &Request,
    timeout: Duration,
) -> Result<Response, ClientError> {
    let bytes = request.encode()?;
    let mut stream =
        TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT).map_err(|e| match e.kind() {
            io::ErrorKind::ConnectionRefused => ClientError::ConnectRefused(addr),
            io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => {
                ClientError::ResponseTimeout(addr, CONNECT_TIMEOUT)
            }
            _ => ClientError::Io(addr, e),
        })?;
    let io_err = |e: io::Error| match e.kind() {
        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => {
            ClientError::ResponseTimeout(addr, timeout)
        }
        _ => ClientError::Io(addr, e),
    };
    stream.set_read_timeout(Some(timeout)).map_err(io_err)?;
    stream.write_all(&bytes).map_err(io_err)?;
    stream.flush().map_err(io_err)?;

    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(io_err)?;
    if line.is_empty() {
        return Err(
            ProtocolError::MalformedResponse("connection closed without response".into()).into(),
        );
    }
    Ok(Response::decode(&line)?)
}

pub fn send_run(
    addr: SocketAddr,
    request: RunRequest,
    timeout: Duration,
) -> Result<Response, ClientError> {
    send(addr, &Request::Run(request), timeout)
}
