//! Remote epsilon-prediction over newline-delimited JSON.
//!
//! Request line:
//!
//! ```text
//! {"id":N,"x_t":[...],"t":F,"cond":{"kind":"unconditional|image|image_text","source_ref":S,"text_ref":T,"omega_s":F,"omega_y":F}}
//! ```
//!
//! Absent refs are `null`. The server applies guidance and answers
//! `{"id":N,"eps":[...]}` or `{"id":N,"error":"msg"}`. Over stdio, requests go
//! to the child's stdin and responses come back on its stdout; stderr is left
//! to the child for logs.

use std::collections::{HashMap, HashSet};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CsdError, Result};
use crate::oracle::{edit_oracle_eps, Condition, EditOracle, EpsQuery, GuidanceParams, ScoreOracle};
use crate::schedule::ScheduleKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Transport {
    /// Spawn `command[0]` with the remaining items as arguments.
    StdioSubprocess { command: Vec<String> },
    Tcp { host: String, port: u16 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeEndpoint {
    pub transport: Transport,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_max_batch() -> usize {
    16
}

impl BridgeEndpoint {
    pub fn stdio(command: Vec<String>) -> Self {
        BridgeEndpoint {
            transport: Transport::StdioSubprocess { command },
            timeout_ms: default_timeout_ms(),
            max_batch: default_max_batch(),
        }
    }

    pub fn tcp(host: impl Into<String>, port: u16) -> Self {
        BridgeEndpoint {
            transport: Transport::Tcp {
                host: host.into(),
                port,
            },
            timeout_ms: default_timeout_ms(),
            max_batch: default_max_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(CsdError::config("timeout_ms", "must be positive"));
        }
        if self.max_batch == 0 {
            return Err(CsdError::config("max_batch", "must be at least 1"));
        }
        if let Transport::StdioSubprocess { command } = &self.transport {
            if command.is_empty() || command[0].is_empty() {
                return Err(CsdError::config("transport.stdio-subprocess.command", "must name a program"));
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct WireCond<'a> {
    kind: &'static str,
    source_ref: Option<&'a str>,
    text_ref: Option<&'a str>,
    omega_s: f64,
    omega_y: f64,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    id: u64,
    x_t: &'a [f64],
    t: f64,
    cond: WireCond<'a>,
}

/// One request line, without the trailing newline.
pub fn encode_request(id: u64, x_t: &[f64], t: f64, cond: &Condition, g: &GuidanceParams) -> Result<String> {
    if let Some(i) = x_t.iter().position(|v| !v.is_finite()) {
        return Err(CsdError::NonFinite {
            what: "bridge request entry",
            index: i,
        });
    }
    if !t.is_finite() {
        return Err(CsdError::Domain("timestep must be finite".into()));
    }
    let kind = match cond {
        Condition::Unconditional => "unconditional",
        Condition::Image { .. } => "image",
        Condition::ImageText { .. } => "image_text",
    };
    let req = WireRequest {
        id,
        x_t,
        t,
        cond: WireCond {
            kind,
            source_ref: cond.source_ref(),
            text_ref: cond.text_ref(),
            omega_s: g.omega_s,
            omega_y: g.omega_y,
        },
    };
    Ok(serde_json::to_string(&req)?)
}

#[derive(Deserialize)]
struct CondIn {
    kind: String,
    source_ref: Option<String>,
    text_ref: Option<String>,
    omega_s: f64,
    omega_y: f64,
}

#[derive(Deserialize)]
struct RequestIn {
    id: u64,
    x_t: Vec<f64>,
    t: f64,
    cond: CondIn,
}

/// Decoded request as seen by a server.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsRequest {
    pub id: u64,
    pub x_t: Vec<f64>,
    pub t: f64,
    pub cond: Condition,
    pub guidance: GuidanceParams,
}

/// Parse a request line. On failure the id is returned alongside the message
/// when it could be read.
pub fn decode_request(line: &str) -> std::result::Result<EpsRequest, (Option<u64>, String)> {
    let value: Value = serde_json::from_str(line).map_err(|e| (None, format!("malformed request: {e}")))?;
    let id = value.get("id").and_then(Value::as_u64);
    let req: RequestIn =
        serde_json::from_value(value).map_err(|e| (id, format!("malformed request: {e}")))?;
    let id = req.id;
    let fail = |msg: &str| (Some(id), msg.to_string());
    let cond = match req.cond.kind.as_str() {
        "unconditional" => Condition::Unconditional,
        "image" => Condition::Image {
            source_ref: req.cond.source_ref.ok_or_else(|| fail("image condition needs source_ref"))?,
        },
        "image_text" => Condition::ImageText {
            source_ref: req
                .cond
                .source_ref
                .ok_or_else(|| fail("image_text condition needs source_ref"))?,
            text_ref: req
                .cond
                .text_ref
                .ok_or_else(|| fail("image_text condition needs text_ref"))?,
        },
        other => return Err((Some(id), format!("unknown condition kind `{other}`"))),
    };
    let guidance = GuidanceParams::new(req.cond.omega_y, req.cond.omega_s).map_err(|e| (Some(id), e.to_string()))?;
    Ok(EpsRequest {
        id,
        x_t: req.x_t,
        t: req.t,
        cond,
        guidance,
    })
}

#[derive(Serialize)]
struct EpsLine<'a> {
    id: u64,
    eps: &'a [f64],
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    id: u64,
    error: &'a str,
}

pub fn encode_eps_response(id: u64, eps: &[f64]) -> Result<String> {
    if let Some(i) = eps.iter().position(|v| !v.is_finite()) {
        return Err(CsdError::NonFinite {
            what: "bridge response entry",
            index: i,
        });
    }
    Ok(serde_json::to_string(&EpsLine { id, eps })?)
}

pub fn encode_error_response(id: u64, message: &str) -> String {
    serde_json::to_string(&ErrorLine { id, error: message }).expect("string fields always serialize")
}

/// Counters from a server loop.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub answered: usize,
    pub errors: usize,
    pub skipped: usize,
}

/// Response line for one request line, flagged true when it is an error.
fn answer(oracle: &EditOracle, kind: ScheduleKind, line: &str) -> Option<(String, bool)> {
    match decode_request(line) {
        Ok(req) => {
            let out = edit_oracle_eps(oracle, kind, &req.x_t, req.t, &req.cond, &req.guidance)
                .and_then(|eps| encode_eps_response(req.id, &eps));
            Some(match out {
                Ok(l) => (l, false),
                Err(e) => (encode_error_response(req.id, &e.to_string()), true),
            })
        }
        Err((Some(id), msg)) => Some((encode_error_response(id, &msg), true)),
        Err((None, msg)) => {
            log::warn!("{msg}; line skipped");
            None
        }
    }
}

/// Answer request lines from `reader` on `writer` until end of input, one
/// response line per parseable request.
pub fn serve<R: BufRead, W: Write>(
    reader: R,
    mut writer: W,
    oracle: &EditOracle,
    kind: ScheduleKind,
) -> Result<ServeStats> {
    let mut stats = ServeStats::default();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match answer(oracle, kind, &line) {
            Some((resp, is_error)) => {
                if is_error {
                    stats.errors += 1;
                } else {
                    stats.answered += 1;
                }
                writer.write_all(resp.as_bytes())?;
                writer.write_all(b"\n")?;
                writer.flush()?;
            }
            None => stats.skipped += 1,
        }
    }
    Ok(stats)
}

/// Serve connections from `listener` one after another. Stops after
/// `max_connections` connections when given.
pub fn serve_tcp(
    listener: &TcpListener,
    oracle: &EditOracle,
    kind: ScheduleKind,
    max_connections: Option<usize>,
) -> Result<()> {
    for (k, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let reader = BufReader::new(stream.try_clone()?);
        if let Err(e) = serve(reader, &stream, oracle, kind) {
            log::warn!("connection ended with error: {e}");
        }
        if max_connections.is_some_and(|m| k + 1 >= m) {
            break;
        }
    }
    Ok(())
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<io::Result<String>>,
    next_id: u64,
    /// Ids whose caller gave up (timeout or earlier error); late answers are dropped.
    abandoned: HashSet<u64>,
    child: Option<Child>,
}

fn spawn_reader<R: Read + Send + 'static>(source: R) -> Receiver<io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(source).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

/// [`ScoreOracle`] backed by a remote server.
pub struct BridgeOracle {
    endpoint: BridgeEndpoint,
    conn: Mutex<Connection>,
}

impl BridgeOracle {
    pub fn connect(endpoint: &BridgeEndpoint) -> Result<Self> {
        endpoint.validate()?;
        let conn = match &endpoint.transport {
            Transport::StdioSubprocess { command } => {
                let mut child = Command::new(&command[0])
                    .args(&command[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("stdin is piped");
                let stdout = child.stdout.take().expect("stdout is piped");
                Connection {
                    writer: Box::new(stdin),
                    lines: spawn_reader(stdout),
                    next_id: 0,
                    abandoned: HashSet::new(),
                    child: Some(child),
                }
            }
            Transport::Tcp { host, port } => {
                let timeout = Duration::from_millis(endpoint.timeout_ms);
                let mut last = None;
                let mut stream = None;
                for addr in (host.as_str(), *port).to_socket_addrs()? {
                    match TcpStream::connect_timeout(&addr, timeout) {
                        Ok(s) => {
                            stream = Some(s);
                            break;
                        }
                        Err(e) => last = Some(e),
                    }
                }
                let stream = match (stream, last) {
                    (Some(s), _) => s,
                    (None, Some(e)) => return Err(e.into()),
                    (None, None) => {
                        return Err(CsdError::Lookup(format!("`{host}:{port}` resolves to no address")))
                    }
                };
                stream.set_nodelay(true)?;
                let reader = stream.try_clone()?;
                Connection {
                    writer: Box::new(stream),
                    lines: spawn_reader(reader),
                    next_id: 0,
                    abandoned: HashSet::new(),
                    child: None,
                }
            }
        };
        Ok(BridgeOracle {
            endpoint: endpoint.clone(),
            conn: Mutex::new(conn),
        })
    }

    pub fn endpoint(&self) -> &BridgeEndpoint {
        &self.endpoint
    }

    fn run_chunk(
        &self,
        conn: &mut Connection,
        queries: &[EpsQuery<'_>],
        g: &GuidanceParams,
        out: &mut Vec<Vec<f64>>,
    ) -> Result<()> {
        let mut pending: HashMap<u64, usize> = HashMap::new();
        let mut buf = String::new();
        for (k, q) in queries.iter().enumerate() {
            let id = conn.next_id;
            conn.next_id += 1;
            buf.push_str(&encode_request(id, q.x_t, q.t, q.cond, g)?);
            buf.push('\n');
            pending.insert(id, k);
        }
        conn.writer.write_all(buf.as_bytes())?;
        conn.writer.flush()?;

        let mut results: Vec<Option<Vec<f64>>> = vec![None; queries.len()];
        let timeout = Duration::from_millis(self.endpoint.timeout_ms);
        let deadline = Instant::now() + timeout;
        let outcome = (|| {
            while !pending.is_empty() {
                let wait = deadline.saturating_duration_since(Instant::now());
                let line = match conn.lines.recv_timeout(wait) {
                    Ok(line) => line?,
                    Err(RecvTimeoutError::Timeout) => return Err(CsdError::Timeout(self.endpoint.timeout_ms)),
                    Err(RecvTimeoutError::Disconnected) => {
                        return Err(CsdError::Protocol("server closed the connection".into()))
                    }
                };
                if line.trim().is_empty() {
                    continue;
                }
                let value: Value = serde_json::from_str(&line)
                    .map_err(|e| CsdError::Protocol(format!("unparseable response line: {e}")))?;
                let id = value
                    .get("id")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| CsdError::Protocol(format!("response without a valid id: {line}")))?;
                if conn.abandoned.remove(&id) {
                    continue;
                }
                let Some(k) = pending.remove(&id) else {
                    return Err(CsdError::Protocol(format!(
                        "response id {id} does not match any pending request"
                    )));
                };
                if let Some(msg) = value.get("error") {
                    let msg = msg.as_str().map(str::to_string).unwrap_or_else(|| msg.to_string());
                    return Err(CsdError::Server(msg));
                }
                let eps: Vec<f64> = value
                    .get("eps")
                    .and_then(Value::as_array)
                    .ok_or_else(|| CsdError::Protocol(format!("response {id} has neither eps nor error")))?
                    .iter()
                    .map(|v| {
                        v.as_f64()
                            .ok_or_else(|| CsdError::Protocol(format!("response {id} holds a non-numeric eps entry")))
                    })
                    .collect::<Result<_>>()?;
                if eps.len() != queries[k].x_t.len() {
                    return Err(CsdError::Protocol(format!(
                        "response {id} has eps of dimension {}, request had {}",
                        eps.len(),
                        queries[k].x_t.len()
                    )));
                }
                results[k] = Some(eps);
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            conn.abandoned.extend(pending.keys());
            return Err(e);
        }
        out.extend(results.into_iter().map(|r| r.expect("every pending id answered")));
        Ok(())
    }
}

impl ScoreOracle for BridgeOracle {
    fn eps(&self, x_t: &[f64], t: f64, cond: &Condition, g: &GuidanceParams) -> Result<Vec<f64>> {
        let mut out = self.eps_batch(&[EpsQuery { x_t, t, cond }], g)?;
        Ok(out.pop().expect("one query, one answer"))
    }

    /// Up to `max_batch` requests are in flight at once; answers are matched
    /// by id, so their arrival order does not matter.
    fn eps_batch(&self, queries: &[EpsQuery<'_>], g: &GuidanceParams) -> Result<Vec<Vec<f64>>> {
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| CsdError::Protocol("bridge connection poisoned".into()))?;
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(self.endpoint.max_batch) {
            self.run_chunk(&mut conn, chunk, g, &mut out)?;
        }
        Ok(out)
    }
}

/// One remote evaluation through an open bridge.
pub fn remote_eps(
    oracle: &BridgeOracle,
    x_t: &[f64],
    t: f64,
    cond: &Condition,
    g: &GuidanceParams,
) -> Result<Vec<f64>> {
    oracle.eps(x_t, t, cond, g)
}

impl Drop for BridgeOracle {
    fn drop(&mut self) {
        if let Ok(conn) = self.conn.get_mut() {
            if let Some(child) = conn.child.as_mut() {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}
