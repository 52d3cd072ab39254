//! Edge endpoint: computes `z` locally and obtains predictions from the
//! server, one request per window.

use std::io;
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use log::{debug, warn};
use thiserror::Error;

use super::frame::{read_frame, write_frame, Dtype, Frame, FrameError, MsgType, ReadFrameError};
use super::payload::{frame_tensor, parse_error, tensor_frame};
use super::server::resolve;
use crate::split::{EdgeModel, Intermediate, SplitManifest};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("server error {code}: {message}")]
    Server { code: u8, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("local inference failed: {0}")]
    Local(String),
}

impl From<ReadFrameError> for EdgeError {
    fn from(e: ReadFrameError) -> Self {
        match e {
            ReadFrameError::Io(e) => EdgeError::Io(e),
            ReadFrameError::Frame(e) => EdgeError::Frame(e),
        }
    }
}

impl EdgeError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, EdgeError::Io(e) if matches!(e.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EdgeConfig {
    /// Bound on connecting and on each request/response exchange.
    pub timeout: Duration,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        EdgeConfig {
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

#[derive(Debug)]
pub struct EdgeRun {
    /// One entry per window, in order.
    pub results: Vec<Result<Intermediate, EdgeError>>,
    pub bytes_sent: usize,
    pub bytes_received: usize,
}

impl EdgeRun {
    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| r.is_err()).count()
    }
}

struct Session {
    stream: TcpStream,
}

fn exchange(stream: &mut TcpStream, frame: &Frame, sent: &mut usize, received: &mut usize) -> Result<Frame, EdgeError> {
    write_frame(stream, frame)?;
    *sent += frame.encoded_len();
    let reply = read_frame(stream)?.ok_or_else(|| EdgeError::Protocol("server closed the connection".into()))?;
    *received += reply.encoded_len();
    if reply.msg_type == MsgType::Error {
        let (code, message) = parse_error(&reply.payload)?;
        return Err(EdgeError::Server { code, message });
    }
    Ok(reply)
}

impl Session {
    fn open(addr: SocketAddr, manifest_json: &[u8], cfg: &EdgeConfig, sent: &mut usize, received: &mut usize) -> Result<Self, EdgeError> {
        let mut stream = TcpStream::connect_timeout(&addr, cfg.timeout)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(cfg.timeout))?;
        stream.set_write_timeout(Some(cfg.timeout))?;
        let hello = Frame::new(MsgType::Hello, Dtype::F32, 0, manifest_json.to_vec());
        let ack = exchange(&mut stream, &hello, sent, received)?;
        if ack.msg_type != MsgType::Hello {
            return Err(EdgeError::Protocol(format!("expected HELLO ack, got {:?}", ack.msg_type)));
        }
        Ok(Session { stream })
    }
}

/// Runs every window through the edge half and the remote server. Failures
/// are recorded per window; a failed connection is re-established for the
/// next window.
pub fn run_edge<'a, I>(edge: &EdgeModel, manifest: &SplitManifest, windows: I, endpoint: &str, cfg: &EdgeConfig) -> EdgeRun
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut run = EdgeRun {
        results: Vec::new(),
        bytes_sent: 0,
        bytes_received: 0,
    };
    let addr = resolve(endpoint);
    let manifest_json = manifest.to_json().map(String::into_bytes);
    let mut session: Option<Session> = None;
    for window in windows {
        let result = (|| {
            let addr = addr.as_ref().map_err(|e| EdgeError::Local(e.to_string()))?;
            let json = manifest_json.as_ref().map_err(|e| EdgeError::Local(e.to_string()))?;
            let z = edge.forward(window).map_err(|e| EdgeError::Local(e.to_string()))?;
            let frame = tensor_frame(MsgType::Intermediate, &z)?;
            if session.is_none() {
                session = Some(Session::open(*addr, json, cfg, &mut run.bytes_sent, &mut run.bytes_received)?);
            }
            let s = session.as_mut().expect("session just opened");
            let reply = exchange(&mut s.stream, &frame, &mut run.bytes_sent, &mut run.bytes_received)?;
            if reply.msg_type != MsgType::Prediction {
                return Err(EdgeError::Protocol(format!("expected PREDICTION, got {:?}", reply.msg_type)));
            }
            let y = frame_tensor(&reply)?;
            if y.len() != 1 || y.dtype() != z.dtype() {
                return Err(EdgeError::Protocol("prediction is not a scalar of the negotiated dtype".into()));
            }
            Ok(y)
        })();
        if let Err(e) = &result {
            debug!("window {} failed: {e}", run.results.len());
            if !matches!(e, EdgeError::Local(_)) {
                session = None;
            }
        }
        run.results.push(result);
    }
    let failed = run.failures();
    if failed > 0 {
        warn!("{failed} of {} windows failed", run.results.len());
    }
    run
}
