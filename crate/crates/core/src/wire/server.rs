//! Server endpoint: HELLO (manifest check), then one PREDICTION per
//! INTERMEDIATE. One thread per connection over an immutable model.

use std::io::{self, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};

use super::frame::{read_frame, write_frame, Dtype, Frame, MsgType, ReadFrameError};
use super::payload::{error_frame, frame_tensor, tensor_frame, ErrorCode};
use crate::error::{Error, Result};
use crate::split::{ServerModel, SplitManifest};

/// How often idle connections and the accept loop check for shutdown.
const POLL_INTERVAL: Duration = Duration::from_millis(100);
/// Once a frame has started arriving, the rest must follow within this.
const FRAME_TIMEOUT: Duration = Duration::from_secs(5);

struct State {
    model: ServerModel,
    manifest: SplitManifest,
}

pub struct Server {
    listener: TcpListener,
    state: Arc<State>,
}

/// Running server; dropping it without [`ServerHandle::shutdown`] leaves the
/// thread running until the process exits.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, lets in-flight requests finish, and joins.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn resolve(endpoint: &str) -> Result<SocketAddr> {
    endpoint
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| Error::InvalidArgument(format!("endpoint {endpoint:?} did not resolve")))
}

impl Server {
    pub fn bind(endpoint: &str, model: ServerModel, manifest: SplitManifest) -> Result<Self> {
        if model.input_size() != manifest.intermediate_elements || model.dtype() != manifest.dtype {
            return Err(Error::InvalidArgument("server model does not match its manifest".into()));
        }
        let listener = TcpListener::bind(resolve(endpoint)?)?;
        listener.set_nonblocking(true)?;
        Ok(Server {
            listener,
            state: Arc::new(State { model, manifest }),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves on a background thread.
    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = thread::Builder::new()
            .name("splitlstm-server".into())
            .spawn(move || self.run(&flag))?;
        Ok(ServerHandle {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    /// Serves until `stop` is set, then waits for open connections to finish
    /// their current request.
    pub fn run(self, stop: &AtomicBool) {
        let stop_all = Arc::new(AtomicBool::new(false));
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !stop.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    debug!("connection from {peer}");
                    let state = Arc::clone(&self.state);
                    let flag = Arc::clone(&stop_all);
                    match thread::Builder::new()
                        .name(format!("splitlstm-conn-{peer}"))
                        .spawn(move || {
                            if let Err(e) = serve_connection(stream, &state, &flag) {
                                debug!("connection {peer} ended: {e}");
                            }
                        }) {
                        Ok(h) => workers.push(h),
                        Err(e) => warn!("could not spawn connection thread: {e}"),
                    }
                    workers.retain(|h| !h.is_finished());
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL_INTERVAL / 5),
                Err(e) => {
                    warn!("accept failed: {e}");
                    thread::sleep(POLL_INTERVAL / 5);
                }
            }
        }
        info!("server shutting down");
        drop(self.listener);
        stop_all.store(true, Ordering::SeqCst);
        for w in workers {
            let _ = w.join();
        }
    }
}

/// Waits for the next frame while polling `stop`. `Ok(None)` means the peer
/// closed the connection or shutdown was requested.
fn next_frame(stream: &mut TcpStream, stop: &AtomicBool) -> std::result::Result<Option<Frame>, ReadFrameError> {
    let mut probe = [0u8; 1];
    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(None);
        }
        stream.set_read_timeout(Some(POLL_INTERVAL))?;
        match stream.peek(&mut probe) {
            Ok(0) => return Ok(None),
            Ok(_) => break,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {}
            Err(e) => return Err(e.into()),
        }
    }
    stream.set_read_timeout(Some(FRAME_TIMEOUT))?;
    read_frame(stream)
}

fn manifest_mismatch(ours: &SplitManifest, theirs: &SplitManifest) -> Option<String> {
    if ours.model_hash != theirs.model_hash {
        return Some(format!("model hash {} does not match server model {}", theirs.model_hash, ours.model_hash));
    }
    if ours != theirs {
        return Some(format!(
            "manifest differs: edge runs {} cut {} {} ({} elements), server expects {} cut {} {} ({} elements)",
            theirs.plan,
            theirs.cut_index,
            theirs.dtype,
            theirs.intermediate_elements,
            ours.plan,
            ours.cut_index,
            ours.dtype,
            ours.intermediate_elements
        ));
    }
    None
}

fn serve_connection(mut stream: TcpStream, state: &State, stop: &AtomicBool) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut greeted = false;
    loop {
        let frame = match next_frame(&mut stream, stop) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(ReadFrameError::Io(e)) => return Err(e),
            Err(ReadFrameError::Frame(e)) => {
                let _ = write_frame(&mut stream, &error_frame(ErrorCode::Malformed, &e.to_string()));
                return Ok(());
            }
        };
        match frame.msg_type {
            MsgType::Hello => {
                let reply = match std::str::from_utf8(&frame.payload)
                    .ok()
                    .and_then(|s| SplitManifest::from_json(s).ok())
                {
                    None => Err((ErrorCode::Malformed, "HELLO payload is not a split manifest".to_string())),
                    Some(m) => match manifest_mismatch(&state.manifest, &m) {
                        Some(msg) => Err((ErrorCode::ManifestMismatch, msg)),
                        None => Ok(()),
                    },
                };
                match reply {
                    Ok(()) => {
                        greeted = true;
                        write_frame(&mut stream, &Frame::new(MsgType::Hello, Dtype::F32, 0, Vec::new()))?;
                    }
                    Err((code, msg)) => {
                        write_frame(&mut stream, &error_frame(code, &msg))?;
                        return Ok(());
                    }
                }
            }
            MsgType::Intermediate if greeted => {
                let reply = frame_tensor(&frame)
                    .map_err(|e| (ErrorCode::Shape, e.to_string()))
                    .and_then(|z| state.model.forward(&z).map_err(|e| (ErrorCode::Shape, e.to_string())))
                    .and_then(|y| tensor_frame(MsgType::Prediction, &y).map_err(|e| (ErrorCode::Internal, e.to_string())));
                match reply {
                    Ok(f) => write_frame(&mut stream, &f)?,
                    Err((code, msg)) => write_frame(&mut stream, &error_frame(code, &msg))?,
                }
            }
            MsgType::Intermediate => {
                write_frame(&mut stream, &error_frame(ErrorCode::Protocol, "INTERMEDIATE before HELLO"))?;
                return Ok(());
            }
            other => {
                write_frame(&mut stream, &error_frame(ErrorCode::Protocol, &format!("unexpected {other:?} frame")))?;
                return Ok(());
            }
        }
    }
}
