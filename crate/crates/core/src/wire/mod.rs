//! Framed binary protocol and the edge/server endpoints.

mod edge;
mod frame;
mod payload;
mod server;

pub use edge::{run_edge, EdgeConfig, EdgeError, EdgeRun, DEFAULT_TIMEOUT};
pub use frame::*;
pub use payload::{
    deserialize_intermediate, error_frame, frame_tensor, parse_error, payload_size, serialize_intermediate, tensor_frame,
    wire_bytes_per_window, ErrorCode,
};
pub use server::{resolve, Server, ServerHandle};
