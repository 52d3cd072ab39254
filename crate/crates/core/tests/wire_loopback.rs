//! Loopback behaviour of the split server, including its error paths.

use std::io::Write;
use std::net::TcpStream;
use std::time::Duration;

use splitlstm::compression::{quantize_params, FixedPointFormat};
use splitlstm::nn::{build_student, init_params};
use splitlstm::split::{partition, Deployed, Intermediate, PlanName, SplitManifest, SplitPlan};
use splitlstm::wire::{
    encode_frame, parse_error, read_frame, run_edge, tensor_frame, write_frame, Dtype, EdgeConfig, EdgeError,
    ErrorCode, Frame, MsgType, Server, ServerHandle,
};

fn model(q8: bool) -> Deployed {
    let spec = build_student();
    let params = init_params(&spec, 9);
    if q8 {
        let q = quantize_params(&spec, &params.cast::<f32>(), FixedPointFormat::default()).unwrap();
        Deployed::quantized(spec, q).unwrap()
    } else {
        Deployed::float(spec, params.cast()).unwrap()
    }
}

fn start(model: &Deployed, plan: PlanName) -> (ServerHandle, SplitManifest) {
    let plan = SplitPlan::preset(plan, model.spec()).unwrap();
    let (_, server) = partition(model, &plan).unwrap();
    let manifest = SplitManifest::new(model, &plan).unwrap();
    let handle = Server::bind("127.0.0.1:0", server, manifest.clone()).unwrap().spawn().unwrap();
    (handle, manifest)
}

fn connect(handle: &ServerHandle) -> TcpStream {
    let s = TcpStream::connect(handle.local_addr()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    s
}

fn hello(stream: &mut TcpStream, manifest: &SplitManifest) -> Frame {
    let f = Frame::new(MsgType::Hello, Dtype::F32, 0, manifest.to_json().unwrap().into_bytes());
    write_frame(stream, &f).unwrap();
    read_frame(stream).unwrap().expect("reply")
}

fn error_code(frame: &Frame) -> u8 {
    assert_eq!(frame.msg_type, MsgType::Error);
    parse_error(&frame.payload).unwrap().0
}

fn window(seed: usize) -> Vec<f64> {
    (0..15).map(|t| ((t + seed) as f64 * 0.37).sin() * 0.5 + 0.5).collect()
}

#[test]
fn loopback_matches_local_prediction_for_every_preset() {
    for q8 in [false, true] {
        let m = model(q8);
        for plan in PlanName::PRESETS {
            let (handle, manifest) = start(&m, plan);
            let (edge, _) = partition(&m, &SplitPlan::preset(plan, m.spec()).unwrap()).unwrap();
            let windows: Vec<Vec<f64>> = (0..20).map(window).collect();
            let run = run_edge(
                &edge,
                &manifest,
                windows.iter().map(Vec::as_slice),
                &handle.local_addr().to_string(),
                &EdgeConfig::default(),
            );
            handle.shutdown();
            assert_eq!(run.failures(), 0);
            for (w, r) in windows.iter().zip(run.results) {
                assert_eq!(r.unwrap(), m.predict(w).unwrap());
            }
            assert!(run.bytes_sent > 0 && run.bytes_received > 0);
        }
    }
}

#[test]
fn manifest_mismatch_is_rejected_before_any_inference() {
    let m = model(true);
    let (handle, _) = start(&m, PlanName::SplitA);
    // An edge built for a different cut.
    let plan_b = SplitPlan::preset(PlanName::SplitB, m.spec()).unwrap();
    let (edge_b, _) = partition(&m, &plan_b).unwrap();
    let manifest_b = SplitManifest::new(&m, &plan_b).unwrap();
    let run = run_edge(
        &edge_b,
        &manifest_b,
        [window(0)].iter().map(Vec::as_slice),
        &handle.local_addr().to_string(),
        &EdgeConfig::default(),
    );
    assert!(matches!(&run.results[0], Err(EdgeError::Server { code: 1, .. })));

    // Same cut, different weights.
    let other = model(false);
    let mut stream = connect(&handle);
    let foreign = SplitManifest::new(&other, &SplitPlan::preset(PlanName::SplitA, other.spec()).unwrap()).unwrap();
    let reply = hello(&mut stream, &foreign);
    assert_eq!(error_code(&reply), ErrorCode::ManifestMismatch as u8);
    assert!(read_frame(&mut stream).unwrap().is_none(), "connection closes after a mismatch");
    handle.shutdown();
}

#[test]
fn malformed_frame_gets_an_error_and_a_close() {
    let m = model(true);
    let (handle, manifest) = start(&m, PlanName::SplitA);
    let mut stream = connect(&handle);
    assert_eq!(hello(&mut stream, &manifest).msg_type, MsgType::Hello);
    let mut bytes = encode_frame(&Frame::new(MsgType::Intermediate, Dtype::Q8, 0x35, vec![1, 0, 0, 0, 7])).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x80;
    stream.write_all(&bytes).unwrap();
    let reply = read_frame(&mut stream).unwrap().unwrap();
    assert_eq!(error_code(&reply), ErrorCode::Malformed as u8);
    assert!(read_frame(&mut stream).unwrap().is_none());
    handle.shutdown();
}

#[test]
fn shape_error_keeps_the_connection_usable() {
    let m = model(false);
    let (handle, manifest) = start(&m, PlanName::SplitB);
    let mut stream = connect(&handle);
    assert_eq!(hello(&mut stream, &manifest).msg_type, MsgType::Hello);

    let wrong = tensor_frame(MsgType::Intermediate, &Intermediate::F32(vec![0.5; 7])).unwrap();
    write_frame(&mut stream, &wrong).unwrap();
    assert_eq!(error_code(&read_frame(&mut stream).unwrap().unwrap()), ErrorCode::Shape as u8);

    let plan = SplitPlan::preset(PlanName::SplitB, m.spec()).unwrap();
    let (edge, server) = partition(&m, &plan).unwrap();
    let z = edge.forward(&window(3)).unwrap();
    write_frame(&mut stream, &tensor_frame(MsgType::Intermediate, &z).unwrap()).unwrap();
    let reply = read_frame(&mut stream).unwrap().unwrap();
    assert_eq!(reply.msg_type, MsgType::Prediction);
    assert_eq!(splitlstm::wire::frame_tensor(&reply).unwrap(), server.forward(&z).unwrap());
    handle.shutdown();
}

#[test]
fn dtype_mismatch_is_a_shape_error() {
    let m = model(true);
    let (handle, manifest) = start(&m, PlanName::LstmDoS);
    let mut stream = connect(&handle);
    hello(&mut stream, &manifest);
    let f = tensor_frame(MsgType::Intermediate, &Intermediate::F32(vec![0.25])).unwrap();
    write_frame(&mut stream, &f).unwrap();
    assert_eq!(error_code(&read_frame(&mut stream).unwrap().unwrap()), ErrorCode::Shape as u8);
    handle.shutdown();
}

#[test]
fn intermediate_before_hello_is_a_protocol_error() {
    let m = model(false);
    let (handle, _) = start(&m, PlanName::LstmDoS);
    let mut stream = connect(&handle);
    let f = tensor_frame(MsgType::Intermediate, &Intermediate::F32(vec![0.25])).unwrap();
    write_frame(&mut stream, &f).unwrap();
    assert_eq!(error_code(&read_frame(&mut stream).unwrap().unwrap()), ErrorCode::Protocol as u8);
    handle.shutdown();
}

#[test]
fn garbage_hello_is_malformed() {
    let m = model(false);
    let (handle, _) = start(&m, PlanName::LstmDoS);
    let mut stream = connect(&handle);
    write_frame(&mut stream, &Frame::new(MsgType::Hello, Dtype::F32, 0, b"not json".to_vec())).unwrap();
    assert_eq!(error_code(&read_frame(&mut stream).unwrap().unwrap()), ErrorCode::Malformed as u8);
    handle.shutdown();
}

#[test]
fn unreachable_server_fails_every_window_without_panicking() {
    let m = model(false);
    let plan = SplitPlan::preset(PlanName::SplitA, m.spec()).unwrap();
    let (edge, _) = partition(&m, &plan).unwrap();
    let manifest = SplitManifest::new(&m, &plan).unwrap();
    // Bind and drop to obtain a port with nothing listening.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let windows: Vec<Vec<f64>> = (0..3).map(window).collect();
    let run = run_edge(
        &edge,
        &manifest,
        windows.iter().map(Vec::as_slice),
        &format!("127.0.0.1:{port}"),
        &EdgeConfig {
            timeout: Duration::from_millis(500),
        },
    );
    assert_eq!(run.failures(), 3);
}

#[test]
fn shutdown_with_an_idle_client_returns() {
    let m = model(false);
    let (handle, manifest) = start(&m, PlanName::SplitA);
    let mut stream = connect(&handle);
    hello(&mut stream, &manifest);
    let t = std::time::Instant::now();
    handle.shutdown();
    assert!(t.elapsed() < Duration::from_secs(3));
    assert!(read_frame(&mut stream).unwrap().is_none());
}
