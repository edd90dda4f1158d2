use std::net::SocketAddr;

use fsbbt::data::{ImageSet, SourceTag};
use fsbbt::nn::{Architecture, Classifier};
use fsbbt::teacher::server::{serve, serve_teacher, ServeOptions};
use fsbbt::teacher::{EndpointKind, TeacherEndpoint, TeacherGateway};
use fsbbt::Error;
use ndarray::Array4;

fn local() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn images(n: usize, seed: usize) -> ImageSet {
    let data = Array4::from_shape_fn((n, 28, 28, 1), |(i, y, x, _)| ((((i + seed) * 784 + y * 28 + x) as u64 * 2_654_435_761) % 1000) as f32 / 999.0);
    ImageSet::new(data, SourceTag::Original).unwrap()
}

fn post(url: &str, body: &str) -> (u16, String) {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let mut resp = agent.post(url).header("content-type", "application/json").send(body).unwrap();
    (resp.status().as_u16(), resp.body_mut().read_to_string().unwrap())
}

#[test]
fn remote_matches_in_process() {
    let model = Classifier::new(Architecture::Lenet5Half, (28, 28, 1), 10, 5).unwrap();
    let server = serve_teacher(model.clone(), local(), 16).unwrap();
    let remote = TeacherGateway::remote(&server.base_url()).unwrap();
    assert_eq!(remote.info().batch_limit, 16);
    let inproc = TeacherGateway::in_process(model, 16);
    // 40 images forces three dispatches of at most 16
    let x = images(40, 0);
    let a = remote.predict_soft(&x).unwrap();
    let b = inproc.predict_soft(&x).unwrap();
    let diff = (a.probs() - b.probs()).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
    assert!(diff <= 1e-5, "max difference {diff}");
    assert_eq!(remote.ledger().batches, 3);
    for row in a.probs().rows() {
        assert!((row.sum() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn endpoint_description_opens_both_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.safetensors");
    let model = Classifier::new(Architecture::Lenet5Half, (28, 28, 1), 10, 1).unwrap();
    model.save(&path, None).unwrap();
    let server = serve_teacher(model, local(), 8).unwrap();
    let a = TeacherGateway::open(&TeacherEndpoint { kind: EndpointKind::InProcess, address: path.display().to_string(), batch_limit: 4 }).unwrap();
    let b = TeacherGateway::open(&TeacherEndpoint { kind: EndpointKind::Remote, address: server.base_url(), batch_limit: 4 }).unwrap();
    let x = images(6, 3);
    let (pa, pb) = (a.predict_soft(&x).unwrap(), b.predict_soft(&x).unwrap());
    assert!((pa.probs() - pb.probs()).iter().all(|d| d.abs() <= 1e-5));
    assert_eq!(b.ledger().batches, 2);
}

#[test]
fn service_rejects_bad_requests() {
    let model = Classifier::new(Architecture::Lenet5Half, (28, 28, 1), 10, 2).unwrap();
    let server = serve_teacher(model, local(), 2).unwrap();
    let url = format!("{}/predict", server.base_url());
    let (status, _) = post(&url, "{not json");
    assert_eq!(status, 400);
    let (status, _) = post(&url, &serde_json::json!({ "shape": [1, 28, 28, 1], "images": [0.5, 0.5] }).to_string());
    assert_eq!(status, 400);
    let (status, _) = post(&url, &serde_json::json!({ "shape": [1, 32, 32, 3], "images": vec![0.0; 3072] }).to_string());
    assert_eq!(status, 400);
    let (status, body) = post(&url, &serde_json::json!({ "shape": [3, 28, 28, 1], "images": vec![0.0; 3 * 784] }).to_string());
    assert_eq!(status, 413, "{body}");
    let (status, _) = post(&url, &serde_json::json!({ "shape": [2, 28, 28, 1], "images": vec![0.25; 2 * 784] }).to_string());
    assert_eq!(status, 200);
}

#[test]
fn missing_model_is_unavailable() {
    let opts = ServeOptions { input_shape: (28, 28, 1), num_classes: 10, batch_limit: 4 };
    let server = serve(None, local(), opts).unwrap();
    let (status, _) = post(&format!("{}/predict", server.base_url()), &serde_json::json!({ "shape": [1, 28, 28, 1], "images": vec![0.0; 784] }).to_string());
    assert_eq!(status, 503);
    let gw = TeacherGateway::remote(&server.base_url()).unwrap();
    assert!(matches!(gw.predict_soft(&images(1, 0)), Err(Error::Protocol { status: 503, .. })));
}

#[test]
fn occupied_port_is_a_startup_error() {
    let model = Classifier::new(Architecture::Lenet5Half, (28, 28, 1), 10, 2).unwrap();
    let first = serve_teacher(model.clone(), local(), 4).unwrap();
    assert!(matches!(serve_teacher(model, first.addr(), 4), Err(Error::Startup(_))));
}

#[test]
fn unreachable_teacher_is_a_transport_error() {
    let addr = {
        let l = std::net::TcpListener::bind(local()).unwrap();
        l.local_addr().unwrap()
    };
    let err = TeacherGateway::remote(&format!("http://{addr}")).err().expect("nothing listens there");
    assert!(err.is_retriable(), "{err}");
}
