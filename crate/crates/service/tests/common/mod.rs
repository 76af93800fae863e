#![allow(dead_code)]

use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use reshape_core::body::{make_block_model, BodyModel};
use reshape_core::mapping::{fit_map, generate_corpus, FitOptions, LinearAttributeMap, MeasurementConfig};
use reshape_core::render::Camera;
use reshape_service::protocol::BackendClient;
use reshape_service::store::Store;
use reshape_service::{stub, FitDocument, Service};

/// Block body and an exact map over all six attributes.
pub fn block_fixture() -> (BodyModel, LinearAttributeMap) {
    let model = make_block_model();
    let corpus = generate_corpus(&model, 60, 1.0, 5, &MeasurementConfig::default()).unwrap();
    let map = fit_map(&corpus, &FitOptions { ridge_lambda: 0.0, ..FitOptions::default() }).unwrap();
    (model, map)
}

pub fn fit_doc(beta: Vec<f64>) -> FitDocument {
    FitDocument { beta, theta: vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.1], camera: Camera::frontal(96, 128) }
}

pub fn reference_png() -> Vec<u8> {
    let img = image::RgbImage::from_fn(48, 64, |x, y| image::Rgb([(x * 5) as u8, (y * 3) as u8, 90]));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

pub fn service(dir: &std::path::Path, backend: Option<String>) -> Service {
    let (model, map) = block_fixture();
    let backend = backend.map(|url| {
        let mut c = BackendClient::new(&url);
        c.backoff = Duration::from_millis(10);
        c
    });
    Service::new(model, map, Store::open(dir).unwrap(), backend).unwrap()
}

/// Serves `router` on an ephemeral loopback port.
pub async fn spawn(router: axum::Router) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    addr
}

pub async fn spawn_stub(options: stub::StubOptions) -> String {
    format!("http://{}", spawn(stub::router(options)).await)
}

pub async fn spawn_service(svc: Service) -> String {
    format!("http://{}", spawn(reshape_service::server::router(Arc::new(svc))).await)
}

/// A loopback address nothing listens on.
pub fn dead_url() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}")
}
