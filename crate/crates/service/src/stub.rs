//! Loopback generation backend for tests and demos. It returns the
//! conditioning image tinted orange, with the digest of the request it
//! actually received, so the whole flow runs without a diffusion model.

use std::io::Cursor;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, HeaderName, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use image::{GrayImage, Rgb, RgbImage};

use crate::protocol::{request_digest, BackendMetadata, GenerationParams, METADATA_HEADER};

pub const TINT: [f32; 3] = [1.0, 0.75, 0.5];

/// Scripted failure for exercising error paths.
#[derive(Debug, Clone, Default)]
pub struct StubOptions {
    pub fail_with: Option<(u16, String)>,
}

pub fn router(options: StubOptions) -> Router {
    Router::new()
        .route("/generate", post(generate))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(Arc::new(options))
}

pub fn tint(gray: &GrayImage) -> RgbImage {
    RgbImage::from_fn(gray.width(), gray.height(), |x, y| {
        let g = gray.get_pixel(x, y).0[0] as f32;
        Rgb(TINT.map(|t| (g * t).round() as u8))
    })
}

fn bad(msg: impl Into<String>) -> Response {
    (StatusCode::BAD_REQUEST, msg.into()).into_response()
}

async fn generate(State(options): State<Arc<StubOptions>>, mut form: Multipart) -> Response {
    if let Some((status, body)) = &options.fail_with {
        return (StatusCode::from_u16(*status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR), body.clone())
            .into_response();
    }
    let (mut reference, mut conditioning, mut params) = (None, None, None);
    loop {
        let field = match form.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return bad(format!("multipart: {e}")),
        };
        let name = field.name().unwrap_or_default().to_string();
        let bytes = match field.bytes().await {
            Ok(b) => b.to_vec(),
            Err(e) => return bad(format!("part {name}: {e}")),
        };
        match name.as_str() {
            "reference" => reference = Some(bytes),
            "conditioning" => conditioning = Some(bytes),
            "params" => params = Some(bytes),
            other => return bad(format!("unexpected part {other:?}")),
        }
    }
    let (Some(reference), Some(conditioning), Some(params)) = (reference, conditioning, params) else {
        return bad("reference, conditioning and params parts are required");
    };
    let params: GenerationParams = match serde_json::from_slice(&params) {
        Ok(p) => p,
        Err(e) => return bad(format!("params: {e}")),
    };
    if let Err(e) = params.validate() {
        return (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()).into_response();
    }
    let gray = match image::load_from_memory(&conditioning) {
        Ok(i) => i.into_luma8(),
        Err(e) => return bad(format!("conditioning: {e}")),
    };
    let mut png = Cursor::new(Vec::new());
    tint(&gray).write_to(&mut png, image::ImageFormat::Png).expect("png encode to memory");
    let meta =
        BackendMetadata { request_digest: request_digest(&params, &reference, &conditioning), backend: "stub".into() };
    (
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (HeaderName::from_static(METADATA_HEADER), serde_json::to_string(&meta).unwrap()),
        ],
        png.into_inner(),
    )
        .into_response()
}
