//! Wire protocol to the image generation backend.
//!
//! `POST {backend}/generate` with a multipart body:
//!
//! | part           | content type       | content                        |
//! |----------------|--------------------|--------------------------------|
//! | `reference`    | `image/png`        | the project's reference image  |
//! | `conditioning` | `image/png`        | 8-bit depth conditioning image |
//! | `params`       | `application/json` | [`GenerationParams`]           |
//!
//! A successful response is `200` with a PNG body and a
//! [`METADATA_HEADER`] header holding [`BackendMetadata`] as JSON. Any other
//! status is an error whose body is passed to the caller unchanged.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::store::sha256_hex;

pub const CANONICAL_PROMPTS: [&str; 3] =
    ["Make the person fatter", "Make the person thinner", "Make the person muscular"];
pub const NEUTRAL_PROMPT: &str = "A photo of a person";

pub const METADATA_HEADER: &str = "x-reshape-metadata";

/// Output resolution the backend is expected to produce.
pub const OUTPUT_WIDTH: u32 = 768;
pub const OUTPUT_HEIGHT: u32 = 1024;

pub const MAX_ATTEMPTS: usize = 3;

pub fn is_canonical_prompt(p: &str) -> bool {
    p == NEUTRAL_PROMPT || CANONICAL_PROMPTS.contains(&p)
}

fn default_steps() -> u32 {
    30
}

fn default_guidance() -> f64 {
    7.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub prompt: String,
    #[serde(default = "default_steps")]
    pub steps: u32,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    #[serde(default)]
    pub seed: u64,
}

impl GenerationParams {
    pub fn new(prompt: &str) -> Self {
        Self { prompt: prompt.into(), steps: default_steps(), guidance: default_guidance(), seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !is_canonical_prompt(&self.prompt) {
            return Err(ServiceError::NonCanonicalPrompt(self.prompt.clone()));
        }
        Ok(())
    }
}

/// Everything that determines a generation, in a fixed field order.
#[derive(Serialize)]
struct DigestInput<'a> {
    prompt: &'a str,
    reference_sha256: &'a str,
    conditioning_sha256: &'a str,
    seed: u64,
    steps: u32,
    guidance: f64,
}

/// SHA-256 over the canonical JSON of the request.
pub fn request_digest(params: &GenerationParams, reference_png: &[u8], conditioning_png: &[u8]) -> String {
    let input = DigestInput {
        prompt: &params.prompt,
        reference_sha256: &sha256_hex(reference_png),
        conditioning_sha256: &sha256_hex(conditioning_png),
        seed: params.seed,
        steps: params.steps,
        guidance: params.guidance,
    };
    sha256_hex(&serde_json::to_vec(&input).expect("digest input serializes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendMetadata {
    /// Digest of the request as the backend received it.
    pub request_digest: String,
    #[serde(default)]
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub attempt: usize,
    pub unix_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct GenerationResponse {
    pub image_png: Vec<u8>,
    pub metadata: BackendMetadata,
}

#[derive(Debug, Clone)]
pub struct BackendClient {
    base: String,
    http: reqwest::Client,
    /// Wait before the second attempt; doubles for each further one.
    pub backoff: Duration,
}

impl BackendClient {
    pub fn new(base_url: &str) -> Self {
        let http = reqwest::Client::builder().timeout(Duration::from_secs(600)).build().expect("http client");
        Self { base: base_url.trim_end_matches('/').to_string(), http, backoff: Duration::from_millis(250) }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    /// Sends the request, retrying only when the backend cannot be reached.
    /// The attempt log is returned in both the success and failure case.
    pub async fn generate(
        &self,
        params: &GenerationParams,
        reference_png: &[u8],
        conditioning_png: &[u8],
    ) -> (Result<GenerationResponse>, Vec<Attempt>) {
        let mut log = Vec::new();
        let mut wait = self.backoff;
        for attempt in 1..=MAX_ATTEMPTS {
            if attempt > 1 {
                tokio::time::sleep(wait).await;
                wait *= 2;
            }
            let sent = self.send_once(params, reference_png, conditioning_png).await;
            let error = match &sent {
                Err(e) => Some(e.to_string()),
                Ok(_) => None,
            };
            log.push(Attempt { attempt, unix_ms: crate::now_ms(), error });
            match sent {
                Ok(resp) => return (read_response(resp).await, log),
                Err(e) if e.is_connect() || e.is_timeout() || e.is_request() => {
                    if attempt == MAX_ATTEMPTS {
                        return (Err(ServiceError::Unreachable { attempts: attempt, last: e.to_string() }), log);
                    }
                }
                Err(e) => return (Err(ServiceError::BadResponse(e.to_string())), log),
            }
        }
        unreachable!("loop returns on the last attempt")
    }

    async fn send_once(
        &self,
        params: &GenerationParams,
        reference_png: &[u8],
        conditioning_png: &[u8],
    ) -> reqwest::Result<reqwest::Response> {
        use reqwest::multipart::{Form, Part};
        let png = |b: &[u8], name: &str| Part::bytes(b.to_vec()).file_name(name.to_string()).mime_str("image/png");
        let form = Form::new()
            .part("reference", png(reference_png, "reference.png")?)
            .part("conditioning", png(conditioning_png, "conditioning.png")?)
            .part(
                "params",
                Part::bytes(serde_json::to_vec(params).expect("params serialize")).mime_str("application/json")?,
            );
        self.http.post(format!("{}/generate", self.base)).multipart(form).send().await
    }
}

async fn read_response(resp: reqwest::Response) -> Result<GenerationResponse> {
    let status = resp.status();
    let header = resp.headers().get(METADATA_HEADER).map(|h| h.to_str().map(str::to_owned));
    let body = resp.bytes().await.map_err(|e| ServiceError::BadResponse(e.to_string()))?;
    if !status.is_success() {
        return Err(ServiceError::Backend {
            status: status.as_u16(),
            body: String::from_utf8_lossy(&body).into_owned(),
        });
    }
    let header = header
        .ok_or_else(|| ServiceError::BadResponse(format!("missing {METADATA_HEADER} header")))?
        .map_err(|e| ServiceError::BadResponse(e.to_string()))?;
    let metadata: BackendMetadata =
        serde_json::from_str(&header).map_err(|e| ServiceError::BadResponse(format!("metadata: {e}")))?;
    image::load_from_memory_with_format(&body, image::ImageFormat::Png)
        .map_err(|e| ServiceError::BadResponse(format!("image: {e}")))?;
    Ok(GenerationResponse { image_png: body.to_vec(), metadata })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_rules() {
        for p in CANONICAL_PROMPTS.iter().chain([&NEUTRAL_PROMPT]) {
            assert!(GenerationParams::new(p).validate().is_ok());
        }
        for p in ["make them tall", "Make the person fatter ", "make the person fatter", ""] {
            assert!(matches!(GenerationParams::new(p).validate(), Err(ServiceError::NonCanonicalPrompt(_))), "{p:?}");
        }
    }

    #[test]
    fn digest_covers_every_input() {
        let base = GenerationParams::new(NEUTRAL_PROMPT);
        let d = request_digest(&base, b"ref", b"cond");
        assert_eq!(d, request_digest(&base.clone(), b"ref", b"cond"));
        let variants = [
            request_digest(&GenerationParams { seed: 1, ..base.clone() }, b"ref", b"cond"),
            request_digest(&GenerationParams { steps: 31, ..base.clone() }, b"ref", b"cond"),
            request_digest(&GenerationParams { guidance: 7.0, ..base.clone() }, b"ref", b"cond"),
            request_digest(&GenerationParams::new(CANONICAL_PROMPTS[0]), b"ref", b"cond"),
            request_digest(&base, b"ref2", b"cond"),
            request_digest(&base, b"ref", b"cond2"),
        ];
        for v in variants {
            assert_ne!(v, d);
        }
    }

    #[test]
    fn params_defaults_fill_in() {
        let p: GenerationParams = serde_json::from_str(r#"{"prompt":"A photo of a person"}"#).unwrap();
        assert_eq!(p, GenerationParams::new(NEUTRAL_PROMPT));
    }
}
