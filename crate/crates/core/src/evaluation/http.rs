//! JSON-over-HTTP adapters for an external embedder and vision chat model.
//!
//! Embedder: `POST {url}` with `{"kind": "image", "png_base64": ...}` or
//! `{"kind": "text", "text": ...}`, answered by `{"embedding": [f64, ...]}`.
//! Vision chat: `POST {url}` with `{"png_base64": ..., "text": ...}`,
//! answered by `{"reply": "..."}`.

use std::io::Cursor;
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::embed::{ImageEmbedder, TextEmbedder};
use super::lvlm::VisionChat;
use crate::error::{Error, Result};

pub const EMBED_URL_ENV: &str = "LEAKGUARD_EMBED_URL";
pub const LVLM_URL_ENV: &str = "LEAKGUARD_LVLM_URL";
pub const API_KEY_ENV: &str = "LEAKGUARD_API_KEY";

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into()
}

fn png_base64(image: &RgbImage) -> Result<String> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Transport(format!("png encoding failed: {e}")))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

#[derive(Clone, Debug)]
struct Endpoint {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl Endpoint {
    fn new(url: &str, timeout: Duration) -> Self {
        Self {
            url: url.to_string(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            agent: agent(timeout),
        }
    }

    fn from_env(var: &str, timeout: Duration) -> Result<Self> {
        let url = std::env::var(var)
            .map_err(|_| Error::Config(format!("environment variable {var} is not set")))?;
        Ok(Self::new(&url, timeout))
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, body: &Req) -> Result<Resp> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Error::Transport(format!("{}: {e}", self.url)))?;
        resp.body_mut()
            .read_json()
            .map_err(|e| Error::Transport(format!("{}: malformed response: {e}", self.url)))
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EmbedRequest<'a> {
    Image { png_base64: String },
    Text { text: &'a str },
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct HttpEmbedder {
    endpoint: Endpoint,
}

impl HttpEmbedder {
    pub fn new(url: &str, timeout: Duration) -> Self {
        Self {
            endpoint: Endpoint::new(url, timeout),
        }
    }

    pub fn from_env(timeout: Duration) -> Result<Self> {
        Ok(Self {
            endpoint: Endpoint::from_env(EMBED_URL_ENV, timeout)?,
        })
    }

    fn call(&self, req: &EmbedRequest<'_>) -> Result<Vec<f64>> {
        let resp: EmbedResponse = self.endpoint.post(req)?;
        if resp.embedding.is_empty() {
            return Err(Error::Embedder("empty embedding".into()));
        }
        Ok(resp.embedding)
    }
}

impl ImageEmbedder for HttpEmbedder {
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        self.call(&EmbedRequest::Image {
            png_base64: png_base64(image)?,
        })
    }
}

impl TextEmbedder for HttpEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.call(&EmbedRequest::Text { text })
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    png_base64: String,
    text: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    reply: String,
}

#[derive(Clone, Debug)]
pub struct HttpVisionChat {
    endpoint: Endpoint,
}

impl HttpVisionChat {
    pub fn new(url: &str, timeout: Duration) -> Self {
        Self {
            endpoint: Endpoint::new(url, timeout),
        }
    }

    pub fn from_env(timeout: Duration) -> Result<Self> {
        Ok(Self {
            endpoint: Endpoint::from_env(LVLM_URL_ENV, timeout)?,
        })
    }
}

impl VisionChat for HttpVisionChat {
    fn ask(&self, image: &RgbImage, text: &str) -> Result<String> {
        let resp: ChatResponse = self.endpoint.post(&ChatRequest {
            png_base64: png_base64(image)?,
            text,
        })?;
        Ok(resp.reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let e = HttpEmbedder::new("http://127.0.0.1:9/embed", Duration::from_millis(200));
        let err = e.embed_text("A dog").unwrap_err();
        assert!(matches!(err, Error::Transport(_)), "{err}");
    }

    #[test]
    fn request_shape() {
        let v = serde_json::to_value(EmbedRequest::Text { text: "A dog" }).unwrap();
        assert_eq!(v, serde_json::json!({"kind": "text", "text": "A dog"}));
    }
}
