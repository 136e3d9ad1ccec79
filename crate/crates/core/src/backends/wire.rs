//! Request/response messages shared by the HTTP and stdio transports.
//!
//! Bodies are JSON. Rasters travel as base64 PNG: RGB for images, 8-bit
//! grayscale for mattes. Every request carries an `id`; a response is only
//! accepted if it echoes the same id.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{Embedder, EmbeddingVector, ImageGenerator, Matter, Recaptioner, Role};
use crate::compositor::CanvasSpec;
use crate::error::{Error, Result};
use crate::layer::store::{decode_png, encode_png, encode_png_gray, encode_png_rgb};
use crate::layer::{AlphaRaster, Matte, RgbRaster};

/// Moves one JSON request to the `role` endpoint and returns its JSON reply.
pub trait Transport: Send + Sync {
    fn call(&self, role: Role, request: &serde_json::Value) -> Result<serde_json::Value>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub id: String,
    pub prompt: String,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMessage {
    pub id: String,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatteResponse {
    pub id: String,
    pub matte: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbedInput {
    Image { image: String },
    Text { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub id: String,
    #[serde(flatten)]
    pub input: EmbedInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecaptionRequest {
    pub id: String,
    pub image: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextResponse {
    pub id: String,
    pub text: String,
}

pub fn b64_encode(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn b64_decode(field: &str, s: &str) -> Result<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::decode(field, e.to_string()))
}

pub fn rgb_to_wire(img: &RgbRaster) -> Result<String> {
    Ok(b64_encode(&encode_png_rgb(img)?))
}

pub fn rgba_to_wire(img: &AlphaRaster) -> Result<String> {
    Ok(b64_encode(&encode_png(img)?))
}

pub fn rgb_from_wire(field: &str, s: &str) -> Result<RgbRaster> {
    let rgba = decode_png(&b64_decode(field, s)?)?;
    let (w, h) = rgba.dims();
    let rgb = rgba.into_bytes().chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
    RgbRaster::new(w, h, rgb)
}

pub fn matte_to_wire(m: &Matte) -> Result<String> {
    let bytes: Vec<u8> = m.values().iter().map(|v| (v * 255.0).round() as u8).collect();
    Ok(b64_encode(&encode_png_gray(m.width(), m.height(), &bytes)?))
}

pub fn matte_from_wire(field: &str, s: &str) -> Result<Matte> {
    let rgba = decode_png(&b64_decode(field, s)?)?;
    let (w, h) = rgba.dims();
    Matte::new(w, h, rgba.pixels().map(|p| p[0] as f32 / 255.0).collect())
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub fn next_request_id(role: Role) -> String {
    format!(
        "{role}-{}-{}",
        std::process::id(),
        NEXT_ID.fetch_add(1, Ordering::Relaxed)
    )
}

/// Implements every role trait over a [`Transport`], with retries.
pub struct RemoteBackend {
    role: Role,
    transport: Arc<dyn Transport>,
    max_attempts: u32,
    backoff: Duration,
}

impl RemoteBackend {
    /// `max_attempts` counts the first try; backoff doubles after each failure.
    pub fn new(role: Role, transport: Arc<dyn Transport>, max_attempts: u32, backoff: Duration) -> Self {
        Self {
            role,
            transport,
            max_attempts: max_attempts.max(1),
            backoff,
        }
    }

    fn exchange<Req: Serialize, Resp: DeserializeOwned>(&self, id: &str, req: &Req) -> Result<Resp> {
        let body = serde_json::to_value(req)?;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = self.transport.call(self.role, &body).and_then(|v| {
                let got = v.get("id").and_then(|x| x.as_str()).unwrap_or_default();
                if got != id {
                    return Err(Error::Transport {
                        role: self.role.to_string(),
                        message: format!("response id `{got}` does not match request `{id}`"),
                    });
                }
                serde_json::from_value::<Resp>(v).map_err(|e| Error::Backend {
                    role: self.role.to_string(),
                    status: 200,
                    body: format!("malformed response: {e}"),
                })
            });
            match outcome {
                Err(e) if e.is_retriable() && attempt < self.max_attempts => {
                    std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1));
                }
                other => return other,
            }
        }
    }
}

impl ImageGenerator for RemoteBackend {
    fn generate(&self, prompt: &str, canvas: CanvasSpec, seed: u64) -> Result<RgbRaster> {
        canvas.check()?;
        let id = next_request_id(self.role);
        let req = GenerateRequest {
            id: id.clone(),
            prompt: prompt.to_string(),
            width: canvas.width,
            height: canvas.height,
            seed,
        };
        let resp: ImageMessage = self.exchange(&id, &req)?;
        let img = rgb_from_wire("image", &resp.image)?;
        if img.dims() != (canvas.width, canvas.height) {
            return Err(Error::DimensionMismatch(format!(
                "generator returned {:?}, requested {}x{}",
                img.dims(),
                canvas.width,
                canvas.height
            )));
        }
        Ok(img)
    }
}

impl Matter for RemoteBackend {
    fn predict_matte(&self, image: &RgbRaster) -> Result<Matte> {
        let id = next_request_id(self.role);
        let req = ImageMessage {
            id: id.clone(),
            image: rgb_to_wire(image)?,
        };
        let resp: MatteResponse = self.exchange(&id, &req)?;
        let m = matte_from_wire("matte", &resp.matte)?;
        if m.dims() != image.dims() {
            return Err(Error::DimensionMismatch(format!(
                "matte is {:?}, image is {:?}",
                m.dims(),
                image.dims()
            )));
        }
        Ok(m)
    }
}

impl RemoteBackend {
    fn embed(&self, input: EmbedInput) -> Result<EmbeddingVector> {
        let id = next_request_id(self.role);
        let req = EmbedRequest {
            id: id.clone(),
            input,
        };
        let resp: EmbedResponse = self.exchange(&id, &req)?;
        EmbeddingVector::normalized(resp.values)
    }
}

impl Embedder for RemoteBackend {
    fn embed_image(&self, image: &AlphaRaster) -> Result<EmbeddingVector> {
        self.embed(EmbedInput::Image {
            image: rgba_to_wire(image)?,
        })
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        self.embed(EmbedInput::Text {
            text: text.to_string(),
        })
    }
}

impl Recaptioner for RemoteBackend {
    fn recaption(&self, image: &RgbRaster, instruction: &str) -> Result<String> {
        if instruction.trim().is_empty() {
            return Err(Error::Precondition("recaption instruction is empty".into()));
        }
        let id = next_request_id(self.role);
        let req = RecaptionRequest {
            id: id.clone(),
            image: rgb_to_wire(image)?,
            instruction: instruction.to_string(),
        };
        let resp: TextResponse = self.exchange(&id, &req)?;
        Ok(resp.text)
    }
}
