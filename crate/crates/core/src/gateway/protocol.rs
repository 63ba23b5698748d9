//! JSON-over-HTTP wire protocol shared by the gateway client and any model
//! service (including the mock server below).
//!
//! | endpoint    | request                                          | response                         |
//! |-------------|--------------------------------------------------|----------------------------------|
//! | `/describe` | `{image?, prompt, n, temperature, max_tokens, seed?}` | `{texts}`                   |
//! | `/embed`    | `{texts}`                                        | `{vectors}`                      |
//! | `/segment`  | `{image, labels, threshold}`                     | `{masks: [{rle, confidence, label}]}` |
//! | `/inpaint`  | `{image, mask, prompt}`                          | `{image}`                        |
//!
//! Images travel as base64 PNG, masks as run-length encodings. Failures are
//! answered with a non-2xx status and `{error}`.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    image_from_base64, image_to_base64, Embedder, GenerateRequest, Image, Inpainter, Segmenter, TextGenerator,
};
use crate::error::{Error, Result};
use crate::mask::BitMask;
use crate::store::Rle;

pub const PROTOCOL_VERSION: u32 = 1;
const MAX_BODY_BYTES: u64 = 512 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub prompt: String,
    pub n: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeResponse {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image: String,
    pub labels: Vec<String>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMask {
    pub rle: Rle,
    pub confidence: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub masks: Vec<WireMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintRequest {
    pub image: String,
    pub mask: Rle,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

/// Blocking HTTP client implementing every backend trait against one base URL.
pub struct HttpBackend {
    base: String,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(base: &str, timeout: Duration, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { base: base.trim_end_matches('/').to_string(), agent, api_key }
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp> {
        let url = format!("{}{path}", self.base);
        let mut req = self.agent.post(&url).header("x-css-protocol", PROTOCOL_VERSION.to_string());
        if let Some(key) = &self.api_key {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Error::backend(&url, e))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(MAX_BODY_BYTES)
            .read_to_string()
            .map_err(|e| Error::backend(&url, e))?;
        if status >= 400 {
            let msg = serde_json::from_str::<ErrorResponse>(&text).map(|e| e.error).unwrap_or(text);
            return Err(Error::backend(&url, format!("status {status}: {msg}")));
        }
        serde_json::from_str(&text).map_err(|e| Error::Protocol(format!("{url}: malformed response: {e}")))
    }
}

impl TextGenerator for HttpBackend {
    fn generate(&self, req: &GenerateRequest<'_>) -> Result<Vec<String>> {
        let body = DescribeRequest {
            image: req.image.map(image_to_base64).transpose()?,
            prompt: req.prompt.to_string(),
            n: req.n,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
            seed: Some(req.seed),
        };
        Ok(self.post::<_, DescribeResponse>("/describe", &body)?.texts)
    }
}

impl Embedder for HttpBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = EmbedRequest { texts: texts.to_vec() };
        Ok(self.post::<_, EmbedResponse>("/embed", &body)?.vectors)
    }
}

impl Segmenter for HttpBackend {
    fn segment(&self, image: &Image, labels: &[String], threshold: f64) -> Result<Vec<BitMask>> {
        let body = SegmentRequest { image: image_to_base64(image)?, labels: labels.to_vec(), threshold };
        let resp: SegmentResponse = self.post("/segment", &body)?;
        resp.masks
            .into_iter()
            .map(|m| m.rle.decode(&m.label)?.with_confidence(m.confidence))
            .collect()
    }
}

impl Inpainter for HttpBackend {
    fn inpaint(&self, image: &Image, mask: &BitMask, prompt: &str) -> Result<Image> {
        let body = InpaintRequest {
            image: image_to_base64(image)?,
            mask: Rle::encode(mask),
            prompt: prompt.to_string(),
        };
        let resp: InpaintResponse = self.post("/inpaint", &body)?;
        image_from_base64(&resp.image)
    }
}

/// Backends exposed by [`ModelServer`]; absent roles answer 404.
#[derive(Clone, Default)]
pub struct ServedBackends {
    pub generator: Option<Arc<dyn TextGenerator>>,
    pub embedder: Option<Arc<dyn Embedder>>,
    pub segmenter: Option<Arc<dyn Segmenter>>,
    pub inpainter: Option<Arc<dyn Inpainter>>,
}

impl ServedBackends {
    /// Handles one request body for `path`, returning `(status, json body)`.
    pub fn handle(&self, path: &str, body: &[u8]) -> (u16, String) {
        match self.dispatch(path, body) {
            Ok(json) => (200, json),
            Err((status, msg)) => (status, serde_json::to_string(&ErrorResponse { error: msg }).unwrap_or_default()),
        }
    }

    fn dispatch(&self, path: &str, body: &[u8]) -> std::result::Result<String, (u16, String)> {
        fn parse<T: DeserializeOwned>(body: &[u8]) -> std::result::Result<T, (u16, String)> {
            serde_json::from_slice(body).map_err(|e| (400, format!("malformed request: {e}")))
        }
        fn fail(e: Error) -> (u16, String) {
            let status = if e.is_backend() { 502 } else { 422 };
            (status, e.to_string())
        }
        fn json<T: Serialize>(v: &T) -> std::result::Result<String, (u16, String)> {
            serde_json::to_string(v).map_err(|e| (500, e.to_string()))
        }
        let unavailable = || (404, format!("no backend serves {path}"));
        match path {
            "/describe" => {
                let g = self.generator.as_ref().ok_or_else(unavailable)?;
                let req: DescribeRequest = parse(body)?;
                let image = req.image.as_deref().map(image_from_base64).transpose().map_err(fail)?;
                let texts = g
                    .generate(&GenerateRequest {
                        image: image.as_ref(),
                        prompt: &req.prompt,
                        n: req.n,
                        temperature: req.temperature,
                        max_tokens: req.max_tokens,
                        seed: req.seed.unwrap_or(0),
                    })
                    .map_err(fail)?;
                json(&DescribeResponse { texts })
            }
            "/embed" => {
                let e = self.embedder.as_ref().ok_or_else(unavailable)?;
                let req: EmbedRequest = parse(body)?;
                json(&EmbedResponse { vectors: e.embed(&req.texts).map_err(fail)? })
            }
            "/segment" => {
                let s = self.segmenter.as_ref().ok_or_else(unavailable)?;
                let req: SegmentRequest = parse(body)?;
                let image = image_from_base64(&req.image).map_err(fail)?;
                let masks = s
                    .segment(&image, &req.labels, req.threshold)
                    .map_err(fail)?
                    .into_iter()
                    .map(|m| WireMask { rle: Rle::encode(&m), confidence: m.confidence, label: m.label })
                    .collect();
                json(&SegmentResponse { masks })
            }
            "/inpaint" => {
                let p = self.inpainter.as_ref().ok_or_else(unavailable)?;
                let req: InpaintRequest = parse(body)?;
                let image = image_from_base64(&req.image).map_err(fail)?;
                let mask = req.mask.decode("mask").map_err(fail)?;
                if mask.dims() != image.dimensions() {
                    return Err((422, "mask and image dimensions differ".into()));
                }
                let out = p.inpaint(&image, &mask, &req.prompt).map_err(fail)?;
                json(&InpaintResponse { image: image_to_base64(&out).map_err(fail)? })
            }
            _ => Err((404, format!("unknown endpoint {path}"))),
        }
    }
}

/// Minimal single-threaded HTTP server for [`ServedBackends`].
pub struct ModelServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ModelServer {
    pub fn start(addr: &str, backends: ServedBackends) -> Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(|e| Error::backend(addr, e))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Invalid("server is not bound to an IP address".into()))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                let Ok(Some(mut request)) = server.recv_timeout(Duration::from_millis(50)) else { continue };
                let mut body = Vec::new();
                let (status, text) = if request.method() != &tiny_http::Method::Post {
                    (405, r#"{"error":"POST only"}"#.to_string())
                } else if let Err(e) = request.as_reader().read_to_end(&mut body) {
                    (400, serde_json::to_string(&ErrorResponse { error: e.to_string() }).unwrap_or_default())
                } else {
                    let path = request.url().split('?').next().unwrap_or("").to_string();
                    backends.handle(&path, &body)
                };
                let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
                    .expect("static header");
                let response = tiny_http::Response::from_string(text).with_status_code(status).with_header(header);
                if let Err(e) = request.respond(response) {
                    log::warn!("failed to send response: {e}");
                }
            }
        });
        Ok(Self { addr, stop, thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server thread exits (it never does unless stopped).
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ModelServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
