//! Golden request/response fixtures for the wire protocol.
//!
//! Each fixture file holds one request and the status a conforming service
//! must answer with. Replaying a fixture checks the response against schema
//! assertions every backend must satisfy (text count equals `n`, one vector
//! per text with a constant dimension, masks sized like the image with a
//! requested label and a confidence at or above the threshold, inpainted
//! images keeping their dimensions, error bodies carrying `{error}`).
//! Fixtures recorded from the mock backends also carry the exact `golden`
//! body, compared only in strict mode.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::image_from_base64;
use super::protocol::{
    DescribeRequest, DescribeResponse, EmbedRequest, EmbedResponse, ErrorResponse, InpaintRequest, InpaintResponse,
    SegmentRequest, SegmentResponse, PROTOCOL_VERSION,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixture {
    pub name: String,
    pub endpoint: String,
    /// JSON request body; ignored when `raw_body` is set.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub request: Value,
    /// Verbatim body for malformed-request cases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_body: Option<String>,
    pub status: u16,
    /// Exact response of the mock backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub golden: Option<Value>,
}

impl Fixture {
    pub fn body(&self) -> String {
        match &self.raw_body {
            Some(raw) => raw.clone(),
            None => self.request.to_string(),
        }
    }

    /// Endpoint role name without the leading slash.
    pub fn role(&self) -> &str {
        self.endpoint.trim_start_matches('/')
    }
}

/// Every `*.json` fixture in `dir`, ordered by file name.
pub fn load_fixtures(dir: &Path) -> Result<Vec<Fixture>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != "world.json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::parse(p.display().to_string(), e))
        })
        .collect()
}

/// Violations of the fixture's assertions by one response. Empty means it conforms.
pub fn check(fx: &Fixture, status: u16, body: &str, strict: bool) -> Vec<String> {
    let mut v = Vec::new();
    if status != fx.status {
        v.push(format!("status {status}, expected {}", fx.status));
    }
    if fx.status >= 400 {
        if serde_json::from_str::<ErrorResponse>(body).is_err() {
            v.push(format!("error body lacks {{error}}: {body:.200}"));
        }
        return v;
    }
    if status != fx.status {
        return v;
    }
    if let Err(e) = check_schema(fx, body) {
        v.push(e);
    }
    if strict {
        if let Some(golden) = &fx.golden {
            match serde_json::from_str::<Value>(body) {
                Ok(got) if &got == golden => {}
                Ok(_) => v.push("response differs from golden".into()),
                Err(e) => v.push(format!("response is not JSON: {e}")),
            }
        }
    }
    v
}

fn decode<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> std::result::Result<T, String> {
    serde_json::from_str(value).map_err(|e| format!("{what}: {e}"))
}

fn request<T: serde::de::DeserializeOwned>(fx: &Fixture) -> std::result::Result<T, String> {
    serde_json::from_value(fx.request.clone()).map_err(|e| format!("fixture request: {e}"))
}

fn check_schema(fx: &Fixture, body: &str) -> std::result::Result<(), String> {
    match fx.endpoint.as_str() {
        "/describe" => {
            let req: DescribeRequest = request(fx)?;
            let resp: DescribeResponse = decode("response", body)?;
            if resp.texts.len() != req.n {
                return Err(format!("{} texts for n = {}", resp.texts.len(), req.n));
            }
            if resp.texts.iter().any(|t| t.trim().is_empty()) {
                return Err("empty text".into());
            }
        }
        "/embed" => {
            let req: EmbedRequest = request(fx)?;
            let resp: EmbedResponse = decode("response", body)?;
            if resp.vectors.len() != req.texts.len() {
                return Err(format!("{} vectors for {} texts", resp.vectors.len(), req.texts.len()));
            }
            let dim = resp.vectors.first().map_or(0, Vec::len);
            if dim == 0 {
                return Err("zero-dimensional vectors".into());
            }
            if resp.vectors.iter().any(|x| x.len() != dim) {
                return Err("vector dimension varies within the batch".into());
            }
            if resp.vectors.iter().flatten().any(|x| !x.is_finite()) {
                return Err("non-finite vector entry".into());
            }
            if resp.vectors.iter().any(|x| x.iter().all(|c| *c == 0.0)) {
                return Err("zero vector".into());
            }
        }
        "/segment" => {
            let req: SegmentRequest = request(fx)?;
            let resp: SegmentResponse = decode("response", body)?;
            let image = image_from_base64(&req.image).map_err(|e| format!("fixture image: {e}"))?;
            let (w, h) = image.dimensions();
            for m in &resp.masks {
                if (m.rle.width, m.rle.height) != (w, h) {
                    return Err(format!("mask {}x{} for a {w}x{h} image", m.rle.width, m.rle.height));
                }
                m.rle.decode(&m.label).map_err(|e| format!("mask {:?}: {e}", m.label))?;
                if !req.labels.contains(&m.label) {
                    return Err(format!("mask label {:?} was not requested", m.label));
                }
                if !(m.confidence >= req.threshold && m.confidence <= 1.0) {
                    return Err(format!("confidence {} outside [{}, 1]", m.confidence, req.threshold));
                }
            }
        }
        "/inpaint" => {
            let req: InpaintRequest = request(fx)?;
            let resp: InpaintResponse = decode("response", body)?;
            let before = image_from_base64(&req.image).map_err(|e| format!("fixture image: {e}"))?;
            let after = image_from_base64(&resp.image).map_err(|e| format!("response image: {e}"))?;
            if before.dimensions() != after.dimensions() {
                return Err(format!("inpainted image is {:?}, input {:?}", after.dimensions(), before.dimensions()));
            }
        }
        other => return Err(format!("no schema for {other}")),
    }
    Ok(())
}

/// Sends one fixture to `base` and returns the raw status and body.
pub fn replay(agent: &ureq::Agent, base: &str, fx: &Fixture) -> Result<(u16, String)> {
    let url = format!("{}{}", base.trim_end_matches('/'), fx.endpoint);
    let mut resp = agent
        .post(&url)
        .header("content-type", "application/json")
        .header("x-css-protocol", PROTOCOL_VERSION.to_string())
        .send(fx.body())
        .map_err(|e| Error::backend(&url, e))?;
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .with_config()
        .limit(512 << 20)
        .read_to_string()
        .map_err(|e| Error::backend(&url, e))?;
    Ok((status, text))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureResult {
    pub name: String,
    pub violations: Vec<String>,
}

impl FixtureResult {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Replays every fixture whose endpoint role is in `roles` (all when empty).
pub fn run_suite(base: &str, fixtures: &[Fixture], roles: &[String], strict: bool, timeout: Duration) -> Vec<FixtureResult> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    fixtures
        .iter()
        .filter(|fx| roles.is_empty() || fx.status == 404 || roles.iter().any(|r| r == fx.role()))
        .map(|fx| {
            let violations = match replay(&agent, base, fx) {
                Ok((status, body)) => check(fx, status, &body, strict),
                Err(e) => vec![e.to_string()],
            };
            FixtureResult { name: fx.name.clone(), violations }
        })
        .collect()
}
