//! Live HTTP bindings.
//!
//! * search: a Serper-style JSON API (`POST {base}/search`, `POST {base}/images`, `X-API-KEY`)
//! * page reader: a Jina-style reader (`GET {base}/{url}` returning markdown)
//! * model: an OpenAI-compatible `POST {base}/chat/completions` endpoint with image parts
//! * generator: `POST {base}` with `{prompt, reference_images[]}` returning `{image_b64, mime}`
//! * downloader: plain `GET`

use std::time::Duration;

use base64::Engine;
use chrono::Utc;
use reqwest::blocking::{Client, Response};
use serde_json::{json, Value};

use super::backend::*;

const USER_AGENT: &str = concat!("orig/", env!("CARGO_PKG_VERSION"));
const MAX_DOWNLOAD_BYTES: usize = 20 * 1024 * 1024;

fn client(timeout: Duration) -> Client {
    Client::builder()
        .timeout(timeout)
        .user_agent(USER_AGENT)
        .build()
        .expect("http client builds")
}

fn transport(e: reqwest::Error) -> BackendError {
    BackendError::transient(format!("transport error: {e}"))
}

fn json_body(resp: Response) -> Result<Value, BackendError> {
    let status = resp.status().as_u16();
    let text = resp.text().map_err(transport)?;
    if !(200..300).contains(&status) {
        return Err(BackendError::from_status(status, &text));
    }
    serde_json::from_str(&text).map_err(|e| BackendError::permanent(format!("invalid json body: {e}")))
}

fn str_field<'a>(v: &'a Value, key: &str) -> &'a str {
    v.get(key).and_then(Value::as_str).unwrap_or_default()
}

pub struct SerperSearch {
    http: Client,
    base_url: String,
    key: String,
}

impl SerperSearch {
    pub const DEFAULT_BASE: &'static str = "https://google.serper.dev";

    pub fn new(base_url: impl Into<String>, key: impl Into<String>, timeout: Duration) -> Self {
        Self {
            http: client(timeout),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            key: key.into(),
        }
    }

    fn post(&self, path: &str, query: &str, num: usize) -> Result<Value, BackendError> {
        let resp = self
            .http
            .post(format!("{}/{path}", self.base_url))
            .header("X-API-KEY", &self.key)
            .json(&json!({ "q": query, "num": num, "gl": "us", "hl": "en" }))
            .send()
            .map_err(transport)?;
        json_body(resp)
    }
}

impl SearchBackend for SerperSearch {
    fn search_text(&self, query: &str, num: usize) -> Result<Vec<SearchHit>, BackendError> {
        let body = self.post("search", query, num)?;
        let items = body.get("organic").and_then(Value::as_array).cloned().unwrap_or_default();
        Ok(items
            .iter()
            .take(num)
            .enumerate()
            .map(|(i, it)| SearchHit::text(i as u32 + 1, str_field(it, "link"), str_field(it, "title"), str_field(it, "snippet")))
            .collect())
    }

    fn search_images(&self, query: &str, num: usize) -> Result<Vec<SearchHit>, BackendError> {
        let body = self.post("images", query, num)?;
        let items = body.get("images").and_then(Value::as_array).cloned().unwrap_or_default();
        Ok(items
            .iter()
            .take(num)
            .enumerate()
            .map(|(i, it)| {
                SearchHit::image(i as u32 + 1, str_field(it, "link"), str_field(it, "title"), str_field(it, "imageUrl"))
            })
            .collect())
    }
}

pub struct JinaReader {
    http: Client,
    base_url: String,
    key: Option<String>,
}

impl JinaReader {
    pub const DEFAULT_BASE: &'static str = "https://r.jina.ai";

    pub fn new(base_url: impl Into<String>, key: Option<String>, timeout: Duration) -> Self {
        Self {
            http: client(timeout),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            key,
        }
    }
}

impl PageReader for JinaReader {
    fn read(&self, url: &str) -> Result<PageContent, BackendError> {
        let mut req = self
            .http
            .get(format!("{}/{url}", self.base_url))
            .header("X-Return-Format", "markdown");
        if let Some(key) = &self.key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(transport)?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(transport)?;
        if !(200..300).contains(&status) {
            return Err(BackendError::from_status(status, &text));
        }
        Ok(PageContent {
            content: text,
            fetched_at: Utc::now(),
        })
    }
}

pub struct HttpDownloader {
    http: Client,
}

impl HttpDownloader {
    pub fn new(timeout: Duration) -> Self {
        Self { http: client(timeout) }
    }
}

impl ImageDownloader for HttpDownloader {
    fn download(&self, url: &str) -> Result<Download, BackendError> {
        let resp = self.http.get(url).send().map_err(transport)?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(BackendError::from_status(status, ""));
        }
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let mut bytes = resp.bytes().map_err(transport)?.to_vec();
        if bytes.len() > MAX_DOWNLOAD_BYTES {
            bytes.clear();
        }
        Ok(Download {
            status,
            content_type,
            bytes,
        })
    }
}

pub struct OpenAiChat {
    http: Client,
    base_url: String,
    key: String,
    model: String,
    temperature: f32,
}

impl OpenAiChat {
    pub const DEFAULT_BASE: &'static str = "https://api.openai.com/v1";

    pub fn new(base_url: impl Into<String>, key: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Self {
        Self {
            http: client(timeout),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            key: key.into(),
            model: model.into(),
            temperature: 0.2,
        }
    }
}

impl ModelBackend for OpenAiChat {
    fn complete(&self, call: &ModelCall) -> Result<ModelReply, BackendError> {
        let mut parts = vec![json!({ "type": "text", "text": call.prompt })];
        for img in &call.images {
            let data = base64::engine::general_purpose::STANDARD.encode(&img.bytes);
            parts.push(json!({
                "type": "image_url",
                "image_url": { "url": format!("data:{};base64,{data}", img.mime) }
            }));
        }
        let body = json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{ "role": "user", "content": parts }],
        });
        let resp = self
            .http
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(&self.key)
            .json(&body)
            .send()
            .map_err(transport)?;
        let v = json_body(resp)?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::permanent("chat response has no message content"))?;
        Ok(ModelReply {
            text: text.to_string(),
            input_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
            output_tokens: v.pointer("/usage/completion_tokens").and_then(Value::as_u64),
        })
    }
}

pub struct HttpImageGenerator {
    http: Client,
    url: String,
    key: Option<String>,
}

impl HttpImageGenerator {
    pub fn new(url: impl Into<String>, key: Option<String>, timeout: Duration) -> Self {
        Self {
            http: client(timeout),
            url: url.into(),
            key,
        }
    }
}

impl ImageGenerator for HttpImageGenerator {
    fn generate(&self, prompt: &str, references: &[ImageInput]) -> Result<GeneratedImage, BackendError> {
        let refs: Vec<Value> = references
            .iter()
            .map(|r| {
                json!({
                    "mime": r.mime,
                    "data_b64": base64::engine::general_purpose::STANDARD.encode(&r.bytes),
                })
            })
            .collect();
        let mut req = self.http.post(&self.url).json(&json!({ "prompt": prompt, "reference_images": refs }));
        if let Some(key) = &self.key {
            req = req.bearer_auth(key);
        }
        let v = json_body(req.send().map_err(transport)?)?;
        let data = v
            .get("image_b64")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::permanent("generator response has no image_b64"))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(data)
            .map_err(|e| BackendError::permanent(format!("generator image is not base64: {e}")))?;
        Ok(GeneratedImage {
            backend: "http".into(),
            bytes: Some(bytes),
            mime: v.get("mime").and_then(Value::as_str).map(str::to_string),
        })
    }
}
