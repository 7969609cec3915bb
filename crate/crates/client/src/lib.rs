//! Typed client for the annotation service.

use std::time::Duration;

use clickforge_core::adapter::AdaptMode;
use clickforge_core::guidance::Click;
use clickforge_core::protocol::*;
use reqwest::multipart::{Form, Part};
use reqwest::{Method, RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server returned {status}: {} ({})", .body.message, .body.code)]
    Api {
        status: StatusCode,
        body: ErrorBody,
        retry_after: Option<u64>,
    },
    #[error("unexpected response ({status}): {reason}")]
    Decode { status: StatusCode, reason: String },
}

impl ClientError {
    /// The server's error code, if it sent one.
    pub fn code(&self) -> Option<&str> {
        match self {
            Self::Api { body, .. } => Some(&body.code),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// New-session request. `image` and `gt` are PNG bytes.
#[derive(Clone, Debug, Default)]
pub struct NewSession {
    pub image: Vec<u8>,
    pub gt: Option<Vec<u8>>,
    pub mode: Option<AdaptMode>,
}

#[derive(Clone, Debug)]
pub struct Client {
    http: reqwest::Client,
    base: String,
    busy_retries: u32,
}

impl Client {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            http: reqwest::Client::new(),
            base: base_url.into().trim_end_matches('/').to_string(),
            busy_retries: 0,
        }
    }

    /// Retries a `busy` answer up to `n` times, sleeping for the server's
    /// Retry-After each time.
    pub fn with_busy_retries(mut self, n: u32) -> Self {
        self.busy_retries = n;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn call<T: DeserializeOwned>(&self, build: impl Fn() -> RequestBuilder) -> Result<T> {
        let mut attempt = 0;
        loop {
            match self.once(build()).await {
                Err(ClientError::Api {
                    status: StatusCode::SERVICE_UNAVAILABLE,
                    retry_after,
                    ..
                }) if attempt < self.busy_retries => {
                    attempt += 1;
                    tokio::time::sleep(Duration::from_secs(retry_after.unwrap_or(1))).await;
                }
                other => return other,
            }
        }
    }

    async fn once<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T> {
        let resp = req.send().await?;
        let status = resp.status();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok());
        let bytes = resp.bytes().await?;
        if status.is_success() {
            let body = if bytes.is_empty() { &b"null"[..] } else { &bytes[..] };
            serde_json::from_slice(body).map_err(|e| ClientError::Decode {
                status,
                reason: e.to_string(),
            })
        } else {
            match serde_json::from_slice::<ErrorBody>(&bytes) {
                Ok(body) => Err(ClientError::Api {
                    status,
                    body,
                    retry_after,
                }),
                Err(_) => Err(ClientError::Decode {
                    status,
                    reason: String::from_utf8_lossy(&bytes).into_owned(),
                }),
            }
        }
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        self.http.request(method, format!("{}{path}", self.base))
    }

    pub async fn create_session(&self, req: &NewSession) -> Result<CreatedSession> {
        self.call(|| {
            let mut form = Form::new().part("image", Part::bytes(req.image.clone()).file_name("image.png"));
            if let Some(gt) = &req.gt {
                form = form.part("gt", Part::bytes(gt.clone()).file_name("gt.png"));
            }
            if let Some(mode) = req.mode {
                form = form.text("mode", mode.to_string());
            }
            self.request(Method::POST, "/sessions").multipart(form)
        })
        .await
    }

    pub async fn click(&self, id: &str, click: Click) -> Result<ClickResponse> {
        self.call(|| {
            self.request(Method::POST, &format!("/sessions/{id}/clicks"))
                .json(&click)
        })
        .await
    }

    pub async fn undo(&self, id: &str) -> Result<UndoResponse> {
        self.call(|| self.request(Method::POST, &format!("/sessions/{id}/undo")))
            .await
    }

    pub async fn finish(&self, id: &str) -> Result<FinishResponse> {
        self.call(|| self.request(Method::POST, &format!("/sessions/{id}/finish")))
            .await
    }

    pub async fn discard(&self, id: &str) -> Result<()> {
        self.call(|| self.request(Method::DELETE, &format!("/sessions/{id}")))
            .await
    }

    pub async fn session(&self, id: &str) -> Result<SessionState> {
        self.call(|| self.request(Method::GET, &format!("/sessions/{id}")))
            .await
    }

    pub async fn health(&self) -> Result<Health> {
        self.call(|| self.request(Method::GET, "/healthz")).await
    }

    pub async fn checkpoints(&self) -> Result<CheckpointList> {
        self.call(|| self.request(Method::GET, "/checkpoints")).await
    }
}
