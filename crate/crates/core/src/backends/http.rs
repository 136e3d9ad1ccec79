//! Blocking JSON-over-POST transport: `POST {base}/v1/{role}`.

use std::time::Duration;

use super::wire::Transport;
use super::Role;
use crate::error::{Error, Result};

const MAX_BODY: u64 = 512 * 1024 * 1024;
const EXCERPT: usize = 300;

pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpTransport").field("base", &self.base).finish()
    }
}

impl HttpTransport {
    pub fn new(base: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base.trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn url(&self, role: Role) -> String {
        format!("{}/v1/{}", self.base, role.as_str())
    }
}

impl Transport for HttpTransport {
    fn call(&self, role: Role, request: &serde_json::Value) -> Result<serde_json::Value> {
        let transport_err = |e: ureq::Error| Error::Transport {
            role: role.to_string(),
            message: e.to_string(),
        };
        let mut resp = self
            .agent
            .post(&self.url(role))
            .send_json(request)
            .map_err(transport_err)?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(MAX_BODY)
            .read_to_string()
            .map_err(transport_err)?;
        if !(200..300).contains(&status) {
            let mut excerpt: String = body.chars().take(EXCERPT).collect();
            if excerpt.len() < body.len() {
                excerpt.push_str("...");
            }
            return Err(Error::Backend {
                role: role.to_string(),
                status,
                body: excerpt,
            });
        }
        serde_json::from_str(&body).map_err(|e| Error::Backend {
            role: role.to_string(),
            status,
            body: format!("response is not JSON: {e}"),
        })
    }
}
