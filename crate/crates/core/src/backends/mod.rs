//! Clients for the four external model roles and deterministic mocks.
//!
//! Every role is a small trait. [`Backends`] bundles one handle per role;
//! handles are `Send + Sync` and may be called from many threads at once.

mod http;
mod limit;
mod mock;
mod subprocess;
pub mod wire;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::compositor::CanvasSpec;
use crate::error::{Error, Result};
use crate::layer::{AlphaRaster, Matte, RgbRaster};

pub use http::HttpTransport;
pub use limit::{Limited, LimitStats};
pub use mock::{
    MockEmbedder, MockGenerator, MockMatter, MockRecaptioner, PlantTag, EmbedMode, FAIL_MARKER,
    MOCK_MATTE_THRESHOLD,
};
pub use subprocess::SubprocessTransport;
pub use wire::{RemoteBackend, Transport};

pub const DEFAULT_EMBED_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Generate,
    Matte,
    Embed,
    Recaption,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Generate, Role::Matte, Role::Embed, Role::Recaption];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Generate => "generate",
            Role::Matte => "matte",
            Role::Embed => "embed",
            Role::Recaption => "recaption",
        }
    }

    pub fn env_var(self) -> &'static str {
        match self {
            Role::Generate => "LAYERFORGE_GENERATE_URL",
            Role::Matte => "LAYERFORGE_MATTE_URL",
            Role::Embed => "LAYERFORGE_EMBED_URL",
            Role::Recaption => "LAYERFORGE_RECAPTION_URL",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `values`; an all-zero or non-finite input is rejected.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::InvalidRaster(
                "embedding has zero or non-finite norm".into(),
            ));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values that are already unit-norm (checked to 1e-6).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Precondition(format!(
                "embedding norm {norm} is not 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

pub trait ImageGenerator: Send + Sync {
    fn generate(&self, prompt: &str, canvas: CanvasSpec, seed: u64) -> Result<RgbRaster>;
}

pub trait Matter: Send + Sync {
    fn predict_matte(&self, image: &RgbRaster) -> Result<Matte>;
}

pub trait Embedder: Send + Sync {
    fn embed_image(&self, image: &AlphaRaster) -> Result<EmbeddingVector>;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;
}

pub trait Recaptioner: Send + Sync {
    fn recaption(&self, image: &RgbRaster, instruction: &str) -> Result<String>;
}

#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn ImageGenerator>,
    pub matter: Arc<dyn Matter>,
    pub embedder: Arc<dyn Embedder>,
    pub recaptioner: Arc<dyn Recaptioner>,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends").finish_non_exhaustive()
    }
}

impl Backends {
    /// All four roles served by the deterministic mocks.
    pub fn mock(seed: u64) -> Self {
        Self {
            generator: Arc::new(MockGenerator::new(seed)),
            matter: Arc::new(MockMatter::default()),
            embedder: Arc::new(MockEmbedder::hashed(seed, DEFAULT_EMBED_DIM)),
            recaptioner: Arc::new(MockRecaptioner),
        }
    }

    /// Builds clients from config; roles whose endpoint is `mock` use the mocks.
    pub fn from_config(cfg: &BackendsConfig) -> Result<Self> {
        let mock = Self::mock(cfg.seed);
        let mut out = mock.clone();
        for bc in cfg.roles() {
            bc.check()?;
            if bc.endpoint == "mock" {
                continue;
            }
            let remote = Arc::new(Limited::new(
                RemoteBackend::new(bc.role, transport_for(bc)?, bc.max_retries, bc.backoff()),
                bc.concurrency_limit,
            ));
            match bc.role {
                Role::Generate => out.generator = remote,
                Role::Matte => out.matter = remote,
                Role::Embed => out.embedder = remote,
                Role::Recaption => out.recaptioner = remote,
            }
        }
        Ok(out)
    }
}

fn transport_for(bc: &BackendConfig) -> Result<Arc<dyn Transport>> {
    if let Some(cmd) = bc.endpoint.strip_prefix("cmd:") {
        let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
        Ok(Arc::new(SubprocessTransport::spawn(&argv, bc.timeout())?))
    } else if bc.endpoint.starts_with("http://") || bc.endpoint.starts_with("https://") {
        Ok(Arc::new(HttpTransport::new(&bc.endpoint, bc.timeout())))
    } else {
        Err(Error::Config(format!(
            "{} endpoint `{}` must be `mock`, an http(s) URL, or `cmd:<command>`",
            bc.role, bc.endpoint
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub role: Role,
    /// `mock`, a base URL, or `cmd:<program args>` for the stdio transport.
    pub endpoint: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub concurrency_limit: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_backoff_ms() -> u64 {
    200
}

impl BackendConfig {
    pub fn mock(role: Role) -> Self {
        Self {
            role,
            endpoint: "mock".into(),
            timeout_secs: 120.0,
            max_retries: 3,
            concurrency_limit: 4,
            backoff_ms: default_backoff_ms(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Config(format!("{} timeout must be positive", self.role)));
        }
        if self.concurrency_limit == 0 {
            return Err(Error::Config(format!(
                "{} concurrency_limit must be at least 1",
                self.role
            )));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn backoff(&self) -> Duration {
        Duration::from_millis(self.backoff_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendsConfig {
    pub generate: BackendConfig,
    pub matte: BackendConfig,
    pub embed: BackendConfig,
    pub recaption: BackendConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            generate: BackendConfig::mock(Role::Generate),
            matte: BackendConfig::mock(Role::Matte),
            embed: BackendConfig::mock(Role::Embed),
            recaption: BackendConfig::mock(Role::Recaption),
            seed: 0,
        }
    }
}

impl BackendsConfig {
    pub fn roles(&self) -> [&BackendConfig; 4] {
        [&self.generate, &self.matte, &self.embed, &self.recaption]
    }

    /// Replaces endpoints with `LAYERFORGE_<ROLE>_URL` where set.
    pub fn with_env_overrides(mut self) -> Self {
        self.apply_overrides(|var| std::env::var(var).ok());
        self
    }

    fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for bc in [
            &mut self.generate,
            &mut self.matte,
            &mut self.embed,
            &mut self.recaption,
        ] {
            if let Some(url) = lookup(bc.role.env_var()).filter(|u| !u.is_empty()) {
                bc.endpoint = url;
            }
        }
    }
}
