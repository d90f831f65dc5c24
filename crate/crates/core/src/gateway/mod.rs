//! Chat-completion clients.
//!
//! [`ModelGateway`] is the one interface the engine talks to. Two
//! implementations ship: [`HttpGateway`] for an OpenAI-style remote provider
//! and [`ScriptedGateway`], a deterministic oracle driven by a JSON script.

mod http;
mod scripted;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::ObjectId;
use crate::prompts::RenderedPrompt;
use crate::world::SceneSnapshot;

pub use http::{HttpConfig, HttpGateway};
pub use scripted::{
    load_script, Matcher, OracleScript, RecordingGateway, ScriptEntry, ScriptMode, ScriptedGateway,
};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("provider unreachable after {attempts} attempt(s): {detail}")]
    ProviderUnreachable { attempts: u32, detail: String },
    #[error("provider rejected the request with status {status}: {body}")]
    ProviderRejected { status: u16, body: String },
    #[error("provider timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("provider returned an unusable response: {0}")]
    BadResponse(String),
    #[error("no script entry matches the request: {excerpt}")]
    ScriptMiss { excerpt: String },
    #[error("malformed script: {0}")]
    MalformedScript(String),
    #[error("gateway configuration: {0}")]
    Config(String),
}

/// Sampling controls sent with every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    /// Bias keyed by surface token string; the provider adapter translates.
    pub token_bias: BTreeMap<String, f64>,
    pub max_tokens: u32,
}

pub const DEFAULT_OBJECT_BIAS: f64 = 0.1;
pub const DEFAULT_MAX_TOKENS: u32 = 512;

impl DecodeParams {
    /// Greedy decoding with a small positive bias on every object name.
    pub fn for_vocabulary(vocab: &BTreeSet<ObjectId>) -> DecodeParams {
        DecodeParams {
            temperature: 0.0,
            token_bias: vocab
                .iter()
                .map(|o| (o.as_str().to_string(), DEFAULT_OBJECT_BIAS))
                .collect(),
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            temperature: 0.0,
            token_bias: BTreeMap::new(),
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt: u32,
    pub completion: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub provider_id: String,
    pub latency_ms: u64,
    pub token_counts: TokenCounts,
}

pub trait ModelGateway: Send + Sync {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &DecodeParams,
    ) -> Result<Completion, GatewayError>;

    /// Scene-conditioned call; the scene text rides along as an observation
    /// block at the end of the user message.
    fn complete_multimodal(
        &self,
        prompt: &RenderedPrompt,
        scene: &SceneSnapshot,
        params: &DecodeParams,
    ) -> Result<Completion, GatewayError> {
        self.complete(&prompt.with_observation(scene), params)
    }
}

impl<G: ModelGateway + ?Sized> ModelGateway for Arc<G> {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &DecodeParams,
    ) -> Result<Completion, GatewayError> {
        (**self).complete(prompt, params)
    }

    fn complete_multimodal(
        &self,
        prompt: &RenderedPrompt,
        scene: &SceneSnapshot,
        params: &DecodeParams,
    ) -> Result<Completion, GatewayError> {
        (**self).complete_multimodal(prompt, scene, params)
    }
}

/// Which gateway a run uses.
#[derive(Debug, Clone, PartialEq)]
pub enum GatewayConfig {
    Http(HttpConfig),
    Scripted { script: PathBuf },
}

impl GatewayConfig {
    pub fn http(endpoint: impl Into<String>, model: impl Into<String>) -> GatewayConfig {
        GatewayConfig::Http(HttpConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout: Duration::from_secs(60),
            retries: 3,
            backoff_base: Duration::from_millis(250),
            max_in_flight: 4,
        })
    }

    pub fn build(&self) -> Result<Arc<dyn ModelGateway>, GatewayError> {
        Ok(match self {
            GatewayConfig::Http(c) => Arc::new(HttpGateway::new(c.clone())?),
            GatewayConfig::Scripted { script } => {
                Arc::new(ScriptedGateway::new(load_script(script)?))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profile_biases_every_object() {
        let vocab: BTreeSet<ObjectId> = ["bread", "fridge", "knife"]
            .iter()
            .map(|s| ObjectId::new(s).unwrap())
            .collect();
        let p = DecodeParams::for_vocabulary(&vocab);
        assert_eq!(p.temperature, 0.0);
        assert_eq!(p.token_bias.len(), 3);
        assert!(p.token_bias.values().all(|b| *b == 0.1));
        assert!(p.token_bias.contains_key("fridge"));
    }
}
