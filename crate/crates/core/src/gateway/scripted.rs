use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{Completion, DecodeParams, GatewayError, ModelGateway, TokenCounts};
use crate::prompts::RenderedPrompt;

/// How a script entry recognizes a request. Matching runs against
/// `system + "\n\n" + user`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Matcher {
    ExactPrompt(String),
    ContainsAll(Vec<String>),
}

impl Matcher {
    pub fn matches(&self, request: &str) -> bool {
        match self {
            Matcher::ExactPrompt(p) => p == request,
            Matcher::ContainsAll(parts) => parts.iter().all(|p| request.contains(p.as_str())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawEntry", into = "RawEntry")]
pub struct ScriptEntry {
    pub matcher: Matcher,
    pub reply: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exact_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contains_all: Option<Vec<String>>,
    reply: String,
}

impl TryFrom<RawEntry> for ScriptEntry {
    type Error = String;
    fn try_from(r: RawEntry) -> Result<Self, String> {
        let matcher = match (r.exact_prompt, r.contains_all) {
            (Some(p), None) => Matcher::ExactPrompt(p),
            (None, Some(parts)) if parts.is_empty() => {
                return Err("contains_all must list at least one substring".into())
            }
            (None, Some(parts)) => Matcher::ContainsAll(parts),
            _ => return Err("entry needs exactly one of exact_prompt / contains_all".into()),
        };
        Ok(ScriptEntry {
            matcher,
            reply: r.reply,
        })
    }
}

impl From<ScriptEntry> for RawEntry {
    fn from(e: ScriptEntry) -> Self {
        let (exact_prompt, contains_all) = match e.matcher {
            Matcher::ExactPrompt(p) => (Some(p), None),
            Matcher::ContainsAll(v) => (None, Some(v)),
        };
        RawEntry {
            exact_prompt,
            contains_all,
            reply: e.reply,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptMode {
    /// Unmatched requests are errors.
    #[default]
    Strict,
    /// Unmatched requests get this reply.
    Fallback(String),
}

/// Ordered prompt → reply table. The first matching entry wins and entries
/// may match any number of times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleScript {
    #[serde(default)]
    pub mode: ScriptMode,
    pub entries: Vec<ScriptEntry>,
}

impl OracleScript {
    pub fn parse(text: &str) -> Result<OracleScript, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::MalformedScript("file is empty".into()));
        }
        let script: OracleScript =
            serde_json::from_str(text).map_err(|e| GatewayError::MalformedScript(e.to_string()))?;
        if script.entries.is_empty() && script.mode == ScriptMode::Strict {
            return Err(GatewayError::MalformedScript(
                "strict script without entries can never answer".into(),
            ));
        }
        Ok(script)
    }

    pub fn lookup(&self, request: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.matcher.matches(request))
            .map(|e| e.reply.as_str())
            .or(match &self.mode {
                ScriptMode::Strict => None,
                ScriptMode::Fallback(r) => Some(r.as_str()),
            })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }
}

pub fn load_script(path: &Path) -> Result<OracleScript, GatewayError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GatewayError::Config(format!("cannot read script {}: {e}", path.display())))?;
    OracleScript::parse(&text).map_err(|e| match e {
        GatewayError::MalformedScript(d) => {
            GatewayError::MalformedScript(format!("{}: {d}", path.display()))
        }
        other => other,
    })
}

fn word_count(s: &str) -> u32 {
    s.split_whitespace().count() as u32
}

/// Deterministic gateway backed by an [`OracleScript`].
#[derive(Debug, Clone)]
pub struct ScriptedGateway {
    script: Arc<OracleScript>,
}

impl ScriptedGateway {
    pub const PROVIDER_ID: &'static str = "scripted";

    pub fn new(script: OracleScript) -> ScriptedGateway {
        ScriptedGateway {
            script: Arc::new(script),
        }
    }

    pub fn script(&self) -> &OracleScript {
        &self.script
    }
}

impl ModelGateway for ScriptedGateway {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        _params: &DecodeParams,
    ) -> Result<Completion, GatewayError> {
        let request = prompt.request_text();
        let reply = self
            .script
            .lookup(&request)
            .ok_or_else(|| GatewayError::ScriptMiss {
                excerpt: prompt.user.chars().take(120).collect(),
            })?;
        Ok(Completion {
            text: reply.to_string(),
            provider_id: Self::PROVIDER_ID.into(),
            latency_ms: 0,
            token_counts: TokenCounts {
                prompt: word_count(&request),
                completion: word_count(reply),
            },
        })
    }
}

/// Pass-through wrapper that remembers every exchange so a live session can
/// be replayed offline.
pub struct RecordingGateway<G> {
    inner: G,
    log: Mutex<Vec<ScriptEntry>>,
}

impl<G: ModelGateway> RecordingGateway<G> {
    pub fn new(inner: G) -> Self {
        RecordingGateway {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Strict script of exact-prompt entries in call order.
    pub fn to_script(&self) -> OracleScript {
        OracleScript {
            mode: ScriptMode::Strict,
            entries: self.log.lock().unwrap().clone(),
        }
    }
}

impl<G: ModelGateway> ModelGateway for RecordingGateway<G> {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &DecodeParams,
    ) -> Result<Completion, GatewayError> {
        let c = self.inner.complete(prompt, params)?;
        self.log.lock().unwrap().push(ScriptEntry {
            matcher: Matcher::ExactPrompt(prompt.request_text()),
            reply: c.text.clone(),
        });
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::SceneSnapshot;
    use std::collections::BTreeSet;

    fn prompt(user: &str) -> RenderedPrompt {
        RenderedPrompt {
            system: "sys".into(),
            user: user.into(),
        }
    }

    #[test]
    fn contains_all_and_strict_miss() {
        let s = OracleScript::parse(
            r#"{"entries":[{"contains_all":["heated slice of bread"],"reply":"Q: a?\nA: b"}]}"#,
        )
        .unwrap();
        let g = ScriptedGateway::new(s);
        let p = DecodeParams::default();
        let c = g
            .complete(&prompt("put a heated slice of bread in the fridge"), &p)
            .unwrap();
        assert_eq!(c.text, "Q: a?\nA: b");
        assert_eq!(c.provider_id, "scripted");
        assert!(matches!(
            g.complete(&prompt("something else"), &p),
            Err(GatewayError::ScriptMiss { .. })
        ));
    }

    #[test]
    fn fallback_and_order() {
        let s = OracleScript::parse(
            r#"{"mode":{"fallback":"VALID"},"entries":[
                {"exact_prompt":"sys\n\nx","reply":"first"},
                {"exact_prompt":"sys\n\nx","reply":"second"}]}"#,
        )
        .unwrap();
        let g = ScriptedGateway::new(s);
        let p = DecodeParams::default();
        assert_eq!(g.complete(&prompt("x"), &p).unwrap().text, "first");
        assert_eq!(g.complete(&prompt("y"), &p).unwrap().text, "VALID");
    }

    #[test]
    fn malformed_scripts() {
        for bad in [
            "",
            "   \n",
            "{",
            r#"{"entries":[]}"#,
            r#"{"entries":[{"reply":"x"}]}"#,
            r#"{"entries":[{"contains_all":[],"reply":"x"}]}"#,
            r#"{"entries":[{"contains_all":["a"],"exact_prompt":"b","reply":"x"}]}"#,
            r#"{"mode":"loose","entries":[{"contains_all":["a"],"reply":"x"}]}"#,
        ] {
            assert!(
                matches!(
                    OracleScript::parse(bad),
                    Err(GatewayError::MalformedScript(_))
                ),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn multimodal_sees_scene_and_is_deterministic() {
        let s = OracleScript::parse(
            r#"{"entries":[{"contains_all":["(Put, pan, fridge)","- fridge (closed)"],"reply":"INVALID - door closed"}]}"#,
        )
        .unwrap();
        let g = ScriptedGateway::new(s);
        let scene = SceneSnapshot {
            description: "Agent location: kitchen\nHolding: pan\nVisible objects:\n- fridge (closed)\n- pan (held)\n".into(),
            visible_ids: BTreeSet::new(),
        };
        let p = prompt("subgoal (Put, pan, fridge) failed");
        let a = g
            .complete_multimodal(&p, &scene, &DecodeParams::default())
            .unwrap();
        let b = g
            .complete_multimodal(&p, &scene, &DecodeParams::default())
            .unwrap();
        assert_eq!(a.text, "INVALID - door closed");
        assert_eq!(a, b);

        let empty = SceneSnapshot {
            description: "Agent location: hall\nHolding: nothing\nVisible objects: none\n".into(),
            visible_ids: BTreeSet::new(),
        };
        let fb = ScriptedGateway::new(OracleScript {
            mode: ScriptMode::Fallback("VALID".into()),
            entries: vec![],
        });
        assert_eq!(
            fb.complete_multimodal(&p, &empty, &DecodeParams::default())
                .unwrap()
                .text,
            "VALID"
        );
    }

    #[test]
    fn recording_round_trips() {
        let inner = ScriptedGateway::new(OracleScript {
            mode: ScriptMode::Fallback("ok".into()),
            entries: vec![],
        });
        let rec = RecordingGateway::new(inner);
        rec.complete(&prompt("one"), &DecodeParams::default())
            .unwrap();
        rec.complete(&prompt("two"), &DecodeParams::default())
            .unwrap();
        let script = rec.to_script();
        let reparsed = OracleScript::parse(&script.to_json()).unwrap();
        assert_eq!(reparsed, script);
        let replay = ScriptedGateway::new(reparsed);
        assert_eq!(
            replay
                .complete(&prompt("two"), &DecodeParams::default())
                .unwrap()
                .text,
            "ok"
        );
        assert!(replay
            .complete(&prompt("three"), &DecodeParams::default())
            .is_err());
    }
}
