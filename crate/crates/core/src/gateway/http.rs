use std::fmt;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{Completion, DecodeParams, GatewayError, ModelGateway, TokenCounts};
use crate::prompts::RenderedPrompt;

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout: Duration,
    /// Extra attempts after the first one.
    pub retries: u32,
    pub backoff_base: Duration,
    pub max_in_flight: usize,
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.count.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// OpenAI-style chat-completions client.
pub struct HttpGateway {
    cfg: HttpConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    gate: InFlight,
}

impl fmt::Debug for HttpGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpGateway")
            .field("endpoint", &self.cfg.endpoint)
            .field("model", &self.cfg.model)
            .field("api_key_set", &self.api_key.is_some())
            .finish()
    }
}

enum Attempt {
    Done(Completion),
    Transient { timeout: bool, detail: String },
    Fatal(GatewayError),
}

impl HttpGateway {
    pub fn new(cfg: HttpConfig) -> Result<HttpGateway, GatewayError> {
        if cfg.endpoint.trim().is_empty() {
            return Err(GatewayError::Config("endpoint is empty".into()));
        }
        if cfg.max_in_flight == 0 {
            return Err(GatewayError::Config(
                "max_in_flight must be positive".into(),
            ));
        }
        let api_key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpGateway {
            gate: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
                limit: cfg.max_in_flight,
            },
            cfg,
            agent,
            api_key,
        })
    }

    pub fn request_body(&self, prompt: &RenderedPrompt, params: &DecodeParams) -> Value {
        let mut messages = Vec::new();
        if !prompt.system.is_empty() {
            messages.push(json!({"role": "system", "content": prompt.system}));
        }
        messages.push(json!({"role": "user", "content": prompt.user}));
        json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": params.temperature,
            "logit_bias": params.token_bias,
            "max_tokens": params.max_tokens,
        })
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let started = Instant::now();
        let mut req = self.agent.post(&self.cfg.endpoint);
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => {
                return Attempt::Transient {
                    timeout: true,
                    detail: "timeout".into(),
                }
            }
            Err(
                e @ (ureq::Error::Io(_)
                | ureq::Error::ConnectionFailed
                | ureq::Error::HostNotFound
                | ureq::Error::Protocol(_)),
            ) => {
                return Attempt::Transient {
                    timeout: false,
                    detail: e.to_string(),
                }
            }
            Err(e) => return Attempt::Fatal(GatewayError::Config(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => {
                return Attempt::Transient {
                    timeout: true,
                    detail: "timeout reading body".into(),
                }
            }
            Err(e) => {
                return Attempt::Transient {
                    timeout: false,
                    detail: e.to_string(),
                }
            }
        };
        let excerpt: String = text.chars().take(200).collect();
        if status == 429 || status >= 500 {
            return Attempt::Transient {
                timeout: false,
                detail: format!("status {status}: {excerpt}"),
            };
        }
        if !(200..300).contains(&status) {
            return Attempt::Fatal(GatewayError::ProviderRejected {
                status,
                body: excerpt,
            });
        }
        let v: Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => return Attempt::Fatal(GatewayError::BadResponse(e.to_string())),
        };
        let Some(content) = v["choices"][0]["message"]["content"].as_str() else {
            return Attempt::Fatal(GatewayError::BadResponse(format!(
                "no choices[0].message.content in {excerpt}"
            )));
        };
        let count = |k: &str| v["usage"][k].as_u64().unwrap_or(0) as u32;
        Attempt::Done(Completion {
            text: content.to_string(),
            provider_id: format!("http:{}", self.cfg.model),
            latency_ms: started.elapsed().as_millis() as u64,
            token_counts: TokenCounts {
                prompt: count("prompt_tokens"),
                completion: count("completion_tokens"),
            },
        })
    }
}

impl ModelGateway for HttpGateway {
    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &DecodeParams,
    ) -> Result<Completion, GatewayError> {
        let body = self.request_body(prompt, params);
        let _permit = self.gate.acquire();
        let attempts = self.cfg.retries + 1;
        let mut last = (false, String::new());
        for n in 0..attempts {
            if n > 0 {
                let factor = 1u32 << (n - 1).min(10);
                std::thread::sleep((self.cfg.backoff_base * factor).min(Duration::from_secs(30)));
            }
            match self.attempt(&body) {
                Attempt::Done(c) => return Ok(c),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Transient { timeout, detail } => last = (timeout, detail),
            }
        }
        Err(if last.0 {
            GatewayError::Timeout { attempts }
        } else {
            GatewayError::ProviderUnreachable {
                attempts,
                detail: last.1,
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    fn config(endpoint: String) -> HttpConfig {
        HttpConfig {
            endpoint,
            model: "stub-model".into(),
            api_key_env: "SOCRATIC_TEST_KEY_UNSET".into(),
            timeout: Duration::from_secs(5),
            retries: 2,
            backoff_base: Duration::from_millis(5),
            max_in_flight: 2,
        }
    }

    /// Serves `replies` (status, body) in order, one per connection, and
    /// returns the request bodies it saw.
    fn stub(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", l.local_addr().unwrap());
        let h = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in replies {
                let (mut s, _) = l.accept().unwrap();
                let mut r = BufReader::new(s.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    r.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                r.read_exact(&mut buf).unwrap();
                seen.push(String::from_utf8(buf).unwrap());
                write!(
                    s,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            seen
        });
        (url, h)
    }

    fn ok_body(text: &str) -> String {
        json!({"choices":[{"message":{"role":"assistant","content":text}}],
               "usage":{"prompt_tokens":7,"completion_tokens":2}})
        .to_string()
    }

    fn prompt() -> RenderedPrompt {
        RenderedPrompt {
            system: "sys".into(),
            user: "usr".into(),
        }
    }

    #[test]
    fn request_carries_temperature_and_bias() {
        let (url, h) = stub(vec![(200, ok_body("(Open, fridge)"))]);
        let g = HttpGateway::new(config(url)).unwrap();
        let mut params = DecodeParams::default();
        params.token_bias.insert("fridge".into(), 0.1);
        let c = g.complete(&prompt(), &params).unwrap();
        assert_eq!(c.text, "(Open, fridge)");
        assert_eq!(
            c.token_counts,
            TokenCounts {
                prompt: 7,
                completion: 2
            }
        );
        let seen = h.join().unwrap();
        let body: Value = serde_json::from_str(&seen[0]).unwrap();
        assert_eq!(body["temperature"], json!(0.0));
        assert_eq!(body["logit_bias"], json!({"fridge": 0.1}));
        assert_eq!(body["model"], "stub-model");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "usr");
        assert_eq!(body["max_tokens"], 512);
    }

    #[test]
    fn retries_transient_statuses() {
        let (url, h) = stub(vec![
            (503, "{}".into()),
            (429, "{}".into()),
            (200, ok_body("done")),
        ]);
        let g = HttpGateway::new(config(url)).unwrap();
        assert_eq!(
            g.complete(&prompt(), &DecodeParams::default())
                .unwrap()
                .text,
            "done"
        );
        assert_eq!(h.join().unwrap().len(), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, h) = stub(vec![(401, r#"{"error":"bad key"}"#.into())]);
        let g = HttpGateway::new(config(url)).unwrap();
        match g.complete(&prompt(), &DecodeParams::default()) {
            Err(GatewayError::ProviderRejected { status, body }) => {
                assert_eq!(status, 401);
                assert!(body.contains("bad key"));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(h.join().unwrap().len(), 1);
    }

    #[test]
    fn closed_port_exhausts_retries() {
        let port = TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let g = HttpGateway::new(config(format!("http://127.0.0.1:{port}/v1"))).unwrap();
        match g.complete(&prompt(), &DecodeParams::default()) {
            Err(GatewayError::ProviderUnreachable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn debug_never_shows_key() {
        std::env::set_var("SOCRATIC_TEST_KEY_SET", "sk-secret-value");
        let mut c = config("http://127.0.0.1:9/".into());
        c.api_key_env = "SOCRATIC_TEST_KEY_SET".into();
        let g = HttpGateway::new(c).unwrap();
        let dbg = format!("{g:?}");
        assert!(!dbg.contains("sk-secret"));
        assert!(dbg.contains("api_key_set: true"));
    }

    #[test]
    fn in_flight_limit_is_respected() {
        let gate = Arc::new(InFlight {
            count: Mutex::new(0),
            freed: Condvar::new(),
            limit: 2,
        });
        let peak = Arc::new(AtomicU32::new(0));
        let live = Arc::new(AtomicU32::new(0));
        let hs: Vec<_> = (0..6)
            .map(|_| {
                let (gate, peak, live) = (gate.clone(), peak.clone(), live.clone());
                std::thread::spawn(move || {
                    let _p = gate.acquire();
                    let n = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(n, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(10));
                    live.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in hs {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
