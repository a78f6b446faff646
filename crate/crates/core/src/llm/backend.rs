use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{LlmError, LlmResponse, Prompt, Stage};
use crate::embedding::InFlight;

pub trait LlmBackend: Send + Sync {
    fn id(&self) -> String;
    fn complete_text(&self, prompt: &Prompt) -> Result<String, LlmError>;
}

/// Sends `prompt` and tags the reply with its digest and backend id.
pub fn complete(prompt: &Prompt, backend: &dyn LlmBackend) -> Result<LlmResponse, LlmError> {
    let text = backend.complete_text(prompt)?;
    Ok(LlmResponse {
        text,
        backend_id: backend.id(),
        request_digest: prompt.request_digest(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Replay,
    Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub backend: BackendKind,
    /// Chat-completion endpoint.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    /// Minimum spacing between request starts.
    pub min_interval_ms: u64,
    /// Replay fixture files (JSON lines), read in order.
    pub fixtures: Vec<PathBuf>,
    /// Record-mode output file.
    pub record_to: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Replay,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            temperature: 0.0,
            max_tokens: 2048,
            api_key_env: "RULESMITH_LLM_API_KEY".into(),
            timeout_secs: 120,
            max_in_flight: 4,
            max_retries: 3,
            backoff_ms: 500,
            min_interval_ms: 0,
            fixtures: Vec::new(),
            record_to: None,
            templates_dir: None,
        }
    }
}

pub fn build_backend(cfg: &LlmConfig) -> Result<Box<dyn LlmBackend>, LlmError> {
    match cfg.backend {
        BackendKind::Remote => Ok(Box::new(RemoteChat::new(cfg)?)),
        BackendKind::Replay => Ok(Box::new(ReplayBackend::from_files(&cfg.fixtures)?)),
        BackendKind::Record => {
            let path = cfg.record_to.clone().ok_or_else(|| {
                LlmError::BackendUnavailable("record mode needs a record_to path".into())
            })?;
            Ok(Box::new(RecordBackend::new(
                Box::new(RemoteChat::new(cfg)?),
                path,
            )?))
        }
    }
}

/// OpenAI-style chat-completion client.
pub struct RemoteChat {
    endpoint: String,
    model: String,
    temperature: f64,
    max_tokens: u32,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Duration,
    min_interval: Duration,
    last_start: Mutex<Option<Instant>>,
    in_flight: InFlight,
    client: reqwest::blocking::Client,
}

impl RemoteChat {
    pub fn new(cfg: &LlmConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
        Ok(Self {
            endpoint: cfg.endpoint.clone(),
            model: cfg.model.clone(),
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
            api_key: std::env::var(&cfg.api_key_env).ok(),
            max_retries: cfg.max_retries,
            backoff: Duration::from_millis(cfg.backoff_ms),
            min_interval: Duration::from_millis(cfg.min_interval_ms),
            last_start: Mutex::new(None),
            in_flight: InFlight::new(cfg.max_in_flight),
            client,
        })
    }

    fn pace(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let mut last = self.last_start.lock().unwrap();
        if let Some(t) = *last {
            let since = t.elapsed();
            if since < self.min_interval {
                std::thread::sleep(self.min_interval - since);
            }
        }
        *last = Some(Instant::now());
    }

    fn post_once(&self, prompt: &Prompt) -> Result<String, (bool, String)> {
        #[derive(Deserialize)]
        struct Message {
            content: String,
        }
        #[derive(Deserialize)]
        struct Choice {
            message: Message,
        }
        #[derive(Deserialize)]
        struct Reply {
            choices: Vec<Choice>,
        }
        let body = serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": prompt.user_text},
            ],
        });
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let retry = status.is_server_error() || status.as_u16() == 429;
            return Err((retry, format!("status {status}")));
        }
        let reply: Reply = resp.json().map_err(|e| (false, e.to_string()))?;
        reply
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or((false, "reply has no choices".into()))
    }
}

impl LlmBackend for RemoteChat {
    fn id(&self) -> String {
        format!("remote/{}", self.model)
    }

    fn complete_text(&self, prompt: &Prompt) -> Result<String, LlmError> {
        self.in_flight.run(|| {
            let mut last = String::new();
            for attempt in 0..=self.max_retries {
                if attempt > 0 {
                    std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
                }
                self.pace();
                match self.post_once(prompt) {
                    Ok(text) => return Ok(text),
                    Err((retry, e)) => {
                        last = e;
                        if !retry {
                            break;
                        }
                    }
                }
            }
            Err(LlmError::BackendUnavailable(last))
        })
    }
}

/// One line of a replay fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub request_digest: String,
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
}

fn read_entries(path: &Path) -> Result<Vec<ReplayEntry>, LlmError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| LlmError::BadFixture {
            path: path.display().to_string(),
            reason: format!("line {}: {e}", n + 1),
        })?;
        out.push(entry);
    }
    Ok(out)
}

/// Serves recorded responses keyed by request digest. Never touches the network.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    responses: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = ReplayEntry>) -> Result<Self, LlmError> {
        let mut responses = HashMap::new();
        for e in entries {
            if let Some(prev) = responses.insert(e.request_digest.clone(), e.response_text.clone())
            {
                if prev != e.response_text {
                    return Err(LlmError::BadFixture {
                        path: String::new(),
                        reason: format!("conflicting responses for {}", e.request_digest),
                    });
                }
            }
        }
        Ok(Self { responses })
    }

    pub fn from_files(paths: &[PathBuf]) -> Result<Self, LlmError> {
        let mut all = Vec::new();
        for p in paths {
            all.extend(read_entries(p)?);
        }
        Self::from_entries(all)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl LlmBackend for ReplayBackend {
    fn id(&self) -> String {
        "replay".into()
    }

    fn complete_text(&self, prompt: &Prompt) -> Result<String, LlmError> {
        let digest = prompt.request_digest();
        self.responses
            .get(&digest)
            .cloned()
            .ok_or(LlmError::ReplayMiss(digest))
    }
}

/// Forwards to an upstream backend and appends every new exchange to a
/// fixture file that [`ReplayBackend`] can load.
pub struct RecordBackend {
    upstream: Box<dyn LlmBackend>,
    path: PathBuf,
    seen: Mutex<HashMap<String, String>>,
}

impl RecordBackend {
    pub fn new(upstream: Box<dyn LlmBackend>, path: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let path = path.into();
        let seen = if path.exists() {
            read_entries(&path)?
                .into_iter()
                .map(|e| (e.request_digest, e.response_text))
                .collect()
        } else {
            HashMap::new()
        };
        Ok(Self {
            upstream,
            path,
            seen: Mutex::new(seen),
        })
    }
}

impl LlmBackend for RecordBackend {
    fn id(&self) -> String {
        format!("record/{}", self.upstream.id())
    }

    fn complete_text(&self, prompt: &Prompt) -> Result<String, LlmError> {
        let digest = prompt.request_digest();
        if let Some(text) = self.seen.lock().unwrap().get(&digest) {
            return Ok(text.clone());
        }
        let text = self.upstream.complete_text(prompt)?;
        let mut seen = self.seen.lock().unwrap();
        if seen.insert(digest.clone(), text.clone()).is_none() {
            let entry = ReplayEntry {
                request_digest: digest,
                response_text: text.clone(),
                stage: Some(prompt.stage),
            };
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)?;
            let line = serde_json::to_string(&entry).expect("entry serializes");
            writeln!(file, "{line}")?;
        }
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rule::RuleFormat;
    use crate::testutil::serve_json;

    fn prompt(user: &str) -> Prompt {
        Prompt {
            system_text: "sys".into(),
            user_text: user.into(),
            stage: Stage::Craft,
            rule_format: RuleFormat::Yara,
            few_shot: String::new(),
        }
    }

    struct Echo;
    impl LlmBackend for Echo {
        fn id(&self) -> String {
            "echo".into()
        }
        fn complete_text(&self, p: &Prompt) -> Result<String, LlmError> {
            Ok(format!("echo: {}", p.user_text))
        }
    }

    #[test]
    fn replay_hit_and_miss() {
        let p = prompt("hello");
        let backend = ReplayBackend::from_entries([ReplayEntry {
            request_digest: p.request_digest(),
            response_text: "recorded".into(),
            stage: None,
        }])
        .unwrap();
        let r = complete(&p, &backend).unwrap();
        assert_eq!(r.text, "recorded");
        assert_eq!(r.request_digest, p.request_digest());
        let miss = prompt("other");
        match complete(&miss, &backend) {
            Err(LlmError::ReplayMiss(d)) => assert_eq!(d, miss.request_digest()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.jsonl");
        let rec = RecordBackend::new(Box::new(Echo), &path).unwrap();
        let a = complete(&prompt("a"), &rec).unwrap();
        let _ = complete(&prompt("a"), &rec).unwrap();
        let b = complete(&prompt("b"), &rec).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let replay = ReplayBackend::from_files(&[path]).unwrap();
        assert_eq!(complete(&prompt("a"), &replay).unwrap().text, a.text);
        assert_eq!(complete(&prompt("b"), &replay).unwrap().text, b.text);
    }

    #[test]
    fn conflicting_fixture_rejected() {
        let e = |t: &str| ReplayEntry {
            request_digest: "d".into(),
            response_text: t.into(),
            stage: None,
        };
        assert!(ReplayBackend::from_entries([e("x"), e("x")]).is_ok());
        assert!(ReplayBackend::from_entries([e("x"), e("y")]).is_err());
    }

    #[test]
    fn remote_chat_round_trip_with_retry() {
        let reply = r#"{"choices":[{"message":{"role":"assistant","content":"rule x"}}]}"#;
        let (url, seen) = serve_json(vec![(503, "{}".into()), (200, reply.into())]);
        let cfg = LlmConfig {
            backend: BackendKind::Remote,
            endpoint: url,
            backoff_ms: 1,
            ..LlmConfig::default()
        };
        let backend = build_backend(&cfg).unwrap();
        let r = complete(&prompt("q"), backend.as_ref()).unwrap();
        assert_eq!(r.text, "rule x");
        assert_eq!(r.backend_id, "remote/gpt-4o");
        let reqs = seen.lock().unwrap();
        assert_eq!(reqs.len(), 2);
        assert!(reqs[1].contains("\"temperature\":0.0"));
        assert!(reqs[1].contains("\"role\":\"system\""));
    }

    #[test]
    fn remote_client_error_not_retried() {
        let (url, seen) = serve_json(vec![(400, "{}".into()), (200, "{}".into())]);
        let cfg = LlmConfig {
            backend: BackendKind::Remote,
            endpoint: url,
            backoff_ms: 1,
            ..LlmConfig::default()
        };
        let backend = build_backend(&cfg).unwrap();
        assert!(matches!(
            complete(&prompt("q"), backend.as_ref()),
            Err(LlmError::BackendUnavailable(_))
        ));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }
}
