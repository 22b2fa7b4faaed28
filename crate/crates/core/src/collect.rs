//! Live collection of both confidence channels from a chat-completions
//! endpoint.
//!
//! Single-pass mode sends one request per question and reads the token
//! channel from the log-probabilities at the first answer-label position;
//! the text after that position feeds the verbal parser. Two-pass mode
//! issues a short logprob request for the label and a separate request for
//! the confidence object.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parsing::{parse_verbal_response, LabelAlphabet, PromptTemplate, VerbalSource};
use crate::records::{deserialize_line, ConfidenceRecord, RecordLine};

pub const FLAG_VERBAL_IMPUTED: &str = "verbal_all_imputed";
pub const FLAG_VERBAL_REGEX: &str = "verbal_regex_fallback";

/// Output tokens requested for the label pass in two-pass mode.
const LABEL_PASS_MAX_TOKENS: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectionConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_parallel: usize,
    pub timeout_secs: f64,
    /// Additional attempts after the first failed one.
    pub retries: u32,
    /// Initial backoff; doubled per retry.
    pub retry_backoff_ms: u64,
    pub alphabet: LabelAlphabet,
    pub top_logprobs: usize,
    pub max_tokens: u32,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub two_pass: bool,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        CollectionConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: String::new(),
            temperature: 0.0,
            max_parallel: 4,
            timeout_secs: 60.0,
            retries: 2,
            retry_backoff_ms: 500,
            alphabet: LabelAlphabet::Numeric,
            top_logprobs: 20,
            max_tokens: 256,
            api_key_env: "OPENAI_API_KEY".into(),
            two_pass: false,
        }
    }
}

impl CollectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.endpoint.trim().is_empty() {
            return Err(Error::Config("endpoint must be set".into()));
        }
        if self.model.trim().is_empty() {
            return Err(Error::Config("model must be set".into()));
        }
        if self.max_parallel < 1 {
            return Err(Error::Config("max_parallel must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be a finite value >= 0".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config("timeout_secs must be positive".into()));
        }
        if self.top_logprobs < 1 {
            return Err(Error::Config("top_logprobs must be at least 1".into()));
        }
        if self.max_tokens < 1 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the questions JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub question: String,
    pub options: Vec<String>,
    pub gold_index: usize,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

pub fn read_questions(reader: impl BufRead) -> Result<Vec<Question>> {
    let mut questions = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(format!("<line {line_no}>"), e))?;
        let text = line.strip_suffix('\r').unwrap_or(&line);
        if text.trim().is_empty() {
            continue;
        }
        let q: Question = deserialize_line(text, line_no)?;
        let schema = |field: &str, message: String| Error::Schema {
            line: line_no,
            field: field.into(),
            message,
        };
        if q.options.len() < 2 {
            return Err(schema(
                "options",
                format!("need at least 2 options, got {}", q.options.len()),
            ));
        }
        if q.gold_index >= q.options.len() {
            return Err(schema("gold_index", format!("{} out of range", q.gold_index)));
        }
        if !seen.insert(q.id.clone()) {
            return Err(schema("id", format!("duplicate id `{}`", q.id)));
        }
        questions.push(q);
    }
    Ok(questions)
}

pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<Question>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_questions(BufReader::new(file))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChoiceLogprobs {
    #[serde(default)]
    pub content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseMessage {
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    #[serde(default)]
    pub message: ResponseMessage,
    #[serde(default)]
    pub logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<Choice>,
}

impl ChatResponse {
    pub fn text(&self) -> &str {
        self.choices
            .first()
            .and_then(|c| c.message.content.as_deref())
            .unwrap_or("")
    }

    pub fn tokens(&self) -> &[TokenLogprob] {
        self.choices
            .first()
            .and_then(|c| c.logprobs.as_ref())
            .and_then(|l| l.content.as_deref())
            .unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{message}")]
pub struct TransportError {
    pub message: String,
    /// Whether another attempt may succeed (timeouts, 429, 5xx).
    pub retryable: bool,
}

impl TransportError {
    pub fn retryable(message: impl Into<String>) -> Self {
        TransportError {
            message: message.into(),
            retryable: true,
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        TransportError {
            message: message.into(),
            retryable: false,
        }
    }
}

/// Sends one chat request. Implementations must be safe to call from
/// several threads at once.
pub trait ChatTransport: Sync {
    fn complete(
        &self,
        request: &ChatRequest,
        idempotency_key: &str,
    ) -> std::result::Result<ChatResponse, TransportError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpTransport {
    /// Reads the bearer token from `config.api_key_env` if it is set.
    pub fn new(config: &CollectionConfig) -> Result<Self> {
        config.validate()?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build();
        Ok(HttpTransport {
            agent,
            endpoint: config.endpoint.clone(),
            api_key: std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty()),
        })
    }
}

impl ChatTransport for HttpTransport {
    fn complete(
        &self,
        request: &ChatRequest,
        idempotency_key: &str,
    ) -> std::result::Result<ChatResponse, TransportError> {
        let mut req = self
            .agent
            .post(&self.endpoint)
            .set("Content-Type", "application/json")
            .set("Idempotency-Key", idempotency_key);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::to_string(request).map_err(|e| TransportError::fatal(e.to_string()))?;
        match req.send_string(&body) {
            Ok(resp) => {
                let text = resp
                    .into_string()
                    .map_err(|e| TransportError::retryable(format!("reading response body: {e}")))?;
                serde_json::from_str(&text).map_err(|e| TransportError::fatal(format!("malformed response: {e}")))
            }
            Err(ureq::Error::Status(code, resp)) => {
                let detail = resp.into_string().unwrap_or_default();
                let message = format!("HTTP {code}: {}", detail.trim());
                if code == 429 || code >= 500 {
                    Err(TransportError::retryable(message))
                } else {
                    Err(TransportError::fatal(message))
                }
            }
            Err(ureq::Error::Transport(t)) => Err(TransportError::retryable(t.to_string())),
        }
    }
}

/// A question that produced no record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionFailure {
    pub id: String,
    pub reason: String,
    pub attempts: u32,
}

#[derive(Debug)]
pub struct CollectionOutcome {
    /// In question order.
    pub records: Vec<ConfidenceRecord>,
    pub failures: Vec<CollectionFailure>,
}

fn label_of(token: &str, k: usize, alphabet: &LabelAlphabet) -> Option<usize> {
    let trimmed = token.trim().trim_matches(|c: char| "()[]{}.:*\"'`".contains(c));
    alphabet.index_of(trimmed, k)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-label log-probabilities at the first answer-label position, and the
/// index of that position. Token variants of the same label (e.g. `"2"`
/// and `" 2"`) are merged by log-sum-exp; labels absent from the top list
/// are `None`.
pub fn extract_label_logprobs(
    tokens: &[TokenLogprob],
    k: usize,
    alphabet: &LabelAlphabet,
) -> Option<(usize, Vec<Option<f64>>)> {
    let position = tokens.iter().position(|t| label_of(&t.token, k, alphabet).is_some())?;
    let at = &tokens[position];
    let mut candidates: BTreeMap<&str, f64> = at.top_logprobs.iter().map(|t| (t.token.as_str(), t.logprob)).collect();
    candidates.entry(at.token.as_str()).or_insert(at.logprob);
    let mut per_label: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (token, logprob) in candidates {
        if let Some(j) = label_of(token, k, alphabet) {
            if logprob.is_finite() {
                per_label[j].push(logprob);
            }
        }
    }
    let logprobs = per_label
        .iter()
        .map(|v| if v.is_empty() { None } else { Some(log_sum_exp(v)) })
        .collect();
    Some((position, logprobs))
}

struct Collector<'a> {
    config: &'a CollectionConfig,
    template: &'a PromptTemplate,
    transport: &'a dyn ChatTransport,
}

impl Collector<'_> {
    fn request(&self, prompt: &str, max_tokens: u32, logprobs: bool) -> ChatRequest {
        ChatRequest {
            model: self.config.model.clone(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.to_string(),
            }],
            temperature: self.config.temperature,
            max_tokens,
            logprobs,
            top_logprobs: logprobs.then_some(self.config.top_logprobs),
        }
    }

    fn send(&self, request: &ChatRequest, key: &str, attempts: &mut u32) -> std::result::Result<ChatResponse, String> {
        let mut backoff = self.config.retry_backoff_ms;
        loop {
            *attempts += 1;
            match self.transport.complete(request, key) {
                Ok(resp) => return Ok(resp),
                Err(e) if e.retryable && *attempts <= self.config.retries => {
                    log::warn!("{key}: attempt {attempts} failed: {e}; retrying");
                    if backoff > 0 {
                        std::thread::sleep(Duration::from_millis(backoff));
                        backoff = backoff.saturating_mul(2);
                    }
                }
                Err(e) => return Err(format!("transport: {e}")),
            }
        }
    }

    fn collect_one(&self, q: &Question) -> std::result::Result<ConfidenceRecord, CollectionFailure> {
        let mut attempts = 0;
        let k = q.options.len();
        let fail = |reason: String, attempts: u32| CollectionFailure {
            id: q.id.clone(),
            reason,
            attempts,
        };
        let prompt = self
            .template
            .render(&q.question, &q.options)
            .map_err(|e| fail(e.to_string(), 0))?;

        let label_request = if self.config.two_pass {
            self.request(&prompt, LABEL_PASS_MAX_TOKENS, true)
        } else {
            self.request(&prompt, self.config.max_tokens, true)
        };
        let first = self
            .send(&label_request, &q.id, &mut attempts)
            .map_err(|r| fail(r, attempts))?;
        let tokens = first.tokens();
        let (position, logprobs) = extract_label_logprobs(tokens, k, &self.config.alphabet).ok_or_else(|| {
            fail(
                "no answer-label token with log-probabilities in response".into(),
                attempts,
            )
        })?;

        let verbal_text = if self.config.two_pass {
            let verbal_request = self.request(&prompt, self.config.max_tokens, false);
            let key = format!("{}#verbal", q.id);
            match self.send(&verbal_request, &key, &mut attempts) {
                Ok(resp) => resp.text().to_string(),
                Err(reason) => {
                    log::warn!("{}: verbal pass failed ({reason}); using neutral confidences", q.id);
                    String::new()
                }
            }
        } else {
            tokens[position + 1..].iter().map(|t| t.token.as_str()).collect()
        };

        let parsed =
            parse_verbal_response(&verbal_text, k, &self.config.alphabet).map_err(|e| fail(e.to_string(), attempts))?;
        let mut flags = Vec::new();
        match parsed.source {
            VerbalSource::AllImputed => flags.push(FLAG_VERBAL_IMPUTED.to_string()),
            VerbalSource::RegexFallback => flags.push(FLAG_VERBAL_REGEX.to_string()),
            VerbalSource::Json => {}
        }
        let mut meta = q.meta.clone();
        meta.insert("source".into(), "collect".into());
        meta.insert("model".into(), self.config.model.clone());
        meta.insert(
            "collection_mode".into(),
            if self.config.two_pass {
                "two_pass"
            } else {
                "single_pass"
            }
            .into(),
        );
        let line = RecordLine {
            id: q.id.clone(),
            k,
            option_logprobs: Some(logprobs),
            token_probs: None,
            verbal: None,
            verbal_raw: Some(verbal_text),
            verbal_missing_mask: None,
            gold_index: q.gold_index,
            meta,
            flags,
        };
        ConfidenceRecord::from_line(line, &self.config.alphabet).map_err(|e| fail(e.to_string(), attempts))
    }
}

/// Collects one record per question. Transport and response errors are
/// reported per question and never abort the batch; output order follows
/// the input regardless of completion order.
pub fn collect(
    questions: &[Question],
    config: &CollectionConfig,
    template: &PromptTemplate,
    transport: &dyn ChatTransport,
) -> Result<CollectionOutcome> {
    config.validate()?;
    let collector = Collector {
        config,
        template,
        transport,
    };
    let next = AtomicUsize::new(0);
    let sink: Mutex<BTreeMap<usize, std::result::Result<ConfidenceRecord, CollectionFailure>>> =
        Mutex::new(BTreeMap::new());
    let workers = config.max_parallel.min(questions.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(q) = questions.get(i) else { break };
                let outcome = collector.collect_one(q);
                if let Err(f) = &outcome {
                    log::warn!("{}: {}", f.id, f.reason);
                }
                sink.lock().unwrap_or_else(|p| p.into_inner()).insert(i, outcome);
            });
        }
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (_, outcome) in sink.into_inner().unwrap_or_else(|p| p.into_inner()) {
        match outcome {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    Ok(CollectionOutcome { records, failures })
}
