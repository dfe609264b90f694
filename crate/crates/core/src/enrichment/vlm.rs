//! Vision-language endpoint client and per-item description generation.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::cache::{CacheKey, Description, EnrichmentCache};
use super::prompt::{build_prompt, PromptSpec};
use crate::error::{Error, Result};
use crate::fingerprint::hash_bytes;

/// Environment variable holding the endpoint credential, if any.
pub const API_KEY_ENV: &str = "INFOFUSE_VLM_API_KEY";

/// Failure of a single endpoint call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallError {
    /// Network failure, timeout, or server-side (5xx / 429) error. Retried.
    Transport(String),
    /// The endpoint answered but the request or response was unusable. Not retried.
    Rejected(String),
}

/// A chat-completion capable vision-language model.
pub trait VisionLanguageModel: Send + Sync {
    fn model_name(&self) -> &str;

    /// One generation for a text prompt plus an image attachment.
    fn generate(&self, prompt: &str, image: &[u8], mime: &str) -> std::result::Result<String, CallError>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_max_tokens() -> u32 {
    512
}

/// OpenAI-style `/v1/chat/completions` client.
pub struct ChatCompletionClient {
    agent: ureq::Agent,
    config: EndpointConfig,
    api_key: Option<String>,
}

impl ChatCompletionClient {
    pub fn new(config: EndpointConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self {
            agent,
            config,
            api_key,
        }
    }

    /// Request body for one generation.
    pub fn request_body(&self, prompt: &str, image: &[u8], mime: &str) -> serde_json::Value {
        let data = base64::engine::general_purpose::STANDARD.encode(image);
        json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": format!("data:{mime};base64,{data}")}}
                ]
            }]
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

impl VisionLanguageModel for ChatCompletionClient {
    fn model_name(&self) -> &str {
        &self.config.model
    }

    fn generate(&self, prompt: &str, image: &[u8], mime: &str) -> std::result::Result<String, CallError> {
        let mut request = self.agent.post(&self.config.url);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(self.request_body(prompt, image, mime))
            .map_err(|e| CallError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(CallError::Transport(format!("HTTP {status}")));
        }
        if status >= 400 {
            let body = response.body_mut().read_to_string().unwrap_or_default();
            return Err(CallError::Rejected(format!("HTTP {status}: {body}")));
        }
        let parsed: ChatResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| CallError::Rejected(format!("unparseable response: {e}")))?;
        Ok(parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default())
    }
}

/// Bounded retry with exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

/// Guess an image MIME type from its leading bytes.
pub fn sniff_mime(bytes: &[u8]) -> Option<&'static str> {
    match bytes {
        [0x89, b'P', b'N', b'G', ..] => Some("image/png"),
        [0xFF, 0xD8, 0xFF, ..] => Some("image/jpeg"),
        [b'G', b'I', b'F', b'8', ..] => Some("image/gif"),
        [b'R', b'I', b'F', b'F', _, _, _, _, b'W', b'E', b'B', b'P', ..] => Some("image/webp"),
        [b'B', b'M', ..] => Some("image/bmp"),
        _ => None,
    }
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Item-level inputs to [`describe_item`].
#[derive(Debug, Clone, Copy)]
pub struct ItemInput<'a> {
    pub index: usize,
    pub key: &'a str,
    pub title: &'a str,
}

/// Produce the description for one item.
///
/// A cache hit returns without touching the endpoint. An absent (or
/// undecodable) image yields a degraded description equal to the title.
pub fn describe_item(
    endpoint: &dyn VisionLanguageModel,
    image: Option<&[u8]>,
    item: ItemInput<'_>,
    spec: &PromptSpec,
    use_title: bool,
    cache: &EnrichmentCache,
    retry: RetryPolicy,
) -> Result<Description> {
    let prompt = build_prompt(spec, if use_title { item.title } else { "" })?;
    let prompt_hash = hash_bytes(prompt.as_bytes());
    let make = |text: String, degraded: bool| Description {
        item_index: item.index,
        item_key: item.key.to_string(),
        text,
        model_name: endpoint.model_name().to_string(),
        template_id: spec.template_id.clone(),
        prompt_version: spec.version,
        prompt_hash: prompt_hash.clone(),
        created_at: now_secs(),
        degraded,
    };

    let Some((image, mime)) = image.and_then(|bytes| sniff_mime(bytes).map(|m| (bytes, m))) else {
        return Ok(make(item.title.trim().to_string(), true));
    };

    let key = CacheKey {
        item_key: item.key.to_string(),
        image_hash: hash_bytes(image),
        template_id: spec.template_id.clone(),
        prompt_version: spec.version,
        prompt_hash: prompt_hash.clone(),
        model_name: endpoint.model_name().to_string(),
    };
    if let Some(hit) = cache.get(&key)? {
        return Ok(hit);
    }

    let mut backoff = retry.initial_backoff;
    let mut last_error = String::new();
    for attempt in 1..=retry.attempts.max(1) {
        match endpoint.generate(&prompt, image, mime) {
            Ok(text) if text.trim().is_empty() => {
                return Err(Error::Generation {
                    item: item.key.to_string(),
                    message: "model returned an empty response".into(),
                });
            }
            Ok(text) => {
                let description = make(text, false);
                cache.put(&key, &description)?;
                return Ok(description);
            }
            Err(CallError::Rejected(message)) => {
                return Err(Error::Generation {
                    item: item.key.to_string(),
                    message,
                });
            }
            Err(CallError::Transport(message)) => {
                log::warn!("item {}: attempt {attempt} failed: {message}", item.key);
                last_error = message;
                if attempt < retry.attempts {
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
    }
    Err(Error::Transport {
        item: item.key.to_string(),
        message: last_error,
    })
}

/// Resolves image references (local paths or http(s) URLs) to bytes.
pub struct ImageLoader {
    base_dir: PathBuf,
    agent: ureq::Agent,
}

impl ImageLoader {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self {
            base_dir: base_dir.into(),
            agent,
        }
    }

    /// `None` when the reference cannot be read; the item then runs degraded.
    pub fn load(&self, reference: &str) -> Option<Vec<u8>> {
        let result = if reference.starts_with("http://") || reference.starts_with("https://") {
            self.agent
                .get(reference)
                .call()
                .and_then(|mut r| r.body_mut().read_to_vec())
                .map_err(|e| e.to_string())
        } else {
            let path = Path::new(reference);
            let path = if path.is_absolute() { path.to_path_buf() } else { self.base_dir.join(path) };
            std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))
        };
        match result {
            Ok(bytes) => Some(bytes),
            Err(err) => {
                log::warn!("image {reference} unavailable: {err}");
                None
            }
        }
    }
}

/// One item queued for enrichment.
#[derive(Debug, Clone)]
pub struct EnrichJob {
    pub index: usize,
    pub key: String,
    pub title: String,
    pub image: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct EnrichFailure {
    pub item_index: usize,
    pub item_key: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct EnrichOptions {
    pub concurrency: usize,
    pub retry: RetryPolicy,
    pub use_title: bool,
}

impl Default for EnrichOptions {
    fn default() -> Self {
        Self {
            concurrency: 4,
            retry: RetryPolicy::default(),
            use_title: true,
        }
    }
}

/// Outcome of a batch enrichment run. `descriptions` has one entry per job;
/// failed items fall back to degraded title descriptions and are listed in
/// `failures`.
#[derive(Debug, Clone)]
pub struct EnrichReport {
    pub descriptions: Vec<Description>,
    pub failures: Vec<EnrichFailure>,
    pub degraded: usize,
}

/// Describe every job with at most `options.concurrency` requests in flight.
pub fn enrich_items(
    jobs: &[EnrichJob],
    endpoint: &dyn VisionLanguageModel,
    loader: &ImageLoader,
    spec: &PromptSpec,
    cache: &EnrichmentCache,
    options: &EnrichOptions,
) -> Result<EnrichReport> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.concurrency.max(1))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    let done = AtomicUsize::new(0);
    let outcomes: Vec<Result<Description>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let image = job.image.as_deref().and_then(|r| loader.load(r));
                let out = describe_item(
                    endpoint,
                    image.as_deref(),
                    ItemInput {
                        index: job.index,
                        key: &job.key,
                        title: &job.title,
                    },
                    spec,
                    options.use_title,
                    cache,
                    options.retry,
                );
                let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                if n % 500 == 0 {
                    log::info!("enrichment: {n}/{} items", jobs.len());
                }
                out
            })
            .collect()
    });

    let mut descriptions = Vec::with_capacity(jobs.len());
    let mut failures = Vec::new();
    for (job, outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(desc) => descriptions.push(desc),
            Err(err @ (Error::Transport { .. } | Error::Generation { .. })) => {
                let kind = if matches!(err, Error::Transport { .. }) { "transport" } else { "generation" };
                failures.push(EnrichFailure {
                    item_index: job.index,
                    item_key: job.key.clone(),
                    kind: kind.into(),
                    message: err.to_string(),
                });
                let prompt = build_prompt(spec, if options.use_title { &job.title } else { "" })?;
                descriptions.push(Description {
                    item_index: job.index,
                    item_key: job.key.clone(),
                    text: job.title.trim().to_string(),
                    model_name: endpoint.model_name().to_string(),
                    template_id: spec.template_id.clone(),
                    prompt_version: spec.version,
                    prompt_hash: hash_bytes(prompt.as_bytes()),
                    created_at: now_secs(),
                    degraded: true,
                });
            }
            Err(other) => return Err(other),
        }
    }
    let degraded = descriptions.iter().filter(|d| d.degraded).count();
    Ok(EnrichReport {
        descriptions,
        failures,
        degraded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    const PNG: &[u8] = &[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A, 1, 2, 3];

    struct Stub {
        calls: AtomicUsize,
        reply: std::result::Result<String, CallError>,
        fail_first: usize,
    }

    impl Stub {
        fn new(reply: std::result::Result<String, CallError>) -> Self {
            Self {
                calls: AtomicUsize::new(0),
                reply,
                fail_first: 0,
            }
        }
    }

    impl VisionLanguageModel for Stub {
        fn model_name(&self) -> &str {
            "stub"
        }
        fn generate(&self, _: &str, _: &[u8], _: &str) -> std::result::Result<String, CallError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err(CallError::Transport("down".into()));
            }
            self.reply.clone()
        }
    }

    fn item(title: &str) -> ItemInput<'_> {
        ItemInput {
            index: 0,
            key: "B01",
            title,
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(1),
        }
    }

    #[test]
    fn stub_text_passes_through_and_cache_hit_skips_network() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EnrichmentCache::open(dir.path()).unwrap();
        let stub = Stub::new(Ok("A grey carrier.".into()));
        let spec = PromptSpec::default();
        let first = describe_item(&stub, Some(PNG), item("carrier"), &spec, true, &cache, fast_retry()).unwrap();
        assert_eq!(first.text, "A grey carrier.");
        assert!(!first.degraded);
        assert_eq!(stub.calls.load(Ordering::SeqCst), 1);
        let second = describe_item(&stub, Some(PNG), item("carrier"), &spec, true, &cache, fast_retry()).unwrap();
        assert_eq!(second, first);
        assert_eq!(stub.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn absent_image_degrades_to_title() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EnrichmentCache::open(dir.path()).unwrap();
        let stub = Stub::new(Ok("unused".into()));
        let d = describe_item(&stub, None, item("widget"), &PromptSpec::default(), true, &cache, fast_retry()).unwrap();
        assert_eq!(d.text, "widget");
        assert!(d.degraded);
        assert_eq!(stub.calls.load(Ordering::SeqCst), 0);
        let garbage = describe_item(&stub, Some(b"not an image"), item("widget"), &PromptSpec::default(), true, &cache, fast_retry()).unwrap();
        assert!(garbage.degraded);
    }

    #[test]
    fn empty_response_is_generation_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EnrichmentCache::open(dir.path()).unwrap();
        let stub = Stub::new(Ok("   ".into()));
        let err = describe_item(&stub, Some(PNG), item("x"), &PromptSpec::default(), true, &cache, fast_retry());
        assert!(matches!(err, Err(Error::Generation { .. })));
    }

    #[test]
    fn transport_failures_are_retried_then_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EnrichmentCache::open(dir.path()).unwrap();
        let mut flaky = Stub::new(Ok("ok".into()));
        flaky.fail_first = 2;
        let d = describe_item(&flaky, Some(PNG), item("x"), &PromptSpec::default(), true, &cache, fast_retry()).unwrap();
        assert_eq!(d.text, "ok");
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 3);

        let down = Stub::new(Err(CallError::Transport("refused".into())));
        match describe_item(&down, Some(PNG), item("y"), &PromptSpec::default(), true, &cache, fast_retry()) {
            Err(Error::Transport { item, .. }) => assert_eq!(item, "B01"),
            other => panic!("expected transport error, got {other:?}"),
        }
        assert_eq!(down.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn title_free_prompt_has_distinct_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EnrichmentCache::open(dir.path()).unwrap();
        let stub = Stub::new(Ok("same text".into()));
        let spec = PromptSpec::default();
        let titled = describe_item(&stub, Some(PNG), item("mug"), &spec, true, &cache, fast_retry()).unwrap();
        let untitled = describe_item(&stub, Some(PNG), item("mug"), &spec, false, &cache, fast_retry()).unwrap();
        assert_ne!(titled.prompt_hash, untitled.prompt_hash);
        assert_eq!(stub.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn request_body_carries_text_and_base64_image() {
        let client = ChatCompletionClient::new(EndpointConfig {
            url: "http://localhost:1/v1/chat/completions".into(),
            model: "Qwen2.5-VL-7B-Instruct".into(),
            temperature: 0.0,
            timeout_secs: 1,
            max_tokens: 64,
        });
        let body = client.request_body("describe", PNG, "image/png");
        let content = &body["messages"][0]["content"];
        assert_eq!(content[0]["text"], "describe");
        let url = content[1]["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
        assert_eq!(body["temperature"], 0.0);
    }

    #[test]
    fn mime_sniffing() {
        assert_eq!(sniff_mime(PNG), Some("image/png"));
        assert_eq!(sniff_mime(&[0xFF, 0xD8, 0xFF, 0xE0]), Some("image/jpeg"));
        assert_eq!(sniff_mime(b"hello"), None);
    }
}
