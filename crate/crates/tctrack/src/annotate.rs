//! Word-role annotation: per-word target/context labels for a sentence.
//!
//! Two interchangeable annotators produce [`WordRoleLabels`]:
//!
//! * **Offline rule** ([`rule_labels`]) — the closed-vocabulary rule the
//!   synthetic generator itself follows: the first color word and the first
//!   shape word name the target, everything else is context. For generated
//!   sentences this reproduces the generator's labels exactly, so it is the
//!   canonical source for synthetic data and needs no network.
//! * **HTTP endpoint** ([`EndpointClient`]) — POSTs `{model, prompt}` to a
//!   language-model endpoint, where the prompt is the bundled template
//!   ([`PROMPT_TEMPLATE`]) with the sentence substituted at `{xx}`. The
//!   response must contain a line of `word:label` pairs echoing the sentence
//!   words in order. Malformed responses are rejected with a format error
//!   carrying the raw body — never coerced into labels.
//!
//! Results can be cached in a JSON labels file keyed by sentence hash
//! ([`LabelCache`]), and [`annotate_batch`] annotates many sentences with
//! bounded parallelism while keeping results ordered by input index.
//! [`MockAnnotationServer`] is a self-contained local endpoint used by tests
//! and examples; no real network access is required anywhere.

use crate::error::{io_err, Error, Result};
use crate::synthetic::{COLORS, SHAPES};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

/// Prompt template sent to the annotation endpoint: task requirements, one
/// worked example, and a `{xx}` placeholder for the sentence to label.
pub const PROMPT_TEMPLATE: &str = include_str!("../assets/word_role_prompt.txt");

/// Placeholder inside [`PROMPT_TEMPLATE`] replaced by the sentence.
pub const PROMPT_PLACEHOLDER: &str = "{xx}";

/// Environment variable naming the annotation endpoint URL.
pub const ENDPOINT_ENV: &str = "TCTRACK_ANNOTATE_ENDPOINT";
/// Environment variable naming the model field of the request (optional).
pub const MODEL_ENV: &str = "TCTRACK_ANNOTATE_MODEL";
/// Environment variable holding a bearer credential (optional).
pub const KEY_ENV: &str = "TCTRACK_ANNOTATE_KEY";
/// Model name used when [`MODEL_ENV`] is unset.
pub const DEFAULT_MODEL: &str = "gpt-4o";

/// Where a set of word labels came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// Produced by the closed-vocabulary rule (identical to generator labels).
    Generator,
    /// Parsed from a language-model endpoint response.
    Llm,
    /// Hand-written or hand-corrected.
    Manual,
}

impl std::fmt::Display for LabelSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LabelSource::Generator => "generator",
            LabelSource::Llm => "llm",
            LabelSource::Manual => "manual",
        };
        f.write_str(s)
    }
}

/// Per-word binary roles for one sentence: 1.0 = target word, 0.0 = context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordRoleLabels {
    /// Sentence words in order, lowercase, punctuation stripped.
    pub words: Vec<String>,
    /// One label per word, each exactly 0.0 or 1.0, at least one 1.0.
    pub labels: Vec<f64>,
    /// Provenance of the labels.
    pub source: LabelSource,
}

impl WordRoleLabels {
    /// Check the type's invariants: equal lengths, binary entries, and at
    /// least one target word.
    pub fn validate(&self) -> Result<()> {
        if self.words.is_empty() {
            return Err(Error::Input("word labels for an empty sentence".into()));
        }
        if self.words.len() != self.labels.len() {
            return Err(Error::Input(format!(
                "{} words but {} labels",
                self.words.len(),
                self.labels.len()
            )));
        }
        if self.labels.iter().any(|&l| l != 0.0 && l != 1.0) {
            return Err(Error::Input("word labels must be exactly 0 or 1".into()));
        }
        if self.labels.iter().sum::<f64>() < 1.0 {
            return Err(Error::Input("no word labeled as target".into()));
        }
        Ok(())
    }
}

/// Split a sentence into lowercase words, stripping surrounding punctuation.
/// Words that are pure punctuation are dropped.
pub fn split_words(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Render the request prompt for one sentence by substituting it at the
/// template placeholder.
pub fn render_prompt(sentence: &str) -> Result<String> {
    let sentence = sentence.trim();
    if sentence.is_empty() {
        return Err(Error::Input("cannot annotate an empty sentence".into()));
    }
    Ok(PROMPT_TEMPLATE.replace(PROMPT_PLACEHOLDER, sentence))
}

/// Offline rule-based annotation: the first color word and the first shape
/// word are the target words, all other words are context. This is the same
/// rule the synthetic generator applies when composing sentences (the target
/// pair always precedes any reference pair), so for generated sentences the
/// output is bit-identical to the generator's labels.
pub fn rule_labels(sentence: &str) -> Result<WordRoleLabels> {
    let words = split_words(sentence);
    if words.is_empty() {
        return Err(Error::Input("cannot annotate an empty sentence".into()));
    }
    let mut labels = vec![0.0; words.len()];
    let mut color_seen = false;
    let mut shape_seen = false;
    for (i, w) in words.iter().enumerate() {
        if !color_seen && COLORS.iter().any(|(name, _)| name == w) {
            labels[i] = 1.0;
            color_seen = true;
        } else if !shape_seen && SHAPES.iter().any(|s| s == w) {
            labels[i] = 1.0;
            shape_seen = true;
        }
    }
    if !color_seen && !shape_seen {
        return Err(Error::Input(format!(
            "no recognizable target words in sentence {sentence:?}; \
             use the endpoint annotator for open-vocabulary sentences"
        )));
    }
    let out = WordRoleLabels {
        words,
        labels,
        source: LabelSource::Generator,
    };
    out.validate()?;
    Ok(out)
}

/// Parse one `word:label` token. Returns `None` when the token does not have
/// the shape at all (no colon); returns an error string when it has the shape
/// but an invalid label.
fn parse_pair(token: &str) -> Option<std::result::Result<(String, f64), String>> {
    let token = token.trim_matches(|c: char| {
        c.is_whitespace() || matches!(c, ',' | ';' | '"' | '\'' | '`' | '(' | ')' | '[' | ']')
    });
    let (word, label) = token.rsplit_once(':')?;
    let word = word
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    if word.is_empty() {
        return Some(Err(format!("pair {token:?} has an empty word")));
    }
    let label = label.trim().trim_end_matches('.');
    let value = match label.parse::<f64>() {
        Ok(v) if v == 0.0 || v == 1.0 => v,
        _ => return Some(Err(format!("pair {token:?} has label {label:?}, want 0 or 1"))),
    };
    Some(Ok((word, value)))
}

/// Try to read one response line as a full labeling of `words`. Returns
/// `Ok(Some(labels))` on success, `Ok(None)` when the line is not in the
/// pair format at all (so the caller moves on), and `Err` when the line is
/// in the pair format but contradicts the sentence.
fn parse_line(line: &str, words: &[String]) -> std::result::Result<Option<Vec<f64>>, String> {
    let line = line.trim();
    let line = line.strip_prefix("Output:").unwrap_or(line).trim();
    if line.is_empty() {
        return Ok(None);
    }
    let mut pairs = Vec::new();
    for token in line.split([' ', '\t', ',']) {
        if token.trim().is_empty() {
            continue;
        }
        match parse_pair(token) {
            Some(Ok(p)) => pairs.push(p),
            Some(Err(e)) => return Err(e),
            // A non-pair token means this is prose, not a labeling line.
            None => return Ok(None),
        }
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    if pairs.len() != words.len() {
        return Err(format!(
            "line labels {} words but the sentence has {}",
            pairs.len(),
            words.len()
        ));
    }
    for (i, ((w, _), expect)) in pairs.iter().zip(words).enumerate() {
        if w != expect {
            return Err(format!(
                "word {i} is {w:?} but the sentence has {expect:?}"
            ));
        }
    }
    Ok(Some(pairs.into_iter().map(|(_, l)| l).collect()))
}

/// Parse an endpoint response body for `sentence`. Scans the body line by
/// line for the first line of `word:label` pairs that echoes the sentence
/// words in order; an optional `Output:` prefix, commas, and surrounding
/// quotes are tolerated. Anything else is a format error carrying the raw
/// body.
pub fn parse_endpoint_response(sentence: &str, raw: &str) -> Result<WordRoleLabels> {
    let words = split_words(sentence);
    if words.is_empty() {
        return Err(Error::Input("cannot annotate an empty sentence".into()));
    }
    let mut first_mismatch: Option<String> = None;
    for line in raw.lines() {
        match parse_line(line, &words) {
            Ok(Some(labels)) => {
                let out = WordRoleLabels {
                    words,
                    labels,
                    source: LabelSource::Llm,
                };
                return match out.validate() {
                    Ok(()) => Ok(out),
                    Err(e) => Err(Error::AnnotationFormat {
                        reason: format!("labeling line violates label invariants: {e}"),
                        raw: raw.to_string(),
                    }),
                };
            }
            Ok(None) => continue,
            Err(e) => {
                first_mismatch.get_or_insert(e);
            }
        }
    }
    let reason = match first_mismatch {
        Some(e) => format!("labeling line does not match the sentence: {e}"),
        None => "no word:label line found in response".to_string(),
    };
    Err(Error::AnnotationFormat {
        reason,
        raw: raw.to_string(),
    })
}

/// JSON request body sent to the annotation endpoint.
#[derive(Serialize, Deserialize)]
struct EndpointRequest {
    model: String,
    prompt: String,
}

/// HTTP client for a word-role annotation endpoint.
///
/// Sends `POST endpoint` with JSON body `{"model", "prompt"}` and parses the
/// response body with [`parse_endpoint_response`]. Transport failures and
/// non-success statuses are retriable network errors; unparseable bodies are
/// format errors.
#[derive(Clone, Debug)]
pub struct EndpointClient {
    /// Full endpoint URL, e.g. `http://127.0.0.1:8431/annotate`.
    pub endpoint: String,
    /// Model name placed in the request body.
    pub model: String,
    /// Optional bearer credential for the `Authorization` header.
    pub api_key: Option<String>,
    /// Per-request timeout.
    pub timeout: Duration,
}

impl EndpointClient {
    /// Client for `endpoint` with the default model and a 10 s timeout.
    pub fn new(endpoint: impl Into<String>) -> Self {
        EndpointClient {
            endpoint: endpoint.into(),
            model: DEFAULT_MODEL.to_string(),
            api_key: None,
            timeout: Duration::from_secs(10),
        }
    }

    /// Build a client from the environment: [`ENDPOINT_ENV`] is required,
    /// [`MODEL_ENV`] and [`KEY_ENV`] are optional.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).map_err(|_| {
            Error::Input(format!(
                "annotation endpoint not configured: set {ENDPOINT_ENV} to the endpoint URL"
            ))
        })?;
        let mut client = EndpointClient::new(endpoint);
        if let Ok(model) = std::env::var(MODEL_ENV) {
            client.model = model;
        }
        client.api_key = std::env::var(KEY_ENV).ok();
        Ok(client)
    }

    /// Annotate one sentence via the endpoint.
    pub fn annotate(&self, sentence: &str) -> Result<WordRoleLabels> {
        let prompt = render_prompt(sentence)?;
        let body = serde_json::to_string(&EndpointRequest {
            model: self.model.clone(),
            prompt,
        })
        .map_err(|e| Error::Input(format!("encoding annotation request: {e}")))?;
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut request = agent
            .post(&self.endpoint)
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.set("Authorization", &format!("Bearer {key}"));
        }
        let raw = match request.send_string(&body) {
            Ok(response) => response.into_string().map_err(|e| {
                Error::AnnotationNetwork(format!("reading response body: {e}"))
            })?,
            Err(ureq::Error::Status(code, response)) => {
                let detail = response.into_string().unwrap_or_default();
                let detail = detail.trim();
                let detail: String = detail.chars().take(200).collect();
                return Err(Error::AnnotationNetwork(format!(
                    "endpoint returned HTTP {code}: {detail}"
                )));
            }
            Err(ureq::Error::Transport(t)) => {
                return Err(Error::AnnotationNetwork(t.to_string()));
            }
        };
        parse_endpoint_response(sentence, &raw)
    }
}

/// An annotator: either the offline closed-vocabulary rule or an HTTP
/// endpoint client.
#[derive(Clone, Debug)]
pub enum Annotator {
    /// Rule-based labels, no network ([`rule_labels`]).
    Offline,
    /// Labels from an HTTP endpoint.
    Endpoint(EndpointClient),
}

impl Annotator {
    fn annotate(&self, sentence: &str) -> Result<WordRoleLabels> {
        match self {
            Annotator::Offline => rule_labels(sentence),
            Annotator::Endpoint(client) => client.annotate(sentence),
        }
    }
}

/// Annotate one sentence with the given annotator.
pub fn annotate_target_words(sentence: &str, client: &Annotator) -> Result<WordRoleLabels> {
    client.annotate(sentence)
}

/// Hash key for one sentence in the labels cache: hex SHA-256 of the exact
/// sentence string.
pub fn sentence_key(sentence: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(sentence.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// One cached annotation.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CacheEntry {
    sentence: String,
    labels: WordRoleLabels,
}

/// Local labels file: a JSON map from sentence hash to annotation, so
/// endpoint calls are made at most once per sentence.
#[derive(Debug)]
pub struct LabelCache {
    path: PathBuf,
    entries: BTreeMap<String, CacheEntry>,
}

impl LabelCache {
    /// Open the cache at `path`, loading existing entries if the file exists.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let entries = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            serde_json::from_str(&text).map_err(|e| {
                Error::Format(format!("labels cache {}: {e}", path.display()))
            })?
        } else {
            BTreeMap::new()
        };
        Ok(LabelCache { path, entries })
    }

    /// Number of cached sentences.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// True when the cache holds no entries.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Cached labels for `sentence`, if present.
    pub fn get(&self, sentence: &str) -> Option<&WordRoleLabels> {
        self.entries
            .get(&sentence_key(sentence))
            .map(|e| &e.labels)
    }

    /// Insert or replace the labels for `sentence`.
    pub fn put(&mut self, sentence: &str, labels: WordRoleLabels) {
        self.entries.insert(
            sentence_key(sentence),
            CacheEntry {
                sentence: sentence.to_string(),
                labels,
            },
        );
    }

    /// Write the cache back to its file as pretty-printed JSON.
    pub fn save(&self) -> Result<()> {
        if let Some(parent) = self.path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            }
        }
        let text = serde_json::to_string_pretty(&self.entries)
            .map_err(|e| Error::Format(format!("encoding labels cache: {e}")))?;
        std::fs::write(&self.path, text).map_err(|e| io_err(&self.path, e))
    }
}

/// Annotate `sentences` in input order, consulting and filling `cache` when
/// one is given. Endpoint annotators run up to `parallelism` requests
/// concurrently; results (and the first error, if any) are deterministic in
/// input-index order regardless of completion order. The cache is saved once
/// at the end when any new entry was added.
pub fn annotate_batch(
    sentences: &[String],
    client: &Annotator,
    mut cache: Option<&mut LabelCache>,
    parallelism: usize,
) -> Result<Vec<WordRoleLabels>> {
    if parallelism == 0 {
        return Err(Error::Input("annotation parallelism must be at least 1".into()));
    }
    let mut results: Vec<Option<WordRoleLabels>> = vec![None; sentences.len()];
    let mut misses: Vec<usize> = Vec::new();
    for (i, sentence) in sentences.iter().enumerate() {
        match cache.as_ref().and_then(|c| c.get(sentence)).cloned() {
            Some(hit) => results[i] = Some(hit),
            None => misses.push(i),
        }
    }
    let mut fetched: Vec<(usize, Result<WordRoleLabels>)> = Vec::with_capacity(misses.len());
    for chunk in misses.chunks(parallelism) {
        let outcomes: Vec<(usize, Result<WordRoleLabels>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let sentence = &sentences[i];
                    scope.spawn(move || (i, client.annotate(sentence)))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("annotation worker panicked")).collect()
        });
        fetched.extend(outcomes);
    }
    // Surface the earliest failure by input index so errors are as
    // deterministic as successes.
    fetched.sort_by_key(|(i, _)| *i);
    let mut new_entries = false;
    for (i, outcome) in fetched {
        let labels = outcome?;
        if let Some(c) = cache.as_deref_mut() {
            c.put(&sentences[i], labels.clone());
            new_entries = true;
        }
        results[i] = Some(labels);
    }
    if new_entries {
        if let Some(c) = cache {
            c.save()?;
        }
    }
    Ok(results
        .into_iter()
        .map(|r| r.expect("every index annotated"))
        .collect())
}

/// What the bundled mock endpoint sends back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MockBehavior {
    /// Parse the sentence out of the prompt, label it with the offline rule,
    /// and answer in the documented `Output: word:label ...` format.
    Faithful,
    /// Answer with prose that contains no labeling line.
    Prose,
    /// Answer with a labeling line whose words are in reversed order.
    Garbled,
    /// Answer HTTP 500 with no useful body.
    ServerError,
}

/// Minimal local HTTP endpoint for tests and examples. Binds a loopback
/// port, serves requests sequentially on a background thread, and shuts
/// down when dropped. Not a general web server: it understands exactly the
/// `{model, prompt}` POST this module sends.
pub struct MockAnnotationServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockAnnotationServer {
    /// Start a mock endpoint with the given behavior.
    pub fn spawn(behavior: MockBehavior) -> Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", 0))
            .map_err(|e| Error::Input(format!("binding mock endpoint: {e}")))?;
        let addr = listener
            .local_addr()
            .map_err(|e| Error::Input(format!("reading mock endpoint address: {e}")))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::Input(format!("configuring mock endpoint: {e}")))?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&shutdown);
        let handle = std::thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        // Ignore per-connection failures: a broken client
                        // connection must not kill the server thread.
                        let _ = serve_connection(stream, behavior);
                    }
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(2));
                    }
                    Err(_) => break,
                }
            }
        });
        Ok(MockAnnotationServer {
            addr,
            shutdown,
            handle: Some(handle),
        })
    }

    /// Endpoint URL to hand to an [`EndpointClient`].
    pub fn url(&self) -> String {
        format!("http://{}/annotate", self.addr)
    }
}

impl Drop for MockAnnotationServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

/// Handle one mock-endpoint connection: read the POST, answer per behavior.
fn serve_connection(mut stream: TcpStream, behavior: MockBehavior) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(2)))?;
    stream.set_write_timeout(Some(Duration::from_secs(2)))?;
    let body = read_http_request(&mut stream)?;
    if behavior == MockBehavior::ServerError {
        return write_http_response(&mut stream, 500, "mock endpoint failure\n");
    }
    let sentence = serde_json::from_str::<EndpointRequest>(&body)
        .ok()
        .and_then(|req| prompt_sentence(&req.prompt));
    let reply = match (behavior, sentence) {
        (MockBehavior::Prose, _) => {
            "I looked at the sentence but cannot commit to labels right now.\n".to_string()
        }
        (_, None) => "The request carried no sentence I could find.\n".to_string(),
        (MockBehavior::Faithful, Some(sentence)) => match rule_labels(&sentence) {
            Ok(roles) => format!(
                "Here is the labeling you asked for.\nOutput: {}\n",
                format_pairs(&roles.words, &roles.labels)
            ),
            Err(_) => "That sentence names no object I recognize.\n".to_string(),
        },
        (MockBehavior::Garbled, Some(sentence)) => {
            let mut words = split_words(&sentence);
            words.reverse();
            let labels = vec![0.0; words.len()];
            format!("Output: {}\n", format_pairs(&words, &labels))
        }
        (MockBehavior::ServerError, _) => unreachable!("handled above"),
    };
    write_http_response(&mut stream, 200, &reply)
}

/// Extract the sentence from a rendered prompt: the text after the last
/// `Sentence:` marker (earlier markers belong to the worked example).
fn prompt_sentence(prompt: &str) -> Option<String> {
    let sentence = prompt
        .lines()
        .filter_map(|l| l.trim().strip_prefix("Sentence:"))
        .last()?
        .trim()
        .to_string();
    if sentence.is_empty() {
        None
    } else {
        Some(sentence)
    }
}

/// Format words and labels as the documented `word:label` line.
fn format_pairs(words: &[String], labels: &[f64]) -> String {
    words
        .iter()
        .zip(labels)
        .map(|(w, &l)| format!("{w}:{}", l as i64))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Read one HTTP request from `stream` and return its body.
fn read_http_request(stream: &mut TcpStream) -> std::io::Result<String> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    let header_end = loop {
        if let Some(pos) = find_header_end(&buf) {
            break pos;
        }
        if buf.len() > 1 << 20 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "request headers too large",
            ));
        }
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "connection closed before headers ended",
            ));
        }
        buf.extend_from_slice(&chunk[..n]);
    };
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let content_length = headers
        .lines()
        .find_map(|l| {
            let (name, value) = l.split_once(':')?;
            if name.trim().eq_ignore_ascii_case("content-length") {
                value.trim().parse::<usize>().ok()
            } else {
                None
            }
        })
        .unwrap_or(0);
    let mut body = buf[header_end + 4..].to_vec();
    while body.len() < content_length {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "connection closed mid-body",
            ));
        }
        body.extend_from_slice(&chunk[..n]);
    }
    body.truncate(content_length);
    Ok(String::from_utf8_lossy(&body).to_string())
}

/// Byte offset of the `\r\n\r\n` separating headers from body.
fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

/// Write a minimal HTTP/1.1 response and close the connection.
fn write_http_response(stream: &mut TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        500 => "Internal Server Error",
        _ => "Unknown",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(response.as_bytes())?;
    stream.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::WorldConfig;
    use crate::synthetic::generate_sequence;

    fn synthetic_sentences(n: usize) -> Vec<(String, Vec<f64>)> {
        let cfg = WorldConfig::default();
        (0..n as u64)
            .map(|seed| {
                let seq = generate_sequence(&cfg, 1000 + seed);
                (seq.sentence.join(" "), seq.labels.clone())
            })
            .collect()
    }

    #[test]
    fn prompt_substitutes_sentence_once() {
        let prompt = render_prompt("the red circle").unwrap();
        assert!(prompt.contains("Sentence: the red circle"));
        assert!(!prompt.contains(PROMPT_PLACEHOLDER));
        assert!(PROMPT_TEMPLATE.matches(PROMPT_PLACEHOLDER).count() == 1);
        assert!(render_prompt("   ").is_err());
    }

    #[test]
    fn rule_matches_generator_labels() {
        for (sentence, expected) in synthetic_sentences(60) {
            let roles = rule_labels(&sentence).unwrap();
            assert_eq!(roles.words, split_words(&sentence));
            assert_eq!(roles.labels, expected, "sentence {sentence:?}");
            assert_eq!(roles.source, LabelSource::Generator);
        }
    }

    #[test]
    fn rule_rejects_unknown_sentences() {
        let err = rule_labels("a dog chasing a ball").unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn parser_accepts_documented_and_permissive_formats() {
        let sentence = "the red circle near the blue square";
        let clean = "the:0 red:1 circle:1 near:0 the:0 blue:0 square:0";
        let variants = [
            clean.to_string(),
            format!("Output: {clean}"),
            format!("Sure, here you go.\n\n{clean}\nHope that helps."),
            "the:0, red:1, circle:1, near:0, the:0, blue:0, square:0".to_string(),
            "\"the\":0 \"red\":1 \"circle\":1 \"near\":0 \"the\":0 \"blue\":0 \"square\":0"
                .to_string(),
            "The:0 Red:1.0 Circle:1 near:0.0 the:0 blue:0 square:0.".to_string(),
        ];
        for raw in variants {
            let roles = parse_endpoint_response(sentence, &raw)
                .unwrap_or_else(|e| panic!("variant {raw:?}: {e}"));
            assert_eq!(roles.labels, [0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
            assert_eq!(roles.source, LabelSource::Llm);
        }
    }

    #[test]
    fn parser_rejects_malformed_responses() {
        let sentence = "the red circle";
        let cases = [
            ("prose only", "I think the circle is red."),
            ("wrong word order", "circle:1 red:1 the:0"),
            ("wrong count", "the:0 red:1"),
            ("bad label", "the:0 red:2 circle:1"),
            ("all zero", "the:0 red:0 circle:0"),
            ("empty body", ""),
        ];
        for (what, raw) in cases {
            match parse_endpoint_response(sentence, raw) {
                Err(Error::AnnotationFormat { raw: carried, .. }) => {
                    assert_eq!(carried, raw, "case {what}");
                }
                other => panic!("case {what}: expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn mock_endpoint_round_trip_matches_generator() {
        let server = MockAnnotationServer::spawn(MockBehavior::Faithful).unwrap();
        let client = EndpointClient::new(server.url());
        for (sentence, expected) in synthetic_sentences(10) {
            let roles = client.annotate(&sentence).unwrap();
            assert_eq!(roles.labels, expected, "sentence {sentence:?}");
            assert_eq!(roles.source, LabelSource::Llm);
        }
    }

    #[test]
    fn mock_failures_map_to_the_right_errors() {
        let prose = MockAnnotationServer::spawn(MockBehavior::Prose).unwrap();
        let err = EndpointClient::new(prose.url())
            .annotate("the red circle")
            .unwrap_err();
        assert!(matches!(err, Error::AnnotationFormat { .. }), "{err}");
        assert!(!err.is_retriable());

        let garbled = MockAnnotationServer::spawn(MockBehavior::Garbled).unwrap();
        let err = EndpointClient::new(garbled.url())
            .annotate("the red circle")
            .unwrap_err();
        assert!(matches!(err, Error::AnnotationFormat { .. }), "{err}");

        let broken = MockAnnotationServer::spawn(MockBehavior::ServerError).unwrap();
        let err = EndpointClient::new(broken.url())
            .annotate("the red circle")
            .unwrap_err();
        assert!(matches!(err, Error::AnnotationNetwork(_)), "{err}");
        assert!(err.is_retriable());

        // No listener at all: transport-level failure, also retriable.
        let gone = MockAnnotationServer::spawn(MockBehavior::Faithful).unwrap();
        let url = gone.url();
        drop(gone);
        let err = EndpointClient::new(url).annotate("the red circle").unwrap_err();
        assert!(matches!(err, Error::AnnotationNetwork(_)), "{err}");
    }

    #[test]
    fn cache_round_trips_and_short_circuits_the_network() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.json");
        let sentences: Vec<String> =
            synthetic_sentences(6).into_iter().map(|(s, _)| s).collect();

        let server = MockAnnotationServer::spawn(MockBehavior::Faithful).unwrap();
        let annotator = Annotator::Endpoint(EndpointClient::new(server.url()));
        let mut cache = LabelCache::open(&path).unwrap();
        let first = annotate_batch(&sentences, &annotator, Some(&mut cache), 3).unwrap();
        assert_eq!(cache.len(), sentences.len());
        drop(server);

        // Endpoint is gone; a reloaded cache must satisfy the same batch.
        let mut reloaded = LabelCache::open(&path).unwrap();
        assert_eq!(reloaded.len(), sentences.len());
        let annotator =
            Annotator::Endpoint(EndpointClient::new("http://127.0.0.1:9/annotate"));
        let second = annotate_batch(&sentences, &annotator, Some(&mut reloaded), 3).unwrap();
        assert_eq!(first, second);
        assert_eq!(
            reloaded.get(&sentences[0]).unwrap().labels,
            first[0].labels
        );
    }

    #[test]
    fn batch_results_are_ordered_by_input_index() {
        let data = synthetic_sentences(12);
        let sentences: Vec<String> = data.iter().map(|(s, _)| s.clone()).collect();
        let server = MockAnnotationServer::spawn(MockBehavior::Faithful).unwrap();
        let annotator = Annotator::Endpoint(EndpointClient::new(server.url()));
        let batch = annotate_batch(&sentences, &annotator, None, 4).unwrap();
        assert_eq!(batch.len(), sentences.len());
        for (result, (_, expected)) in batch.iter().zip(&data) {
            assert_eq!(&result.labels, expected);
        }
    }

    #[test]
    fn offline_annotator_and_validation() {
        let roles =
            annotate_target_words("the red circle", &Annotator::Offline).unwrap();
        assert_eq!(roles.labels, [0.0, 1.0, 1.0]);
        roles.validate().unwrap();
        let bad = WordRoleLabels {
            words: vec!["a".into()],
            labels: vec![0.5],
            source: LabelSource::Manual,
        };
        assert!(bad.validate().is_err());
    }
}
