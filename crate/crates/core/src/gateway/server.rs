use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};
use tiny_http::{Header, Method, Request, Response, Server};

use super::{DecodingConfig, GradientOracle, GradientOracleRequest, LanguageModel, MockLm, MockLmSpec};
use crate::error::{Error, Result};
use crate::retriever::{ReferenceRetriever, Side};

/// What the mock HTTP server serves.
#[derive(Debug, Clone)]
pub struct MockServerConfig {
    pub lm: MockLmSpec,
    /// Backs `/v1/embeddings` and `/grad`; both answer 404 without it.
    pub retriever: Option<ReferenceRetriever>,
    /// Required bearer token, if any.
    pub auth_token: Option<String>,
    pub workers: usize,
}

impl MockServerConfig {
    pub fn new(lm: MockLmSpec) -> Self {
        MockServerConfig { lm, retriever: None, auth_token: None, workers: 8 }
    }
}

struct State {
    lm: MockLm,
    retriever: Option<ReferenceRetriever>,
    auth_token: Option<String>,
    pending_failures: AtomicUsize,
    requests: AtomicUsize,
}

/// OpenAI-compatible mock server on a local ephemeral port, stopped on drop.
pub struct MockServer {
    server: Arc<Server>,
    state: Arc<State>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
    addr: SocketAddr,
}

impl MockServer {
    pub fn start(config: MockServerConfig) -> Result<Self> {
        Self::bind("127.0.0.1:0", config)
    }

    pub fn bind(addr: &str, config: MockServerConfig) -> Result<Self> {
        let server = Server::http(addr).map_err(|e| Error::Transport(format!("cannot bind {addr}: {e}")))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Transport("server is not listening on an IP socket".into()))?;
        let server = Arc::new(server);
        let state = Arc::new(State {
            lm: MockLm::new(config.lm)?,
            retriever: config.retriever,
            auth_token: config.auth_token,
            pending_failures: AtomicUsize::new(0),
            requests: AtomicUsize::new(0),
        });
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..config.workers.max(1))
            .map(|_| {
                let (server, state, stop) = (server.clone(), state.clone(), stop.clone());
                std::thread::spawn(move || loop {
                    match server.recv() {
                        Ok(request) => handle(&state, request),
                        Err(_) if stop.load(Ordering::SeqCst) => break,
                        Err(e) => log::warn!("mock server receive error: {e}"),
                    }
                })
            })
            .collect();
        Ok(MockServer { server, state, stop, workers, addr })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// The scripted model behind `/v1/completions`.
    pub fn lm(&self) -> &MockLm {
        &self.state.lm
    }

    /// The next `n` requests answer 503.
    pub fn fail_next(&self, n: usize) {
        self.state.pending_failures.store(n, Ordering::SeqCst);
    }

    /// Requests received so far.
    pub fn requests(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }

    /// Blocks the calling thread until the process is killed.
    pub fn wait(self) {
        loop {
            std::thread::park();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn handle(state: &State, mut request: Request) {
    state.requests.fetch_add(1, Ordering::SeqCst);
    let (status, body) = route(state, &mut request);
    let header = Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    let response = Response::from_string(body.to_string()).with_status_code(status).with_header(header);
    if let Err(e) = request.respond(response) {
        log::warn!("mock server failed to respond: {e}");
    }
}

fn error_body(message: impl Into<String>) -> Value {
    json!({ "error": { "message": message.into() } })
}

fn route(state: &State, request: &mut Request) -> (u16, Value) {
    if let Some(token) = &state.auth_token {
        let expected = format!("Bearer {token}");
        let ok = request
            .headers()
            .iter()
            .any(|h| h.field.equiv("Authorization") && h.value.as_str() == expected);
        if !ok {
            return (401, error_body("missing or invalid bearer token"));
        }
    }
    if state
        .pending_failures
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok()
    {
        return (503, error_body("injected failure"));
    }
    if *request.method() != Method::Post {
        return (405, error_body("only POST is supported"));
    }
    let mut raw = String::new();
    if let Err(e) = request.as_reader().read_to_string(&mut raw) {
        return (400, error_body(e.to_string()));
    }
    let body: Value = match serde_json::from_str(&raw) {
        Ok(v) => v,
        Err(e) => return (400, error_body(e.to_string())),
    };
    let result = match request.url() {
        "/v1/completions" => completions(state, &body),
        "/v1/embeddings" => embeddings(state, &body),
        "/grad" => gradient(state, &body),
        other => return (404, error_body(format!("no route {other}"))),
    };
    match result {
        Ok(v) => (200, v),
        Err(Error::Precondition(m)) => (404, error_body(m)),
        Err(e @ Error::Transport(_)) => (503, error_body(e.to_string())),
        Err(e) => (400, error_body(e.to_string())),
    }
}

/// Whitespace-prefixed word pieces with their character offsets.
fn pieces(text: &str, offset: usize) -> (Vec<String>, Vec<usize>) {
    let mut tokens: Vec<String> = Vec::new();
    let mut offsets = Vec::new();
    let mut current = String::new();
    let mut start = offset;
    let mut seen_word = false;
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() && seen_word {
            tokens.push(std::mem::take(&mut current));
            offsets.push(start);
            start = offset + i;
            seen_word = false;
        }
        if !c.is_whitespace() {
            seen_word = true;
        }
        current.push(c);
    }
    if !current.is_empty() {
        tokens.push(current);
        offsets.push(start);
    }
    (tokens, offsets)
}

fn completion_body(tokens: Vec<String>, logprobs: Vec<Value>, offsets: Vec<usize>, text: String) -> Value {
    json!({
        "object": "text_completion",
        "choices": [{
            "index": 0,
            "text": text,
            "finish_reason": "length",
            "logprobs": { "tokens": tokens, "token_logprobs": logprobs, "text_offset": offsets, "top_logprobs": null },
        }],
    })
}

fn completions(state: &State, body: &Value) -> Result<Value> {
    let prompt = body["prompt"].as_str().ok_or_else(|| Error::Schema("prompt must be a string".into()))?;
    let max_tokens = body["max_tokens"].as_u64().unwrap_or(16) as usize;
    let script = &state.lm.spec().answer;
    if body["echo"].as_bool().unwrap_or(false) {
        // The longest scripted answer prefix that ends the text is scored
        // as the continuation; everything before it is context.
        let j = (1..=script.len())
            .rev()
            .find(|&j| prompt.ends_with(&script[..j].concat()))
            .unwrap_or(0);
        let context = &prompt[..prompt.len() - script[..j].concat().len()];
        let (mut tokens, mut offsets) = pieces(context, 0);
        let mut logprobs: Vec<Value> = tokens.iter().enumerate().map(|(i, _)| if i == 0 { Value::Null } else { json!(-1.0) }).collect();
        if j > 0 {
            let lp = state.lm.score_continuation(context, &script[..j])?;
            let mut at = context.chars().count();
            for (tok, v) in script[..j].iter().zip(lp) {
                tokens.push(tok.clone());
                offsets.push(at);
                logprobs.push(json!(v));
                at += tok.chars().count();
            }
        }
        return Ok(completion_body(tokens, logprobs, offsets, prompt.to_string()));
    }
    if max_tokens == 0 {
        return Ok(completion_body(Vec::new(), Vec::new(), Vec::new(), String::new()));
    }
    let decoding = DecodingConfig { max_tokens, seed: body["seed"].as_u64().unwrap_or(0) };
    let tokens = state.lm.generate(prompt, &decoding)?;
    let lp = state.lm.score_continuation(prompt, &tokens)?;
    let mut at = prompt.chars().count();
    let mut offsets = Vec::with_capacity(tokens.len());
    for tok in &tokens {
        offsets.push(at);
        at += tok.chars().count();
    }
    let text = tokens.concat();
    Ok(completion_body(tokens, lp.into_iter().map(|v| json!(v)).collect(), offsets, text))
}

fn retriever(state: &State) -> Result<&ReferenceRetriever> {
    state
        .retriever
        .as_ref()
        .ok_or_else(|| Error::Precondition("no retriever configured".into()))
}

fn embeddings(state: &State, body: &Value) -> Result<Value> {
    let retriever = retriever(state)?;
    let text = body["input"].as_str().ok_or_else(|| Error::Schema("input must be a string".into()))?;
    let encoder = retriever.encoder(Side::Document);
    let v = encoder.encode(&encoder.tokenizer().encode(text))?;
    Ok(json!({ "object": "list", "data": [{ "index": 0, "embedding": v.iter().collect::<Vec<_>>() }] }))
}

fn gradient(state: &State, body: &Value) -> Result<Value> {
    let retriever = retriever(state)?;
    let request: GradientOracleRequest = serde_json::from_value(body.clone())?;
    Ok(serde_json::to_value(retriever.gradient(&request)?)?)
}
