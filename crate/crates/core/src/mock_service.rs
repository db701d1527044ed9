//! Scripted stand-in for the generation endpoint, speaking the same wire
//! protocol as [`crate::inference::GenerationClient`].
//!
//! Script files are line-delimited JSON. Each line maps either an exact
//! `prompt` or a `record_id` (sent by the client as `request_id`) to a
//! response; a line with neither sets the default response.
//!
//! ```text
//! {"prompt": "capital of France?", "text": "Paris", "token_logprobs": [-0.1]}
//! {"record_id": "q2", "text": "Lyon", "token_logprobs": [-2.3, -0.4]}
//! {"record_id": "q3", "text": "", "token_logprobs": [], "fault": "http-error"}
//! {"text": "UNKNOWN", "token_logprobs": [-5.0]}
//! ```

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::task::JoinHandle;

use crate::error::{Error, Result};
use crate::inference::{GenerateRequestBody, GenerateResponseBody, GENERATE_PATH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    Timeout,
    HttpError,
    NoLogprobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedResponse {
    pub text: String,
    #[serde(default)]
    pub token_logprobs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<Fault>,
}

impl ScriptedResponse {
    pub fn new(text: impl Into<String>, token_logprobs: Vec<f64>) -> Self {
        Self {
            text: text.into(),
            token_logprobs,
            fault: None,
        }
    }

    pub fn fault(fault: Fault) -> Self {
        Self {
            text: String::new(),
            token_logprobs: Vec::new(),
            fault: Some(fault),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    #[serde(flatten)]
    pub response: ScriptedResponse,
}

#[derive(Debug, Clone)]
pub struct Script {
    by_prompt: HashMap<String, ScriptedResponse>,
    by_record: HashMap<String, ScriptedResponse>,
    default: ScriptedResponse,
    /// How long a `timeout` fault stalls before answering.
    pub timeout_delay: Duration,
}

impl Default for Script {
    fn default() -> Self {
        Self {
            by_prompt: HashMap::new(),
            by_record: HashMap::new(),
            default: ScriptedResponse::new("UNKNOWN", vec![-5.0]),
            timeout_delay: Duration::from_secs(30),
        }
    }
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_prompt(mut self, prompt: impl Into<String>, response: ScriptedResponse) -> Self {
        self.by_prompt.insert(prompt.into(), response);
        self
    }

    pub fn on_record(mut self, record_id: impl Into<String>, response: ScriptedResponse) -> Self {
        self.by_record.insert(record_id.into(), response);
        self
    }

    pub fn with_default(mut self, response: ScriptedResponse) -> Self {
        self.default = response;
        self
    }

    pub fn with_timeout_delay(mut self, delay: Duration) -> Self {
        self.timeout_delay = delay;
        self
    }

    pub fn from_lines(lines: Vec<ScriptLine>) -> Self {
        lines.into_iter().fold(Self::default(), |s, line| {
            match (line.prompt, line.record_id) {
                (Some(p), _) => s.on_prompt(p, line.response),
                (None, Some(id)) => s.on_record(id, line.response),
                (None, None) => s.with_default(line.response),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_lines(crate::io::read_jsonl(path)?))
    }

    pub fn lookup(&self, prompt: &str, record_id: Option<&str>) -> &ScriptedResponse {
        self.by_prompt
            .get(prompt)
            .or_else(|| record_id.and_then(|id| self.by_record.get(id)))
            .unwrap_or(&self.default)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoggedRequest {
    pub model: String,
    pub prompt: String,
    pub request_id: Option<String>,
}

/// Every request the service received, in arrival order.
#[derive(Debug, Clone, Default)]
pub struct RequestLog(Arc<Mutex<Vec<LoggedRequest>>>);

impl RequestLog {
    fn push(&self, r: LoggedRequest) {
        self.0.lock().expect("request log poisoned").push(r);
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("request log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn calls_for(&self, prompt: &str) -> usize {
        self.0
            .lock()
            .expect("request log poisoned")
            .iter()
            .filter(|r| r.prompt == prompt)
            .count()
    }

    pub fn calls_for_record(&self, record_id: &str) -> usize {
        self.0
            .lock()
            .expect("request log poisoned")
            .iter()
            .filter(|r| r.request_id.as_deref() == Some(record_id))
            .count()
    }

    pub fn entries(&self) -> Vec<LoggedRequest> {
        self.0.lock().expect("request log poisoned").clone()
    }

    pub fn clear(&self) {
        self.0.lock().expect("request log poisoned").clear();
    }
}

#[derive(Clone)]
struct AppState {
    script: Arc<Script>,
    log: RequestLog,
}

async fn generate(State(state): State<AppState>, Json(body): Json<GenerateRequestBody>) -> Response {
    state.log.push(LoggedRequest {
        model: body.model.clone(),
        prompt: body.prompt.clone(),
        request_id: body.request_id.clone(),
    });
    let scripted = state.script.lookup(&body.prompt, body.request_id.as_deref()).clone();
    match scripted.fault {
        Some(Fault::HttpError) => {
            return (StatusCode::INTERNAL_SERVER_ERROR, "scripted failure").into_response()
        }
        Some(Fault::Timeout) => tokio::time::sleep(state.script.timeout_delay).await,
        Some(Fault::NoLogprobs) => {
            return Json(GenerateResponseBody {
                text: scripted.text,
                token_logprobs: None,
            })
            .into_response()
        }
        None => {}
    }
    Json(GenerateResponseBody {
        text: scripted.text,
        token_logprobs: Some(scripted.token_logprobs),
    })
    .into_response()
}

/// A running mock bound to a local port. The server stops when the handle drops.
#[derive(Debug)]
pub struct MockHandle {
    addr: SocketAddr,
    log: RequestLog,
    task: JoinHandle<()>,
}

impl MockHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn log(&self) -> &RequestLog {
        &self.log
    }
}

impl Drop for MockHandle {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Binds `addr` (port 0 picks a free port) and starts serving on the current runtime.
pub async fn serve(script: Script, addr: SocketAddr) -> Result<MockHandle> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Startup(format!("cannot bind {addr}: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Error::Startup(e.to_string()))?;
    let log = RequestLog::default();
    let app = Router::new()
        .route(GENERATE_PATH, post(generate))
        .with_state(AppState {
            script: Arc::new(script),
            log: log.clone(),
        });
    let task = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!("mock service stopped: {e}");
        }
    });
    Ok(MockHandle { addr, log, task })
}

/// A mock with its own runtime, for use from synchronous code.
pub struct MockServer {
    handle: Option<MockHandle>,
    runtime: Option<tokio::runtime::Runtime>,
}

impl MockServer {
    pub fn start(script: Script, addr: SocketAddr) -> Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(|e| Error::Startup(e.to_string()))?;
        let handle = runtime.block_on(serve(script, addr))?;
        Ok(Self {
            handle: Some(handle),
            runtime: Some(runtime),
        })
    }

    pub fn start_local(script: Script) -> Result<Self> {
        Self::start(script, SocketAddr::from(([127, 0, 0, 1], 0)))
    }

    fn handle(&self) -> &MockHandle {
        self.handle.as_ref().expect("running")
    }

    pub fn url(&self) -> String {
        self.handle().url()
    }

    pub fn addr(&self) -> SocketAddr {
        self.handle().addr()
    }

    pub fn log(&self) -> &RequestLog {
        self.handle().log()
    }

    /// Blocks until the server task exits (i.e. forever, unless it fails).
    pub fn wait(mut self) {
        if let (Some(rt), Some(handle)) = (self.runtime.as_ref(), self.handle.as_mut()) {
            let _ = rt.block_on(&mut handle.task);
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        drop(self.handle.take());
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_precedence() {
        let s = Script::new()
            .on_prompt("p", ScriptedResponse::new("by-prompt", vec![-0.1]))
            .on_record("r", ScriptedResponse::new("by-record", vec![-0.1]));
        assert_eq!(s.lookup("p", Some("r")).text, "by-prompt");
        assert_eq!(s.lookup("other", Some("r")).text, "by-record");
        let d = s.lookup("other", None);
        assert_eq!((d.text.as_str(), d.token_logprobs.as_slice()), ("UNKNOWN", &[-5.0][..]));
    }

    #[test]
    fn script_lines_parse() {
        let lines: Vec<ScriptLine> = [
            r#"{"prompt":"a","text":"A","token_logprobs":[-0.5]}"#,
            r#"{"record_id":"q3","text":"","fault":"no-logprobs"}"#,
            r#"{"text":"dunno","token_logprobs":[-9.0]}"#,
        ]
        .iter()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
        let s = Script::from_lines(lines);
        assert_eq!(s.lookup("a", None).text, "A");
        assert_eq!(s.lookup("x", Some("q3")).fault, Some(Fault::NoLogprobs));
        assert_eq!(s.lookup("x", None).text, "dunno");
    }

    #[tokio::test]
    async fn port_in_use_is_a_startup_error() {
        let first = serve(Script::new(), SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
        let err = serve(Script::new(), first.addr()).await.unwrap_err();
        assert!(matches!(err, Error::Startup(_)));
    }
}
