//! Model access: chat and embedding backends behind one gateway that keeps an
//! append-only, sequence-numbered log of every chat exchange.
//!
//! Three families of backends exist:
//! - [`ScriptedChat`] replays role-keyed response queues (tests, fixtures),
//! - [`HashEmbedder`] / [`FixtureEmbedder`] give hermetic embeddings,
//! - [`RemoteChat`] / [`RemoteEmbedder`] speak the chat-completions and
//!   embeddings HTTP wire formats with retry and exponential backoff.

mod embed;
mod remote;
mod scripted;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{cosine, FixtureEmbedder, HashEmbedder};
pub use remote::{RemoteChat, RemoteEmbedder, RetryPolicy};
pub use scripted::ScriptedChat;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("gateway failure: {0}")]
    Failure(String),
    #[error("scripted responses exhausted for role `{0}`")]
    ScriptExhausted(Role),
    #[error("embedding has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

/// The agent on whose behalf a chat call is made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Setup,
    RetrieverSummary,
    RetrieverSelect,
    RetrieverAudit,
    Verifier,
    Prosecutor,
    Judge,
    Distiller,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::Setup,
        Role::RetrieverSummary,
        Role::RetrieverSelect,
        Role::RetrieverAudit,
        Role::Verifier,
        Role::Prosecutor,
        Role::Judge,
        Role::Distiller,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Setup => "setup",
            Role::RetrieverSummary => "retriever_summary",
            Role::RetrieverSelect => "retriever_select",
            Role::RetrieverAudit => "retriever_audit",
            Role::Verifier => "verifier",
            Role::Prosecutor => "prosecutor",
            Role::Judge => "judge",
            Role::Distiller => "distiller",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Speaker,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Speaker::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Speaker::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Speaker::Assistant,
            content: content.into(),
        }
    }
}

/// What shape of reply the caller expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseContract {
    FreeText,
    StructuredDocument,
}

pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        role: Role,
        messages: &[Message],
        contract: ResponseContract,
    ) -> Result<String, GatewayError>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError>;
}

/// One logged chat exchange.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatLogEntry {
    pub seq: u64,
    pub run_id: String,
    pub role: Role,
    pub messages: Vec<Message>,
    pub response: Result<String, String>,
    pub latency_ms: u64,
    pub prompt_chars: usize,
}

pub struct Gateway {
    chat: Arc<dyn ChatBackend>,
    embedder: Arc<dyn EmbeddingBackend>,
    seq: AtomicU64,
    log: Mutex<Vec<ChatLogEntry>>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("dimension", &self.embedder.dimension())
            .field("calls", &self.seq.load(Ordering::SeqCst))
            .finish()
    }
}

impl Gateway {
    pub fn new(chat: Arc<dyn ChatBackend>, embedder: Arc<dyn EmbeddingBackend>) -> Self {
        Self {
            chat,
            embedder,
            seq: AtomicU64::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn dimension(&self) -> usize {
        self.embedder.dimension()
    }

    pub fn chat(
        &self,
        run_id: &str,
        role: Role,
        messages: &[Message],
        contract: ResponseContract,
    ) -> Result<String, GatewayError> {
        let started = Instant::now();
        let result = self.chat.complete(role, messages, contract);
        let latency_ms = started.elapsed().as_millis() as u64;
        let mut log = self.log.lock().unwrap();
        // sequence numbers are allocated under the log lock so the log is ordered
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        log.push(ChatLogEntry {
            seq,
            run_id: run_id.to_string(),
            role,
            messages: messages.to_vec(),
            response: result.clone().map_err(|e| e.to_string()),
            latency_ms,
            prompt_chars: messages.iter().map(|m| m.content.len()).sum(),
        });
        drop(log);
        if let Err(e) = &result {
            tracing::warn!(run_id, %role, error = %e, "chat call failed");
        }
        result
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let v = self.embedder.embed(text)?;
        if v.len() != self.embedder.dimension() {
            return Err(GatewayError::Dimension {
                expected: self.embedder.dimension(),
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(GatewayError::Failure("embedding has non-finite components".into()));
        }
        Ok(v)
    }

    pub fn log(&self) -> Vec<ChatLogEntry> {
        self.log.lock().unwrap().clone()
    }

    /// Number of chat calls made for `role`, across all runs.
    pub fn calls_for(&self, role: Role) -> usize {
        self.log.lock().unwrap().iter().filter(|e| e.role == role).count()
    }

    pub fn write_log(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for entry in self.log.lock().unwrap().iter() {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

/// A gateway bound to one run id; this is what the agents hold.
#[derive(Clone, Debug)]
pub struct Llm {
    gateway: Arc<Gateway>,
    run_id: Arc<str>,
}

impl Llm {
    pub fn new(gateway: Arc<Gateway>, run_id: impl Into<Arc<str>>) -> Self {
        Self {
            gateway,
            run_id: run_id.into(),
        }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn chat(&self, role: Role, messages: &[Message]) -> Result<String, GatewayError> {
        self.gateway
            .chat(&self.run_id, role, messages, ResponseContract::StructuredDocument)
    }

    pub fn chat_text(&self, role: Role, messages: &[Message]) -> Result<String, GatewayError> {
        self.gateway
            .chat(&self.run_id, role, messages, ResponseContract::FreeText)
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        self.gateway.embed(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_is_sequenced_and_attributed() {
        let chat = ScriptedChat::new();
        chat.push(Role::Setup, "A");
        chat.push(Role::Judge, "B");
        let gw = Arc::new(Gateway::new(Arc::new(chat), Arc::new(HashEmbedder::new(16, 1))));
        let a = Llm::new(gw.clone(), "run-a");
        let b = Llm::new(gw.clone(), "run-b");
        assert_eq!(a.chat(Role::Setup, &[Message::user("hi")]).unwrap(), "A");
        assert_eq!(b.chat(Role::Judge, &[Message::user("hi")]).unwrap(), "B");
        assert!(a.chat(Role::Setup, &[]).is_err());
        let log = gw.log();
        assert_eq!(log.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(log[0].run_id, "run-a");
        assert_eq!(log[1].role, Role::Judge);
        assert!(log[2].response.is_err());
        assert_eq!(gw.calls_for(Role::Setup), 2);
    }

    #[test]
    fn embedding_dimension_is_checked() {
        let mut fx = FixtureEmbedder::new(3);
        fx.insert("bad", vec![1.0, 0.0]);
        let gw = Gateway::new(Arc::new(ScriptedChat::new()), Arc::new(fx));
        assert!(matches!(gw.embed("bad"), Err(GatewayError::Dimension { .. })));
    }
}
