use std::time::Duration;

use serde_json::{json, Value};

use super::{ChatBackend, EmbeddingBackend, GatewayError, Message, ResponseContract, Role};

/// Attempt count and exponential backoff schedule for remote calls.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

enum AttemptError {
    Retryable(String),
    Fatal(String),
}

struct HttpJson {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl HttpJson {
    fn new(url: String, api_key: Option<String>, timeout: Duration, retry: RetryPolicy) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Failure(format!("http client: {e}")))?;
        Ok(Self {
            client,
            url,
            api_key,
            retry,
        })
    }

    fn attempt(&self, body: &Value) -> Result<Value, AttemptError> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| AttemptError::Retryable(format!("transport: {e}")))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(AttemptError::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(AttemptError::Fatal(format!("HTTP {status}: {}", crate::text::truncate_head(&text, 300))));
        }
        resp.json::<Value>()
            .map_err(|e| AttemptError::Fatal(format!("invalid response body: {e}")))
    }

    fn post(&self, body: &Value) -> Result<Value, GatewayError> {
        let mut last = String::new();
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
            }
            match self.attempt(body) {
                Ok(v) => return Ok(v),
                Err(AttemptError::Fatal(e)) => return Err(GatewayError::Failure(e)),
                Err(AttemptError::Retryable(e)) => {
                    tracing::debug!(url = %self.url, attempt, error = %e, "retrying");
                    last = e;
                }
            }
        }
        Err(GatewayError::Failure(format!(
            "{} failed after {} attempts: {last}",
            self.url, self.retry.attempts
        )))
    }
}

/// Chat-completions client (`POST {base}/chat/completions`).
pub struct RemoteChat {
    http: HttpJson,
    model: String,
}

impl RemoteChat {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, retry: RetryPolicy) -> Result<Self, GatewayError> {
        let url = format!("{}/chat/completions", base_url.trim_end_matches('/'));
        Ok(Self {
            http: HttpJson::new(url, api_key, Duration::from_secs(300), retry)?,
            model: model.to_string(),
        })
    }
}

impl ChatBackend for RemoteChat {
    fn complete(&self, _role: Role, messages: &[Message], contract: ResponseContract) -> Result<String, GatewayError> {
        let mut body = json!({ "model": self.model, "messages": messages });
        if contract == ResponseContract::StructuredDocument {
            body["response_format"] = json!({ "type": "json_object" });
        }
        let v = self.http.post(&body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Failure("response has no choices[0].message.content".into()))
    }
}

/// Embeddings client (`POST {base}/embeddings`).
pub struct RemoteEmbedder {
    http: HttpJson,
    model: String,
    dim: usize,
}

impl RemoteEmbedder {
    pub fn new(
        base_url: &str,
        model: &str,
        dim: usize,
        api_key: Option<String>,
        retry: RetryPolicy,
    ) -> Result<Self, GatewayError> {
        let url = format!("{}/embeddings", base_url.trim_end_matches('/'));
        Ok(Self {
            http: HttpJson::new(url, api_key, Duration::from_secs(60), retry)?,
            model: model.to_string(),
            dim,
        })
    }
}

impl EmbeddingBackend for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let v = self.http.post(&json!({ "model": self.model, "input": text }))?;
        let arr = v
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Failure("response has no data[0].embedding".into()))?;
        arr.iter()
            .map(|x| x.as_f64().ok_or_else(|| GatewayError::Failure("non-numeric embedding".into())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves `responses` in order (repeating the last), counting requests.
    fn stub_server(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let count = Arc::new(AtomicUsize::new(0));
        let counter = count.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0u8; len];
                let _ = reader.read_exact(&mut body);
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let (status, payload) = responses[n.min(responses.len() - 1)].clone();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        (format!("http://{addr}"), count)
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(1),
        }
    }

    #[test]
    fn server_errors_exhaust_retries() {
        let (url, count) = stub_server(vec![(500, "{}".into())]);
        let chat = RemoteChat::new(&url, "m", None, fast()).unwrap();
        let err = chat
            .complete(Role::Setup, &[Message::user("hi")], ResponseContract::FreeText)
            .unwrap_err();
        assert!(matches!(err, GatewayError::Failure(_)));
        assert_eq!(count.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn transient_error_then_success() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"done"}}]}"#;
        let (url, count) = stub_server(vec![(503, "{}".into()), (200, ok.into())]);
        let chat = RemoteChat::new(&url, "m", Some("k".into()), fast()).unwrap();
        let out = chat
            .complete(Role::Judge, &[Message::user("hi")], ResponseContract::StructuredDocument)
            .unwrap();
        assert_eq!(out, "done");
        assert_eq!(count.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, count) = stub_server(vec![(400, r#"{"error":"bad"}"#.into())]);
        let chat = RemoteChat::new(&url, "m", None, fast()).unwrap();
        assert!(chat.complete(Role::Setup, &[], ResponseContract::FreeText).is_err());
        assert_eq!(count.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn embeddings_wire_format() {
        let (url, _) = stub_server(vec![(200, r#"{"data":[{"embedding":[0.5,-0.5,1.0]}]}"#.into())]);
        let e = RemoteEmbedder::new(&url, "m", 3, None, fast()).unwrap();
        assert_eq!(e.embed("x").unwrap(), vec![0.5, -0.5, 1.0]);
    }
}
