use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde_json::Value;

use super::{ChatBackend, GatewayError, Message, ResponseContract, Role};

/// Replays queued responses per role and fails loudly once a queue is empty.
///
/// Fixture files are JSON objects `{role: [response, ...]}`. A response that
/// is not a JSON string is re-serialized, so structured replies can be written
/// inline as objects.
#[derive(Debug, Default)]
pub struct ScriptedChat {
    queues: Mutex<HashMap<Role, VecDeque<String>>>,
}

impl ScriptedChat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, role: Role, response: impl Into<String>) {
        self.queues
            .lock()
            .unwrap()
            .entry(role)
            .or_default()
            .push_back(response.into());
    }

    pub fn push_json(&self, role: Role, response: &Value) {
        self.push(role, response_text(response));
    }

    pub fn from_value(script: &Value) -> Result<Self, String> {
        let map: BTreeMap<Role, Vec<Value>> = serde_json::from_value(script.clone())
            .map_err(|e| format!("invalid chat script: {e}"))?;
        let chat = Self::new();
        for (role, responses) in map {
            for r in responses {
                chat.push_json(role, &r);
            }
        }
        Ok(chat)
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_value(&value)
    }

    pub fn remaining(&self, role: Role) -> usize {
        self.queues.lock().unwrap().get(&role).map_or(0, VecDeque::len)
    }
}

fn response_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl ChatBackend for ScriptedChat {
    fn complete(
        &self,
        role: Role,
        _messages: &[Message],
        _contract: ResponseContract,
    ) -> Result<String, GatewayError> {
        let mut queues = self.queues.lock().unwrap();
        let queue = queues.get_mut(&role).ok_or(GatewayError::ScriptExhausted(role))?;
        let next = queue.pop_front().ok_or(GatewayError::ScriptExhausted(role))?;
        // a scripted "!fail" simulates a transport failure
        if next == "!fail" {
            return Err(GatewayError::Failure("scripted failure".into()));
        }
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn replays_in_order_per_role() {
        let chat = ScriptedChat::new();
        chat.push(Role::Setup, "A");
        chat.push(Role::Setup, "B");
        let call = |r| chat.complete(r, &[], ResponseContract::FreeText);
        assert_eq!(call(Role::Setup).unwrap(), "A");
        assert_eq!(call(Role::Setup).unwrap(), "B");
        assert_eq!(call(Role::Setup), Err(GatewayError::ScriptExhausted(Role::Setup)));
        assert_eq!(call(Role::Judge), Err(GatewayError::ScriptExhausted(Role::Judge)));
    }

    #[test]
    fn fixture_values_serialize_objects() {
        let chat = ScriptedChat::from_value(&json!({
            "setup": [{"action_type": "VERIFY"}, "plain"],
            "retriever_select": ["!fail"]
        }))
        .unwrap();
        let first = chat.complete(Role::Setup, &[], ResponseContract::StructuredDocument).unwrap();
        assert_eq!(serde_json::from_str::<Value>(&first).unwrap()["action_type"], "VERIFY");
        assert_eq!(chat.remaining(Role::Setup), 1);
        assert!(matches!(
            chat.complete(Role::RetrieverSelect, &[], ResponseContract::FreeText),
            Err(GatewayError::Failure(_))
        ));
        assert!(ScriptedChat::from_value(&json!({"nobody": []})).is_err());
    }
}
