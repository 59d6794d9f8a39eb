//! Small text helpers shared by the agents: bounded excerpts, error-line
//! extraction and pulling a JSON document out of a model reply.

use std::sync::OnceLock;

use regex::Regex;
use serde_json::Value;

const ELLIPSIS: &str = "\n...[truncated]...\n";

/// Keeps the head and tail of `s` so the result has at most `max` chars.
pub fn truncate_middle(s: &str, max: usize) -> String {
    let len = s.chars().count();
    if len <= max {
        return s.to_string();
    }
    let marker = ELLIPSIS.chars().count();
    if max <= marker {
        return s.chars().take(max).collect();
    }
    let keep = max - marker;
    let head = keep / 2;
    let tail = keep - head;
    let mut out: String = s.chars().take(head).collect();
    out.push_str(ELLIPSIS);
    out.extend(s.chars().skip(len - tail));
    out
}

/// Keeps at most `max` chars from the start.
pub fn truncate_head(s: &str, max: usize) -> String {
    s.chars().take(max).collect()
}

/// The last `n` lines of `s`.
pub fn last_lines(s: &str, n: usize) -> String {
    let lines: Vec<&str> = s.lines().collect();
    let start = lines.len().saturating_sub(n);
    lines[start..].join("\n")
}

fn error_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"Error|error:|Traceback|failed|exit code[:=\s]+-?[1-9][0-9]*").unwrap()
    })
}

/// Whether a single line looks like an error report.
pub fn is_error_line(line: &str) -> bool {
    error_pattern().is_match(line)
}

/// Lines of `s` matching the fixed error pattern set, in order.
pub fn error_lines(s: &str) -> Vec<&str> {
    s.lines().filter(|l| is_error_line(l)).collect()
}

/// Extracts the first JSON object from a model reply.
///
/// Accepts a bare document, a fenced ```json block, or prose around a
/// `{...}` span.
pub fn extract_json(reply: &str) -> Result<Value, String> {
    let trimmed = reply.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return Ok(v);
    }
    if let Some(start) = trimmed.find("```") {
        let after = &trimmed[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        if let Some(end) = body.find("```") {
            if let Ok(v) = serde_json::from_str::<Value>(body[..end].trim()) {
                return Ok(v);
            }
        }
    }
    match (trimmed.find('{'), trimmed.rfind('}')) {
        (Some(a), Some(b)) if a < b => serde_json::from_str::<Value>(&trimmed[a..=b])
            .map_err(|e| format!("reply is not valid JSON: {e}")),
        _ => Err("reply contains no JSON object".to_string()),
    }
}

/// String field accessor that treats `null` and missing alike.
pub fn str_field<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str)
}
