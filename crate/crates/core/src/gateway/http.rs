//! OpenAI-compatible chat-completion backend.

use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendError, ChatBackend, Completion, CompletionRequest, Usage};

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::permanent(e.to_string()))?;
        Ok(HttpBackend {
            client,
            endpoint: endpoint.into(),
            api_key,
        })
    }
}

pub(crate) fn request_body(request: &CompletionRequest, model: &str) -> Value {
    let mut messages = Vec::new();
    if !request.system_text.is_empty() {
        messages.push(json!({"role": "system", "content": request.system_text}));
    }
    messages.push(json!({"role": "user", "content": request.user_text}));
    let mut body = json!({
        "model": model,
        "messages": messages,
        "temperature": request.temperature,
    });
    if request.structured_output {
        body["response_format"] = json!({"type": "json_object"});
    }
    body
}

pub(crate) fn parse_response(body: &Value) -> Result<Completion, BackendError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::permanent("response has no choices[0].message.content"))?;
    let usage = match (
        body.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
        body.pointer("/usage/completion_tokens")
            .and_then(Value::as_u64),
    ) {
        (Some(prompt_tokens), Some(completion_tokens)) => Some(Usage {
            prompt_tokens,
            completion_tokens,
        }),
        _ => None,
    };
    Ok(Completion {
        text: text.to_string(),
        usage,
    })
}

impl ChatBackend for HttpBackend {
    fn complete(
        &self,
        request: &CompletionRequest,
        model: &str,
    ) -> Result<Completion, BackendError> {
        let mut req = self
            .client
            .post(&self.endpoint)
            .json(&request_body(request, model));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(BackendError::permanent(format!("HTTP {status}: {text}")));
        }
        let body: Value = resp
            .json()
            .map_err(|e| BackendError::permanent(e.to_string()))?;
        parse_response(&body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_carries_response_format_only_when_structured() {
        let mut r = CompletionRequest::new("sys", "hello");
        r.temperature = 1.0;
        let b = request_body(&r, "m");
        assert!(b.get("response_format").is_none());
        assert_eq!(b["messages"][0]["role"], "system");
        r.structured_output = true;
        assert_eq!(
            request_body(&r, "m")["response_format"]["type"],
            "json_object"
        );
    }

    #[test]
    fn parses_content_and_usage() {
        let body = json!({
            "choices": [{"message": {"role": "assistant", "content": "{\"a\":1}"}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 5}
        });
        let c = parse_response(&body).unwrap();
        assert_eq!(c.text, "{\"a\":1}");
        assert_eq!(c.usage.unwrap().completion_tokens, 5);
        assert!(parse_response(&json!({"choices": []})).is_err());
    }
}
