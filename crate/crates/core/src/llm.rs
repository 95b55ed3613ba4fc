//! Chat-completion client used for program synthesis, test generation,
//! re-prompting and layout planning.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::transport::{RetryPolicy, ServiceClient, ServiceError, Transport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }
}

/// Wire shape of a chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub n: usize,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>, n: usize, sampling: &Sampling) -> Self {
        ChatRequest {
            model: sampling.model.clone(),
            messages,
            temperature: sampling.temperature,
            top_p: sampling.top_p,
            n,
        }
    }

    /// Content of the final user message, which carries the rendered prompt.
    pub fn prompt(&self) -> &str {
        self.messages.iter().rev().find(|m| m.role == "user").map_or("", |m| m.content.as_str())
    }
}

/// Model name and sampling parameters forwarded with every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sampling {
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling { model: "default".into(), temperature: 0.7, top_p: 0.9 }
    }
}

pub trait ChatClient: Send + Sync {
    /// Returns the content of every returned choice, in order.
    fn complete(&self, request: &ChatRequest) -> Result<Vec<String>, ServiceError>;
}

/// Extracts `choices[*].message.content` from a chat-completion response.
pub fn parse_chat_response(resp: &Value) -> Result<Vec<String>, ServiceError> {
    let choices = resp
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| ServiceError::malformed("chat", "missing choices array"))?;
    choices
        .iter()
        .map(|c| {
            c.pointer("/message/content")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| ServiceError::malformed("chat", "choice without message.content"))
        })
        .collect()
}

pub struct HttpChatClient {
    url: String,
    client: ServiceClient,
}

impl HttpChatClient {
    pub fn new(url: impl Into<String>, client: ServiceClient) -> Self {
        HttpChatClient { url: url.into(), client }
    }

    pub fn http(url: impl Into<String>, api_key: Option<&str>, max_in_flight: usize, timeout: Duration) -> Self {
        let mut client = ServiceClient::http(max_in_flight, RetryPolicy::default(), timeout);
        if let Some(key) = api_key {
            client.headers.push(("Authorization".into(), format!("Bearer {key}")));
        }
        Self::new(url, client)
    }

    pub fn with_transport(url: impl Into<String>, transport: Box<dyn Transport>) -> Self {
        Self::new(url, ServiceClient::new(transport, 4, RetryPolicy::none(), Duration::from_secs(60)))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<Vec<String>, ServiceError> {
        let body = serde_json::to_value(request).expect("chat requests serialize");
        let resp = self.client.post(&self.url, &body)?;
        parse_chat_response(&resp)
    }
}

type Responder = dyn Fn(&ChatRequest) -> Result<Vec<String>, ServiceError> + Send + Sync;

/// In-process chat client for tests and fixtures. Either replays a queue of
/// canned responses in order or delegates to a closure. Every request is
/// logged.
pub struct ScriptedChat {
    queue: Mutex<VecDeque<Vec<String>>>,
    responder: Option<Box<Responder>>,
    log: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChat {
    pub fn queued(responses: Vec<Vec<String>>) -> Self {
        ScriptedChat { queue: Mutex::new(responses.into()), responder: None, log: Mutex::new(Vec::new()) }
    }

    pub fn with(f: impl Fn(&ChatRequest) -> Result<Vec<String>, ServiceError> + Send + Sync + 'static) -> Self {
        ScriptedChat { queue: Mutex::new(VecDeque::new()), responder: Some(Box::new(f)), log: Mutex::new(Vec::new()) }
    }

    pub fn calls(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().unwrap().clone()
    }
}

impl ChatClient for ScriptedChat {
    fn complete(&self, request: &ChatRequest) -> Result<Vec<String>, ServiceError> {
        self.log.lock().unwrap().push(request.clone());
        if let Some(f) = &self.responder {
            return f(request);
        }
        self.queue
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| ServiceError::malformed("scripted chat", "response queue exhausted"))
    }
}
