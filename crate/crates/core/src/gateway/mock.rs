//! Scripted transports for tests and offline simulation.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use super::{ChatTransport, CompletionRequest, TransportError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockResponse {
    Reply(String),
    Transient(String),
    Rejected(String),
}

/// One scripted response, optionally gated on a substring of the request's
/// message contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockStep {
    pub matches: Option<String>,
    pub response: MockResponse,
}

impl MockStep {
    pub fn reply(text: impl Into<String>) -> Self {
        MockStep { matches: None, response: MockResponse::Reply(text.into()) }
    }

    pub fn transient(msg: impl Into<String>) -> Self {
        MockStep { matches: None, response: MockResponse::Transient(msg.into()) }
    }

    pub fn rejected(msg: impl Into<String>) -> Self {
        MockStep { matches: None, response: MockResponse::Rejected(msg.into()) }
    }

    pub fn when(mut self, substring: impl Into<String>) -> Self {
        self.matches = Some(substring.into());
        self
    }
}

#[derive(Debug, Default)]
struct MockState {
    script: VecDeque<MockStep>,
    requests: Vec<CompletionRequest>,
}

pub struct MockTransport {
    state: Arc<Mutex<MockState>>,
}

/// Observer for a [`MockTransport`]: every transport call is recorded.
#[derive(Clone)]
pub struct MockHandle {
    state: Arc<Mutex<MockState>>,
}

impl MockHandle {
    pub fn calls(&self) -> usize {
        self.state.lock().expect("mock poisoned").requests.len()
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.state.lock().expect("mock poisoned").requests.clone()
    }

    pub fn remaining(&self) -> usize {
        self.state.lock().expect("mock poisoned").script.len()
    }
}

/// Creates a transport that answers from `script`, plus a handle to inspect it.
pub fn install_mock(script: Vec<MockStep>) -> (Arc<MockTransport>, MockHandle) {
    let state = Arc::new(Mutex::new(MockState { script: script.into(), requests: Vec::new() }));
    (Arc::new(MockTransport { state: state.clone() }), MockHandle { state })
}

impl ChatTransport for MockTransport {
    fn send(&self, request: &CompletionRequest) -> Result<String, TransportError> {
        let mut state = self.state.lock().expect("mock poisoned");
        state.requests.push(request.clone());
        let content = request.joined_content();
        let pos = state
            .script
            .iter()
            .position(|s| s.matches.as_deref().is_none_or(|m| content.contains(m)))
            .ok_or(TransportError::MockExhausted)?;
        let step = state.script.remove(pos).expect("position is in range");
        match step.response {
            MockResponse::Reply(text) => Ok(text),
            MockResponse::Transient(msg) => Err(TransportError::Transient(msg)),
            MockResponse::Rejected(msg) => Err(TransportError::Rejected(msg)),
        }
    }
}

/// Transport backed by a pure function of the request.
pub struct FnTransport<F>(pub F);

impl<F> ChatTransport for FnTransport<F>
where
    F: Fn(&CompletionRequest) -> Result<String, TransportError> + Send + Sync,
{
    fn send(&self, request: &CompletionRequest) -> Result<String, TransportError> {
        (self.0)(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, GatewayError, GatewayPolicy, Message};
    use std::time::Duration;

    fn gw(t: Arc<MockTransport>) -> Gateway {
        Gateway::new(t, GatewayPolicy { timeout: Duration::from_secs(1), retries: 0, backoff: Duration::ZERO })
    }

    fn ask(g: &Gateway, content: &str) -> Result<String, GatewayError> {
        g.complete(&CompletionRequest::new("m", vec![Message::user(content)])).map(|c| c.text)
    }

    #[test]
    fn lanes_route_by_substring() {
        let (t, h) = install_mock(vec![
            MockStep::reply("<PythonCode>x = 1</PythonCode>").when("<CodeAPI>"),
            MockStep::reply("<NextState>Final</NextState>").when("<StateCandidates>"),
            MockStep::reply("<PythonCode>x = 2</PythonCode>").when("<CodeAPI>"),
        ]);
        let g = gw(t);
        assert_eq!(ask(&g, "<StateCandidates>Final</StateCandidates>").unwrap(), "<NextState>Final</NextState>");
        assert_eq!(ask(&g, "<CodeAPI></CodeAPI>").unwrap(), "<PythonCode>x = 1</PythonCode>");
        assert_eq!(ask(&g, "<CodeAPI></CodeAPI>").unwrap(), "<PythonCode>x = 2</PythonCode>");
        assert_eq!(h.remaining(), 0);
    }

    #[test]
    fn empty_script_reports_exhaustion() {
        let (t, _) = install_mock(vec![]);
        let err = ask(&gw(t), "anything").unwrap_err();
        assert_eq!(err, GatewayError::MockExhausted);
        assert_eq!(err.to_string(), "mock exhausted");
    }
}
