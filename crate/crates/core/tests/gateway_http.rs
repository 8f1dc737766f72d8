//! The HTTP transports against a local stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use hyperstate_core::agents::{
    BackendRequest, CodeInterpreter, ExecutionRequest, GenerationRequest, HttpBackend, PortRole, RemotePort,
    TextGenerator,
};
use hyperstate_core::gateway::http::{ApiKey, HttpChatTransport, HttpConfig};
use hyperstate_core::gateway::{CompletionRequest, Constraint, Gateway, GatewayError, GatewayPolicy, Message};
use serde_json::{json, Value};

const SECRET: &str = "sk-test-0123456789abcdef";

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    headers: Vec<(String, String)>,
    body: Value,
}

/// Serves the scripted (status, body) replies in order, one per connection.
fn stub(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let mut headers = Vec::new();
            let mut len = 0;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                if k.eq_ignore_ascii_case("content-length") {
                    len = v.trim().parse().unwrap();
                }
                headers.push((k.to_ascii_lowercase(), v.trim().to_string()));
            }
            let mut raw = vec![0; len];
            reader.read_exact(&mut raw).unwrap();
            log.lock().unwrap().push(Seen { path, headers, body: serde_json::from_slice(&raw).unwrap() });
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn chat_ok(text: &str) -> (u16, String) {
    (200, json!({"choices":[{"index":0,"message":{"role":"assistant","content":text}}]}).to_string())
}

fn gateway(url: &str, retries: u32) -> Gateway {
    let transport = HttpChatTransport::new(HttpConfig {
        endpoint: url.into(),
        api_key: Some(ApiKey::new(SECRET)),
        timeout: Duration::from_secs(5),
        guided_field: Some("guided_choice".into()),
    });
    Gateway::new(
        Arc::new(transport),
        GatewayPolicy { timeout: Duration::from_secs(5), retries, backoff: Duration::from_millis(1) },
    )
}

fn request() -> CompletionRequest {
    let mut r = CompletionRequest::new("controller", vec![Message::system("pre"), Message::user("prompt")]);
    r.constraint = Some(Constraint { allowed_completions: vec!["<NextState>Final</NextState>".into()] });
    r.seed = Some(4);
    r
}

/// Captures everything logged at any level while `f` runs.
fn logged<T>(f: impl FnOnce() -> T) -> (T, String) {
    #[derive(Clone)]
    struct Buf(Arc<Mutex<Vec<u8>>>);
    impl Write for Buf {
        fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(b);
            Ok(b.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }
    let buf = Buf(Arc::new(Mutex::new(Vec::new())));
    let writer = buf.clone();
    let subscriber = tracing_subscriber::fmt()
        .with_max_level(tracing::Level::TRACE)
        .with_writer(move || writer.clone())
        .with_ansi(false)
        .finish();
    let out = tracing::subscriber::with_default(subscriber, f);
    let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
    (out, text)
}

#[test]
fn sends_chat_shape_with_bearer_header() {
    let (url, seen) = stub(vec![chat_ok("<NextState>Final</NextState>")]);
    let (reply, logs) = logged(|| gateway(&url, 0).complete(&request()));
    let reply = reply.unwrap();
    assert_eq!(reply.text, "<NextState>Final</NextState>");
    assert_eq!(reply.attempts, 1);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(
        seen[0].body,
        json!({"model":"controller","messages":[{"role":"system","content":"pre"},{"role":"user","content":"prompt"}],
               "temperature":0.0,"max_tokens":256,"seed":4,"guided_choice":["<NextState>Final</NextState>"]})
    );
    let auth = seen[0].headers.iter().find(|(k, _)| k == "authorization").unwrap();
    assert_eq!(auth.1, format!("Bearer {SECRET}"));
    assert!(!logs.is_empty());
    assert!(!logs.contains(SECRET));
}

#[test]
fn server_errors_are_retried() {
    let (url, seen) = stub(vec![(503, "{}".into()), (500, "{}".into()), chat_ok("ok")]);
    let (reply, logs) = logged(|| gateway(&url, 2).complete(&request()));
    assert_eq!(reply.unwrap().attempts, 3);
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert!(logs.contains("503"));
    assert!(!logs.contains(SECRET));
}

#[test]
fn retry_budget_runs_out() {
    let (url, _) = stub(vec![(502, "{}".into()), (502, "{}".into())]);
    let err = gateway(&url, 1).complete(&request()).unwrap_err();
    assert!(matches!(err, GatewayError::Exhausted { attempts: 2, .. }), "{err}");
    assert!(!err.to_string().contains(SECRET));
    assert!(!format!("{err:?}").contains(SECRET));
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = stub(vec![(401, r#"{"error":"bad key"}"#.into()), chat_ok("never")]);
    let err = gateway(&url, 3).complete(&request()).unwrap_err();
    assert!(matches!(err, GatewayError::Configuration(_)), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
    assert!(!err.to_string().contains(SECRET));
}

#[test]
fn malformed_body_is_a_rejection() {
    let (url, _) = stub(vec![(200, "not json".into())]);
    let err = gateway(&url, 3).complete(&request()).unwrap_err();
    assert!(matches!(err, GatewayError::Configuration(_)), "{err}");
}

#[test]
fn unreachable_endpoint_exhausts() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    drop(listener);
    let err = gateway(&url, 1).complete(&request()).unwrap_err();
    assert!(matches!(err, GatewayError::Exhausted { attempts: 2, .. }), "{err}");
}

#[test]
fn backend_wire_protocol() {
    let (url, seen) = stub(vec![
        (200, json!({"ok": true, "text_or_result": "final_answer = 'x'", "error": null}).to_string()),
        (200, json!({"ok": false, "text_or_result": null, "error": "NameError: y"}).to_string()),
        (500, "{}".into()),
    ]);
    let port = RemotePort::new(Arc::new(HttpBackend::new(url, Duration::from_secs(5))));
    let text = port
        .generate(&GenerationRequest {
            role: PortRole::CodeGenerator,
            episode_id: "ep-1".into(),
            prompt: "write code".into(),
            attempt: 0,
            seed: 3,
        })
        .unwrap();
    assert_eq!(text, "final_answer = 'x'");
    let out = port
        .execute(&ExecutionRequest {
            episode_id: "ep-1".into(),
            code: "print(y)".into(),
            prior_code: vec![],
            variables: vec![],
            attempt: 0,
            seed: 3,
        })
        .unwrap();
    assert_eq!(out.error.as_deref(), Some("NameError: y"));
    let err = port
        .generate(&GenerationRequest {
            role: PortRole::InstructionGenerator,
            episode_id: "ep-1".into(),
            prompt: "p".into(),
            attempt: 1,
            seed: 3,
        })
        .unwrap_err();
    assert!(err.to_string().contains("500"), "{err}");

    let seen = seen.lock().unwrap();
    let first: BackendRequest = serde_json::from_value(seen[0].body.clone()).unwrap();
    assert_eq!(first.role, PortRole::CodeGenerator);
    assert_eq!(first.episode_id, "ep-1");
    assert_eq!(seen[0].body["prompt_or_code"], "write code");
    assert_eq!(seen[1].body["role"], "code_interpreter");
    assert_eq!(seen[1].body["prompt_or_code"], "print(y)");
}
