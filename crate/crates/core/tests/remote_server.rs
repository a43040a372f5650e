//! The remote backend against a scripted local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use clot_core::gateway::{DecodeSettings, GatewayError, LlmBackend, LlmRequest, RemoteBackend, RemoteConfig};
use serde_json::Value;

struct Captured {
    method: String,
    path: String,
    headers: Vec<(String, String)>,
    body: String,
}

fn read_request(stream: &mut TcpStream) -> Captured {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut headers = Vec::new();
    let mut len = 0usize;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).unwrap();
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            let (k, v) = (k.trim().to_ascii_lowercase(), v.trim().to_string());
            if k == "content-length" {
                len = v.parse().unwrap();
            }
            headers.push((k, v));
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    Captured {
        method,
        path,
        headers,
        body: String::from_utf8(body).unwrap(),
    }
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        429 => "Too Many Requests",
        _ => "Error",
    };
    let msg = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(msg.as_bytes()).unwrap();
}

/// Serves one scripted (status, body) per connection and records requests.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in script {
            let (mut stream, _) = listener.accept().unwrap();
            let req = read_request(&mut stream);
            respond(&mut stream, status, &body);
            log.lock().unwrap().push(req);
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn reply(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn backend(base: &str) -> RemoteBackend {
    let mut cfg = RemoteConfig::new(base, "test-model");
    cfg.api_key = Some("secret".into());
    cfg.backoff = Duration::from_millis(5);
    cfg.timeout = Duration::from_secs(5);
    RemoteBackend::new(cfg)
}

#[test]
fn sends_chat_schema_and_reads_reply() {
    let (base, seen) = serve(vec![(200, reply("A. ping"))]);
    let b = backend(&base);
    let req = LlmRequest::new("pick one", Some("http://img/x.png".into()), DecodeSettings::discrimination().with_seed(9));
    assert_eq!(b.complete(&req).unwrap(), "A. ping");
    let seen = seen.lock().unwrap();
    let r = &seen[0];
    assert_eq!((r.method.as_str(), r.path.as_str()), ("POST", "/v1/chat/completions"));
    assert!(r.headers.iter().any(|(k, v)| k == "authorization" && v == "Bearer secret"));
    let body: Value = serde_json::from_str(&r.body).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["seed"], 9);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"][0]["text"], "pick one");
    assert_eq!(body["messages"][0]["content"][1]["type"], "image_url");
}

#[test]
fn retries_transient_failures_then_succeeds() {
    let (base, seen) = serve(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (200, reply("finally")),
    ]);
    let req = LlmRequest::new("x", None, DecodeSettings::generation());
    assert_eq!(backend(&base).complete(&req).unwrap(), "finally");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (base, seen) = serve(vec![(400, "{\"error\":\"bad\"}".into()), (200, reply("never"))]);
    let req = LlmRequest::new("x", None, DecodeSettings::generation());
    let err = backend(&base).complete(&req).unwrap_err();
    assert!(matches!(err, GatewayError::Status { status: 400, .. }), "{err}");
    thread::sleep(Duration::from_millis(50));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn exhausted_retries_report_attempts() {
    let (base, _) = serve(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into())]);
    let req = LlmRequest::new("x", None, DecodeSettings::generation());
    let err = backend(&base).complete(&req).unwrap_err();
    assert!(matches!(err, GatewayError::Transport { attempts: 3, .. }), "{err}");
}

#[test]
fn malformed_reply_is_a_protocol_error() {
    let (base, _) = serve(vec![(200, "{\"choices\": []}".into())]);
    let req = LlmRequest::new("x", None, DecodeSettings::generation());
    assert!(matches!(backend(&base).complete(&req), Err(GatewayError::Protocol(_))));
}

#[test]
fn health_reports_model_identity() {
    let (base, seen) = serve(vec![(200, "{\"model\":\"echo\"}".into())]);
    assert_eq!(backend(&base).health().unwrap(), "echo");
    let seen = seen.lock().unwrap();
    assert_eq!((seen[0].method.as_str(), seen[0].path.as_str()), ("GET", "/v1/health"));
}
