use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use promptprism::llm_gateway::{HttpBackend, HttpBackendConfig};
use promptprism::{ChatRequest, Gateway, GatewayConfig, GatewayError};

struct Seen {
    path: String,
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves one canned (status, body) reply per connection, in order.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let (mut len, mut auth) = (0usize, None);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_owned()),
                    _ => {}
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let _ = tx.send(Seen {
                path: request_line.split_whitespace().nth(1).unwrap_or("").to_owned(),
                auth,
                body: serde_json::from_slice(&body).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1"), rx)
}

fn backend(base_url: String, key_env: &str) -> HttpBackend {
    HttpBackend::new(HttpBackendConfig {
        base_url,
        model: "test-model".into(),
        api_key_env: key_env.into(),
        timeout_secs: 10,
    })
}

fn fast() -> GatewayConfig {
    GatewayConfig {
        base_backoff_ms: 1,
        ..GatewayConfig::default()
    }
}

#[test]
fn retries_transient_status_then_succeeds() {
    std::env::set_var("PROMPTPRISM_TEST_KEY_A", "sk-test");
    let ok = r#"{"choices":[{"message":{"role":"assistant","content":"Paris"}}]}"#;
    let (url, seen) = serve(vec![(503, "{}".into()), (200, ok.into())]);
    let gw = Gateway::new(fast()).with_backend("live", backend(url, "PROMPTPRISM_TEST_KEY_A"));
    let req = ChatRequest::user("live", "Capital of France?").with_seed(Some(4));
    assert_eq!(gw.chat(&req).unwrap(), "Paris");

    let first = seen.recv().unwrap();
    assert_eq!(first.path, "/v1/chat/completions");
    assert_eq!(first.auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(first.body["model"], "test-model");
    assert_eq!(first.body["messages"][0]["content"], "Capital of France?");
    assert_eq!(first.body["seed"], 4);
    let rec = &gw.transcript()[0];
    assert_eq!(rec.retries, 1);
    assert_eq!(rec.response.as_deref(), Some("Paris"));
}

#[test]
fn client_errors_are_not_retried() {
    std::env::set_var("PROMPTPRISM_TEST_KEY_B", "sk-test");
    let (url, _seen) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
    let gw = Gateway::new(fast()).with_backend("live", backend(url, "PROMPTPRISM_TEST_KEY_B"));
    let err = gw.chat(&ChatRequest::user("live", "x")).unwrap_err();
    assert!(
        matches!(err, GatewayError::Transport { transient: false, .. }),
        "{err:?}"
    );
    assert_eq!(gw.transcript()[0].retries, 0);
    assert!(gw.transcript()[0].error.is_some());
}

#[test]
fn missing_key_is_reported_before_any_request() {
    let gw = Gateway::new(fast()).with_backend(
        "live",
        backend("http://127.0.0.1:9".into(), "PROMPTPRISM_TEST_KEY_UNSET"),
    );
    let err = gw.chat(&ChatRequest::user("live", "x")).unwrap_err();
    assert!(matches!(err, GatewayError::AuthMissing(ref v) if v == "PROMPTPRISM_TEST_KEY_UNSET"));
}
