use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};
use tabletalk_core::agents::{BackendError, ChatHttpBackend, Prompt, RetryPolicy};

#[derive(Clone, Debug)]
struct Seen {
    auth: Option<String>,
    body: Value,
}

/// Serves the canned `(status, body)` replies in order, one per connection,
/// repeating the last one.
fn mock(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut len, mut auth) = (0, None);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Seen { auth, body: serde_json::from_slice(&body).unwrap_or(Value::Null) });
            let (status, text) = &replies[i.min(replies.len() - 1)];
            let resp = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                text.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn content(text: &str) -> String {
    json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] }).to_string()
}

fn client(url: &str) -> ChatHttpBackend {
    let retry = RetryPolicy { attempts: 3, base_delay: Duration::from_millis(5), timeout: Duration::from_secs(5) };
    ChatHttpBackend::with_retry(url, "test-model", 0.6, "sk-test", retry)
}

fn prompt() -> Prompt {
    Prompt { system: "You are robot Alice.".into(), user: "Say hello.".into() }
}

#[test]
fn returns_assistant_content_and_sends_chat_request() {
    let (url, seen) = mock(vec![(200, content("Hello. PROCEED"))]);
    assert_eq!(client(&url).query(&prompt()).unwrap(), "Hello. PROCEED");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(
        seen[0].body,
        json!({
            "model": "test-model",
            "messages": [
                { "role": "system", "content": "You are robot Alice." },
                { "role": "user", "content": "Say hello." },
            ],
            "temperature": 0.6,
        })
    );
}

#[test]
fn server_errors_are_retried_then_reported() {
    let (url, seen) = mock(vec![(500, "{}".into())]);
    match client(&url).query(&prompt()) {
        Err(BackendError::Unavailable { attempts, last }) => {
            assert_eq!(attempts, 3);
            assert!(last.contains("500"));
        }
        other => panic!("expected Unavailable, got {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn recovers_after_transient_failures() {
    let (url, seen) = mock(vec![(503, "{}".into()), (429, "{}".into()), (200, content("third time"))]);
    assert_eq!(client(&url).query(&prompt()).unwrap(), "third time");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = mock(vec![(401, r#"{"error":"bad key"}"#.into())]);
    let err = client(&url).query(&prompt()).unwrap_err();
    assert!(err.to_string().contains("401"), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_body_is_reported() {
    let (url, _) = mock(vec![(200, r#"{"choices":[]}"#.into())]);
    assert!(matches!(client(&url).query(&prompt()), Err(BackendError::Malformed(_))));
    let (url, _) = mock(vec![(200, "not json".into())]);
    assert!(matches!(client(&url).query(&prompt()), Err(BackendError::Malformed(_))));
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}/v1/chat/completions");
    assert!(matches!(client(&url).query(&prompt()), Err(BackendError::Unavailable { attempts: 3, .. })));
}

#[test]
fn missing_key_is_a_credential_error() {
    if std::env::var_os(tabletalk_core::agents::API_KEY_ENV).is_some() {
        return;
    }
    let err = ChatHttpBackend::from_env("http://127.0.0.1:9/", "m", 0.6).err().unwrap();
    assert_eq!(err, BackendError::MissingCredential("ROCO_API_KEY".into()));
}

/// Runs only when `ROCO_API_KEY` and `ROCO_ENDPOINT` are set.
#[test]
fn live_smoke() {
    let (Ok(_), Ok(endpoint)) = (std::env::var("ROCO_API_KEY"), std::env::var("ROCO_ENDPOINT")) else {
        eprintln!("live smoke skipped: ROCO_API_KEY / ROCO_ENDPOINT not set");
        return;
    };
    let model = std::env::var("ROCO_MODEL").unwrap_or_else(|_| "gpt-4".into());
    let reply = ChatHttpBackend::from_env(&endpoint, &model, 0.0).unwrap().query(&prompt()).unwrap();
    assert!(!reply.trim().is_empty());
}
