//! HttpBackend against a throwaway HTTP/1.1 server on localhost.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use dcq_core::gateway::{CompletionRequest, FinishReason, GatewayError, HttpBackend, ModelEndpoint, RetryPolicy};
use dcq_core::CompletionBackend;
use serde_json::Value;

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    authorization: Option<String>,
    body: String,
}

/// Serves `replies` in order, one per connection, and records each request.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                path: request_line.split_whitespace().nth(1).unwrap_or_default().to_string(),
                authorization,
                body: String::from_utf8(buf).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
    });
    (url, seen)
}

fn ok_body(text: &str, finish: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": finish}]})
        .to_string()
}

fn backend(url: &str, max_retries: u32) -> HttpBackend {
    let endpoint = ModelEndpoint {
        endpoint_url: url.into(),
        model_id: "gpt-test".into(),
        api_key_ref: "DCQ_TEST_KEY".into(),
        timeout_secs: 10,
        max_retries,
        max_in_flight: 2,
    };
    HttpBackend::with_key(endpoint, "secret-token".into()).with_retry_policy(RetryPolicy {
        max_retries,
        base_delay: Duration::from_millis(1),
        max_delay: Duration::from_millis(5),
    })
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen) = serve(vec![
        (500, "{}".into()),
        (429, "{}".into()),
        (200, ok_body("D)", "stop")),
    ]);
    let b = backend(&url, 3);
    let resp = b.complete(&CompletionRequest::quiz("Answer:")).unwrap();
    assert_eq!(resp.text, "D)");
    assert_eq!(resp.finish_reason, FinishReason::Stop);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer secret-token"));
    // identical bytes on every retry
    assert!(seen.iter().all(|s| s.body == seen[0].body));
    let body: Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "gpt-test");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "Answer:");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["max_tokens"], 5);
}

#[test]
fn gives_up_after_max_retries() {
    let (url, seen) = serve(vec![(503, "{}".into()), (503, "{}".into()), (503, "{}".into())]);
    let err = backend(&url, 2).complete(&CompletionRequest::quiz("q")).unwrap_err();
    match err {
        GatewayError::Transport { attempts, .. } => assert_eq!(attempts, 3),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn unauthorized_is_not_retried() {
    let (url, seen) = serve(vec![(401, r#"{"error":"bad key"}"#.into())]);
    let err = backend(&url, 3).complete(&CompletionRequest::quiz("q")).unwrap_err();
    assert!(matches!(err, GatewayError::Auth(_)), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn content_filter_is_reported_once() {
    let (url, seen) = serve(vec![(200, ok_body("", "content_filter"))]);
    let err = backend(&url, 3).complete(&CompletionRequest::quiz("q")).unwrap_err();
    assert!(matches!(err, GatewayError::Filtered(_)), "{err:?}");
    let (url2, seen2) = serve(vec![(400, r#"{"error":{"code":"content_filter"}}"#.into())]);
    let err = backend(&url2, 3).complete(&CompletionRequest::quiz("q")).unwrap_err();
    assert!(matches!(err, GatewayError::Filtered(_)), "{err:?}");
    assert_eq!(seen.lock().unwrap().len() + seen2.lock().unwrap().len(), 2);
}

#[test]
fn generation_requests_use_generation_settings() {
    let (url, seen) = serve(vec![(200, ok_body("A) x\nB) y\nC) z", "length"))]);
    let resp = backend(&url, 0)
        .complete(&CompletionRequest::generation("perturb"))
        .unwrap();
    assert_eq!(resp.finish_reason, FinishReason::Length);
    let body: Value = serde_json::from_str(&seen.lock().unwrap()[0].body).unwrap();
    assert_eq!(body["temperature"], 1.0);
    assert_eq!(body["max_tokens"], 4000);
}
