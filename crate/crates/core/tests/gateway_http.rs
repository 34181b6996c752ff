use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use vrpilot_core::gateway::RetryPolicy;
use vrpilot_core::{ChatBackend, ChatRequest, FinishReason, GatewayError, OpenAiBackend, Turn};

struct Seen {
    auth: String,
    path: String,
    body: Vec<u8>,
}

/// Serves the given (status, body) pairs in order, one per connection.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap().to_string();
            let mut length = 0;
            let mut auth = String::new();
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
                    "authorization" => auth = value.trim().to_string(),
                    _ => {}
                }
            }
            let mut payload = vec![0; length];
            reader.read_exact(&mut payload).unwrap();
            log.lock().unwrap().push(Seen {
                auth,
                path,
                body: payload,
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (base, seen, handle)
}

fn ok_body(content: &str, finish: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": content}, "finish_reason": finish}]
    })
    .to_string()
}

fn backend(base: &str) -> OpenAiBackend {
    OpenAiBackend::new(base, "sk-test", Duration::from_secs(5))
        .unwrap()
        .with_retry(RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(10),
            multiplier: 2,
        })
}

fn request() -> ChatRequest {
    ChatRequest {
        model_name: "gpt-3.5-turbo".into(),
        system: "You are a chatbot for vulnerability repair".into(),
        turns: vec![Turn::user("Q: fix it\nA: Let's think step by step")],
        temperature: 0.25,
        max_tokens: 2048,
    }
}

#[test]
fn retries_transient_statuses_with_identical_body() {
    let (base, seen, handle) = serve(vec![
        (500, "{}".into()),
        (429, "{}".into()),
        (200, ok_body("fixed", "stop")),
    ]);
    let response = backend(&base).complete(&request()).unwrap();
    handle.join().unwrap();
    assert_eq!(response.content, "fixed");
    assert_eq!(response.finish_reason, FinishReason::Stop);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert!(seen.iter().all(|s| s.body == seen[0].body));
    assert!(seen.iter().all(|s| s.path == "/v1/chat/completions"));
    assert_eq!(seen[0].auth, "Bearer sk-test");
    let body: serde_json::Value = serde_json::from_slice(&seen[0].body).unwrap();
    assert_eq!(body["model"], "gpt-3.5-turbo");
    assert_eq!(body["temperature"], 0.25);
    assert_eq!(body["max_tokens"], 2048);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["role"], "user");
}

#[test]
fn gives_up_after_three_attempts() {
    let (base, seen, handle) = serve(vec![
        (503, "a".into()),
        (503, "b".into()),
        (503, "c".into()),
    ]);
    let err = backend(&base).complete(&request()).unwrap_err();
    handle.join().unwrap();
    assert!(
        matches!(
            err,
            GatewayError::Http {
                status: 503,
                attempts: 3,
                ..
            }
        ),
        "{err}"
    );
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (base, seen, handle) = serve(vec![(400, "bad request".into())]);
    let err = backend(&base).complete(&request()).unwrap_err();
    handle.join().unwrap();
    match err {
        GatewayError::Http {
            status,
            attempts,
            body,
        } => {
            assert_eq!((status, attempts), (400, 1));
            assert_eq!(body, "bad request");
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn length_finish_and_empty_content() {
    let (base, _, handle) = serve(vec![
        (200, ok_body("partial", "length")),
        (200, ok_body("", "stop")),
        (200, "{\"choices\": []}".into()),
    ]);
    let b = backend(&base);
    assert_eq!(
        b.complete(&request()).unwrap().finish_reason,
        FinishReason::Length
    );
    assert_eq!(
        b.complete(&request()).unwrap().finish_reason,
        FinishReason::Error
    );
    assert!(matches!(
        b.complete(&request()),
        Err(GatewayError::BadResponse(_))
    ));
    handle.join().unwrap();
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let err = backend(&format!("http://127.0.0.1:{port}/v1"))
        .complete(&request())
        .unwrap_err();
    assert!(
        matches!(err, GatewayError::Transport { attempts: 3, .. }),
        "{err}"
    );
}

#[test]
fn invalid_requests_never_reach_the_wire() {
    let mut r = request();
    r.temperature = 3.0;
    let b = OpenAiBackend::new("http://127.0.0.1:9/v1", "k", Duration::from_secs(1)).unwrap();
    assert!(matches!(
        b.complete(&r),
        Err(GatewayError::InvalidRequest(_))
    ));
}
