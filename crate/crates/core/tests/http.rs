use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use collabvd::backends::http::{ChatSettings, HttpChat, HttpDetector};
use collabvd::backends::{ChatModel, Detector, Message, RetryPolicy};
use collabvd::{BackendError, Verdict};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    body: Value,
    auth: Option<String>,
}

/// Serves `replies` in order, one per request, then stops.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, JoinHandle<()>) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", server.server_addr().to_ip().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = std::thread::spawn(move || {
        for (status, body) in replies {
            let Ok(Some(mut req)) = server.recv_timeout(Duration::from_secs(10)) else {
                return;
            };
            let mut text = String::new();
            req.as_reader().read_to_string(&mut text).unwrap();
            let auth = req
                .headers()
                .iter()
                .find(|h| h.field.equiv("Authorization"))
                .map(|h| h.value.to_string());
            log.lock().unwrap().push(Seen {
                body: serde_json::from_str(&text).unwrap_or(Value::Null),
                auth,
            });
            req.respond(tiny_http::Response::from_string(body).with_status_code(status))
                .unwrap();
        }
    });
    (url, seen, handle)
}

fn detector(url: &str) -> HttpDetector {
    HttpDetector::new(url, Duration::from_secs(5), RetryPolicy::no_backoff(3))
}

fn chat_settings(env: Option<&str>) -> ChatSettings {
    ChatSettings {
        model: "test-model".into(),
        temperature: 0.0,
        max_tokens: 64,
        timeout_secs: 5.0,
        api_key_env: env.map(str::to_string),
    }
}

fn completion(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

#[test]
fn detector_round_trip() {
    let (url, seen, h) = serve(vec![(
        200,
        r#"{"verdict":"vulnerable","score":0.91}"#.into(),
    )]);
    let r = detector(&url).predict(17, "int f();").unwrap();
    h.join().unwrap();
    assert_eq!(r.verdict, Verdict::Vulnerable);
    assert_eq!(r.score, 0.91);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].body, json!({"id": 17, "code": "int f();"}));
    assert_eq!(seen[0].auth, None);
}

#[test]
fn detector_retries_transient_failures() {
    let (url, seen, h) = serve(vec![
        (503, "busy".into()),
        (429, "slow down".into()),
        (200, r#"{"verdict":"clean","score":0.2}"#.into()),
    ]);
    let r = detector(&url).predict(1, "x").unwrap();
    h.join().unwrap();
    assert_eq!(r.verdict, Verdict::Clean);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn detector_gives_up_after_max_attempts() {
    let (url, seen, h) = serve(vec![(429, "".into()); 3]);
    let err = detector(&url).predict(5, "x").unwrap_err();
    h.join().unwrap();
    assert!(
        matches!(
            err,
            BackendError::Unavailable {
                sample: 5,
                attempts: 3,
                ..
            }
        ),
        "{err:?}"
    );
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen, h) = serve(vec![(400, "bad".into()), (200, "{}".into())]);
    let err = detector(&url).predict(2, "x").unwrap_err();
    assert!(
        matches!(err, BackendError::Protocol { sample: 2, .. }),
        "{err:?}"
    );
    assert_eq!(seen.lock().unwrap().len(), 1);
    drop(h);
}

#[test]
fn inconsistent_detector_reply_is_a_protocol_error() {
    for body in [
        r#"{"verdict":"clean","score":0.9}"#,
        r#"{"verdict":"vulnerable","score":1.5}"#,
        r#"{"verdict":"maybe","score":0.5}"#,
        r#"{"score":0.5}"#,
    ] {
        let (url, _, h) = serve(vec![(200, body.into())]);
        let err = detector(&url).predict(3, "x").unwrap_err();
        h.join().unwrap();
        assert!(
            matches!(err, BackendError::Protocol { .. }),
            "{body}: {err:?}"
        );
    }
}

#[test]
fn chat_request_shape_and_token() {
    let var = "COLLABVD_TEST_TOKEN_SHAPE";
    std::env::set_var(var, "s3cret");
    let (url, seen, h) = serve(vec![(200, completion("Yes, overflow."))]);
    let client = HttpChat::new(&url, chat_settings(Some(var)), RetryPolicy::no_backoff(1));
    assert!(!format!("{client:?}").contains("s3cret"));
    let transcript = vec![Message::user("Is this vulnerable?")];
    let reply = client.chat(9, &transcript).unwrap();
    h.join().unwrap();
    assert_eq!(reply, "Yes, overflow.");
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer s3cret"));
    assert_eq!(
        seen[0].body,
        json!({
            "model": "test-model",
            "messages": [{"role": "user", "content": "Is this vulnerable?"}],
            "temperature": 0.0,
            "max_tokens": 64,
        })
    );
}

#[test]
fn chat_without_token_sends_no_auth_header() {
    let (url, seen, h) = serve(vec![(200, completion("No."))]);
    let client = HttpChat::new(
        &url,
        chat_settings(Some("COLLABVD_TEST_TOKEN_UNSET")),
        RetryPolicy::no_backoff(1),
    );
    client.chat(1, &[Message::user("q")]).unwrap();
    h.join().unwrap();
    assert_eq!(seen.lock().unwrap()[0].auth, None);
}

#[test]
fn malformed_completions_are_protocol_errors() {
    for body in [
        "not json".to_string(),
        json!({"choices": []}).to_string(),
        completion("   "),
    ] {
        let (url, _, h) = serve(vec![(200, body.clone())]);
        let client = HttpChat::new(&url, chat_settings(None), RetryPolicy::no_backoff(1));
        let err = client.chat(4, &[Message::user("q")]).unwrap_err();
        h.join().unwrap();
        assert!(
            matches!(err, BackendError::Protocol { sample: 4, .. }),
            "{body}: {err:?}"
        );
    }
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let d = detector(&format!("http://127.0.0.1:{port}/"));
    let err = d.predict(8, "x").unwrap_err();
    assert!(
        matches!(err, BackendError::Unavailable { attempts: 3, .. }),
        "{err:?}"
    );
}
