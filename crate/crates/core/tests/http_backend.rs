use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use dci_core::backends::{HttpBackend, HttpConfig};
use dci_core::{
    dci_classify, Backend, BackendError, EngineConfig, EngineError, FinalPrediction, GroupSize,
    ImageRef, LabelSet, Query,
};
use serde_json::{json, Value};

struct Request {
    headers: Vec<(String, String)>,
    body: Value,
}

fn read_request(stream: &mut TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    if line.is_empty() {
        return None;
    }
    let mut headers = Vec::new();
    let mut len = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (name, value) = h.split_once(':')?;
        let (name, value) = (name.trim().to_ascii_lowercase(), value.trim().to_owned());
        if name == "content-length" {
            len = value.parse().ok()?;
        }
        headers.push((name, value));
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Request {
        headers,
        body: serde_json::from_slice(&body).ok()?,
    })
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let reason = if status == 200 { "OK" } else { "Error" };
    let msg = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(msg.as_bytes());
}

fn reply(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

type Handler = dyn Fn(usize, &Request) -> (u16, String, Duration) + Send + Sync;

/// Serves until the test process exits; returns the base URL, the request
/// log and a hit counter.
fn serve(handler: Box<Handler>) -> (String, Arc<Mutex<Vec<Request>>>, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let log = Arc::new(Mutex::new(Vec::new()));
    let hits = Arc::new(AtomicUsize::new(0));
    let handler: Arc<Handler> = Arc::from(handler);
    {
        let log = log.clone();
        let hits = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let (log, hits, handler) = (log.clone(), hits.clone(), handler.clone());
                thread::spawn(move || {
                    if let Some(req) = read_request(&mut stream) {
                        let n = hits.fetch_add(1, Ordering::SeqCst);
                        let (status, body, delay) = handler(n, &req);
                        log.lock().unwrap().push(req);
                        thread::sleep(delay);
                        respond(&mut stream, status, &body);
                    }
                });
            }
        });
    }
    (format!("http://{addr}/v1"), log, hits)
}

fn config(base: &str) -> HttpConfig {
    HttpConfig {
        backoff_initial_ms: 10,
        timeout_s: 5.0,
        api_key_env: "DCI_TEST_UNSET_KEY_VAR".into(),
        ..HttpConfig::new(base, "test-model")
    }
}

fn query(labels: &[&str]) -> Query {
    Query::new(
        ImageRef::Bytes {
            mime: "image/png".into(),
            data: b"\x89PNG fake".to_vec(),
        },
        "Which label?".into(),
        LabelSet::new(labels.iter().copied()).unwrap(),
        1,
        1,
    )
    .unwrap()
}

#[test]
fn echo_none_and_request_shape() {
    let (base, log, _) = serve(Box::new(|_, _| (200, reply("None"), Duration::ZERO)));
    let backend = HttpBackend::new(config(&base)).unwrap();
    let res = backend.infer(&query(&["cat", "dog"])).unwrap();
    assert_eq!(res.raw_text, "None");
    assert_eq!(res.attempts, 1);
    assert!(res.token_estimate > 0);

    let log = log.lock().unwrap();
    let req = &log[0];
    assert_eq!(req.body["model"], "test-model");
    let content = &req.body["messages"][0]["content"];
    assert!(content[0]["image_url"]["url"]
        .as_str()
        .unwrap()
        .starts_with("data:image/png;base64,"));
    assert_eq!(content[1]["text"], "Which label?");
    assert!(!req.headers.iter().any(|(k, _)| k == "authorization"));
}

#[test]
fn bearer_token_from_env() {
    let (base, log, _) = serve(Box::new(|_, _| (200, reply("cat"), Duration::ZERO)));
    let var = "DCI_TEST_KEY_FOR_BEARER";
    std::env::set_var(var, "sekret");
    let backend = HttpBackend::new(HttpConfig {
        api_key_env: var.into(),
        ..config(&base)
    })
    .unwrap();
    backend.infer(&query(&["cat"])).unwrap();
    let log = log.lock().unwrap();
    assert!(log[0]
        .headers
        .iter()
        .any(|(k, v)| k == "authorization" && v == "Bearer sekret"));
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (base, _, hits) = serve(Box::new(|n, _| {
        if n < 2 {
            (500, "{\"error\": \"busy\"}".into(), Duration::ZERO)
        } else {
            (200, reply("dog"), Duration::ZERO)
        }
    }));
    let backend = HttpBackend::new(config(&base)).unwrap();
    let res = backend.infer(&query(&["cat", "dog"])).unwrap();
    assert_eq!(res.raw_text, "dog");
    assert_eq!(res.attempts, 3);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn gives_up_after_max_attempts() {
    let (base, _, hits) = serve(Box::new(|_, _| (503, "{}".into(), Duration::ZERO)));
    let backend = HttpBackend::new(config(&base)).unwrap();
    let err = backend.infer(&query(&["cat"])).unwrap_err();
    assert!(matches!(err, BackendError::Exhausted { attempts: 3, .. }), "{err:?}");
    assert!(matches!(err.root(), BackendError::Status { status: 503, .. }));
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (base, _, hits) = serve(Box::new(|_, _| (400, "{\"error\": \"bad\"}".into(), Duration::ZERO)));
    let backend = HttpBackend::new(config(&base)).unwrap();
    let err = backend.infer(&query(&["cat"])).unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 400, .. }), "{err:?}");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn timeout_is_reported() {
    let (base, _, _) = serve(Box::new(|_, _| (200, reply("cat"), Duration::from_secs(3))));
    let backend = HttpBackend::new(HttpConfig {
        timeout_s: 0.3,
        max_attempts: 1,
        ..config(&base)
    })
    .unwrap();
    let err = backend.infer(&query(&["cat"])).unwrap_err();
    assert!(matches!(err.root(), BackendError::Timeout(_)), "{err:?}");
}

#[test]
fn malformed_reply_is_an_error() {
    let (base, _, _) = serve(Box::new(|_, _| (200, "{\"choices\": []}".into(), Duration::ZERO)));
    let backend = HttpBackend::new(config(&base)).unwrap();
    assert!(matches!(
        backend.infer(&query(&["cat"])).unwrap_err().root(),
        BackendError::Malformed(_)
    ));
}

// The stub answers with the target when it is among the numbered candidates.
#[test]
fn end_to_end_classification_over_http() {
    let target = "label-037";
    let (base, _, hits) = serve(Box::new(move |_, req| {
        let prompt = req.body["messages"][0]["content"][1]["text"]
            .as_str()
            .unwrap_or("")
            .to_owned();
        let listed = prompt
            .lines()
            .any(|l| l.split_once(". ").map(|(_, rest)| rest.trim()) == Some(target));
        let answer = if listed { target } else { "None" };
        (200, reply(answer), Duration::ZERO)
    }));
    let backend = HttpBackend::new(config(&base)).unwrap();
    let labels = LabelSet::new((0..100).map(|i| format!("label-{i:03}"))).unwrap();
    let mut cfg = EngineConfig::new(GroupSize::new(10).unwrap());
    cfg.parallelism = 4;
    let trace = dci_classify(&ImageRef::Url("https://example.com/x.jpg".into()), &labels, &cfg, &backend)
        .unwrap();
    assert_eq!(trace.final_prediction, FinalPrediction::Predicted(target.into()));
    assert_eq!(trace.total_calls, 10);
    assert_eq!(hits.load(Ordering::SeqCst), 10);
}

#[test]
fn engine_surfaces_backend_failure_with_partial_trace() {
    let (base, _, _) = serve(Box::new(|_, _| (500, "{}".into(), Duration::ZERO)));
    let backend = HttpBackend::new(HttpConfig {
        max_attempts: 1,
        ..config(&base)
    })
    .unwrap();
    let labels = LabelSet::new((0..30).map(|i| format!("l{i}"))).unwrap();
    let cfg = EngineConfig::new(GroupSize::new(10).unwrap());
    let err = dci_classify(&ImageRef::Url("https://example.com/x.jpg".into()), &labels, &cfg, &backend)
        .unwrap_err();
    assert!(matches!(err, EngineError::Backend { iteration: 1, .. }), "{err:?}");
    assert_eq!(err.partial_trace().unwrap().depth(), 0);
}
