use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Instant;

use sqlcomment_core::forge::{GenerationClientConfig, GenerationError, Generator, HttpGenerator};

/// Serves `script` statuses in order (then 200s forever). Returns the URL and
/// the request bodies seen.
fn scripted_server(script: Vec<u16>, reply: &'static str) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        let mut script = script.into_iter();
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(String::from_utf8(body).unwrap());
            let status = script.next().unwrap_or(200);
            let payload = if status == 200 {
                serde_json::json!({"choices": [{"message": {"role": "assistant", "content": reply}}]}).to_string()
            } else {
                "{\"error\": \"scripted\"}".to_string()
            };
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
            let _ = stream.write_all(resp.as_bytes());
        }
    });
    (url, seen)
}

fn config(url: String) -> GenerationClientConfig {
    GenerationClientConfig {
        endpoint_url: url,
        model_name: "stub".into(),
        api_key_env_var_name: String::new(),
        backoff_base_ms: 5,
        request_rate_limit: 0.0,
        timeout_secs: 5.0,
        ..Default::default()
    }
}

#[test]
fn canned_reply_is_returned_verbatim() {
    let (url, seen) = scripted_server(vec![], "Counts singers.");
    let mut g = HttpGenerator::new(config(url)).unwrap();
    assert_eq!(g.generate("explain", 0.0).unwrap(), "Counts singers.");
    let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
    assert_eq!(body["messages"][0]["content"], "explain");
    assert_eq!(body["temperature"], 0.0);
}

#[test]
fn two_server_errors_then_success() {
    let (url, _) = scripted_server(vec![500, 500, 200], "ok text");
    let dir = tempfile::tempdir().unwrap();
    let audit = dir.path().join("audit.jsonl");
    let mut cfg = config(url);
    cfg.audit_log = Some(audit.clone());
    let mut g = HttpGenerator::new(cfg).unwrap();
    assert_eq!(g.generate("p", 0.0).unwrap(), "ok text");
    let outcomes: Vec<_> = g.audit().iter().map(|r| (r.attempt, r.status, r.outcome.as_str())).collect();
    assert_eq!(outcomes, [(0, Some(500), "retry"), (1, Some(500), "retry"), (2, Some(200), "ok")]);
    let lines = std::fs::read_to_string(&audit).unwrap();
    assert_eq!(lines.lines().count(), 3);
    let hash = &g.audit()[0].prompt_sha256;
    assert!(g.audit().iter().all(|r| &r.prompt_sha256 == hash));
}

#[test]
fn retries_run_out() {
    let (url, _) = scripted_server(vec![503; 10], "never");
    let mut cfg = config(url);
    cfg.max_retries = 2;
    let mut g = HttpGenerator::new(cfg).unwrap();
    match g.generate("p", 0.0) {
        Err(GenerationError::Transport { attempts: 3, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn client_error_is_not_retried() {
    let (url, seen) = scripted_server(vec![401], "x");
    let mut g = HttpGenerator::new(config(url)).unwrap();
    assert!(matches!(g.generate("p", 0.0), Err(GenerationError::Config { status: 401, .. })));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn empty_completion_is_an_error() {
    let (url, _) = scripted_server(vec![], "  ");
    let mut g = HttpGenerator::new(config(url)).unwrap();
    assert!(matches!(g.generate("p", 0.0), Err(GenerationError::Empty)));
}

#[test]
fn rate_limit_spaces_requests() {
    let (url, _) = scripted_server(vec![], "r");
    let mut cfg = config(url);
    cfg.request_rate_limit = 2.0;
    let mut g = HttpGenerator::new(cfg).unwrap();
    let start = Instant::now();
    for _ in 0..10 {
        g.generate("p", 0.0).unwrap();
    }
    let wall = start.elapsed().as_secs_f64();
    assert!(wall >= 4.5, "10 requests at 2/s took {wall:.3}s");
}
