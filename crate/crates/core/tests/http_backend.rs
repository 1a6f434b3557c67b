//! Chat-completions client against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use promptstab_core::backend::{BackendConfig, BackendError, ChatMessage, HttpModel, PredictionCache, Predictor};
use promptstab_core::domain::{Example, Prompt};
use promptstab_core::synthetic;

#[derive(Debug, Clone)]
struct Seen {
    authorization: Option<String>,
    body: Value,
}

/// Serves `script` in order, one response per connection, then 404s.
fn serve(script: Vec<(u16, Value)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        let mut script = script.into_iter();
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = None;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
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
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Seen {
                authorization: auth,
                body: serde_json::from_slice(&body).unwrap_or(Value::Null),
            });
            let (status, reply) = script.next().unwrap_or((404, json!({})));
            let text = reply.to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
        }
    });
    (url, seen)
}

fn chat(content: &str) -> Value {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
}

fn chat_with_logprobs(content: &str, top: &[(&str, f64)]) -> Value {
    let top: Vec<Value> = top
        .iter()
        .map(|(t, lp)| json!({"token": t, "logprob": lp}))
        .collect();
    json!({"choices": [{
        "message": {"role": "assistant", "content": content},
        "logprobs": {"content": [{"token": content, "logprob": -0.1, "top_logprobs": top}]}
    }]})
}

fn predictor(url: &str, wants_probs: bool, key_env: &str) -> Predictor {
    let mut cfg = BackendConfig::http(url, "test-model", wants_probs);
    cfg.api_key_env = key_env.into();
    cfg.max_retries = 3;
    cfg.timeout_secs = 5.0;
    let model = HttpModel::from_config(&cfg)
        .unwrap()
        .with_backoff_base(Duration::from_millis(1));
    Predictor::new(Arc::new(model), PredictionCache::in_memory(), 2)
}

fn example() -> Example {
    synthetic::dataset(&synthetic::binary_task(), 1, 0).examples[0].clone()
}

fn prompt() -> Prompt {
    Prompt::manual("p", "Decide Yes or No. {note}")
}

#[test]
fn label_only_answer_is_extracted() {
    let (url, seen) = serve(vec![(200, chat("  yes."))]);
    let p = predictor(&url, false, "PROMPTSTAB_TEST_KEY_UNSET");
    let pred = p.predict(&synthetic::binary_task(), &prompt(), &example()).unwrap();
    assert_eq!(pred.label, "Yes");
    assert!(pred.probs.is_none());
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert!(seen[0].authorization.is_none());
    assert_eq!(seen[0].body["model"], "test-model");
    assert!(seen[0].body.get("logprobs").is_none());
}

#[test]
fn top_logprobs_become_probabilities() {
    let reply = chat_with_logprobs("No", &[("No", -0.2), ("Yes", -1.8), ("Maybe", -4.0)]);
    let (url, seen) = serve(vec![(200, reply)]);
    let p = predictor(&url, true, "PROMPTSTAB_TEST_KEY_UNSET");
    let pred = p.predict(&synthetic::binary_task(), &prompt(), &example()).unwrap();
    assert_eq!(pred.label, "No");
    let probs = pred.probs.unwrap();
    let expected_no = 1.0 / (1.0 + (-1.8f64 + 0.2).exp());
    assert!((probs["No"] - expected_no).abs() < 1e-9);
    assert!((probs["Yes"] + probs["No"] - 1.0).abs() < 1e-9);
    assert_eq!(seen.lock().unwrap()[0].body["logprobs"], true);
}

#[test]
fn missing_label_score_falls_back_to_label_only() {
    let reply = chat_with_logprobs("Yes", &[("Yes", -0.1), ("Maybe", -3.0)]);
    let (url, _) = serve(vec![(200, reply)]);
    let p = predictor(&url, true, "PROMPTSTAB_TEST_KEY_UNSET");
    let pred = p.predict(&synthetic::binary_task(), &prompt(), &example()).unwrap();
    assert_eq!(pred.label, "Yes");
    assert!(pred.probs.is_none());
}

#[test]
fn retries_server_errors_and_rate_limits() {
    let (url, seen) = serve(vec![
        (500, json!({"error": "boom"})),
        (429, json!({"error": "slow down"})),
        (200, chat("Yes")),
    ]);
    let p = predictor(&url, false, "PROMPTSTAB_TEST_KEY_UNSET");
    let pred = p.predict(&synthetic::binary_task(), &prompt(), &example()).unwrap();
    assert_eq!(pred.label, "Yes");
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert_eq!(p.model_calls(), 1);
}

#[test]
fn gives_up_after_retry_budget() {
    let script = (0..4).map(|_| (503, json!({}))).collect();
    let (url, seen) = serve(script);
    let p = predictor(&url, false, "PROMPTSTAB_TEST_KEY_UNSET");
    let err = p.predict(&synthetic::binary_task(), &prompt(), &example()).unwrap_err();
    assert!(matches!(err, BackendError::Unavailable { attempts: 4, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, json!({})), (200, chat("Yes"))]);
    let p = predictor(&url, false, "PROMPTSTAB_TEST_KEY_UNSET");
    let err = p.predict(&synthetic::binary_task(), &prompt(), &example()).unwrap_err();
    assert!(matches!(err, BackendError::Unavailable { attempts: 1, .. }));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn unmappable_output_is_invalid() {
    let (url, _) = serve(vec![(200, chat("I cannot tell."))]);
    let p = predictor(&url, false, "PROMPTSTAB_TEST_KEY_UNSET");
    let err = p.predict(&synthetic::binary_task(), &prompt(), &example()).unwrap_err();
    assert!(matches!(err, BackendError::InvalidOutput { .. }));
}

#[test]
fn bearer_token_comes_from_the_environment() {
    std::env::set_var("PROMPTSTAB_TEST_KEY_SET", "sk-test-123");
    let (url, seen) = serve(vec![(200, chat("Yes")), (200, chat("[\"a\", \"b\"]"))]);
    let p = predictor(&url, false, "PROMPTSTAB_TEST_KEY_SET");
    p.predict(&synthetic::binary_task(), &prompt(), &example()).unwrap();
    let text = p.complete(&[ChatMessage::user("paraphrase")], 7).unwrap();
    assert_eq!(text, "[\"a\", \"b\"]");
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer sk-test-123"));
    assert_eq!(seen[1].body["seed"], 7);
}

#[test]
fn repeated_requests_hit_the_cache() {
    let (url, seen) = serve(vec![(200, chat("No"))]);
    let p = predictor(&url, false, "PROMPTSTAB_TEST_KEY_UNSET");
    let t = synthetic::binary_task();
    let a = p.predict(&t, &prompt(), &example()).unwrap();
    let b = p.predict(&t, &prompt(), &example()).unwrap();
    assert_eq!(a, b);
    assert_eq!(seen.lock().unwrap().len(), 1);
    assert_eq!((p.requests(), p.model_calls()), (2, 1));
}
