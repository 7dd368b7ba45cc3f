//! Wire formats of the embedding service and the judge, against a local
//! one-request-per-connection HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use graphcal::dataset::{QuestionRecord, ResponseRecord};
use graphcal::error::Error;
use graphcal::ingest::{embed_dataset_with, EmbeddingMode, EmbeddingProviderConfig, HttpEmbeddingService, RetryPolicy};
use graphcal::labeling::{label_by_llm_judge, HttpJudge};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// Serves `replies` in order (status, body), one per connection, and
/// records what each request carried.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    std::thread::spawn(move || {
        for (status, reply) in replies {
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
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Seen {
                path: request_line.split_whitespace().nth(1).unwrap_or("").to_string(),
                authorization,
                body: serde_json::from_slice(&body).unwrap_or(Value::Null),
            });
            let mut stream = stream;
            let response = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        initial_backoff: Duration::from_millis(1),
    }
}

fn record(texts: &[&str]) -> QuestionRecord {
    QuestionRecord {
        id: "q1".into(),
        question: "Capital of France?".into(),
        rephrasings: vec![],
        reference_answer: Some("Paris".into()),
        responses: texts.iter().map(|t| ResponseRecord::new(*t)).collect(),
    }
}

#[test]
fn embedding_service_protocol() {
    let (url, seen) = serve(vec![(
        200,
        json!({"embeddings": [[1.0, 0.0], [0.0, 1.0]]}).to_string(),
    )]);
    let service = HttpEmbeddingService {
        endpoint_url: url,
        token: Some("secret".into()),
        retry: fast_retry(),
    };
    let config = EmbeddingProviderConfig {
        mode: EmbeddingMode::Service,
        endpoint_url: Some("unused".into()),
        ..Default::default()
    };
    // duplicate texts are sent once
    let out = embed_dataset_with(vec![record(&["Paris", "Lyon", "Paris"])], &config, &service).unwrap();
    let e: Vec<Vec<f64>> = out[0].responses.iter().map(|r| r.embedding.clone().unwrap()).collect();
    assert_eq!(e, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/v1/endpoint");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer secret"));
    assert_eq!(seen[0].body, json!({"texts": ["Paris", "Lyon"]}));
}

#[test]
fn embedding_service_retries_then_succeeds() {
    let (url, seen) = serve(vec![
        (500, "{}".into()),
        (200, json!({"embeddings": [[0.6, 0.8], [0.8, 0.6]]}).to_string()),
    ]);
    let service = HttpEmbeddingService {
        endpoint_url: url,
        token: None,
        retry: fast_retry(),
    };
    let config = EmbeddingProviderConfig {
        mode: EmbeddingMode::Service,
        endpoint_url: Some("unused".into()),
        ..Default::default()
    };
    let out = embed_dataset_with(vec![record(&["a", "b"])], &config, &service).unwrap();
    assert_eq!(out[0].responses[1].embedding, Some(vec![0.8, 0.6]));
    assert_eq!(seen.lock().unwrap().len(), 2);
    assert!(seen.lock().unwrap()[0].authorization.is_none());
}

#[test]
fn embedding_service_gives_up_after_three_attempts() {
    let (url, seen) = serve(vec![(503, "{}".into()), (503, "{}".into()), (503, "{}".into())]);
    let service = HttpEmbeddingService {
        endpoint_url: url,
        token: None,
        retry: fast_retry(),
    };
    let config = EmbeddingProviderConfig {
        mode: EmbeddingMode::Service,
        endpoint_url: Some("unused".into()),
        ..Default::default()
    };
    let err = embed_dataset_with(vec![record(&["a", "b"])], &config, &service).unwrap_err();
    assert!(matches!(err, Error::Transport { attempts: 3, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn judge_protocol_and_reasks() {
    let (url, seen) = serve(vec![
        (200, json!({"text": "Score: 1"}).to_string()),
        (200, json!({"text": "I am not sure"}).to_string()),
        (200, json!({"text": "Score: 0"}).to_string()),
    ]);
    let judge = HttpJudge {
        endpoint: url,
        token: Some("jk".into()),
        retry: fast_retry(),
    };
    let (labeled, missing) = label_by_llm_judge(record(&["Paris", "Lyon"]), &judge, false).unwrap();
    assert!(missing.is_empty());
    assert_eq!(labeled.labels(), Some(vec![1, 0]));
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer jk"));
    let prompt = seen[0].body["prompt"].as_str().unwrap();
    assert!(prompt.contains("Capital of France?"));
    assert!(prompt.contains("Paris"));
    assert_eq!(seen[1].body, seen[2].body);
    assert!(seen[1].body["prompt"].as_str().unwrap().contains("Lyon"));
}

#[test]
fn judge_that_never_scores_leaves_response_unlabeled() {
    let replies = (0..3).map(|_| (200, json!({"text": "Score: maybe"}).to_string())).collect();
    let (url, _) = serve(replies);
    let judge = HttpJudge {
        endpoint: url,
        token: None,
        retry: fast_retry(),
    };
    let mut r = record(&["Paris", "Lyon"]);
    r.responses[0].label = Some(1);
    let (labeled, missing) = label_by_llm_judge(r, &judge, false).unwrap();
    assert_eq!(labeled.responses[0].label, Some(1));
    assert_eq!(labeled.responses[1].label, None);
    assert_eq!(missing.len(), 1);
    assert_eq!(missing[0].response_index, 1);
    assert_eq!(missing[0].last_reply, "Score: maybe");
}
