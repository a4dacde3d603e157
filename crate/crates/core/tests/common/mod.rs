#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};

/// `(status, body)` for a request path, parsed JSON body and zero-based hit number.
pub type Handler = dyn Fn(&str, &Value, usize) -> (u16, String) + Send + Sync;

/// A local HTTP server answering every request through a handler.
pub struct MockServer {
    pub base_url: String,
    hits: Arc<AtomicUsize>,
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(handler: impl Fn(&str, &Value, usize) -> (u16, String) + Send + Sync + 'static) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind mock server"));
        let port = server.server_addr().to_ip().expect("tcp listener").port();
        let hits = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let handle = {
            let server = Arc::clone(&server);
            let hits = Arc::clone(&hits);
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let n = hits.fetch_add(1, Ordering::SeqCst);
                    let mut body = String::new();
                    req.as_reader().read_to_string(&mut body).ok();
                    let parsed: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
                    let url = req.url().to_string();
                    let handler = Arc::clone(&handler);
                    // answer concurrently so client-side concurrency is exercised
                    std::thread::spawn(move || {
                        let (status, text) = handler(&url, &parsed, n);
                        let header =
                            tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).unwrap();
                        let resp = tiny_http::Response::from_string(text)
                            .with_status_code(status)
                            .with_header(header);
                        req.respond(resp).ok();
                    });
                }
            })
        };
        MockServer {
            base_url: format!("http://127.0.0.1:{port}"),
            hits,
            server,
            handle: Some(handle),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            h.join().ok();
        }
    }
}

/// Chat replies that cycle through the first three option labels by hit number.
pub fn chat_handler(_path: &str, _body: &Value, n: usize) -> (u16, String) {
    let label = ["A", "B", "C"][n % 3];
    let content = format!("Reply {n}: weighing the options.\nThe answer is ({label}).");
    (200, json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string())
}

/// Embedding replies derived from the bytes of each input text.
pub fn embedding_handler(_path: &str, body: &Value, _n: usize) -> (u16, String) {
    let inputs = body["input"].as_array().cloned().unwrap_or_default();
    let data: Vec<Value> = inputs
        .iter()
        .map(|t| {
            let s = t.as_str().unwrap_or("");
            let v: Vec<f64> = (0..4)
                .map(|k| s.bytes().enumerate().map(|(i, b)| ((b as usize * (i + k + 1)) % 17) as f64).sum::<f64>() / 10.0)
                .collect();
            json!({ "embedding": v })
        })
        .collect();
    (200, json!({ "data": data }).to_string())
}
