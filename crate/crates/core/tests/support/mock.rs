//! Minimal scripted HTTP server for wire-protocol tests.
#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;

#[derive(Debug, Clone)]
pub struct Received {
    pub method: String,
    pub path: String,
    pub authorization: Option<String>,
    pub body: String,
}

#[derive(Default)]
struct Script {
    replies: HashMap<String, VecDeque<(u16, String)>>,
    received: Vec<Received>,
}

/// Replies are queued per path and consumed in order; the last one repeats.
#[derive(Clone, Default)]
pub struct MockServer {
    script: Arc<Mutex<Script>>,
    pub base: String,
}

impl MockServer {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let server = MockServer { script: Arc::default(), base };
        let state = server.script.clone();
        thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(1).enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).unwrap();
                let app = Router::new().fallback(handle).with_state(state);
                axum::serve(listener, app).await.unwrap();
            });
        });
        server
    }

    pub fn reply(&self, path: &str, status: u16, body: impl Into<String>) -> &Self {
        let mut s = self.script.lock().unwrap();
        s.replies.entry(path.to_string()).or_default().push_back((status, body.into()));
        self
    }

    pub fn received(&self) -> Vec<Received> {
        self.script.lock().unwrap().received.clone()
    }
}

async fn handle(
    State(script): State<Arc<Mutex<Script>>>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let mut s = script.lock().unwrap();
    let path = uri.path().to_string();
    s.received.push(Received {
        method: method.to_string(),
        path: path.clone(),
        authorization: headers.get("authorization").and_then(|v| v.to_str().ok()).map(String::from),
        body: String::from_utf8_lossy(&body).into_owned(),
    });
    let next = match s.replies.get_mut(&path) {
        Some(q) if q.len() > 1 => q.pop_front(),
        Some(q) => q.front().cloned(),
        None => None,
    };
    match next {
        Some((status, body)) => {
            (StatusCode::from_u16(status).unwrap(), [("content-type", "application/json")], body).into_response()
        }
        None => (StatusCode::NOT_FOUND, "no scripted reply").into_response(),
    }
}
