//! In-process stand-in for the embedding service, for tests.
//!
//! Embeddings are a deterministic function of the input text. The server
//! counts requests and texts, tracks how many requests overlap, and can be
//! told to fail.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tiny_http::{Header, Response, Server};

#[derive(Debug, Default)]
struct State {
    requests: AtomicUsize,
    texts: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    /// Requests to reject with a 500 before serving normally again.
    fail_next: AtomicUsize,
    /// Successful requests allowed before every later one fails.
    fail_after: Mutex<Option<usize>>,
    /// Successful requests after which embeddings gain one extra dimension.
    drift_after: Mutex<Option<usize>>,
    delay: Mutex<Duration>,
    inputs: Mutex<Vec<Vec<String>>>,
    auth: Mutex<Vec<Option<String>>>,
    served: AtomicUsize,
}

/// Handle to a running mock server. Shuts down on drop.
pub struct MockEmbedServer {
    server: Arc<Server>,
    state: Arc<State>,
    dim: usize,
    workers: Vec<JoinHandle<()>>,
}

/// Deterministic unit vector for `text`.
pub fn mock_embedding(text: &str, dim: usize) -> Vec<f32> {
    let mut h = DefaultHasher::new();
    text.hash(&mut h);
    let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| (x / norm) as f32).collect()
}

impl MockEmbedServer {
    /// Starts a server on an ephemeral localhost port with 8 handler threads.
    pub fn start(dim: usize) -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind mock server"));
        let state = Arc::new(State::default());
        let workers = (0..8)
            .map(|_| {
                let server = Arc::clone(&server);
                let state = Arc::clone(&state);
                std::thread::spawn(move || serve(&server, &state, dim))
            })
            .collect();
        MockEmbedServer {
            server,
            state,
            dim,
            workers,
        }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.server.server_addr())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Requests received, including failed ones.
    pub fn requests(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }

    /// Texts received, including those in failed requests.
    pub fn texts(&self) -> usize {
        self.state.texts.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }

    /// Inputs of every request, in arrival order.
    pub fn inputs(&self) -> Vec<Vec<String>> {
        self.state.inputs.lock().unwrap().clone()
    }

    /// Authorization header of every request, in arrival order.
    pub fn auth_headers(&self) -> Vec<Option<String>> {
        self.state.auth.lock().unwrap().clone()
    }

    pub fn reset_counters(&self) {
        self.state.requests.store(0, Ordering::SeqCst);
        self.state.texts.store(0, Ordering::SeqCst);
        self.state.max_in_flight.store(0, Ordering::SeqCst);
        self.state.inputs.lock().unwrap().clear();
        self.state.auth.lock().unwrap().clear();
    }

    /// The next `n` requests get HTTP 500.
    pub fn fail_next(&self, n: usize) {
        self.state.fail_next.store(n, Ordering::SeqCst);
    }

    /// After `n` more successful requests, every request gets HTTP 500.
    /// `None` lifts the limit.
    pub fn fail_after(&self, n: Option<usize>) {
        let served = self.state.served.load(Ordering::SeqCst);
        *self.state.fail_after.lock().unwrap() = n.map(|n| served + n);
    }

    /// After `n` more successful requests, embeddings have `dim + 1` entries.
    pub fn drift_after(&self, n: usize) {
        let served = self.state.served.load(Ordering::SeqCst);
        *self.state.drift_after.lock().unwrap() = Some(served + n);
    }

    /// Holds each request this long before answering.
    pub fn set_delay(&self, delay: Duration) {
        *self.state.delay.lock().unwrap() = delay;
    }
}

impl Drop for MockEmbedServer {
    fn drop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn serve(server: &Server, state: &State, dim: usize) {
    while let Ok(mut req) = server.recv() {
        let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        state.max_in_flight.fetch_max(now, Ordering::SeqCst);
        state.requests.fetch_add(1, Ordering::SeqCst);

        let auth = req
            .headers()
            .iter()
            .find(|h| h.field.equiv("Authorization"))
            .map(|h| h.value.to_string());
        let mut body = String::new();
        let _ = req.as_reader().read_to_string(&mut body);
        let (status, reply) = handle(state, dim, auth, &body);

        let delay = *state.delay.lock().unwrap();
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        state.in_flight.fetch_sub(1, Ordering::SeqCst);
        let header = Header::from_bytes("Content-Type", "application/json").unwrap();
        let _ = req.respond(Response::from_string(reply.to_string()).with_status_code(status).with_header(header));
    }
}

fn handle(state: &State, dim: usize, auth: Option<String>, body: &str) -> (u16, Value) {
    state.auth.lock().unwrap().push(auth);
    let parsed: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(e) => return (400, json!({"error": e.to_string()})),
    };
    let inputs: Vec<String> = match parsed.get("input").and_then(Value::as_array) {
        Some(a) => a.iter().filter_map(|v| v.as_str().map(String::from)).collect(),
        None => return (400, json!({"error": "missing input"})),
    };
    state.texts.fetch_add(inputs.len(), Ordering::SeqCst);
    state.inputs.lock().unwrap().push(inputs.clone());

    if state
        .fail_next
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok()
    {
        return (500, json!({"error": "injected failure"}));
    }
    let served = {
        let limit = state.fail_after.lock().unwrap();
        let served = state.served.load(Ordering::SeqCst);
        if limit.is_some_and(|l| served >= l) {
            return (500, json!({"error": "injected outage"}));
        }
        state.served.fetch_add(1, Ordering::SeqCst)
    };
    let dim = match *state.drift_after.lock().unwrap() {
        Some(at) if served >= at => dim + 1,
        _ => dim,
    };
    let data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| json!({"index": i, "embedding": mock_embedding(t, dim)}))
        .collect();
    (200, json!({"object": "list", "data": data}))
}
