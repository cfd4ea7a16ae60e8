//! Minimal HTTP/1.1 server exposing any [`Scorer`] over the same JSON
//! protocol [`super::HttpScorer`] speaks. One thread per connection; every
//! response closes its connection.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value as Json};

use super::{Scorer, ScorerError};

const MAX_BODY: usize = 64 << 20;

pub struct ScorerServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    requests: Arc<AtomicUsize>,
    rejected: Arc<AtomicUsize>,
    handle: Option<JoinHandle<()>>,
}

impl ScorerServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn start(scorer: Arc<dyn Scorer>, addr: &str) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicUsize::new(0));
        let rejected = Arc::new(AtomicUsize::new(0));
        let (s, r, j) = (stop.clone(), requests.clone(), rejected.clone());
        let handle = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if s.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let scorer = scorer.clone();
                let (r, j) = (r.clone(), j.clone());
                std::thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, scorer.as_ref(), &r, &j) {
                        log::debug!("scorer connection: {e}");
                    }
                });
            }
        });
        Ok(Self {
            addr,
            stop,
            requests,
            rejected,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Requests answered so far, including errors.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Requests answered with 413.
    pub fn rejected(&self) -> usize {
        self.rejected.load(Ordering::SeqCst)
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ScorerServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn read_request(stream: &TcpStream) -> io::Result<Option<(String, String, Vec<u8>)>> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut len = 0usize;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 || h == "\r\n" || h == "\n" {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.trim().eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().map_err(|_| io::Error::other("bad content-length"))?;
            }
        }
    }
    if len > MAX_BODY {
        return Err(io::Error::other("body too large"));
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body)?;
    Ok(Some((method, path, body)))
}

fn respond(mut stream: &TcpStream, status: u16, body: &Json) -> io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        413 => "Payload Too Large",
        _ => "Internal Server Error",
    };
    let text = body.to_string();
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    )?;
    stream.flush()
}

fn str_field<'a>(body: &'a Json, key: &str) -> Result<&'a str, ScorerError> {
    body.get(key)
        .and_then(Json::as_str)
        .ok_or_else(|| ScorerError::Malformed(format!("missing string field `{key}`")))
}

fn route(scorer: &dyn Scorer, path: &str, body: &Json) -> Result<Option<Json>, ScorerError> {
    Ok(Some(match path {
        "/v1/next_token" => {
            let top_k = body.get("top_k").and_then(Json::as_u64).unwrap_or(20) as usize;
            let dist = scorer.next_token_distribution(str_field(body, "text")?)?;
            let tokens: Vec<Json> = dist
                .entries()
                .iter()
                .take(top_k)
                .map(|(t, p)| json!({"token": t, "logprob": p.ln().max(-1e300)}))
                .collect();
            json!({ "tokens": tokens })
        }
        "/v1/logprob" => {
            let lp = scorer.continuation_logprob(str_field(body, "text")?, str_field(body, "continuation")?)?;
            json!({ "logprob": if lp.is_finite() { lp } else { -1e300 } })
        }
        "/v1/embed" => {
            let e = scorer.embed_last_token(str_field(body, "text")?)?;
            json!({ "embedding": e.values, "dim": e.dim() })
        }
        _ => return Ok(None),
    }))
}

fn handle_connection(stream: TcpStream, scorer: &dyn Scorer, count: &AtomicUsize, rejected: &AtomicUsize) -> io::Result<()> {
    let Some((method, path, body)) = read_request(&stream)? else {
        return Ok(());
    };
    count.fetch_add(1, Ordering::SeqCst);
    if method != "POST" {
        return respond(&stream, 404, &json!({"error": "POST only"}));
    }
    let body: Json = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return respond(&stream, 400, &json!({"error": e.to_string()})),
    };
    match route(scorer, &path, &body) {
        Ok(Some(out)) => respond(&stream, 200, &out),
        Ok(None) => respond(&stream, 404, &json!({"error": format!("no route {path}")})),
        Err(e @ ScorerError::ContextLengthExceeded(_)) => {
            rejected.fetch_add(1, Ordering::SeqCst);
            respond(&stream, 413, &json!({"error": e.to_string()}))
        }
        Err(e @ (ScorerError::EmptyDocument | ScorerError::EmptyContinuation | ScorerError::Malformed(_))) => {
            respond(&stream, 400, &json!({"error": e.to_string()}))
        }
        Err(e) => respond(&stream, 500, &json!({"error": e.to_string()})),
    }
}
