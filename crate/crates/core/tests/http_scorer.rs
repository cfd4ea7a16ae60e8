use std::sync::Arc;

use relforge::scorer::{Backend, HttpScorer, MockScorer, Scorer, ScorerConfig, ScorerServer};

fn client(url: String) -> HttpScorer {
    HttpScorer::new(&ScorerConfig {
        backend: Backend::Http,
        endpoint: Some(url),
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn http_round_trip_matches_in_process_mock() {
    let mock = MockScorer::hashed(11, 6);
    let server = ScorerServer::start(Arc::new(mock.clone()), "127.0.0.1:0").unwrap();
    let http = client(server.url());
    for doc in ["{\"a\": 1, \"target\": ", "short", "x y z"] {
        let (a, b) = (
            mock.next_token_distribution(doc).unwrap(),
            http.next_token_distribution(doc).unwrap(),
        );
        assert_eq!(a.entries().len(), b.entries().len());
        for ((ta, pa), (tb, pb)) in a.entries().iter().zip(b.entries()) {
            assert_eq!(ta, tb);
            assert!((pa - pb).abs() < 1e-12);
        }
        let (la, lb) = (
            mock.continuation_logprob(doc, "12").unwrap(),
            http.continuation_logprob(doc, "12").unwrap(),
        );
        assert!((la - lb).abs() < 1e-12);
        assert_eq!(mock.embed_last_token(doc).unwrap(), http.embed_last_token(doc).unwrap());
    }
    assert_eq!(server.requests(), 9);
}

#[test]
fn payload_too_large_maps_to_context_length() {
    let mock = MockScorer::hashed(0, 4).with_context_limit(5);
    let server = ScorerServer::start(Arc::new(mock), "127.0.0.1:0").unwrap();
    let http = client(server.url());
    assert!(http.next_token_distribution("ok").is_ok());
    let err = http.next_token_distribution(&"word ".repeat(100)).unwrap_err();
    assert!(err.is_context_length(), "{err}");
    assert_eq!(server.rejected(), 1);
}

#[test]
fn bad_requests_are_not_context_errors() {
    let server = ScorerServer::start(Arc::new(MockScorer::hashed(0, 4)), "127.0.0.1:0").unwrap();
    let http = client(server.url());
    let err = http.continuation_logprob("doc", "").unwrap_err();
    assert!(!err.is_context_length());
    assert_eq!(server.rejected(), 0);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let addr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let err = client(format!("http://{addr}")).next_token_distribution("x").unwrap_err();
    assert!(!err.is_context_length());
}
