use std::time::Duration;

use negminer::embed::{embed_corpus, embed_queries, fingerprint_path, EmbedClient, EmbedServiceConfig, InstructionPrefix};
use negminer::mock::{mock_embedding, MockEmbedServer};
use negminer::store::{Corpus, Passage, TrainPair};

fn config(server: &MockEmbedServer, batch_size: usize) -> EmbedServiceConfig {
    let mut c = EmbedServiceConfig::new(server.url(), "mock-model");
    c.batch_size = batch_size;
    c.backoff_base = 0.001;
    c.max_parallel_requests = 1;
    c
}

fn texts(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("text number {i}")).collect()
}

fn corpus(n: usize) -> Corpus {
    Corpus::new(
        (0..n)
            .map(|i| Passage {
                id: format!("d{i:04}"),
                text: format!("document {i}"),
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn ten_texts_batch_four_is_three_requests() {
    let server = MockEmbedServer::start(8);
    let client = EmbedClient::new(config(&server, 4)).unwrap();
    let rows = client.embed_texts(&texts(10)).unwrap();
    assert_eq!(server.requests(), 3);
    assert_eq!(rows.len(), 10);
    let sizes: Vec<usize> = server.inputs().iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![4, 4, 2]);
}

#[test]
fn rows_follow_input_order_under_parallelism() {
    let server = MockEmbedServer::start(8);
    server.set_delay(Duration::from_millis(30));
    let mut c = config(&server, 3);
    c.max_parallel_requests = 4;
    let client = EmbedClient::new(c).unwrap();
    let input = texts(40);
    let rows = client.embed_texts(&input).unwrap();
    for (t, row) in input.iter().zip(&rows) {
        assert_eq!(row, &mock_embedding(t, 8));
    }
    assert!(server.max_in_flight() <= 4, "{}", server.max_in_flight());
    assert!(server.max_in_flight() >= 2, "requests never overlapped");
}

#[test]
fn in_flight_never_exceeds_limit() {
    let server = MockEmbedServer::start(4);
    server.set_delay(Duration::from_millis(10));
    let mut c = config(&server, 1);
    c.max_parallel_requests = 2;
    EmbedClient::new(c).unwrap().embed_texts(&texts(12)).unwrap();
    assert_eq!(server.max_in_flight(), 2);
}

#[test]
fn transient_failure_is_retried() {
    let clean = MockEmbedServer::start(8);
    let expected = EmbedClient::new(config(&clean, 4)).unwrap().embed_texts(&texts(10)).unwrap();

    let server = MockEmbedServer::start(8);
    server.fail_next(1);
    let rows = EmbedClient::new(config(&server, 4)).unwrap().embed_texts(&texts(10)).unwrap();
    assert_eq!(rows, expected);
    assert_eq!(server.requests(), 4);
}

#[test]
fn persistent_failure_names_the_batch() {
    let server = MockEmbedServer::start(8);
    server.fail_after(Some(1));
    let mut c = config(&server, 4);
    c.max_retries = 2;
    let err = EmbedClient::new(c).unwrap().embed_texts(&texts(10)).unwrap_err();
    assert!(err.is_service_error());
    assert!(err.to_string().contains("batch 1"), "{err}");
    // one success, then three attempts at batch 1
    assert_eq!(server.requests(), 4);
}

#[test]
fn dim_drift_is_an_error() {
    let server = MockEmbedServer::start(8);
    server.drift_after(1);
    let err = EmbedClient::new(config(&server, 4)).unwrap().embed_texts(&texts(10)).unwrap_err();
    assert!(err.to_string().contains("dimension mismatch"), "{err}");
}

#[test]
fn empty_input_is_rejected() {
    let server = MockEmbedServer::start(8);
    let err = EmbedClient::new(config(&server, 4)).unwrap().embed_texts(&[]).unwrap_err();
    assert!(err.to_string().contains("no inputs"));
    assert_eq!(server.requests(), 0);
}

#[test]
fn bearer_token_is_sent() {
    let server = MockEmbedServer::start(8);
    let mut c = config(&server, 4);
    c.api_key = Some("sk-test".into());
    EmbedClient::new(c).unwrap().embed_texts(&texts(2)).unwrap();
    assert_eq!(server.auth_headers(), vec![Some("Bearer sk-test".to_string())]);
}

#[test]
fn long_texts_are_truncated() {
    let server = MockEmbedServer::start(8);
    let mut c = config(&server, 4);
    c.max_chars = Some(5);
    EmbedClient::new(c).unwrap().embed_texts(&["abcdefgh".to_string()]).unwrap();
    assert_eq!(server.inputs(), vec![vec!["abcde".to_string()]]);
}

#[test]
fn prefix_goes_to_queries_only() {
    let server = MockEmbedServer::start(8);
    let client = EmbedClient::new(config(&server, 8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let pairs = vec![TrainPair {
        query_id: "q1".into(),
        query_text: "who wrote hamlet".into(),
        positive_ids: vec!["d0000".into()],
    }];
    let prefix = InstructionPrefix::new("Retrieve passages that answer the question");
    embed_queries(&client, &pairs, &prefix, &dir.path().join("q.ngmx")).unwrap();
    embed_corpus(&client, &corpus(1), &dir.path().join("c.ngmx")).unwrap();
    let inputs = server.inputs();
    assert_eq!(inputs[0], vec!["Retrieve passages that answer the question: who wrote hamlet"]);
    assert_eq!(inputs[1], vec!["document 0"]);
}

#[test]
fn single_passage_corpus() {
    let server = MockEmbedServer::start(16);
    let client = EmbedClient::new(config(&server, 8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = embed_corpus(&client, &corpus(1), &dir.path().join("c.ngmx")).unwrap();
    assert_eq!((run.matrix.num_rows(), run.matrix.dim()), (1, 16));
}

#[test]
fn resume_requests_only_missing_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus.ngmx");
    let corpus = corpus(1000);

    let server = MockEmbedServer::start(8);
    let mut c = config(&server, 100);
    c.max_retries = 0;
    let client = EmbedClient::new(c).unwrap();
    server.fail_after(Some(5));
    assert!(embed_corpus(&client, &corpus, &out).is_err());
    assert_eq!(server.requests(), 6);

    server.fail_after(None);
    server.reset_counters();
    let run = embed_corpus(&client, &corpus, &out).unwrap();
    assert_eq!(run.resumed_rows, 500);
    assert_eq!(run.requested_rows, 500);
    assert_eq!(server.requests(), 5);
    let sent: Vec<String> = server.inputs().concat();
    let expected: Vec<String> = (500..1000).map(|i| format!("document {i}")).collect();
    assert_eq!(sent, expected);

    let reference = MockEmbedServer::start(8);
    let fresh = embed_corpus(
        &EmbedClient::new(config(&reference, 100)).unwrap(),
        &corpus,
        &dir.path().join("fresh.ngmx"),
    )
    .unwrap();
    assert_eq!(run.matrix, fresh.matrix);

    server.reset_counters();
    let again = embed_corpus(&client, &corpus, &out).unwrap();
    assert_eq!(server.requests(), 0);
    assert_eq!(again.requested_rows, 0);
    assert_eq!(again.matrix, fresh.matrix);
}

#[test]
fn resume_with_other_model_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus.ngmx");
    let server = MockEmbedServer::start(8);
    embed_corpus(&EmbedClient::new(config(&server, 4)).unwrap(), &corpus(10), &out).unwrap();
    assert!(fingerprint_path(&out).exists());

    let mut other = config(&server, 4);
    other.model_name = "another-model".into();
    server.reset_counters();
    let err = embed_corpus(&EmbedClient::new(other).unwrap(), &corpus(10), &out).unwrap_err();
    assert!(err.to_string().contains("different model"), "{err}");
    assert_eq!(server.requests(), 0);
}

#[test]
fn resume_with_other_dim_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus.ngmx");
    let first = MockEmbedServer::start(8);
    let mut c = config(&first, 4);
    c.max_retries = 0;
    first.fail_after(Some(1));
    assert!(embed_corpus(&EmbedClient::new(c).unwrap(), &corpus(10), &out).is_err());

    let second = MockEmbedServer::start(12);
    let err = embed_corpus(&EmbedClient::new(config(&second, 4)).unwrap(), &corpus(10), &out).unwrap_err();
    assert!(err.to_string().contains("dimension mismatch"), "{err}");
}
