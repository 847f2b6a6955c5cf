mod common;

use archevo::genome::{genome_fingerprint, parse_genome, GeMode};
use archevo::llm::{ChatBackend, ChatMessage, CompletionRequest, LlmClient, LlmConfig, LlmError, RetryPolicy};
use archevo::operators::{llm_mutate, transcript_prompt, build_prompt, PromptTemplates, Persona, Target};
use common::{listing_text, Reply, StubServer};

fn config(url: &str) -> LlmConfig {
    LlmConfig {
        endpoint: url.to_string(),
        api_key_env: "ARCHEVO_TEST_UNSET_KEY".into(),
        timeout_secs: 5,
        retry: RetryPolicy {
            base_delay_ms: 5,
            max_delay_ms: 20,
            ..RetryPolicy::default()
        },
        ..LlmConfig::default()
    }
}

fn request() -> CompletionRequest {
    CompletionRequest {
        model: "stub".into(),
        messages: vec![ChatMessage::system("s"), ChatMessage::user("u")],
        temperature: 0.0,
        max_tokens: 16,
    }
}

#[test]
fn rate_limit_then_success() {
    let server = StubServer::start(vec![Reply::status(429), Reply::ok("hello")]);
    let client = LlmClient::new(&config(&server.url)).unwrap();
    let c = client.complete(&request()).unwrap();
    assert_eq!((c.text.as_str(), c.attempts), ("hello", 2));
    assert_eq!(server.count(), 2);
}

#[test]
fn unauthorized_is_not_retried() {
    let server = StubServer::start(vec![Reply::status(401)]);
    let client = LlmClient::new(&config(&server.url)).unwrap();
    assert_eq!(client.complete(&request()), Err(LlmError::Auth { status: 401 }));
    assert_eq!(server.count(), 1);
}

#[test]
fn server_errors_stop_at_max_attempts() {
    let server = StubServer::start(vec![Reply::status(503)]);
    let client = LlmClient::new(&config(&server.url)).unwrap();
    let err = client.complete(&request()).unwrap_err();
    assert_eq!(err, LlmError::Server { status: 503, attempts: 4 });
    assert_eq!(server.count(), 4);
}

#[test]
fn request_body_is_chat_completions_json() {
    let server = StubServer::start(vec![Reply::ok("x")]);
    LlmClient::new(&config(&server.url)).unwrap().complete(&request()).unwrap();
    let body: serde_json::Value = serde_json::from_str(&server.requests.lock().unwrap()[0]).unwrap();
    assert_eq!(body["messages"][1]["role"], "user");
    assert_eq!(body["messages"][1]["content"], "u");
    assert_eq!(body["model"], "stub");
}

#[test]
fn mutation_through_stub_replays() {
    let parent = parse_genome(&listing_text("yolov3.yaml"), GeMode::Ge1).unwrap();
    let answer = "```yaml\nnc: 80\ndepth_multiple: 0.5\nwidth_multiple: 1.0\n```";
    let run = || {
        let server = StubServer::start(vec![Reply::ok(answer)]);
        let cfg = config(&server.url);
        let client = LlmClient::new(&cfg).unwrap();
        let (p, t) = (Persona::default(), PromptTemplates::default());
        let r = llm_mutate(&parent, Target::Parameters, &p, None, &t, &cfg, &client);
        let req = build_prompt(&[&parent], Target::Parameters, &p, None, &t, &cfg);
        (r, req)
    };
    let (first, req) = run();
    let (second, _) = run();
    assert!(first.failure.is_none());
    assert_eq!(first.transcript, second.transcript);
    assert_eq!(first.child_text, second.child_text);
    let child = parse_genome(&first.child_text, GeMode::Ge1).unwrap();
    assert_eq!(child.params().depth_multiple, Some(0.5));
    assert_eq!(child.backbone(), parent.backbone());
    assert_ne!(genome_fingerprint(&child), genome_fingerprint(&parent));
    let expected = archevo::operators::render_transcript(&req, "");
    assert_eq!(transcript_prompt(&first.transcript), transcript_prompt(&expected));
}

#[test]
fn failed_call_is_reported_not_raised() {
    let server = StubServer::start(vec![Reply::status(401)]);
    let cfg = config(&server.url);
    let client = LlmClient::new(&cfg).unwrap();
    let parent = parse_genome(&listing_text("yolov3.yaml"), GeMode::Ge1).unwrap();
    let r = llm_mutate(&parent, Target::Head, &Persona::default(), None, &PromptTemplates::default(), &cfg, &client);
    assert!(r.failure.is_some());
    assert!(r.child_text.is_empty());
}
