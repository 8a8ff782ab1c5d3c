//! The remote provider against a local HTTP stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use explainrl::rewards::{ChatConfig, RemoteProvider, RewardError, RewardMode, RewardVector};

struct Seen {
    authorization: Option<String>,
    body: serde_json::Value,
}

/// Serves one canned `(status, body)` per connection, in order.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    match k.to_ascii_lowercase().as_str() {
                        "content-length" => len = v.trim().parse().unwrap(),
                        "authorization" => authorization = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            tx.send(Seen {
                authorization,
                body: serde_json::from_slice(&body).unwrap(),
            })
            .unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn chat_reply(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn config(base_url: String, key_env: &str) -> ChatConfig {
    ChatConfig {
        base_url,
        model: "stub-model".into(),
        retries: 2,
        backoff_ms: 1,
        timeout_secs: 5,
        api_key_env: key_env.into(),
        ..ChatConfig::default()
    }
}

#[test]
fn retries_server_error_then_scores() {
    std::env::set_var("EXPLAINRL_STUB_KEY", "sk-stub");
    let (url, seen) = serve(vec![
        (500, "{}".into()),
        (200, chat_reply(r#"Sure: {"Informativeness": 3, "Persuasiveness": 2}"#)),
    ]);
    let provider = RemoteProvider::new(config(url, "EXPLAINRL_STUB_KEY"), RewardMode::MultiPerspective);
    let score = provider.llm_score("rate this").unwrap();
    assert_eq!(score, RewardVector::Perspectives { info: 3.0, persv: 2.0 });
    for _ in 0..2 {
        let req = seen.recv().unwrap();
        assert_eq!(req.authorization.as_deref(), Some("Bearer sk-stub"));
        assert_eq!(req.body["model"], "stub-model");
        assert_eq!(req.body["messages"][0]["content"], "rate this");
    }
}

#[test]
fn gives_up_after_retries() {
    let (url, seen) = serve(vec![(503, "{}".into()), (503, "{}".into()), (503, "{}".into())]);
    let provider = RemoteProvider::new(config(url, "EXPLAINRL_STUB_KEY_UNSET"), RewardMode::Holistic);
    match provider.llm_score("rate this") {
        Err(RewardError::Unavailable { attempts: 3, .. }) => {}
        other => panic!("{other:?}"),
    }
    assert!(seen.recv().unwrap().authorization.is_none());
}
