//! HTTP language-model client and a bounded fan-out helper.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};
use teso_core::config::ClientConfig;
use teso_core::textcues::LlmClient;
use teso_core::{Error, Result};

/// Talks to a completions-style endpoint.
///
/// The request body is `{"model", "prompt", "max_tokens", "temperature": 0}`.
/// The reply may carry the text as `choices[0].text`,
/// `choices[0].message.content`, `response` or `content`.
pub struct HttpClient {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    retries: usize,
}

impl HttpClient {
    pub fn new(config: &ClientConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .build()
            .into();
        Self { agent, endpoint: config.endpoint.clone(), model: config.model.clone(), retries: config.retries }
    }

    fn attempt(&self, prompt: &str) -> Result<String> {
        let body = json!({ "model": self.model, "prompt": prompt, "max_tokens": 512, "temperature": 0 });
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| Error::Transport(format!("{}: {e}", self.endpoint)))?;
        let v: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(format!("{}: unreadable reply: {e}", self.endpoint)))?;
        extract_text(&v).ok_or_else(|| Error::Transport(format!("{}: reply has no completion text", self.endpoint)))
    }
}

pub fn extract_text(v: &Value) -> Option<String> {
    let choice = v.get("choices").and_then(|c| c.get(0));
    choice
        .and_then(|c| c.get("text"))
        .or_else(|| choice.and_then(|c| c.get("message")).and_then(|m| m.get("content")))
        .or_else(|| v.get("response"))
        .or_else(|| v.get("content"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

impl LlmClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let mut last = None;
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 * attempt as u64));
            }
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("completion attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.unwrap_or_else(|| Error::Transport("no attempt made".into())))
    }
}

/// Applies `f` to every item with at most `max_in_flight` calls running at
/// once; results keep input order.
pub fn map_bounded<T: Sync, R: Send>(items: &[T], max_in_flight: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = max_in_flight.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("result slots").into_iter().map(|r| r.expect("every item processed")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves `replies` in order, one connection each, then stops.
    fn serve(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
        let h = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut r = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    r.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                r.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut w = stream;
                write!(
                    w,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, h)
    }

    fn client(url: &str, retries: usize) -> HttpClient {
        HttpClient::new(&ClientConfig { endpoint: url.into(), retries, timeout_secs: 5, ..ClientConfig::default() })
    }

    #[test]
    fn reads_completion_text_and_sends_prompt() {
        let (url, h) = serve(vec![(200, r#"{"choices":[{"text":"Answer: [dog]"}]}"#.into())]);
        assert_eq!(client(&url, 0).complete("hello").unwrap(), "Answer: [dog]");
        let sent: Value = serde_json::from_str(&h.join().unwrap()[0]).unwrap();
        assert_eq!(sent["prompt"], "hello");
    }

    #[test]
    fn retries_after_server_error() {
        let (url, h) = serve(vec![(500, "{}".into()), (200, r#"{"response":"[cat]"}"#.into())]);
        assert_eq!(client(&url, 1).complete("p").unwrap(), "[cat]");
        assert_eq!(h.join().unwrap().len(), 2);
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let err = client(&format!("http://127.0.0.1:{port}/x"), 0).complete("p").unwrap_err();
        assert!(matches!(err, Error::Transport(_)));
    }

    #[test]
    fn reply_shapes() {
        assert_eq!(extract_text(&json!({"choices":[{"message":{"content":"a"}}]})).as_deref(), Some("a"));
        assert_eq!(extract_text(&json!({"content":"b"})).as_deref(), Some("b"));
        assert_eq!(extract_text(&json!({"other":1})), None);
    }

    #[test]
    fn bounded_map_keeps_order() {
        let items: Vec<u32> = (0..37).collect();
        assert_eq!(map_bounded(&items, 4, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(map_bounded(&items, 1, |x| x + 1)[36], 37);
    }
}
