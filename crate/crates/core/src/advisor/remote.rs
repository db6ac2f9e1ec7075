use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AdvisorBackend, AdvisorError, StageRequest};

const SYSTEM_PROMPT: &str = "You optimize agent skill packages. Follow the requested reply format exactly.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub base_url: String,
    #[serde(skip_serializing)]
    pub api_key: String,
    pub model: String,
    pub timeout_secs: u64,
}

impl RemoteConfig {
    /// Reads `ADVISOR_BASE_URL` and `ADVISOR_API_KEY`; the model name comes
    /// from the caller.
    pub fn from_env(model: &str) -> Result<Self, AdvisorError> {
        let var = |k: &str| std::env::var(k).map_err(|_| AdvisorError::Backend(format!("{k} is not set")));
        Ok(Self {
            base_url: var("ADVISOR_BASE_URL")?,
            api_key: var("ADVISOR_API_KEY")?,
            model: model.to_string(),
            timeout_secs: 300,
        })
    }
}

/// A chat-completion endpoint, `POST {base_url}/chat/completions`.
pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, AdvisorError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| AdvisorError::Backend(e.to_string()))?;
        Ok(Self { config, client })
    }
}

impl AdvisorBackend for RemoteBackend {
    fn complete(&mut self, request: &StageRequest<'_>) -> Result<String, AdvisorError> {
        let mut user = request.prompt.clone();
        if let Some(note) = &request.retry_note {
            user.push_str(&format!("\n\nYour previous reply could not be parsed ({note}). Reply again in the required format."));
        }
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": user},
            ],
            "max_tokens": request.max_tokens,
            "temperature": 0,
        });
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let resp = self
            .client
            .post(url)
            .bearer_auth(&self.config.api_key)
            .json(&body)
            .send()
            .map_err(|e| AdvisorError::Backend(e.to_string()))?;
        let status = resp.status();
        let value: serde_json::Value = resp.json().map_err(|e| AdvisorError::Backend(e.to_string()))?;
        if !status.is_success() {
            return Err(AdvisorError::Backend(format!("HTTP {status}: {value}")));
        }
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| AdvisorError::Backend(format!("no message content in {value}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advisor::{Advisor, PromptedAdvisor, StageBudgets};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves one canned chat completion and hands back the request body.
    fn stub(reply: &str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let body = serde_json::to_string(&json!({"choices": [{"message": {"content": reply}}]})).unwrap();
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut head = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut req = vec![0; len];
            reader.read_exact(&mut req).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            assert!(head.contains("authorization: Bearer secret") || head.contains("Authorization: Bearer secret"));
            String::from_utf8(req).unwrap()
        });
        (url, handle)
    }

    #[test]
    fn posts_chat_completion() {
        let (url, handle) = stub("TASK_SUMMARY: ORQA model formulation");
        let backend = RemoteBackend::new(RemoteConfig {
            base_url: url,
            api_key: "secret".into(),
            model: "m".into(),
            timeout_secs: 10,
        })
        .unwrap();
        let mut adv = PromptedAdvisor::new(backend, StageBudgets::default());
        let mut snap = std::collections::BTreeMap::new();
        snap.insert("SKILL.md".to_string(), b"---\nname: a\ndescription: d\n---\nbody\n".to_vec());
        let pkg = crate::skill_package::parse_package(&snap).unwrap();
        let (_, _, profile) = adv.comprehend(&pkg).unwrap();
        assert_eq!(profile.task_summary, "ORQA model formulation");
        let sent: serde_json::Value = serde_json::from_str(&handle.join().unwrap()).unwrap();
        assert_eq!(sent["max_tokens"], 1024);
        assert_eq!(sent["temperature"], 0);
        assert_eq!(sent["model"], "m");
        assert!(sent["messages"][1]["content"].as_str().unwrap().starts_with("[comprehend.v1]"));
    }
}
