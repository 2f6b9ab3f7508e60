//! Chat-completions HTTP backend (the de-facto `/chat/completions` JSON shape).

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{
    ChatBackend, Completion, Conversation, EndpointConfig, FinishReason, GatewayError, GenParams,
    Usage,
};

pub struct HttpBackend {
    endpoint: EndpointConfig,
    client: reqwest::blocking::Client,
    auth_token: Option<String>,
}

impl HttpBackend {
    pub fn new(endpoint: EndpointConfig) -> Result<Self, GatewayError> {
        endpoint.validate()?;
        let auth_token = match &endpoint.auth_token_env_var {
            Some(var) if !var.is_empty() => std::env::var(var).ok(),
            _ => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(endpoint.timeout_ms))
            .build()
            .map_err(|e| GatewayError::Transport { message: e.to_string(), retries: 0 })?;
        Ok(Self { endpoint, client, auth_token })
    }

    fn request_body(&self, conv: &Conversation, params: &GenParams) -> serde_json::Value {
        let messages: Vec<_> = conv
            .messages
            .iter()
            .map(|m| json!({"role": m.role, "content": m.content}))
            .collect();
        let mut body = json!({
            "model": self.endpoint.model_name,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        if let Some(stop) = &params.stop {
            body["stop"] = json!(stop);
        }
        if let Some(logprobs) = params.logprobs {
            body["logprobs"] = json!(logprobs);
        }
        body
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Vec<WireTokenLogprob>,
}

#[derive(Deserialize)]
struct WireTokenLogprob {
    token: String,
    logprob: f64,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

fn parse_finish_reason(raw: Option<&str>) -> Result<FinishReason, GatewayError> {
    match raw {
        None | Some("stop") => Ok(FinishReason::Stop),
        Some("length") => Ok(FinishReason::Length),
        Some("content_filter") => Ok(FinishReason::Filtered),
        Some(other) => Err(GatewayError::Decode(format!("unknown finish_reason {other:?}"))),
    }
}

fn excerpt(body: &str) -> String {
    let trimmed = body.trim();
    if trimmed.len() > 200 {
        format!("{}...", &trimmed[..200])
    } else {
        trimmed.to_string()
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, conv: &Conversation, params: &GenParams) -> Result<Completion, GatewayError> {
        let url = format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'));
        let mut request = self.client.post(&url).json(&self.request_body(conv, params));
        if let Some(token) = &self.auth_token {
            request = request.bearer_auth(token);
        }
        let response = request
            .send()
            .map_err(|e| GatewayError::Transport { message: e.to_string(), retries: 0 })?;

        let status = response.status().as_u16();
        let text = response
            .text()
            .map_err(|e| GatewayError::Transport { message: e.to_string(), retries: 0 })?;
        if status >= 400 {
            return Err(GatewayError::Request { status, body_excerpt: excerpt(&text) });
        }

        let wire: WireResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::Decode(e.to_string()))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::Decode("response has no choices".into()))?;
        let content = choice
            .message
            .content
            .ok_or_else(|| GatewayError::Decode("choice has no message content".into()))?;
        let finish_reason = parse_finish_reason(choice.finish_reason.as_deref())?;

        let token_logprobs = match choice.logprobs {
            Some(lp) if !lp.content.is_empty() => {
                let pairs: Vec<(String, f64)> =
                    lp.content.into_iter().map(|t| (t.token, t.logprob)).collect();
                for (token, logprob) in &pairs {
                    if *logprob > 0.0 || !logprob.is_finite() {
                        return Err(GatewayError::Decode(format!(
                            "token {token:?} has invalid logprob {logprob}"
                        )));
                    }
                }
                Some(pairs)
            }
            _ => None,
        };
        let usage = wire.usage.unwrap_or_default();

        Ok(Completion {
            text: content,
            finish_reason,
            token_logprobs,
            usage: Usage {
                prompt_tokens: usage.prompt_tokens,
                completion_tokens: usage.completion_tokens,
            },
        })
    }

    fn model_name(&self) -> &str {
        &self.endpoint.model_name
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finish_reason_mapping() {
        assert_eq!(parse_finish_reason(Some("stop")).unwrap(), FinishReason::Stop);
        assert_eq!(parse_finish_reason(None).unwrap(), FinishReason::Stop);
        assert_eq!(parse_finish_reason(Some("length")).unwrap(), FinishReason::Length);
        assert_eq!(parse_finish_reason(Some("content_filter")).unwrap(), FinishReason::Filtered);
        assert!(parse_finish_reason(Some("eos")).is_err());
    }

    #[test]
    fn body_includes_optional_fields_only_when_set() {
        let endpoint = EndpointConfig {
            base_url: "http://localhost:1".into(),
            model_name: "m".into(),
            auth_token_env_var: None,
            timeout_ms: 1000,
            max_retries: 0,
            max_concurrency: 1,
            retry_base_ms: 1,
        };
        let backend = HttpBackend::new(endpoint).unwrap();
        let conv = Conversation::single_user("hi");
        let mut params = GenParams::new(0.7, 64);
        let body = backend.request_body(&conv, &params);
        assert!(body.get("seed").is_none());
        assert!(body.get("stop").is_none());
        params.seed = Some(7);
        params.stop = Some(vec!["\n".into()]);
        let body = backend.request_body(&conv, &params);
        assert_eq!(body["seed"], 7);
        assert_eq!(body["max_tokens"], 64);
    }
}
