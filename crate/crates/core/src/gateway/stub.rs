use serde_json::{Map, Value};

use super::prompts::{self, PromptTemplate};
use super::{ChatRequest, GatewayError, LlmClient};
use crate::lexicon;
use crate::text;

/// Offline client that recognises the rendered templates and answers with
/// fixed rules. Output depends only on the prompt and the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubClient {
    pub seed: u64,
}

impl StubClient {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

/// Text bound to the single trailing placeholder of `t`, if `prompt` was
/// rendered from it.
fn bound_tail<'a>(t: &PromptTemplate, prompt: &'a str) -> Option<&'a str> {
    let slot = format!("<{}>", t.placeholders.last()?);
    let prefix = t.text.strip_suffix(slot.as_str())?;
    prompt.strip_prefix(prefix)
}

fn factual_answer(items: &str) -> String {
    let parsed: Vec<String> = serde_json::from_str(items).unwrap_or_else(|_| {
        items
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    });
    let mut map = Map::new();
    for item in parsed {
        let value = lexicon::stub_replacement(&item);
        map.insert(item, Value::String(value));
    }
    Value::Object(map).to_string()
}

impl LlmClient for StubClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let prompt = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .ok_or_else(|| GatewayError::Unsupported("no user message".into()))?;
        if let Some(items) = bound_tail(&prompts::FACTUAL_HALLUCINATION, prompt) {
            return Ok(factual_answer(items));
        }
        if let Some(sentence) = bound_tail(&prompts::PARAPHRASE_HALLUCINATION, prompt) {
            return Ok(lexicon::stub_paraphrase(sentence, self.seed));
        }
        if let Some(body) = bound_tail(&prompts::SUMMARIZATION, prompt) {
            return Ok(text::split_sentences(body).first().copied().unwrap_or("").to_string());
        }
        let head: String = prompt.chars().take(60).collect();
        Err(GatewayError::Unsupported(head))
    }

    fn is_stub(&self) -> bool {
        true
    }
}
