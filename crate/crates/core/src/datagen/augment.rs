use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::entities::{EntityKind, EntitySpan};
use crate::gateway::{prompts, strip_code_fence, ChatRequest, LlmClient};
use crate::lexicon;
use crate::text;

/// One entity substitution, positioned in the original text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    pub start: usize,
    pub end: usize,
    pub original: String,
    pub replacement: String,
    pub kind: EntityKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Augmentation {
    pub text: String,
    pub replacements: Vec<Replacement>,
    /// Set when there was nothing to replace.
    pub no_entities: bool,
    /// Number of entities whose value came from the stub rules because the
    /// client failed or answered unusably.
    pub fallbacks: usize,
}

/// A client value is usable if it is a different, single-line, single
/// sentence string.
fn usable(original: &str, value: &str) -> bool {
    let v = value.trim();
    !v.is_empty() && v != original && !v.contains('\n') && text::sentence_spans(v).len() == 1
}

/// Asks `client` for close-but-different values of every entity surface.
fn client_values(entities: &[EntitySpan], client: &dyn LlmClient) -> Option<BTreeMap<String, String>> {
    let mut unique: Vec<&str> = Vec::new();
    for e in entities {
        if !unique.contains(&e.text.as_str()) {
            unique.push(&e.text);
        }
    }
    let list = serde_json::to_string(&unique).expect("strings serialize");
    let prompt = prompts::FACTUAL_HALLUCINATION
        .render(&[("list_of_entities_to_augment", &list)])
        .expect("template has one slot");
    let reply = match client.complete(&ChatRequest::user(prompt)) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("factual augmentation client failed, using stub values: {e}");
            return None;
        }
    };
    let parsed: serde_json::Map<String, serde_json::Value> = match serde_json::from_str(strip_code_fence(&reply)) {
        Ok(m) => m,
        Err(e) => {
            log::warn!("factual augmentation reply is not a JSON object ({e}); using stub values");
            return None;
        }
    };
    Some(
        parsed
            .into_iter()
            .filter_map(|(k, v)| match v {
                serde_json::Value::String(s) => Some((k, s)),
                serde_json::Value::Number(n) => Some((k, n.to_string())),
                _ => None,
            })
            .collect(),
    )
}

/// Replaces each entity in `text` with a false value, leaving everything
/// else byte-identical. Entities must be non-overlapping.
pub fn factual_augment(text: &str, entities: &[EntitySpan], client: &dyn LlmClient) -> Augmentation {
    if entities.is_empty() {
        return Augmentation {
            text: text.to_string(),
            replacements: Vec::new(),
            no_entities: true,
            fallbacks: 0,
        };
    }
    let values = client_values(entities, client);
    let mut fallbacks = 0;
    let mut replacements: Vec<Replacement> = entities
        .iter()
        .map(|e| {
            let from_client = values
                .as_ref()
                .and_then(|m| m.get(&e.text))
                .map(|v| v.trim().to_string())
                .filter(|v| usable(&e.text, v));
            let replacement = from_client.unwrap_or_else(|| {
                fallbacks += 1;
                lexicon::stub_replacement(&e.text)
            });
            Replacement {
                start: e.start,
                end: e.end,
                original: e.text.clone(),
                replacement,
                kind: e.kind,
            }
        })
        .collect();
    replacements.sort_by_key(|r| r.start);
    let mut out = String::with_capacity(text.len() + 16);
    let mut cursor = 0;
    for r in &replacements {
        out.push_str(&text[cursor..r.start]);
        out.push_str(&r.replacement);
        cursor = r.end;
    }
    out.push_str(&text[cursor..]);
    Augmentation {
        text: out,
        replacements,
        no_entities: false,
        fallbacks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::entities::extract_entities;
    use crate::gateway::{GatewayError, StubClient};

    struct Fixed(&'static str);

    impl LlmClient for Fixed {
        fn complete(&self, _: &ChatRequest) -> Result<String, GatewayError> {
            Ok(self.0.to_string())
        }
    }

    struct Down;

    impl LlmClient for Down {
        fn complete(&self, _: &ChatRequest) -> Result<String, GatewayError> {
            Err(GatewayError::Network {
                attempts: 4,
                message: "refused".into(),
            })
        }
    }

    /// Characters outside the replaced spans must be unchanged.
    fn assert_diff_confined(original: &str, aug: &Augmentation) {
        let mut o = 0;
        let mut a = 0;
        for r in &aug.replacements {
            let gap = r.start - o;
            assert_eq!(&original[o..r.start], &aug.text[a..a + gap]);
            a += gap + r.replacement.len();
            o = r.end;
            assert_ne!(r.original, r.replacement);
        }
        assert_eq!(&original[o..], &aug.text[a..]);
    }

    #[test]
    fn stub_values_replace_each_entity() {
        let text = "She was 34 in 1996 in Seattle.";
        let aug = factual_augment(text, &extract_entities(text), &StubClient::new(0));
        assert_eq!(aug.text, "She was 35 in 1997 in Portland.");
        assert_eq!(aug.fallbacks, 0);
        assert_diff_confined(text, &aug);
    }

    #[test]
    fn no_entities_returns_input_with_flag() {
        let aug = factual_augment("nothing here", &[], &StubClient::new(0));
        assert!(aug.no_entities);
        assert_eq!(aug.text, "nothing here");
        assert!(aug.replacements.is_empty());
    }

    #[test]
    fn client_failure_falls_back_to_stub() {
        let text = "Prices rose 4% in Denver.";
        let aug = factual_augment(text, &extract_entities(text), &Down);
        assert_eq!(aug.text, "Prices rose 5% in Chicago.");
        assert_eq!(aug.fallbacks, 2);
    }

    #[test]
    fn malformed_items_fall_back_individually() {
        let text = "Prices rose 4% in Denver.";
        let client = Fixed("```json\n{\"4%\": \"4%\", \"Denver\": \"Austin\"}\n```");
        let aug = factual_augment(text, &extract_entities(text), &client);
        assert_eq!(aug.text, "Prices rose 5% in Austin.");
        assert_eq!(aug.fallbacks, 1);
        assert_diff_confined(text, &aug);
    }

    #[test]
    fn multi_sentence_values_are_rejected() {
        let text = "It happened in Denver.";
        let aug = factual_augment(
            text,
            &extract_entities(text),
            &Fixed("{\"Denver\": \"Austin. Then more\"}"),
        );
        assert_eq!(aug.text, "It happened in Chicago.");
    }
}
