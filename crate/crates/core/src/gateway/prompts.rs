//! Prompt templates with `<placeholder>` slots.

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub text: &'static str,
    pub placeholders: &'static [&'static str],
    /// `false` for templates written for this crate.
    pub verbatim: bool,
}

pub const FACTUAL_HALLUCINATION: PromptTemplate = PromptTemplate {
    name: "factual_hallucination",
    text: include_str!("prompts/factual_hallucination.txt"),
    placeholders: &["list_of_entities_to_augment"],
    verbatim: true,
};

pub const PARAPHRASE_HALLUCINATION: PromptTemplate = PromptTemplate {
    name: "paraphrase_hallucination",
    text: include_str!("prompts/paraphrase_hallucination.txt"),
    placeholders: &["sentence"],
    verbatim: true,
};

pub const SUMMARIZATION: PromptTemplate = PromptTemplate {
    name: "summarization",
    text: include_str!("prompts/summarization.txt"),
    placeholders: &["text"],
    verbatim: true,
};

/// Shipped for completeness; the generation pipeline does not use it and the
/// meaning of its `<location>` and `<nli_sentiment>` slots is unspecified.
pub const STANDARD_HALLUCINATION: PromptTemplate = PromptTemplate {
    name: "standard_hallucination",
    text: include_str!("prompts/standard_hallucination.txt"),
    placeholders: &["location", "nli_sentiment", "text"],
    verbatim: true,
};

/// Judge system prompt. It has no slots; the texts go in a user message built
/// from [`JUDGE_INPUT`].
pub const JUDGE: PromptTemplate = PromptTemplate {
    name: "judge",
    text: include_str!("prompts/judge.txt"),
    placeholders: &[],
    verbatim: true,
};

/// Supplies the three texts to the judge and asks for machine-readable
/// scores.
pub const JUDGE_INPUT: PromptTemplate = PromptTemplate {
    name: "judge_input",
    text: "text:\n<text>\n\ngolden summary:\n<golden_summary>\n\ntest summary:\n<test_summary>\n\n\
Reply with only a JSON object of the form {\"completeness\": n, \"relevance\": n, \"coherence\": n, \"fluency\": n} \
where each n is an integer from 1 to 5.",
    placeholders: &["text", "golden_summary", "test_summary"],
    verbatim: false,
};

/// Atomic statement extraction and support verdicts for the faithfulness
/// score.
pub const STATEMENT_FAITHFULNESS: PromptTemplate = PromptTemplate {
    name: "statement_faithfulness",
    text: "Break the summary below into short atomic factual statements. For each statement decide whether it \
is fully supported by the source text. Reply with only a JSON array of objects of the form \
{\"statement\": \"...\", \"supported\": true} and nothing else.\n\nSource text:\n<source>\n\nSummary:\n<summary>",
    placeholders: &["source", "summary"],
    verbatim: false,
};

/// Compact summarization instruction for toy-scale models.
pub const COMPACT_SUMMARIZATION: PromptTemplate = PromptTemplate {
    name: "compact_summarization",
    text: "<text>\nSummary: ",
    placeholders: &["text"],
    verbatim: false,
};

pub const ALL: &[PromptTemplate] = &[
    FACTUAL_HALLUCINATION,
    PARAPHRASE_HALLUCINATION,
    SUMMARIZATION,
    STANDARD_HALLUCINATION,
    JUDGE,
    JUDGE_INPUT,
    STATEMENT_FAITHFULNESS,
    COMPACT_SUMMARIZATION,
];

pub fn by_name(name: &str) -> Option<PromptTemplate> {
    ALL.iter().copied().find(|t| t.name == name)
}

impl PromptTemplate {
    /// Substitutes every `<name>` slot. Each declared placeholder must be
    /// bound exactly once and no other binding may be supplied.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, GatewayError> {
        for (i, (name, _)) in bindings.iter().enumerate() {
            if !self.placeholders.contains(name) {
                return Err(GatewayError::Render(format!(
                    "template {} has no placeholder <{name}>",
                    self.name
                )));
            }
            if bindings[..i].iter().any(|(n, _)| n == name) {
                return Err(GatewayError::Render(format!("placeholder <{name}> bound twice")));
            }
        }
        if let Some(missing) = self
            .placeholders
            .iter()
            .find(|p| !bindings.iter().any(|(n, _)| n == *p))
        {
            return Err(GatewayError::Render(format!(
                "template {} requires placeholder <{missing}>",
                self.name
            )));
        }
        // Single left-to-right pass so bound values are never re-scanned.
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text;
        while let Some(open) = rest.find('<') {
            out.push_str(&rest[..open]);
            let tail = &rest[open..];
            let hit = bindings
                .iter()
                .find(|(n, _)| tail[1..].strip_prefix(n).is_some_and(|r| r.starts_with('>')));
            match hit {
                Some((n, v)) => {
                    out.push_str(v);
                    rest = &tail[n.len() + 2..];
                }
                None => {
                    out.push('<');
                    rest = &tail[1..];
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}
