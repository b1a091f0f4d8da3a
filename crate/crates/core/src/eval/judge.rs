use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::EvalError;
use crate::gateway::{prompts, strip_code_fence, ChatMessage, ChatRequest, LlmClient};
use crate::text;

/// Rubric scores, each an integer from 1 to 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub completeness: u8,
    pub relevance: u8,
    pub coherence: u8,
    pub fluency: u8,
}

impl JudgeScores {
    pub fn new(completeness: u8, relevance: u8, coherence: u8, fluency: u8) -> Result<Self, EvalError> {
        for (name, v) in [
            ("completeness", completeness),
            ("relevance", relevance),
            ("coherence", coherence),
            ("fluency", fluency),
        ] {
            if !(1..=5).contains(&v) {
                return Err(EvalError::Range(format!("{name} = {v} is outside 1..=5")));
            }
        }
        Ok(Self {
            completeness,
            relevance,
            coherence,
            fluency,
        })
    }
}

/// Who scores summaries: an external chat model, or the lexical proxy.
#[derive(Clone, Copy)]
pub enum Judge<'a> {
    Proxy,
    External(&'a dyn LlmClient),
}

impl std::fmt::Debug for Judge<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Proxy => "Proxy",
            Self::External(_) => "External",
        })
    }
}

impl<'a> Judge<'a> {
    /// External judging unless `client` is the offline stub.
    pub fn for_client(client: &'a dyn LlmClient) -> Self {
        if client.is_stub() {
            Self::Proxy
        } else {
            Self::External(client)
        }
    }

    pub fn is_proxy(&self) -> bool {
        matches!(self, Self::Proxy)
    }
}

/// Maps a fraction in [0, 1] to the bands <0.2, <0.4, <0.6, <0.8, rest.
pub fn band(fraction: f64) -> u8 {
    match fraction {
        f if f < 0.2 => 1,
        f if f < 0.4 => 2,
        f if f < 0.6 => 3,
        f if f < 0.8 => 4,
        _ => 5,
    }
}

fn word_set(s: &str) -> HashSet<String> {
    text::content_words(s).into_iter().collect()
}

fn fraction_in(words: &HashSet<String>, other: &HashSet<String>) -> f64 {
    if words.is_empty() {
        return 0.0;
    }
    words.iter().filter(|w| other.contains(*w)).count() as f64 / words.len() as f64
}

/// A sentence reads as well-formed if it starts with an uppercase letter or
/// digit and ends with terminal punctuation.
fn well_formed(sentence: &str) -> bool {
    let first_ok = sentence
        .chars()
        .next()
        .is_some_and(|c| c.is_uppercase() || c.is_ascii_digit());
    first_ok && sentence.ends_with(['.', '!', '?'])
}

/// A sentence reads as fluent if it has 3 to 60 words and no word repeated
/// back to back.
fn fluent(sentence: &str) -> bool {
    let words = text::lower_tokens(sentence);
    (3..=60).contains(&words.len()) && words.windows(2).all(|w| w[0] != w[1])
}

fn sentence_fraction(candidate: &str, test: fn(&str) -> bool) -> f64 {
    let s = text::split_sentences(candidate);
    if s.is_empty() {
        return 0.0;
    }
    s.iter().filter(|x| test(x)).count() as f64 / s.len() as f64
}

/// Lexical stand-in for the chat judge. Completeness is content-word recall
/// against the golden summary and relevance the matching precision;
/// coherence and fluency are sentence-shape heuristics.
pub fn proxy_scores(golden: &str, candidate: &str) -> JudgeScores {
    let (g, c) = (word_set(golden), word_set(candidate));
    JudgeScores {
        completeness: band(fraction_in(&g, &c)),
        relevance: band(fraction_in(&c, &g)),
        coherence: band(sentence_fraction(candidate, well_formed)),
        fluency: band(sentence_fraction(candidate, fluent)),
    }
}

fn parse_scores(reply: &str) -> Result<JudgeScores, String> {
    let v: Value = serde_json::from_str(strip_code_fence(reply)).map_err(|e| e.to_string())?;
    let get = |k: &str| -> Result<u8, String> {
        let x = v.get(k).and_then(Value::as_f64).ok_or_else(|| format!("missing {k}"))?;
        if x.fract() != 0.0 || !(1.0..=5.0).contains(&x) {
            return Err(format!("{k} = {x} is not an integer in 1..=5"));
        }
        Ok(x as u8)
    };
    JudgeScores::new(
        get("completeness")?,
        get("relevance")?,
        get("coherence")?,
        get("fluency")?,
    )
    .map_err(|e| e.to_string())
}

/// Sends `request` and parses the reply, retrying once when it is
/// unparseable.
fn ask<T>(
    client: &dyn LlmClient,
    request: &ChatRequest,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<T, EvalError> {
    let mut last = String::new();
    for _ in 0..2 {
        let reply = client.complete(request)?;
        match parse(&reply) {
            Ok(v) => return Ok(v),
            Err(e) => {
                log::warn!("unparseable judge reply ({e}); retrying");
                last = reply;
            }
        }
    }
    Err(EvalError::JudgeReply(last))
}

pub fn judge_request(source: &str, golden: &str, candidate: &str) -> ChatRequest {
    let user = prompts::JUDGE_INPUT
        .render(&[
            ("text", source),
            ("golden_summary", golden),
            ("test_summary", candidate),
        ])
        .expect("judge input slots are bound");
    ChatRequest {
        messages: vec![ChatMessage::system(prompts::JUDGE.text), ChatMessage::user(user)],
        ..ChatRequest::user("")
    }
}

pub fn judge_scores(source: &str, golden: &str, candidate: &str, judge: Judge<'_>) -> Result<JudgeScores, EvalError> {
    match judge {
        Judge::Proxy => Ok(proxy_scores(golden, candidate)),
        Judge::External(client) => ask(client, &judge_request(source, golden, candidate), parse_scores),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementVerdict {
    pub statement: String,
    pub supported: bool,
}

/// Proxy verdict: every content word of the statement occurs in the source.
pub fn proxy_supported(source_words: &HashSet<String>, statement: &str) -> bool {
    text::content_words(statement).iter().all(|w| source_words.contains(w))
}

fn parse_verdicts(reply: &str) -> Result<Vec<StatementVerdict>, String> {
    serde_json::from_str(strip_code_fence(reply)).map_err(|e| e.to_string())
}

/// Statements of `candidate` with support verdicts against `source`. The
/// proxy uses sentences as statements.
pub fn statement_verdicts(source: &str, candidate: &str, judge: Judge<'_>) -> Result<Vec<StatementVerdict>, EvalError> {
    match judge {
        Judge::Proxy => {
            let words = word_set(source);
            Ok(text::split_sentences(candidate)
                .into_iter()
                .map(|s| StatementVerdict {
                    statement: s.to_string(),
                    supported: proxy_supported(&words, s),
                })
                .collect())
        }
        Judge::External(client) => {
            let prompt = prompts::STATEMENT_FAITHFULNESS
                .render(&[("source", source), ("summary", candidate)])
                .expect("faithfulness slots are bound");
            ask(client, &ChatRequest::user(prompt), parse_verdicts)
        }
    }
}
