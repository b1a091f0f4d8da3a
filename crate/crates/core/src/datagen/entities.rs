use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::lexicon;
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntityKind {
    Number,
    Date,
    CapitalizedSpan,
    GazetteerMatch,
}

/// An entity occurrence; `start..end` is a byte range of the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub kind: EntityKind,
}

const MONTHS: &str = "January|February|March|April|May|June|July|August|September|October|November|December";
const MONTH_ABBR: &str = "Jan|Feb|Mar|Apr|Jun|Jul|Aug|Sep|Sept|Oct|Nov|Dec";
const WEEKDAYS: &[&str] = &[
    "Monday",
    "Tuesday",
    "Wednesday",
    "Thursday",
    "Friday",
    "Saturday",
    "Sunday",
];

static DATE_PATTERNS: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    [
        format!(r"\b(?:{MONTHS}|(?:{MONTH_ABBR})\.?)\s+\d{{1,2}}(?:st|nd|rd|th)?(?:,?\s+\d{{4}})?\b"),
        format!(r"\b\d{{1,2}}(?:st|nd|rd|th)?\s+(?:{MONTHS})(?:,?\s+\d{{4}})?\b"),
        format!(r"\b(?:{MONTHS})\s+\d{{4}}\b"),
        r"\b\d{4}-\d{2}-\d{2}\b".to_string(),
        r"\b\d{1,2}/\d{1,2}/\d{2,4}\b".to_string(),
    ]
    .iter()
    .map(|p| Regex::new(p).expect("valid date pattern"))
    .collect()
});

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b\d+(?:[.,]\d+)*%?").expect("valid number pattern"));

static CAPITALIZED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b[A-Z][A-Za-z'\-]*(?:[ \t]+[A-Z][A-Za-z'\-]*)*").expect("valid span pattern"));

fn is_calendar_word(w: &str) -> bool {
    MONTHS.split('|').any(|m| m == w) || WEEKDAYS.contains(&w)
}

fn span(text: &str, start: usize, end: usize, kind: EntityKind) -> EntitySpan {
    EntitySpan {
        text: text[start..end].to_string(),
        start,
        end,
        kind,
    }
}

/// Capitalized-span candidates after the sentence-initial rules: a leading
/// function word at a sentence start is dropped, and a lone capitalized word
/// at a sentence start is kept only if it is in the gazetteer.
fn capitalized_candidates(text: &str, out: &mut Vec<EntitySpan>) {
    let starts: Vec<usize> = text::sentence_spans(text).iter().map(|s| s.0).collect();
    for m in CAPITALIZED.find_iter(text) {
        let (mut start, end) = (m.start(), m.end());
        let mut sentence_initial = starts.contains(&start);
        if sentence_initial {
            let first_end = text[start..end].find([' ', '\t']).map_or(end, |p| start + p);
            let first = text[start..first_end].to_lowercase();
            if first_end < end && text::is_stopword(&first) {
                start = first_end + text[first_end..end].len() - text[first_end..end].trim_start().len();
                sentence_initial = false;
            }
        }
        let surface = &text[start..end];
        if let Some(_kind) = lexicon::gazetteer_kind(surface) {
            out.push(span(text, start, end, EntityKind::GazetteerMatch));
            continue;
        }
        let single = !surface.contains([' ', '\t']);
        if single && (sentence_initial || is_calendar_word(surface)) {
            continue;
        }
        out.push(span(text, start, end, EntityKind::CapitalizedSpan));
    }
}

/// Gazetteer entries found anywhere with word boundaries.
fn gazetteer_candidates(text: &str, out: &mut Vec<EntitySpan>) {
    for entry in lexicon::gazetteer_all() {
        let mut from = 0;
        while let Some(p) = text[from..].find(entry) {
            let start = from + p;
            let end = start + entry.len();
            let before_ok = text[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
            let after_ok = text[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
            if before_ok && after_ok {
                out.push(span(text, start, end, EntityKind::GazetteerMatch));
            }
            from = end;
        }
    }
}

/// Pattern-based entity extraction. Overlapping candidates are resolved
/// longest first (ties: earliest start, then kind order date, gazetteer,
/// number, capitalized); the result is sorted by position.
pub fn extract_entities(text: &str) -> Vec<EntitySpan> {
    let mut candidates = Vec::new();
    for re in DATE_PATTERNS.iter() {
        candidates.extend(
            re.find_iter(text)
                .map(|m| span(text, m.start(), m.end(), EntityKind::Date)),
        );
    }
    gazetteer_candidates(text, &mut candidates);
    candidates.extend(
        NUMBER
            .find_iter(text)
            .map(|m| span(text, m.start(), m.end(), EntityKind::Number)),
    );
    capitalized_candidates(text, &mut candidates);
    let rank = |k: EntityKind| match k {
        EntityKind::Date => 0,
        EntityKind::GazetteerMatch => 1,
        EntityKind::Number => 2,
        EntityKind::CapitalizedSpan => 3,
    };
    candidates.sort_by(|a, b| {
        (b.end - b.start)
            .cmp(&(a.end - a.start))
            .then(a.start.cmp(&b.start))
            .then(rank(a.kind).cmp(&rank(b.kind)))
    });
    let mut accepted: Vec<EntitySpan> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|a| c.end <= a.start || c.start >= a.end) {
            accepted.push(c);
        }
    }
    accepted.sort_by_key(|s| s.start);
    accepted
}
