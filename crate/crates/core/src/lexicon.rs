//! Bundled word lists for entity extraction, stub augmentation and stub
//! paraphrasing.

use crate::util::fnv1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GazetteerKind {
    Place,
    Person,
    Organization,
}

pub const PLACES: &[&str] = &[
    "Seattle", "Portland", "Denver", "Chicago", "Boston", "Atlanta", "Houston", "Phoenix", "Dallas", "Miami", "London",
    "Paris", "Berlin", "Madrid", "Rome", "Tokyo", "Sydney", "Toronto", "Dublin", "Oslo",
];

pub const PEOPLE: &[&str] = &[
    "Alice Morgan",
    "Brian Chen",
    "Carla Diaz",
    "David Okafor",
    "Elena Petrova",
    "Frank Miller",
    "Grace Kim",
    "Henry Walsh",
    "Irene Novak",
    "James Patel",
];

pub const ORGANIZATIONS: &[&str] = &[
    "Google",
    "Microsoft",
    "Reuters",
    "NASA",
    "UNICEF",
    "Boeing",
    "Toyota",
    "Siemens",
    "Oxfam",
    "Nintendo",
];

/// Replacement pool for capitalized spans that are not in the gazetteer.
pub const SPAN_POOL: &[&str] = &[
    "Northfield",
    "Westbrook",
    "Oakridge",
    "Riverside",
    "Harbor Group",
    "Lakeview",
    "Summit Partners",
    "Greenfield",
    "Ashford",
    "Kingsley",
];

/// Clauses the stub paraphraser appends; none is supported by any source.
pub const UNVERIFIABLE_CLAUSES: &[&str] = &[
    ", according to people familiar with the matter",
    ", which reportedly surprised local observers",
    ", a move analysts expect to have lasting effects",
    ", amid growing public interest in the issue",
    ", following months of private discussions",
    ", as several experts had privately predicted",
    ", despite earlier assurances from officials",
    ", in what insiders called a turning point",
];

/// Word-level rewrites used by the stub paraphraser.
pub const SYNONYMS: &[(&str, &str)] = &[
    ("said", "stated"),
    ("says", "states"),
    ("big", "large"),
    ("many", "numerous"),
    ("help", "assist"),
    ("helped", "assisted"),
    ("show", "demonstrate"),
    ("showed", "demonstrated"),
    ("start", "begin"),
    ("started", "began"),
    ("buy", "purchase"),
    ("bought", "purchased"),
    ("use", "utilize"),
    ("used", "utilized"),
    ("important", "significant"),
    ("new", "recent"),
    ("people", "individuals"),
    ("also", "additionally"),
    ("about", "roughly"),
    ("get", "obtain"),
    ("got", "obtained"),
    ("make", "create"),
    ("made", "created"),
    ("end", "conclude"),
    ("ended", "concluded"),
    ("tell", "inform"),
    ("told", "informed"),
    ("need", "require"),
    ("needs", "requires"),
    ("try", "attempt"),
    ("tried", "attempted"),
    ("quick", "rapid"),
    ("quickly", "rapidly"),
    ("hard", "difficult"),
    ("main", "primary"),
    ("won", "secured"),
    ("lost", "forfeited"),
    ("met", "convened"),
    ("left", "departed"),
    ("plan", "proposal"),
];

/// Gazetteer kind of an exact surface form.
pub fn gazetteer_kind(surface: &str) -> Option<GazetteerKind> {
    if PLACES.contains(&surface) {
        Some(GazetteerKind::Place)
    } else if PEOPLE.contains(&surface) {
        Some(GazetteerKind::Person)
    } else if ORGANIZATIONS.contains(&surface) {
        Some(GazetteerKind::Organization)
    } else {
        None
    }
}

pub fn gazetteer_entries(kind: GazetteerKind) -> &'static [&'static str] {
    match kind {
        GazetteerKind::Place => PLACES,
        GazetteerKind::Person => PEOPLE,
        GazetteerKind::Organization => ORGANIZATIONS,
    }
}

/// All gazetteer entries, longest first.
pub fn gazetteer_all() -> Vec<&'static str> {
    let mut all: Vec<&str> = PLACES.iter().chain(PEOPLE).chain(ORGANIZATIONS).copied().collect();
    all.sort_by_key(|s| std::cmp::Reverse(s.len()));
    all
}

/// Increments the final ASCII digit; `9` wraps to `0` without carrying so
/// the length never changes. `None` when there is no digit.
pub fn bump_final_digit(surface: &str) -> Option<String> {
    let pos = surface.rfind(|c: char| c.is_ascii_digit())?;
    let d = surface.as_bytes()[pos] - b'0';
    let next = (b'0' + (d + 1) % 10) as char;
    let mut out = String::with_capacity(surface.len());
    out.push_str(&surface[..pos]);
    out.push(next);
    out.push_str(&surface[pos + 1..]);
    Some(out)
}

/// Deterministic "close but different" value for an entity surface form.
pub fn stub_replacement(surface: &str) -> String {
    if let Some(bumped) = bump_final_digit(surface) {
        return bumped;
    }
    if let Some(kind) = gazetteer_kind(surface) {
        let list = gazetteer_entries(kind);
        let i = list.iter().position(|&e| e == surface).expect("entry present");
        return list[(i + 1) % list.len()].to_string();
    }
    let start = (fnv1a(surface.as_bytes()) % SPAN_POOL.len() as u64) as usize;
    (0..SPAN_POOL.len())
        .map(|k| SPAN_POOL[(start + k) % SPAN_POOL.len()])
        .find(|&c| c != surface)
        .expect("pool has at least two entries")
        .to_string()
}

fn match_case(template: &str, word: &str) -> String {
    if template.chars().next().is_some_and(char::is_uppercase) {
        let mut c = word.chars();
        match c.next() {
            Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
            None => String::new(),
        }
    } else {
        word.to_string()
    }
}

/// Rewrites a sentence with the synonym table and inserts an unverifiable
/// clause before its terminal punctuation. The result always differs from
/// the input and remains a single sentence.
pub fn stub_paraphrase(sentence: &str, seed: u64) -> String {
    let trimmed = sentence.trim_end();
    let trailing_ws = &sentence[trimmed.len()..];
    let (body, punct) = match trimmed.char_indices().last() {
        Some((i, '.' | '!' | '?')) => (&trimmed[..i], &trimmed[i..]),
        _ => (trimmed, ""),
    };
    let mut rewritten = String::with_capacity(body.len() + 64);
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if !word.is_empty() {
            let lower = word.to_lowercase();
            match SYNONYMS.iter().find(|(from, _)| *from == lower) {
                Some((_, to)) => out.push_str(&match_case(word, to)),
                None => out.push_str(word),
            }
            word.clear();
        }
    };
    for c in body.chars() {
        if c.is_alphabetic() {
            word.push(c);
        } else {
            flush(&mut word, &mut rewritten);
            rewritten.push(c);
        }
    }
    flush(&mut word, &mut rewritten);
    let pick = (fnv1a(sentence.as_bytes()) ^ seed) % UNVERIFIABLE_CLAUSES.len() as u64;
    let clause = UNVERIFIABLE_CLAUSES[pick as usize];
    let punct = if punct.is_empty() { "." } else { punct };
    format!("{rewritten}{clause}{punct}{trailing_ws}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digit_rule_has_no_carry() {
        assert_eq!(stub_replacement("1996"), "1997");
        assert_eq!(stub_replacement("1999"), "1990");
        assert_eq!(stub_replacement("May 20"), "May 21");
        assert_eq!(stub_replacement("3.5%"), "3.6%");
    }

    #[test]
    fn gazetteer_rule_cycles_within_kind() {
        assert_eq!(stub_replacement("Seattle"), "Portland");
        assert_eq!(stub_replacement("Oslo"), "Seattle");
        assert_eq!(stub_replacement("Nintendo"), "Google");
    }

    #[test]
    fn unknown_spans_swap_from_pool() {
        let r = stub_replacement("Zanzibar Trust");
        assert!(SPAN_POOL.contains(&r.as_str()));
        for &p in SPAN_POOL {
            assert_ne!(stub_replacement(p), p);
        }
    }

    #[test]
    fn stub_paraphrase_keeps_one_sentence_and_changes_text() {
        let s = "The mayor said the plan would help many people.";
        let p = stub_paraphrase(s, 0);
        assert_ne!(p, s);
        assert!(p.starts_with("The mayor stated the proposal would assist numerous individuals"));
        assert!(p.ends_with('.'));
        assert_eq!(p.matches(". ").count(), 0);
        assert_eq!(stub_paraphrase(s, 0), p);
    }

    #[test]
    fn stub_paraphrase_handles_missing_punctuation() {
        let p = stub_paraphrase("Prices rose", 3);
        assert!(p.starts_with("Prices rose, "));
        assert!(p.ends_with('.'));
    }

    #[test]
    fn gazetteer_lists_have_no_duplicates() {
        let all = gazetteer_all();
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), all.len());
    }
}
