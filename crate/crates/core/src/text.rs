//! Sentence segmentation and word-level tokenization shared by data
//! generation and evaluation.

/// Tokens ending in a period that do not end a sentence.
const ABBREVIATIONS: &[&str] = &[
    "mr.", "mrs.", "ms.", "dr.", "prof.", "st.", "sr.", "jr.", "inc.", "ltd.", "co.", "corp.", "vs.", "etc.", "e.g.",
    "i.e.", "u.s.", "u.k.", "no.", "gen.", "gov.", "sen.", "rep.", "jan.", "feb.", "mar.", "apr.", "aug.", "sept.",
    "sep.", "oct.", "nov.", "dec.", "a.m.", "p.m.",
];

/// Sentence boundaries as byte ranges. A sentence ends at `.`, `!` or `?`
/// followed by whitespace, unless the word ending there is a known
/// abbreviation. Text after the last boundary forms a final sentence when it
/// is not blank. Whitespace between sentences belongs to neither.
pub fn sentence_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut start = skip_ws(text, 0);
    let mut i = start;
    while i < bytes.len() {
        let c = bytes[i];
        if matches!(c, b'.' | b'!' | b'?') && i + 1 < bytes.len() && (bytes[i + 1] as char).is_ascii_whitespace() {
            let word_start = text[start..=i]
                .rfind(char::is_whitespace)
                .map_or(start, |p| start + p + 1);
            let word = text[word_start..=i].to_lowercase();
            if c != b'.' || !ABBREVIATIONS.contains(&word.as_str()) {
                spans.push((start, i + 1));
                start = skip_ws(text, i + 1);
                i = start;
                continue;
            }
        }
        i += 1;
    }
    let end = text.trim_end().len();
    if start < end {
        spans.push((start, end));
    }
    spans
}

fn skip_ws(text: &str, from: usize) -> usize {
    text[from..]
        .char_indices()
        .find(|(_, c)| !c.is_whitespace())
        .map_or(text.len(), |(p, _)| from + p)
}

pub fn split_sentences(text: &str) -> Vec<&str> {
    sentence_spans(text).into_iter().map(|(a, b)| &text[a..b]).collect()
}

/// Replaces the sentences at the given indices, keeping every separator.
pub fn replace_sentences(text: &str, replacements: &[(usize, String)]) -> String {
    let spans = sentence_spans(text);
    let mut out = String::with_capacity(text.len() + 64);
    let mut cursor = 0;
    for (idx, &(a, b)) in spans.iter().enumerate() {
        out.push_str(&text[cursor..a]);
        match replacements.iter().find(|(i, _)| *i == idx) {
            Some((_, r)) => out.push_str(r),
            None => out.push_str(&text[a..b]),
        }
        cursor = b;
    }
    out.push_str(&text[cursor..]);
    out
}

/// Lowercased whitespace tokens.
pub fn lower_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "if", "of", "to", "in", "on", "at", "by", "for", "with", "from", "as", "is",
    "are", "was", "were", "be", "been", "being", "it", "its", "this", "that", "these", "those", "he", "she", "they",
    "we", "i", "you", "his", "her", "their", "our", "my", "your", "him", "them", "us", "me", "has", "have", "had",
    "do", "does", "did", "will", "would", "can", "could", "should", "may", "might", "not", "no", "so", "than", "then",
    "there", "here", "who", "whom", "which", "what", "when", "where", "while", "also", "into", "over", "after",
    "before", "about", "up", "out", "all", "any", "some", "more", "most", "such", "very",
];

pub fn is_stopword(word: &str) -> bool {
    STOPWORDS.contains(&word)
}

/// Lowercased alphanumeric words with stopwords removed.
pub fn content_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !is_stopword(w))
        .collect()
}
