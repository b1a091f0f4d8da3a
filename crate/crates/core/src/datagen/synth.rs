//! Seeded synthetic documents for fixtures, demos and scaled-down runs.

use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SourceDoc;
use crate::lexicon::{ORGANIZATIONS, PEOPLE, PLACES};

const MONTHS: &[&str] = &[
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];

const SUBJECTS: &[&str] = &[
    "bridge", "library", "school", "clinic", "market", "railway", "harbor", "museum",
];

const VERBS: &[&str] = &["opened", "closed", "expanded", "reopened", "was renovated", "was sold"];

fn pick<'a>(rng: &mut ChaCha8Rng, list: &[&'a str]) -> &'a str {
    list.choose(rng).copied().expect("non-empty list")
}

fn fact_sentence(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..6) {
        0 => format!(
            "{} visited {} on {} {}.",
            pick(rng, PEOPLE),
            pick(rng, PLACES),
            pick(rng, MONTHS),
            rng.gen_range(1..29)
        ),
        1 => format!(
            "The {} in {} {} in {}.",
            pick(rng, SUBJECTS),
            pick(rng, PLACES),
            pick(rng, VERBS),
            rng.gen_range(1950..2024)
        ),
        2 => format!(
            "{} hired {} new staff.",
            pick(rng, ORGANIZATIONS),
            rng.gen_range(12..990)
        ),
        3 => format!("Prices rose {}% in {}.", rng.gen_range(2..40), pick(rng, PLACES)),
        4 => format!(
            "{} said the plan would help {} people.",
            pick(rng, PEOPLE),
            rng.gen_range(100..9000)
        ),
        _ => format!("{} met leaders from {}.", pick(rng, ORGANIZATIONS), pick(rng, PLACES)),
    }
}

const PLAIN: &[&str] = &[
    "Many people said the change was overdue.",
    "The council met to discuss the plan.",
    "Residents were asked to use the new service.",
    "The work ended later than expected.",
    "Officials said more details would follow.",
    "It was an important step for the town.",
];

const FILLER: &[&str] = &[
    "The weather was mild for the season.",
    "Several reporters attended the briefing.",
    "Local shops stayed open throughout the day.",
    "A short statement was released afterwards.",
];

/// `n` documents whose summaries have 2 to 4 sentences. About one in twenty
/// summaries contains no entities at all. Deterministic in `seed`.
pub fn synthetic_docs(n: usize, seed: u64) -> Vec<SourceDoc> {
    synthetic_docs_sized(n, seed, 2..=4)
}

/// Like [`synthetic_docs`] with the summary sentence count drawn from
/// `sentences`.
pub fn synthetic_docs_sized(n: usize, seed: u64, sentences: RangeInclusive<usize>) -> Vec<SourceDoc> {
    assert!(
        *sentences.start() >= 1 && !sentences.is_empty(),
        "need at least one sentence"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let sentences: Vec<String> = if rng.gen_bool(0.05) {
                let mut plain = PLAIN.to_vec();
                plain.shuffle(&mut rng);
                plain[..rng.gen_range(sentences.clone()).min(PLAIN.len())]
                    .iter()
                    .map(|s| s.to_string())
                    .collect()
            } else {
                (0..rng.gen_range(sentences.clone()))
                    .map(|_| {
                        if rng.gen_bool(0.75) {
                            fact_sentence(&mut rng)
                        } else {
                            pick(&mut rng, PLAIN).to_string()
                        }
                    })
                    .collect()
            };
            let summary = sentences.join(" ");
            let mut body = sentences.clone();
            body.insert(rng.gen_range(0..=body.len()), pick(&mut rng, FILLER).to_string());
            SourceDoc {
                id: format!("doc-{i:05}"),
                text: body.join(" "),
                summary,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::extract_entities;
    use crate::text;

    #[test]
    fn docs_are_valid_and_deterministic() {
        let a = synthetic_docs(200, 3);
        assert_eq!(a, synthetic_docs(200, 3));
        assert_ne!(a, synthetic_docs(200, 4));
        for d in &a {
            d.validate().unwrap();
            let n = text::split_sentences(&d.summary).len();
            assert!((2..=4).contains(&n), "{}", d.summary);
        }
        assert!(a.iter().any(|d| extract_entities(&d.summary).is_empty()));
    }
}
