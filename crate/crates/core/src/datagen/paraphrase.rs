use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatagenError;
use crate::gateway::{prompts, ChatRequest, LlmClient};
use crate::lexicon;
use crate::text;

/// How many sentences of the summary are paraphrased.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HallucinationLevel {
    /// Exactly one sentence.
    Low,
    /// `ceil(n / 2)` sentences.
    Mid,
    /// Every sentence.
    High,
}

impl HallucinationLevel {
    pub const ALL: [HallucinationLevel; 3] = [Self::Low, Self::Mid, Self::High];

    pub fn sentence_count(self, n: usize) -> usize {
        match self {
            Self::Low => n.min(1),
            Self::Mid => n.div_ceil(2),
            Self::High => n,
        }
    }
}

/// Sentence indices to paraphrase: a prefix of one seeded permutation, so
/// the selections for increasing levels are nested.
pub fn select_sentences(n: usize, level: HallucinationLevel, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = order[..level.sentence_count(n)].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Paraphrase of one sentence, from the client when it returns a usable
/// single sentence and from the stub rules otherwise.
fn paraphrase_sentence(sentence: &str, client: &dyn LlmClient, seed: u64) -> (String, bool) {
    let prompt = prompts::PARAPHRASE_HALLUCINATION
        .render(&[("sentence", sentence)])
        .expect("template has one slot");
    match client.complete(&ChatRequest::user(prompt)) {
        Ok(reply) => {
            let r = reply.trim();
            if !r.is_empty() && r != sentence && !r.contains('\n') && text::sentence_spans(r).len() == 1 {
                return (r.to_string(), false);
            }
            log::warn!("unusable paraphrase reply; using stub paraphrase");
        }
        Err(e) => log::warn!("paraphrase client failed, using stub paraphrase: {e}"),
    }
    (lexicon::stub_paraphrase(sentence, seed), true)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paraphrased {
    pub text: String,
    /// Indices of the rewritten sentences.
    pub sentences: Vec<usize>,
    pub fallbacks: usize,
}

/// Paraphrases the sentences for several levels at once. Each selected
/// sentence is rewritten exactly once and shared between levels.
pub fn paraphrase_levels(
    summary: &str,
    levels: &[HallucinationLevel],
    client: &dyn LlmClient,
    seed: u64,
) -> Result<Vec<Paraphrased>, DatagenError> {
    let sentences = text::split_sentences(summary);
    let n = sentences.len();
    if n == 0 {
        return Err(DatagenError::NoSentences);
    }
    let selections: Vec<Vec<usize>> = levels.iter().map(|&l| select_sentences(n, l, seed)).collect();
    let mut rewrites: BTreeMap<usize, (String, bool)> = BTreeMap::new();
    for &i in selections.iter().flatten() {
        rewrites
            .entry(i)
            .or_insert_with(|| paraphrase_sentence(sentences[i], client, seed));
    }
    Ok(selections
        .into_iter()
        .map(|sel| {
            let reps: Vec<(usize, String)> = sel.iter().map(|&i| (i, rewrites[&i].0.clone())).collect();
            Paraphrased {
                text: text::replace_sentences(summary, &reps),
                fallbacks: sel.iter().filter(|i| rewrites[i].1).count(),
                sentences: sel,
            }
        })
        .collect())
}

pub fn paraphrase_inject(
    summary: &str,
    level: HallucinationLevel,
    client: &dyn LlmClient,
    seed: u64,
) -> Result<Paraphrased, DatagenError> {
    Ok(paraphrase_levels(summary, &[level], client, seed)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::StubClient;

    const FOUR: &str = "The plan was new. Many people said yes. The council met. It ended late.";

    fn changed(a: &str, b: &str) -> usize {
        text::split_sentences(a)
            .iter()
            .zip(text::split_sentences(b))
            .filter(|(x, y)| *x != y)
            .count()
    }

    #[test]
    fn level_counts() {
        let client = StubClient::new(0);
        for (level, expected) in [
            (HallucinationLevel::Low, 1),
            (HallucinationLevel::Mid, 2),
            (HallucinationLevel::High, 4),
        ] {
            let p = paraphrase_inject(FOUR, level, &client, 9).unwrap();
            assert_eq!(text::split_sentences(&p.text).len(), 4);
            assert_eq!(changed(FOUR, &p.text), expected, "{level:?}");
            assert_eq!(p.sentences.len(), expected);
        }
    }

    #[test]
    fn mid_rounds_up() {
        assert_eq!(HallucinationLevel::Mid.sentence_count(5), 3);
        assert_eq!(HallucinationLevel::Mid.sentence_count(1), 1);
        assert_eq!(HallucinationLevel::Low.sentence_count(0), 0);
    }

    #[test]
    fn selections_are_nested() {
        for seed in 0..50 {
            let low = select_sentences(7, HallucinationLevel::Low, seed);
            let mid = select_sentences(7, HallucinationLevel::Mid, seed);
            let high = select_sentences(7, HallucinationLevel::High, seed);
            assert!(low.iter().all(|i| mid.contains(i)));
            assert!(mid.iter().all(|i| high.contains(i)));
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let client = StubClient::new(1);
        let a = paraphrase_inject(FOUR, HallucinationLevel::Mid, &client, 4).unwrap();
        let b = paraphrase_inject(FOUR, HallucinationLevel::Mid, &client, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_summary_is_an_error() {
        assert!(matches!(
            paraphrase_inject("  ", HallucinationLevel::Low, &StubClient::new(0), 0),
            Err(DatagenError::NoSentences)
        ));
    }
}
