//! Controlled hallucination injection: entity augmentation followed by
//! sentence paraphrasing, producing preference records.

pub mod augment;
pub mod entities;
pub mod ingest;
pub mod paraphrase;
pub mod synth;

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{factual_augment, Augmentation, Replacement};
pub use entities::{extract_entities, EntityKind, EntitySpan};
pub use ingest::{ingest_annotated, IngestReport, LabeledRecord, MalformedLine};
pub use paraphrase::{paraphrase_inject, paraphrase_levels, select_sentences, HallucinationLevel, Paraphrased};
pub use synth::{synthetic_docs, synthetic_docs_sized};

use crate::gateway::{prompts, GatewayError, LlmClient, StubClient};
use crate::text;
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("document {id}: {reason}")]
    InvalidDoc { id: String, reason: String },
    #[error("summary has no sentences")]
    NoSentences,
    #[error("document {0}: rejected response is identical to the chosen one")]
    Unchanged(String),
    #[error("both injection stages are disabled")]
    NoStages,
    #[error("{path}: {malformed} of {total} lines are malformed (limit 10%)")]
    TooManyMalformed {
        path: String,
        malformed: usize,
        total: usize,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A source text with its reference summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceDoc {
    pub id: String,
    #[serde(alias = "source")]
    pub text: String,
    #[serde(alias = "golden", alias = "reference")]
    pub summary: String,
}

impl SourceDoc {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |reason: &str| DatagenError::InvalidDoc {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(bad("empty id"));
        }
        if self.text.trim().is_empty() {
            return Err(bad("empty text"));
        }
        if text::sentence_spans(&self.summary).is_empty() {
            return Err(bad("empty summary"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedResponse {
    pub text: String,
    pub level: HallucinationLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    /// Entity substitutions shared by every rejected response.
    pub replacements: Vec<Replacement>,
    /// Per-record seed derived from the global seed and the document id.
    pub seed: u64,
}

/// A prompt with one chosen and one or more rejected responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: Vec<RejectedResponse>,
    pub meta: RecordMeta,
}

impl PreferenceRecord {
    pub fn is_extended(&self) -> bool {
        self.rejected.len() > 1
    }
}

/// Instruction wrapped around the source text to form the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStyle {
    /// The full summarization instruction.
    #[default]
    Full,
    /// `<text>\nSummary: `, short enough for toy context windows.
    Compact,
}

impl PromptStyle {
    pub fn render(self, source: &str) -> String {
        let template = match self {
            Self::Full => prompts::SUMMARIZATION,
            Self::Compact => prompts::COMPACT_SUMMARIZATION,
        };
        template
            .render(&[("text", source)])
            .expect("summarization templates have one slot")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    pub seed: u64,
    pub prompt_style: PromptStyle,
    /// Replace extracted entities with false values.
    pub entity_stage: bool,
    /// Paraphrase a seeded selection of sentences.
    pub paraphrase_stage: bool,
    /// Emit one rejected response per level instead of one per record.
    pub extended: bool,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompt_style: PromptStyle::Full,
            entity_stage: true,
            paraphrase_stage: true,
            extended: false,
        }
    }
}

/// Entity stage with a guard: if the client's values change the sentence
/// structure, the deterministic stub values are used instead.
fn augment_stage(summary: &str, client: &dyn LlmClient, seed: u64) -> Augmentation {
    let found = extract_entities(summary);
    let aug = factual_augment(summary, &found, client);
    let n = text::sentence_spans(summary).len();
    if text::sentence_spans(&aug.text).len() == n {
        return aug;
    }
    log::warn!("entity replacements changed the sentence count; using stub values");
    factual_augment(summary, &found, &StubClient::new(seed))
}

fn build(
    doc: &SourceDoc,
    client: &dyn LlmClient,
    config: &DatagenConfig,
    levels: &[HallucinationLevel],
    seed: u64,
) -> Result<PreferenceRecord, DatagenError> {
    doc.validate()?;
    if !config.entity_stage && !config.paraphrase_stage {
        return Err(DatagenError::NoStages);
    }
    let aug = if config.entity_stage {
        let a = augment_stage(&doc.summary, client, seed);
        if a.no_entities {
            log::warn!("document {}: no entities found", doc.id);
        }
        a
    } else {
        Augmentation {
            text: doc.summary.clone(),
            replacements: Vec::new(),
            no_entities: true,
            fallbacks: 0,
        }
    };
    let texts: Vec<String> = if config.paraphrase_stage {
        paraphrase_levels(&aug.text, levels, client, seed)?
            .into_iter()
            .map(|p| p.text)
            .collect()
    } else {
        vec![aug.text.clone(); levels.len()]
    };
    let rejected: Vec<RejectedResponse> = texts
        .into_iter()
        .zip(levels)
        .map(|(text, &level)| RejectedResponse { text, level })
        .collect();
    if rejected.iter().any(|r| r.text == doc.summary) {
        return Err(DatagenError::Unchanged(doc.id.clone()));
    }
    Ok(PreferenceRecord {
        id: doc.id.clone(),
        prompt: config.prompt_style.render(&doc.text),
        chosen: doc.summary.clone(),
        rejected,
        meta: RecordMeta {
            replacements: aug.replacements,
            seed,
        },
    })
}

/// Record seed: a hash of the global seed and the document id, so records do
/// not depend on generation order.
pub fn record_seed(global: u64, doc_id: &str) -> u64 {
    derive_seed(global, doc_id)
}

/// One rejected response at a level drawn uniformly under the record seed.
pub fn build_preference_record(
    doc: &SourceDoc,
    client: &dyn LlmClient,
    config: &DatagenConfig,
) -> Result<PreferenceRecord, DatagenError> {
    let seed = record_seed(config.seed, &doc.id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c65_7665_6c00);
    let level = HallucinationLevel::ALL[rng.gen_range(0..3)];
    build(doc, client, config, &[level], seed)
}

/// Three rejected responses in the order low, mid, high, built on one
/// shared entity augmentation.
pub fn build_extended_record(
    doc: &SourceDoc,
    client: &dyn LlmClient,
    config: &DatagenConfig,
) -> Result<PreferenceRecord, DatagenError> {
    let seed = record_seed(config.seed, &doc.id);
    build(doc, client, config, &HallucinationLevel::ALL, seed)
}

pub fn build_record(
    doc: &SourceDoc,
    client: &dyn LlmClient,
    config: &DatagenConfig,
) -> Result<PreferenceRecord, DatagenError> {
    if config.extended {
        build_extended_record(doc, client, config)
    } else {
        build_preference_record(doc, client, config)
    }
}

/// Builds records for all documents on up to `workers` threads. Output
/// order follows `docs`.
pub fn build_records(
    docs: &[SourceDoc],
    client: &dyn LlmClient,
    config: &DatagenConfig,
    workers: usize,
) -> Vec<Result<PreferenceRecord, DatagenError>> {
    let workers = workers.clamp(1, docs.len().max(1));
    if workers == 1 {
        return docs.iter().map(|d| build_record(d, client, config)).collect();
    }
    let chunk = docs.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = docs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|d| build_record(d, client, config)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("record worker panicked"))
            .collect()
    })
}

/// Reads `{id, text, summary}` JSON lines. Blank lines are skipped.
pub fn read_docs(path: &Path) -> Result<Vec<SourceDoc>, DatagenError> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DatagenError::Io {
        path: p.clone(),
        source,
    })?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatagenError::Io {
            path: p.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: SourceDoc = serde_json::from_str(&line).map_err(|e| DatagenError::Parse {
            path: p.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Like [`read_docs`], but unparseable or invalid lines are collected
/// instead of failing the read.
pub fn read_docs_lenient(path: &Path) -> Result<(Vec<SourceDoc>, Vec<MalformedLine>), DatagenError> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DatagenError::Io {
        path: p.clone(),
        source,
    })?;
    let mut docs = Vec::new();
    let mut malformed = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatagenError::Io {
            path: p.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<SourceDoc>(&line)
            .map_err(|e| e.to_string())
            .and_then(|d| d.validate().map(|_| d).map_err(|e| e.to_string()));
        match parsed {
            Ok(d) => docs.push(d),
            Err(reason) => malformed.push(MalformedLine { line: i + 1, reason }),
        }
    }
    Ok((docs, malformed))
}

/// Reads preference records written by [`to_jsonl`].
pub fn read_records(path: &Path) -> Result<Vec<PreferenceRecord>, DatagenError> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DatagenError::Io {
        path: p.clone(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatagenError::Io {
            path: p.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| DatagenError::Parse {
            path: p.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(records)
}

/// Serializes records as JSON lines with a trailing newline.
pub fn to_jsonl(records: &[PreferenceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests;
