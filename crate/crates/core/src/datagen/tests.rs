use super::*;
use crate::gateway::ChatRequest;

fn stub() -> StubClient {
    StubClient::new(11)
}

fn config() -> DatagenConfig {
    DatagenConfig {
        seed: 42,
        ..DatagenConfig::default()
    }
}

fn changed_sentences(a: &str, b: &str) -> Vec<usize> {
    let (sa, sb) = (text::split_sentences(a), text::split_sentences(b));
    assert_eq!(sa.len(), sb.len());
    (0..sa.len()).filter(|&i| sa[i] != sb[i]).collect()
}

#[test]
fn every_rejected_response_differs_on_500_docs() {
    let docs = synthetic_docs(500, 1);
    for extended in [false, true] {
        let cfg = DatagenConfig { extended, ..config() };
        for doc in &docs {
            let rec = build_record(doc, &stub(), &cfg).unwrap();
            assert_eq!(rec.rejected.len(), if extended { 3 } else { 1 });
            for r in &rec.rejected {
                assert_ne!(r.text, rec.chosen, "{}", doc.id);
            }
        }
    }
}

#[test]
fn records_round_trip_through_json() {
    for doc in synthetic_docs(20, 2) {
        let rec = build_extended_record(&doc, &stub(), &config()).unwrap();
        let line = serde_json::to_string(&rec).unwrap();
        let back: PreferenceRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
        assert_eq!(serde_json::to_string(&back).unwrap(), line);
    }
}

#[test]
fn field_order_is_stable() {
    let rec = build_preference_record(&synthetic_docs(1, 0)[0], &stub(), &config()).unwrap();
    let line = serde_json::to_string(&rec).unwrap();
    let keys = ["\"id\"", "\"prompt\"", "\"chosen\"", "\"rejected\"", "\"meta\""];
    let pos: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
    assert!(line.contains("\"replacements\"") && line.contains("\"seed\""));
}

#[test]
fn entity_free_summary_still_changes() {
    let doc = SourceDoc {
        id: "plain".into(),
        text: "the town met. the plan passed.".into(),
        summary: "the town met. the plan passed.".into(),
    };
    let rec = build_preference_record(&doc, &stub(), &config()).unwrap();
    assert!(rec.meta.replacements.is_empty());
    assert_ne!(rec.rejected[0].text, rec.chosen);
}

#[test]
fn extended_levels_are_ordered_and_share_replacements() {
    for doc in synthetic_docs(100, 3) {
        let rec = build_extended_record(&doc, &stub(), &config()).unwrap();
        let levels: Vec<_> = rec.rejected.iter().map(|r| r.level).collect();
        assert_eq!(levels, HallucinationLevel::ALL);
        let aug = factual_augment(&doc.summary, &extract_entities(&doc.summary), &stub());
        assert_eq!(aug.replacements, rec.meta.replacements);
        let n = text::split_sentences(&doc.summary).len();
        let mut previous: Vec<usize> = Vec::new();
        for r in &rec.rejected {
            let changed = changed_sentences(&aug.text, &r.text);
            assert_eq!(changed.len(), r.level.sentence_count(n), "{}", doc.id);
            assert!(previous.iter().all(|i| changed.contains(i)));
            previous = changed;
        }
    }
}

#[test]
fn edit_distance_is_monotone_in_level() {
    for doc in synthetic_docs(100, 4) {
        let rec = build_extended_record(&doc, &stub(), &config()).unwrap();
        let d: Vec<usize> = rec
            .rejected
            .iter()
            .map(|r| strsim::levenshtein(&rec.chosen, &r.text))
            .collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1]), "{}: {d:?}", doc.id);
    }
}

#[test]
fn sentence_count_is_preserved() {
    for doc in synthetic_docs(200, 5) {
        let rec = build_extended_record(&doc, &stub(), &config()).unwrap();
        let n = text::split_sentences(&rec.chosen).len();
        for r in &rec.rejected {
            assert_eq!(text::split_sentences(&r.text).len(), n);
        }
    }
}

#[test]
fn stages_are_separable() {
    let entity_only = DatagenConfig {
        paraphrase_stage: false,
        ..config()
    };
    let paraphrase_only = DatagenConfig {
        entity_stage: false,
        ..config()
    };
    for doc in synthetic_docs(100, 6) {
        let found = extract_entities(&doc.summary);
        match build_preference_record(&doc, &stub(), &entity_only) {
            Ok(rec) => {
                let y = &rec.rejected[0].text;
                let mut o = 0;
                let mut a = 0;
                for r in &rec.meta.replacements {
                    let gap = r.start - o;
                    assert_eq!(&rec.chosen[o..r.start], &y[a..a + gap]);
                    a += gap + r.replacement.len();
                    o = r.end;
                }
                assert_eq!(&rec.chosen[o..], &y[a..]);
            }
            Err(DatagenError::Unchanged(_)) => assert!(found.is_empty()),
            Err(e) => panic!("{e}"),
        }
        let rec = build_preference_record(&doc, &stub(), &paraphrase_only).unwrap();
        assert!(rec.meta.replacements.is_empty());
        let n = text::split_sentences(&doc.summary).len();
        let changed = changed_sentences(&doc.summary, &rec.rejected[0].text);
        assert_eq!(changed.len(), rec.rejected[0].level.sentence_count(n));
    }
}

#[test]
fn regeneration_is_identical_and_order_independent() {
    let docs = synthetic_docs(30, 7);
    let cfg = DatagenConfig {
        extended: true,
        ..config()
    };
    let ok = |v: Vec<Result<PreferenceRecord, DatagenError>>| v.into_iter().map(Result::unwrap).collect::<Vec<_>>();
    let a = to_jsonl(&ok(build_records(&docs, &stub(), &cfg, 1)));
    assert_eq!(a, to_jsonl(&ok(build_records(&docs, &stub(), &cfg, 3))));
    let mut reversed = docs.clone();
    reversed.reverse();
    let mut b = ok(build_records(&reversed, &stub(), &cfg, 2));
    b.reverse();
    assert_eq!(a, to_jsonl(&b));
}

#[test]
fn standard_levels_cover_all_three() {
    let docs = synthetic_docs(90, 8);
    let mut seen = [0usize; 3];
    for doc in &docs {
        let rec = build_preference_record(doc, &stub(), &config()).unwrap();
        seen[rec.rejected[0].level as usize] += 1;
    }
    assert!(seen.iter().all(|&c| c >= 15), "{seen:?}");
}

#[test]
fn invalid_docs_are_rejected() {
    let doc = SourceDoc {
        id: "x".into(),
        text: "t".into(),
        summary: "  ".into(),
    };
    assert!(matches!(
        build_preference_record(&doc, &stub(), &config()),
        Err(DatagenError::InvalidDoc { .. })
    ));
}

#[test]
fn prompt_styles_wrap_source() {
    let doc = &synthetic_docs(1, 9)[0];
    let compact = DatagenConfig {
        prompt_style: PromptStyle::Compact,
        ..config()
    };
    let rec = build_preference_record(doc, &stub(), &compact).unwrap();
    assert_eq!(rec.prompt, format!("{}\nSummary: ", doc.text));
    let full = build_preference_record(doc, &stub(), &config()).unwrap();
    assert!(full.prompt.ends_with(&doc.text));
    assert!(full.prompt.len() > rec.prompt.len());
}

/// Echoes the sentence back, which the paraphrase stage must reject.
struct Echo;

impl LlmClient for Echo {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let prompt = &request.messages.last().unwrap().content;
        Ok(prompt.rsplit('\n').next().unwrap_or("").to_string())
    }
}

#[test]
fn useless_client_output_falls_back_to_stub() {
    for doc in synthetic_docs(20, 10) {
        let rec = build_extended_record(&doc, &Echo, &config()).unwrap();
        for r in &rec.rejected {
            assert_ne!(r.text, rec.chosen);
        }
    }
}

#[test]
fn read_docs_parses_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("docs.jsonl");
    let docs = synthetic_docs(5, 12);
    let body: String = docs.iter().map(|d| serde_json::to_string(d).unwrap() + "\n").collect();
    std::fs::write(&path, body + "\n").unwrap();
    assert_eq!(read_docs(&path).unwrap(), docs);
    std::fs::write(&path, "{\"id\": \"a\"}\n").unwrap();
    assert!(matches!(read_docs(&path), Err(DatagenError::Parse { line: 1, .. })));
}

#[test]
fn lenient_reader_collects_bad_lines_and_accepts_aliases() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("docs.jsonl");
    let body = [
        r#"{"id": "a", "source": "Ann went home.", "golden": "Ann went home."}"#,
        "not json",
        r#"{"id": "b", "text": "Bo sang.", "summary": ""}"#,
        r#"{"id": "c", "text": "Cy ran.", "reference": "Cy ran."}"#,
    ]
    .join("\n");
    std::fs::write(&path, body).unwrap();
    let (docs, bad) = read_docs_lenient(&path).unwrap();
    assert_eq!(docs.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(), ["a", "c"]);
    assert_eq!(bad.iter().map(|m| m.line).collect::<Vec<_>>(), [2, 3]);
}

#[test]
fn records_round_trip_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    let recs: Vec<PreferenceRecord> = synthetic_docs(6, 3)
        .iter()
        .map(|d| build_extended_record(d, &StubClient::new(0), &config()).unwrap())
        .collect();
    std::fs::write(&path, to_jsonl(&recs)).unwrap();
    assert_eq!(read_records(&path).unwrap(), recs);
}
