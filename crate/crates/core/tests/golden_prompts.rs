//! Rendered prompts must match the checked-in golden files byte for byte.

use truebrief::gateway::prompts;

const SENTENCE: &str = "The council met on May 20.";
const ENTITIES: &str = r#"["1996", "Seattle"]"#;

fn golden(name: &str) -> String {
    let path = format!("{}/tests/golden/{name}.txt", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

#[test]
fn summarization_prompt() {
    let out = prompts::SUMMARIZATION.render(&[("text", SENTENCE)]).unwrap();
    assert_eq!(out, golden("summarization"));
}

#[test]
fn factual_hallucination_prompt() {
    let out = prompts::FACTUAL_HALLUCINATION
        .render(&[("list_of_entities_to_augment", ENTITIES)])
        .unwrap();
    assert_eq!(out, golden("factual_hallucination"));
}

#[test]
fn paraphrase_hallucination_prompt() {
    let out = prompts::PARAPHRASE_HALLUCINATION
        .render(&[("sentence", SENTENCE)])
        .unwrap();
    assert_eq!(out, golden("paraphrase_hallucination"));
}

#[test]
fn judge_prompt() {
    assert_eq!(prompts::JUDGE.render(&[]).unwrap(), golden("judge"));
}

#[test]
fn verbatim_templates_are_registered() {
    let names: Vec<&str> = prompts::ALL.iter().filter(|t| t.verbatim).map(|t| t.name).collect();
    for n in [
        "factual_hallucination",
        "paraphrase_hallucination",
        "summarization",
        "standard_hallucination",
        "judge",
    ] {
        assert!(names.contains(&n), "{n}");
        assert!(prompts::by_name(n).is_some());
    }
}
