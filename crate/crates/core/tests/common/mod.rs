#![allow(dead_code)]

use std::path::PathBuf;

use promptprism::{parse_annotated, AnnotatedPrompt, Prompt, Role, TagRegistry};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn load_corpus() -> Vec<Prompt> {
    std::fs::read_to_string(fixture("corpus.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub const DELIMS: &[&str] = &["\n\n", "\n", " ", "\t", "\n#####\n", "   ", " | ", "---", ""];

pub const WORDS: &[&str] = &[
    "# Heading",
    "Answer briefly.",
    "Let's think step by step",
    "1. first",
    "- item",
    "Question:",
    "**bold**",
    "[link](http://x.y)",
    "<b>html</b>",
    "`code`",
    "plain words",
    "Use JSON!",
    "日本語",
    "",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tagged text with `n` components; every content is unique so content
/// multisets identify components.
pub fn random_tagged(rng: &mut ChaCha8Rng, registry: &TagRegistry, n: usize, uid: &mut usize) -> String {
    let tags: Vec<String> = registry.tags().map(|(t, _)| t.canonical()).collect();
    let mut out = String::new();
    if rng.random_bool(0.2) {
        out.push_str("lead ");
    }
    for i in 0..n {
        let tag = tags.choose(rng).unwrap();
        let word = WORDS.choose(rng).unwrap();
        *uid += 1;
        out.push_str(&format!("<{tag}>{word} #{uid}</{tag}>"));
        if i + 1 < n {
            out.push_str(DELIMS.choose(rng).unwrap());
        }
    }
    if rng.random_bool(0.2) {
        out.push_str(" tail");
    }
    out
}

pub fn random_prompt(rng: &mut ChaCha8Rng, registry: &TagRegistry, max_components: usize) -> AnnotatedPrompt {
    let mut uid = 0;
    let n = rng.random_range(1..=max_components);
    let text = random_tagged(rng, registry, n, &mut uid);
    parse_annotated(&Prompt::single(Role::user(), text), registry).unwrap()
}

/// Synthetic corpus mixing single-turn, system+user and multi-turn records.
pub fn synthetic_corpus(seed: u64, len: usize, registry: &TagRegistry) -> Vec<AnnotatedPrompt> {
    let mut rng = rng(seed);
    let mut uid = 0;
    (0..len)
        .map(|_| {
            let mut messages = Vec::new();
            let shape = rng.random_range(0..3);
            if shape == 1 {
                let n = rng.random_range(1..4);
                messages.push(promptprism::Message::new(
                    Role::system(),
                    random_tagged(&mut rng, registry, n, &mut uid),
                ));
            }
            if shape == 2 {
                for _ in 0..rng.random_range(1..3) {
                    let n = rng.random_range(1..3);
                    messages.push(promptprism::Message::new(
                        Role::user(),
                        random_tagged(&mut rng, registry, n, &mut uid),
                    ));
                    messages.push(promptprism::Message::new(Role::assistant(), "ok"));
                }
            }
            let n = rng.random_range(1..6);
            messages.push(promptprism::Message::new(
                Role::user(),
                random_tagged(&mut rng, registry, n, &mut uid),
            ));
            parse_annotated(&Prompt::new(messages), registry).unwrap()
        })
        .collect()
}

const CAPITALS: &[(&str, &str)] = &[
    ("France", "Paris"),
    ("Japan", "Tokyo"),
    ("Kenya", "Nairobi"),
    ("Peru", "Lima"),
    ("Norway", "Oslo"),
    ("Egypt", "Cairo"),
    ("Canada", "Ottawa"),
    ("Chile", "Santiago"),
    ("India", "New Delhi"),
    ("Italy", "Rome"),
    ("Ghana", "Accra"),
    ("Spain", "Madrid"),
];

/// Deterministic stand-in model: answers the capital question for the last
/// country named in the prompt, wrong about a quarter of the time depending
/// on a hash of the whole prompt; returns a tagged rewrite for refinement
/// meta-prompts.
pub fn mock_model(req: &promptprism::ChatRequest) -> String {
    use sha2::{Digest, Sha256};
    let text = &req.messages.last().unwrap().content;
    let h = Sha256::digest(format!("{text}|{:?}", req.seed).as_bytes());
    if text.starts_with("Your task is to augment the prompt") {
        return format!(
            "<instruction:task>Name the capital (variant {}).</instruction:task>\n\n<output_const>Give only the answer</output_const>",
            h[0] % 7
        );
    }
    let country = CAPITALS
        .iter()
        .filter_map(|(c, a)| text.rfind(c).map(|pos| (pos, *a)))
        .max_by_key(|(pos, _)| *pos);
    match (country, h[1] % 4) {
        (Some(_), 0) => "Berlin".to_owned(),
        (Some((_, a)), 1) => format!("The capital is {a}."),
        (Some((_, a)), _) => a.to_owned(),
        (None, _) => "I do not know".to_owned(),
    }
}
