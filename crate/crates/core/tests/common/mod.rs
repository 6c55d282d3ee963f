//! Helpers shared by integration test targets.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// The example response from the Spider system prompt.
pub const EXAMPLE_COMPLETION: &str = "<think>\nTo solve this problem, I need to:\n1. Count the number of records in the head table\n2. Filter by age > 56\n3. Use COUNT(*) to get the total count\n```yml\nspider1_department_management.PUBLIC.head\n```\n</think>\n<answer>\nSELECT COUNT(*) FROM spider1_department_management.PUBLIC.head WHERE age > 56;\n</answer>\n";

pub const EXAMPLE_SQL: &str = "SELECT COUNT(*) FROM spider1_department_management.PUBLIC.head WHERE age > 56;";

const FRAGMENTS: &[&str] = &[
    "<plan>",
    "</plan>",
    "<think>",
    "</think>",
    "<answer>",
    "</answer>",
    "```sql\n",
    "```yml\n",
    "```",
    "\n",
    " ",
    "SELECT a FROM t",
    "- s.t\n",
    "é",
    "ß",
    "日本",
    "`",
    "<",
    ">",
    "``",
    "x",
    "SELECT",
    ";",
    "\t",
    "<answer",
    "sql",
];

/// Text assembled from grammar fragments and noise, so that complete,
/// partial and nested blocks all occur.
pub fn random_completion(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(0..40);
    let mut s = String::new();
    for _ in 0..n {
        if rng.random_bool(0.15) {
            s.push(char::from(rng.random_range(0x20u8..0x7f)));
        } else {
            s.push_str(FRAGMENTS[rng.random_range(0..FRAGMENTS.len())]);
        }
    }
    s
}

/// Random contiguous character-range tokenization; zero-length tokens allowed.
pub fn random_tokenization(text: &str, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let chars = text.chars().count();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < chars {
        let step = if rng.random_bool(0.05) { 0 } else { rng.random_range(1..=6).min(chars - pos) };
        out.push((pos, pos + step));
        pos += step;
    }
    out
}

/// One token per character.
pub fn char_tokens(text: &str) -> Vec<(usize, usize)> {
    (0..text.chars().count()).map(|i| (i, i + 1)).collect()
}

/// Whitespace-delimited tokens, each carrying its trailing whitespace.
pub fn word_tokens(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }
        out.push((start, i));
        start = i;
    }
    out
}
