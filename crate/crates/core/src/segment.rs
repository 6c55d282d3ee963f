//! Plan/answer segmentation of raw completions.
//!
//! Two output grammars are recognised:
//!
//! * `plan_sql`: a `<plan>` block containing a fenced `yml` list of sources,
//!   followed by a fenced `sql` block holding the answer.
//! * `think_answer`: `<think> ... ```yml ... ``` ... </think>` followed by
//!   `<answer> SQL </answer>`.
//!
//! The answer span is the set of tokens whose first character lies inside the
//! authoritative answer region: the whitespace-trimmed interior of the last
//! complete sql fence, or of the last complete `<answer>` pair. Everything else, tags included, is reasoning.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grammar {
    PlanSql,
    ThinkAnswer,
}

impl std::str::FromStr for Grammar {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plan_sql" => Ok(Grammar::PlanSql),
            "think_answer" => Ok(Grammar::ThinkAnswer),
            other => Err(Error::Config(format!("unknown grammar '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutTag {
    PlanSql,
    ThinkAnswer,
    FallbackAllRea,
}

/// Disjoint answer/reasoning token index sets covering `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanMask {
    ans: Vec<usize>,
    rea: Vec<usize>,
    layout: LayoutTag,
}

impl SpanMask {
    /// Builds a mask from a per-token answer flag.
    pub fn from_answer_flags(flags: &[bool], layout: LayoutTag) -> Self {
        let (mut ans, mut rea) = (Vec::new(), Vec::new());
        for (t, &is_ans) in flags.iter().enumerate() {
            if is_ans {
                ans.push(t);
            } else {
                rea.push(t);
            }
        }
        Self { ans, rea, layout }
    }

    /// Builds a mask from explicit index lists, checking the partition invariant.
    pub fn from_indices(ans: Vec<usize>, rea: Vec<usize>, layout: LayoutTag) -> Result<Self> {
        let mask = Self { ans, rea, layout };
        mask.validate(mask.ans.len() + mask.rea.len())?;
        Ok(mask)
    }

    pub fn all_reasoning(len: usize) -> Self {
        Self { ans: Vec::new(), rea: (0..len).collect(), layout: LayoutTag::FallbackAllRea }
    }

    /// Every token in the answer span.
    pub fn all_answer(len: usize, layout: LayoutTag) -> Self {
        Self { ans: (0..len).collect(), rea: Vec::new(), layout }
    }

    pub fn ans(&self) -> &[usize] {
        &self.ans
    }

    pub fn rea(&self) -> &[usize] {
        &self.rea
    }

    pub fn layout(&self) -> LayoutTag {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.ans.len() + self.rea.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that the two index sets are sorted, disjoint and cover `0..len`.
    pub fn validate(&self, len: usize) -> Result<()> {
        let mut seen = vec![false; len];
        for (name, set) in [("answer", &self.ans), ("reasoning", &self.rea)] {
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Invariant(format!("{name} span indices not strictly increasing")));
            }
            for &t in set.iter() {
                if t >= len {
                    return Err(Error::Invariant(format!("{name} span index {t} outside completion of length {len}")));
                }
                if seen[t] {
                    return Err(Error::Invariant(format!("token {t} is in both spans")));
                }
                seen[t] = true;
            }
        }
        if let Some(t) = seen.iter().position(|s| !s) {
            return Err(Error::Invariant(format!("token {t} is covered by neither span")));
        }
        Ok(())
    }

    /// Per-token answer flag; errors if the mask is not a partition of `0..len`.
    pub fn answer_flags(&self, len: usize) -> Result<Vec<bool>> {
        self.validate(len)?;
        let mut flags = vec![false; len];
        for &t in &self.ans {
            flags[t] = true;
        }
        Ok(flags)
    }
}

/// Result of parsing one completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedCompletion {
    pub plan_text: String,
    pub plan_sources: Vec<String>,
    pub answer_sql: String,
    pub span: SpanMask,
    pub well_formed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct FencedBlock {
    lang: String,
    interior: Range<usize>,
}

/// Complete fenced blocks in order of appearance. An unterminated trailing
/// fence is dropped.
fn fenced_blocks(text: &str) -> Vec<FencedBlock> {
    let mut blocks = Vec::new();
    let mut pos = 0;
    while let Some(open) = text[pos..].find("```").map(|i| pos + i) {
        let after = open + 3;
        let lang_len = text[after..]
            .char_indices()
            .find(|(_, c)| !(c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '+')))
            .map_or(text.len() - after, |(i, _)| i);
        let start = after + lang_len;
        let Some(close) = text[start..].find("```").map(|i| start + i) else {
            break;
        };
        blocks.push(FencedBlock { lang: text[after..start].to_ascii_lowercase(), interior: start..close });
        pos = close + 3;
    }
    blocks
}

/// Complete `<open> ... <close>` pairs in order, non-overlapping.
fn tag_pairs(text: &str, open: &str, close: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some(o) = text[pos..].find(open).map(|i| pos + i) {
        let start = o + open.len();
        let Some(c) = text[start..].find(close).map(|i| start + i) else {
            break;
        };
        out.push(start..c);
        pos = c + close.len();
    }
    out
}

fn is_sql_lang(lang: &str) -> bool {
    lang == "sql"
}

fn is_yml_lang(lang: &str) -> bool {
    lang == "yml" || lang == "yaml"
}

/// Interior byte range of the authoritative answer region, if any.
fn answer_region(text: &str, grammar: Grammar) -> Option<Range<usize>> {
    match grammar {
        Grammar::PlanSql => fenced_blocks(text).into_iter().rev().find(|b| is_sql_lang(&b.lang)).map(|b| b.interior),
        Grammar::ThinkAnswer => tag_pairs(text, "<answer>", "</answer>").pop(),
    }
}

/// Interior of the first `<plan>` or `<think>` block, whichever opens first.
fn plan_region(text: &str) -> Option<Range<usize>> {
    let plan = tag_pairs(text, "<plan>", "</plan>").into_iter().next();
    let think = tag_pairs(text, "<think>", "</think>").into_iter().next();
    match (plan, think) {
        (Some(p), Some(t)) => Some(if p.start <= t.start { p } else { t }),
        (p, t) => p.or(t),
    }
}

fn plan_yml_block(text: &str) -> Option<Range<usize>> {
    let region = plan_region(text)?;
    fenced_blocks(text)
        .into_iter()
        .find(|b| is_yml_lang(&b.lang) && b.interior.start >= region.start && b.interior.end <= region.end)
        .map(|b| b.interior)
}

/// True when the plan region contains a yml fence.
pub fn has_plan_yml(text: &str) -> bool {
    plan_yml_block(text).is_some()
}

/// True when a complete answer region exists under either grammar.
pub fn has_answer_block(text: &str) -> bool {
    answer_region(text, Grammar::PlanSql).is_some() || answer_region(text, Grammar::ThinkAnswer).is_some()
}

fn char_to_byte_table(text: &str) -> Vec<usize> {
    let mut table: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    table.push(text.len());
    table
}

/// Assigns each token to the answer or reasoning span.
///
/// `token_offsets` are half-open character (Unicode scalar) ranges and must
/// tile the text contiguously from 0 to its character length.
pub fn segment(text: &str, token_offsets: &[(usize, usize)], grammar: Grammar) -> Result<SpanMask> {
    let chars = text.chars().count();
    if text.is_empty() {
        // zero-length tokens on an empty text are all reasoning
        if token_offsets.iter().any(|&(s, e)| s != 0 || e != 0) {
            return Err(Error::Input("token offsets exceed empty text".into()));
        }
        return Ok(SpanMask::all_reasoning(token_offsets.len()));
    }
    let mut expected = 0;
    for (i, &(s, e)) in token_offsets.iter().enumerate() {
        if s != expected || e < s {
            return Err(Error::Input(format!("token {i} spans {s}..{e}, expected to start at {expected}")));
        }
        expected = e;
    }
    if expected != chars {
        return Err(Error::Input(format!("token offsets end at {expected}, text has {chars} characters")));
    }
    let Some(region) = answer_region(text, grammar) else {
        return Ok(SpanMask::all_reasoning(token_offsets.len()));
    };
    // padding between the fence and the statement stays with the markup
    let inner = &text[region.clone()];
    let start = region.start + (inner.len() - inner.trim_start().len());
    let region = start..start + inner.trim().len();
    let to_byte = char_to_byte_table(text);
    let flags: Vec<bool> = token_offsets.iter().map(|&(s, _)| region.contains(&to_byte[s])).collect();
    let layout = match grammar {
        Grammar::PlanSql => LayoutTag::PlanSql,
        Grammar::ThinkAnswer => LayoutTag::ThinkAnswer,
    };
    Ok(SpanMask::from_answer_flags(&flags, layout))
}

fn clean_yml_line(line: &str) -> &str {
    let line = line.split('#').next().unwrap_or("").trim();
    let line = line
        .strip_prefix("- ")
        .or_else(|| line.strip_prefix("* "))
        .or_else(|| (line == "-").then_some(""))
        .unwrap_or(line);
    line.trim()
}

fn is_section_header(line: &str) -> bool {
    line.ends_with(':') && !line[..line.len() - 1].contains(':')
}

/// Identifier lines declared in the plan's first yml block.
///
/// Comments and list markers are stripped; blank lines and bare section
/// headers such as `tables:` are skipped.
pub fn extract_plan_sources(text: &str) -> Vec<String> {
    let Some(block) = plan_yml_block(text) else {
        return Vec::new();
    };
    text[block]
        .lines()
        .map(clean_yml_line)
        .filter(|l| !l.is_empty() && !is_section_header(l))
        .map(str::to_string)
        .collect()
}

/// Plan sources split into table and column declarations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRefs {
    pub tables: Vec<String>,
    pub columns: Vec<String>,
}

/// Like [`extract_plan_sources`], but entries listed under a `columns:`
/// header are reported as columns. Everything else is a table.
pub fn extract_plan_refs(text: &str) -> PlanRefs {
    let mut refs = PlanRefs::default();
    let Some(block) = plan_yml_block(text) else {
        return refs;
    };
    let mut in_columns = false;
    for line in text[block].lines().map(clean_yml_line) {
        if line.is_empty() {
            continue;
        }
        if is_section_header(line) {
            let name = line[..line.len() - 1].trim().to_ascii_lowercase();
            in_columns = matches!(name.as_str(), "columns" | "cols");
            continue;
        }
        if in_columns {
            refs.columns.push(line.to_string());
        } else {
            refs.tables.push(line.to_string());
        }
    }
    refs
}

fn strip_fences(s: &str) -> &str {
    let s = s.trim();
    let Some(rest) = s.strip_prefix("```") else {
        return s;
    };
    let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric() || c == '_');
    rest.strip_suffix("```").unwrap_or(rest)
}

/// The final SQL, trimmed, or an empty string when no answer region exists.
pub fn extract_answer_sql(text: &str, grammar: Grammar) -> String {
    match answer_region(text, grammar) {
        Some(r) => strip_fences(&text[r]).trim().to_string(),
        None => String::new(),
    }
}

/// Full parse of one completion.
pub fn parse_completion(text: &str, token_offsets: &[(usize, usize)], grammar: Grammar) -> Result<ParsedCompletion> {
    let span = segment(text, token_offsets, grammar)?;
    let plan_text = plan_region(text).map(|r| text[r].trim().to_string()).unwrap_or_default();
    let well_formed = has_plan_yml(text) && answer_region(text, grammar).is_some();
    Ok(ParsedCompletion {
        plan_text,
        plan_sources: extract_plan_sources(text),
        answer_sql: extract_answer_sql(text, grammar),
        span,
        well_formed,
    })
}

/// Character offsets for a text split into the given pieces.
pub fn offsets_from_pieces<S: AsRef<str>>(pieces: &[S]) -> Vec<(usize, usize)> {
    let mut pos = 0;
    pieces
        .iter()
        .map(|p| {
            let n = p.as_ref().chars().count();
            let r = (pos, pos + n);
            pos += n;
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EXAMPLE_COMPLETION: &str = "<think>\nTo solve this problem, I need to:\n1. Count the number of records in the head table\n2. Filter by age > 56\n3. Use COUNT(*) to get the total count\n```yml\nspider1_department_management.PUBLIC.head\n```\n</think>\n<answer>\nSELECT COUNT(*) FROM spider1_department_management.PUBLIC.head WHERE age > 56;\n</answer>\n";

    fn tokens_of(pieces: &[&str], grammar: Grammar) -> SpanMask {
        let text: String = pieces.concat();
        segment(&text, &offsets_from_pieces(pieces), grammar).unwrap()
    }

    #[test]
    fn think_answer_direct() {
        let pieces = ["<think>", "a", "b", "</think>", "<answer>", "X", "Y", "</answer>"];
        let m = tokens_of(&pieces, Grammar::ThinkAnswer);
        assert_eq!(m.ans(), &[5, 6]);
        assert_eq!(m.rea(), &[0, 1, 2, 3, 4, 7]);
        assert_eq!(m.layout(), LayoutTag::ThinkAnswer);
    }

    #[test]
    fn missing_answer_falls_back() {
        let pieces = ["<plan>", "```yml\n", "a\n", "```", "</plan>", "SELECT 1"];
        let m = tokens_of(&pieces, Grammar::PlanSql);
        assert!(m.ans().is_empty());
        assert_eq!(m.rea().len(), 6);
        assert_eq!(m.layout(), LayoutTag::FallbackAllRea);
    }

    #[test]
    fn last_sql_block_is_authoritative() {
        let pieces = ["<plan>", "```sql\n", "SELECT 0", "\n```", "</plan>", "```sql\n", "SELECT", " 1", "\n```"];
        let m = tokens_of(&pieces, Grammar::PlanSql);
        assert_eq!(m.ans(), &[6, 7]);
        let text: String = pieces.concat();
        assert_eq!(extract_answer_sql(&text, Grammar::PlanSql), "SELECT 1");
    }

    #[test]
    fn straddling_token_goes_by_first_char() {
        // "```sql\nSE" starts in reasoning, "LECT 1\n```" starts inside the interior
        let pieces = ["```sql\nSE", "LECT 1\n```"];
        let m = tokens_of(&pieces, Grammar::PlanSql);
        assert_eq!(m.ans(), &[1]);
        assert_eq!(m.rea(), &[0]);
    }

    #[test]
    fn empty_text_is_fallback() {
        let m = segment("", &[], Grammar::PlanSql).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.layout(), LayoutTag::FallbackAllRea);
    }

    #[test]
    fn non_contiguous_offsets_rejected() {
        assert!(segment("abc", &[(0, 1), (2, 3)], Grammar::PlanSql).is_err());
        assert!(segment("abc", &[(0, 2)], Grammar::PlanSql).is_err());
    }

    #[test]
    fn multibyte_offsets_are_characters() {
        let pieces = ["<answer>", "é", "ü", "</answer>"];
        let m = tokens_of(&pieces, Grammar::ThinkAnswer);
        assert_eq!(m.ans(), &[1, 2]);
    }

    #[test]
    fn example_plan_sources() {
        assert_eq!(
            extract_plan_sources(EXAMPLE_COMPLETION),
            vec!["spider1_department_management.PUBLIC.head".to_string()]
        );
    }

    #[test]
    fn list_markers_and_comments_stripped() {
        let text = "<plan>\n```yml\n- a.b\n- c.d   # second\n\n# only comment\n```\n</plan>";
        assert_eq!(extract_plan_sources(text), vec!["a.b", "c.d"]);
    }

    #[test]
    fn no_yml_block_gives_no_sources() {
        assert!(extract_plan_sources("<plan>just prose</plan>```sql\nSELECT 1\n```").is_empty());
        // a yml block outside the plan region does not count
        assert!(extract_plan_sources("<plan>x</plan>\n```yml\na\n```").is_empty());
    }

    #[test]
    fn plan_refs_split_sections() {
        let text =
            "<plan>\n```yml\ntables:\n  - orders\n  - customers\ncolumns:\n  - orders.id\n  - name\n```\n</plan>";
        let refs = extract_plan_refs(text);
        assert_eq!(refs.tables, vec!["orders", "customers"]);
        assert_eq!(refs.columns, vec!["orders.id", "name"]);
        assert_eq!(extract_plan_sources(text), vec!["orders", "customers", "orders.id", "name"]);
    }

    #[test]
    fn example_answer_sql() {
        assert_eq!(
            extract_answer_sql(EXAMPLE_COMPLETION, Grammar::ThinkAnswer),
            "SELECT COUNT(*) FROM spider1_department_management.PUBLIC.head WHERE age > 56;"
        );
    }

    #[test]
    fn fenced_answer_trimmed() {
        let text = "<plan>```yml\nt\n```</plan>\n```sql\n\n  SELECT a FROM t  \n\n\n```\n";
        assert_eq!(extract_answer_sql(text, Grammar::PlanSql), "SELECT a FROM t");
        let inside = "<answer>\n```sql\nSELECT 2\n```\n</answer>";
        assert_eq!(extract_answer_sql(inside, Grammar::ThinkAnswer), "SELECT 2");
    }

    #[test]
    fn absent_answer_is_empty_string() {
        assert_eq!(extract_answer_sql("<think>hi</think>", Grammar::ThinkAnswer), "");
        assert_eq!(extract_answer_sql("```sql\nSELECT 1", Grammar::PlanSql), "");
    }

    #[test]
    fn parse_flags_well_formed() {
        let pieces: Vec<String> = EXAMPLE_COMPLETION.chars().map(String::from).collect();
        let p = parse_completion(EXAMPLE_COMPLETION, &offsets_from_pieces(&pieces), Grammar::ThinkAnswer).unwrap();
        assert!(p.well_formed);
        assert!(p.plan_text.starts_with("To solve"));
        let bad = parse_completion("<think>x</think>", &[(0, 16)], Grammar::ThinkAnswer).unwrap();
        assert!(!bad.well_formed);
    }

    #[test]
    fn mask_validation() {
        assert!(SpanMask::from_indices(vec![0, 2], vec![1], LayoutTag::PlanSql).is_ok());
        assert!(SpanMask::from_indices(vec![0, 1], vec![1], LayoutTag::PlanSql).is_err());
        let m = SpanMask::from_indices(vec![0], vec![1], LayoutTag::PlanSql).unwrap();
        assert!(m.validate(3).is_err());
    }
}
