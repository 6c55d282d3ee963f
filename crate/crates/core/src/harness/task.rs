//! The synthetic plan-then-answer task.
//!
//! A completion is a token sequence over a small symbolic vocabulary. Tokens
//! are rendered to text with context-dependent surface forms so that the
//! ordinary segmenter, SQL extractor and reward channels score it exactly
//! like a real completion. For `k = 4` tables and answer length 3 the gold
//! completion renders as
//!
//! ~~~text
//! <plan>
//! ```yml
//! t1
//! t3
//! ```
//! </plan>
//! ```sql
//! SELECT 2 4 1 FROM t1, t3
//! ```
//! ~~~

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyMode, PolicyParams, TokenId};
use crate::reward::{breakdown, score_structure, Channels, RewardBreakdown, WeightProfile};
use crate::segment::{offsets_from_pieces, segment, Grammar, SpanMask};
use crate::sqlref::RefSet;

/// Token id layout for `k` tables and an answer alphabet of size `a`:
/// five structural tags, `k` tables, one table missing from the schema,
/// `a` answer symbols, a filler and EOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub tables: usize,
    pub answers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    PlanOpen,
    PlanClose,
    YmlOpen,
    SqlOpen,
    FenceClose,
    Table(usize),
    PhantomTable,
    Answer(usize),
    Filler,
    Eos,
}

impl Vocab {
    pub const PLAN_OPEN: TokenId = 0;
    pub const PLAN_CLOSE: TokenId = 1;
    pub const YML_OPEN: TokenId = 2;
    pub const SQL_OPEN: TokenId = 3;
    pub const FENCE_CLOSE: TokenId = 4;

    pub fn size(&self) -> usize {
        8 + self.tables + self.answers
    }

    pub fn table(&self, j: usize) -> TokenId {
        (5 + j) as TokenId
    }

    pub fn phantom(&self) -> TokenId {
        (5 + self.tables) as TokenId
    }

    pub fn answer(&self, j: usize) -> TokenId {
        (6 + self.tables + j) as TokenId
    }

    pub fn filler(&self) -> TokenId {
        (6 + self.tables + self.answers) as TokenId
    }

    pub fn eos(&self) -> TokenId {
        (7 + self.tables + self.answers) as TokenId
    }

    pub fn symbol(&self, id: TokenId) -> Option<Symbol> {
        let id = id as usize;
        let (k, a) = (self.tables, self.answers);
        Some(match id {
            0 => Symbol::PlanOpen,
            1 => Symbol::PlanClose,
            2 => Symbol::YmlOpen,
            3 => Symbol::SqlOpen,
            4 => Symbol::FenceClose,
            i if i < 5 + k => Symbol::Table(i - 5),
            i if i == 5 + k => Symbol::PhantomTable,
            i if i < 6 + k + a => Symbol::Answer(i - 6 - k),
            i if i == 6 + k + a => Symbol::Filler,
            i if i == 7 + k + a => Symbol::Eos,
            _ => return None,
        })
    }

    /// Short display name, e.g. `T2` or `A1`.
    pub fn name(&self, id: TokenId) -> String {
        match self.symbol(id) {
            Some(Symbol::PlanOpen) => "<plan>".into(),
            Some(Symbol::PlanClose) => "</plan>".into(),
            Some(Symbol::YmlOpen) => "```yml".into(),
            Some(Symbol::SqlOpen) => "```sql".into(),
            Some(Symbol::FenceClose) => "```".into(),
            Some(Symbol::Table(j)) => format!("T{}", j + 1),
            Some(Symbol::PhantomTable) => "TX".into(),
            Some(Symbol::Answer(j)) => format!("A{}", j + 1),
            Some(Symbol::Filler) => "?".into(),
            Some(Symbol::Eos) => "<eos>".into(),
            None => format!("<{id}?>"),
        }
    }
}

fn table_name(j: usize) -> String {
    format!("t{}", j + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ctx {
    Outside,
    Plan,
    Yml { in_plan: bool },
    Sql { in_plan: bool, tables: usize },
}

/// Task instance: which tables the gold query reads and what it selects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub vocab: Vocab,
    /// Indices into the table alphabet, sorted.
    pub gold_tables: Vec<usize>,
    /// Indices into the answer alphabet.
    pub gold_answer: Vec<usize>,
    pub horizon: usize,
    pub grammar: Grammar,
}

/// Tokens of a completion plus what the reward stack made of them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTokens {
    pub breakdown: RewardBreakdown,
    pub span: SpanMask,
}

/// Fixed tag count of a well-formed completion: plan open/close, yml open,
/// two fence closes, sql open and EOS.
pub const TAG_OVERHEAD: usize = 7;

/// Deterministic task: `ceil(k/2)` gold tables and `m` answer symbols drawn
/// from an alphabet of size `m + 1`.
pub fn make_task(seed: u64, k_tables: usize, m_answer_len: usize, horizon: usize, grammar: Grammar) -> Result<ToyTask> {
    if k_tables < 2 {
        return Err(Error::Config(format!("need at least 2 tables, got {k_tables}")));
    }
    if m_answer_len < 1 {
        return Err(Error::Config("answer length must be at least 1".into()));
    }
    let n_gold = k_tables.div_ceil(2);
    let needed = TAG_OVERHEAD + 2 * n_gold + m_answer_len;
    if horizon < needed {
        return Err(Error::Config(format!("horizon {horizon} is shorter than the gold completion ({needed} tokens)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gold_tables = sample(&mut rng, k_tables, n_gold).into_vec();
    gold_tables.sort_unstable();
    let answers = m_answer_len + 1;
    let gold_answer = (0..m_answer_len).map(|_| rng.random_range(0..answers)).collect();
    Ok(ToyTask { vocab: Vocab { tables: k_tables, answers }, gold_tables, gold_answer, horizon, grammar })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Exact(TokenId),
    AnyTable,
    AnyAnswer,
}

impl ToyTask {
    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn eos(&self) -> TokenId {
        self.vocab.eos()
    }

    pub fn gold_tokens(&self) -> Vec<TokenId> {
        let v = &self.vocab;
        let mut t = vec![Vocab::PLAN_OPEN, Vocab::YML_OPEN];
        t.extend(self.gold_tables.iter().map(|&j| v.table(j)));
        t.extend([Vocab::FENCE_CLOSE, Vocab::PLAN_CLOSE, Vocab::SQL_OPEN]);
        t.extend(self.gold_answer.iter().map(|&j| v.answer(j)));
        t.extend(self.gold_tables.iter().map(|&j| v.table(j)));
        t.extend([Vocab::FENCE_CLOSE, v.eos()]);
        t
    }

    /// Gold source sets; toy answers are numeric literals, so there are no columns.
    pub fn gold_refs(&self) -> RefSet {
        RefSet::from_raw(self.gold_tables.iter().map(|&j| table_name(j)), Vec::<String>::new())
    }

    /// The answer SQL of the gold completion.
    pub fn gold_sql(&self) -> String {
        let mut sql = String::from("SELECT");
        for &j in &self.gold_answer {
            sql.push_str(&format!(" {}", j + 1));
        }
        for (i, &j) in self.gold_tables.iter().enumerate() {
            sql.push_str(if i == 0 { " FROM " } else { ", " });
            sql.push_str(&table_name(j));
        }
        sql
    }

    /// Surface text of each token.
    pub fn render(&self, tokens: &[TokenId]) -> Vec<String> {
        let think = self.grammar == Grammar::ThinkAnswer;
        let mut ctx = Ctx::Outside;
        let mut out = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            let piece = match self.vocab.symbol(tok) {
                Some(Symbol::PlanOpen) => {
                    if ctx == Ctx::Outside {
                        ctx = Ctx::Plan;
                    }
                    if think { "<think>\n" } else { "<plan>\n" }.to_string()
                }
                Some(Symbol::PlanClose) => {
                    if ctx == Ctx::Plan {
                        ctx = Ctx::Outside;
                    }
                    if think { "</think>\n" } else { "</plan>\n" }.to_string()
                }
                Some(Symbol::YmlOpen) => {
                    ctx = Ctx::Yml { in_plan: in_plan(ctx) };
                    "```yml\n".to_string()
                }
                Some(Symbol::SqlOpen) => {
                    ctx = Ctx::Sql { in_plan: in_plan(ctx), tables: 0 };
                    if think { "<answer>\nSELECT" } else { "```sql\nSELECT" }.to_string()
                }
                Some(Symbol::FenceClose) => match ctx {
                    Ctx::Sql { in_plan, .. } => {
                        ctx = if in_plan { Ctx::Plan } else { Ctx::Outside };
                        if think { "\n</answer>\n" } else { "\n```\n" }.to_string()
                    }
                    Ctx::Yml { in_plan } => {
                        ctx = if in_plan { Ctx::Plan } else { Ctx::Outside };
                        "```\n".to_string()
                    }
                    _ => "```\n".to_string(),
                },
                Some(s @ (Symbol::Table(_) | Symbol::PhantomTable)) => {
                    let name = match s {
                        Symbol::Table(j) => table_name(j),
                        _ => "tx".to_string(),
                    };
                    match &mut ctx {
                        Ctx::Yml { .. } => format!("{name}\n"),
                        Ctx::Sql { tables, .. } => {
                            *tables += 1;
                            if *tables == 1 {
                                format!(" FROM {name}")
                            } else {
                                format!(", {name}")
                            }
                        }
                        _ => format!("{name} "),
                    }
                }
                Some(Symbol::Answer(j)) => match ctx {
                    Ctx::Sql { .. } => format!(" {}", j + 1),
                    Ctx::Yml { .. } => format!("a{}\n", j + 1),
                    _ => format!("a{} ", j + 1),
                },
                Some(Symbol::Filler) => match ctx {
                    Ctx::Yml { .. } => "?\n".to_string(),
                    _ => " ?".to_string(),
                },
                Some(Symbol::Eos) | None => String::new(),
            };
            out.push(piece);
        }
        out
    }

    pub fn render_text(&self, tokens: &[TokenId]) -> String {
        self.render(tokens).concat()
    }

    /// Renders, segments and scores a completion through the same reward
    /// stack used for real completions. Execution is replaced by a
    /// well-formedness check on the answer span tokens.
    pub fn score(&self, tokens: &[TokenId], profile: &WeightProfile) -> Result<ScoredTokens> {
        let pieces = self.render(tokens);
        let text = pieces.concat();
        let span = segment(&text, &offsets_from_pieces(&pieces), self.grammar)?;
        let s = score_structure(&text, self.grammar, &self.gold_refs());
        let executes = !span.ans().is_empty()
            && span
                .ans()
                .iter()
                .all(|&t| matches!(self.vocab.symbol(tokens[t]), Some(Symbol::Answer(_) | Symbol::Table(_))));
        let matched = executes && s.answer_sql == self.gold_sql();
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        let channels = Channels {
            format: Some(s.format),
            sl_table: Some(s.sl_table),
            sl_column: Some(s.sl_column),
            pf_table: Some(s.pf_table),
            pf_column: Some(s.pf_column),
            execution: Some(b(executes)),
            match_: Some(b(matched)),
        };
        Ok(ScoredTokens { breakdown: breakdown(&channels, profile), span })
    }

    fn template(&self) -> Vec<Class> {
        let g = self.gold_tables.len();
        let mut c = vec![Class::Exact(Vocab::PLAN_OPEN), Class::Exact(Vocab::YML_OPEN)];
        c.extend(std::iter::repeat_n(Class::AnyTable, g));
        c.extend([Class::Exact(Vocab::FENCE_CLOSE), Class::Exact(Vocab::PLAN_CLOSE), Class::Exact(Vocab::SQL_OPEN)]);
        c.extend(std::iter::repeat_n(Class::AnyAnswer, self.gold_answer.len()));
        c.extend(std::iter::repeat_n(Class::AnyTable, g));
        c.extend([Class::Exact(Vocab::FENCE_CLOSE), Class::Exact(self.vocab.eos())]);
        c
    }

    fn class_tokens(&self, c: Class) -> Vec<TokenId> {
        let v = &self.vocab;
        match c {
            Class::Exact(t) => vec![t],
            Class::AnyTable => (0..v.tables).map(|j| v.table(j)).chain([v.phantom()]).collect(),
            Class::AnyAnswer => (0..v.answers).map(|j| v.answer(j)).collect(),
        }
    }

    /// Starting policy. With `bias = 0` it is uniform. A positive bias stands
    /// in for a supervised warm start: the policy already emits the tag
    /// layout at the right places but is uniform over which table or answer
    /// symbol fills each slot.
    pub fn initial_policy(&self, mode: PolicyMode, bias: f64) -> Result<PolicyParams> {
        let mut p = PolicyParams::uniform(mode, self.horizon, self.vocab_size(), self.eos())?;
        if bias == 0.0 {
            return Ok(p);
        }
        let template = self.template();
        match mode {
            PolicyMode::Positionwise => {
                for (t, &c) in template.iter().enumerate() {
                    let row = p.row_mut(t);
                    for tok in self.class_tokens(c) {
                        row[tok as usize] = bias;
                    }
                }
            }
            PolicyMode::Bigram => {
                let mut prev = vec![self.eos()];
                for &c in &template {
                    let next = self.class_tokens(c);
                    for &r in &prev {
                        let row = p.row_mut(r as usize);
                        for &tok in &next {
                            row[tok as usize] = bias;
                        }
                    }
                    prev = next;
                }
            }
        }
        Ok(p)
    }

    /// Table symbols in the schema.
    pub fn schema(&self) -> BTreeSet<String> {
        (0..self.vocab.tables).map(table_name).collect()
    }
}

fn in_plan(ctx: Ctx) -> bool {
    match ctx {
        Ctx::Plan => true,
        Ctx::Yml { in_plan } | Ctx::Sql { in_plan, .. } => in_plan,
        Ctx::Outside => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> ToyTask {
        make_task(7, 4, 3, 24, Grammar::PlanSql).unwrap()
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab { tables: 4, answers: 4 };
        assert_eq!(v.size(), 16);
        for id in 0..16 {
            assert!(v.symbol(id).is_some());
        }
        assert_eq!(v.symbol(16), None);
        assert_eq!(v.symbol(v.phantom()), Some(Symbol::PhantomTable));
        assert_eq!(v.symbol(v.eos()), Some(Symbol::Eos));
    }

    #[test]
    fn make_task_rules() {
        assert_eq!(task(), task());
        let t2 = make_task(1, 2, 3, 24, Grammar::PlanSql).unwrap();
        assert_eq!(t2.gold_tables.len(), 1);
        assert!(matches!(make_task(1, 4, 3, 13, Grammar::PlanSql), Err(Error::Config(_))));
        assert!(make_task(1, 4, 3, 14, Grammar::PlanSql).is_ok());
        assert!(matches!(make_task(1, 1, 3, 24, Grammar::PlanSql), Err(Error::Config(_))));
    }

    #[test]
    fn gold_renders_and_scores_full() {
        for grammar in [Grammar::PlanSql, Grammar::ThinkAnswer] {
            let t = ToyTask { grammar, ..task() };
            let s = t.score(&t.gold_tokens(), &WeightProfile::thinkquel()).unwrap();
            let b = &s.breakdown;
            for v in [b.format, b.sl_table, b.sl_column, b.pf_table, b.pf_column, b.execution, b.match_] {
                assert_eq!(v, 1.0, "{grammar:?}: {b:?}");
            }
            assert!((b.r_total - 1.0).abs() < 1e-12);
            // answer span is exactly the answer symbols and SQL tables
            assert_eq!(s.span.ans().len(), t.gold_answer.len() + t.gold_tables.len());
        }
    }

    #[test]
    fn gold_text_shape() {
        let t = ToyTask { gold_tables: vec![0, 2], gold_answer: vec![1, 3, 0], ..task() };
        assert_eq!(
            t.render_text(&t.gold_tokens()),
            "<plan>\n```yml\nt1\nt3\n```\n</plan>\n```sql\nSELECT 2 4 1 FROM t1, t3\n```\n"
        );
        assert_eq!(t.gold_sql(), "SELECT 2 4 1 FROM t1, t3");
        for grammar in [Grammar::PlanSql, Grammar::ThinkAnswer] {
            let t = ToyTask { grammar, ..task() };
            let text = t.render_text(&t.gold_tokens());
            assert_eq!(crate::segment::extract_answer_sql(&text, grammar), t.gold_sql());
        }
    }

    #[test]
    fn wrong_plan_table() {
        let t = make_task(3, 2, 2, 24, Grammar::PlanSql).unwrap();
        let gold = t.gold_tables[0];
        let other = 1 - gold;
        let mut toks = t.gold_tokens();
        toks[2] = t.vocab.table(other);
        let b = t.score(&toks, &WeightProfile::thinkquel()).unwrap().breakdown;
        assert_eq!(b.sl_table, 0.0);
        // SQL still reads the gold table, which the plan no longer declares
        assert_eq!(b.pf_table, 0.0);
        assert_eq!(b.match_, 1.0);
    }

    #[test]
    fn untagged_tokens_score_zero_on_answer_side() {
        let t = task();
        let toks: Vec<TokenId> = vec![t.vocab.answer(0), t.vocab.table(1), t.vocab.filler(), t.eos()];
        let s = t.score(&toks, &WeightProfile::thinkquel()).unwrap();
        let b = &s.breakdown;
        assert_eq!(b.format, 0.0);
        assert!(s.span.ans().is_empty());
        assert_eq!((b.execution, b.match_, b.pf_table, b.pf_column, b.r_ans), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn phantom_table_fails_execution() {
        let t = task();
        let mut toks = t.gold_tokens();
        let n = toks.len();
        toks[n - 3] = t.vocab.phantom();
        let b = t.score(&toks, &WeightProfile::thinkquel()).unwrap().breakdown;
        assert_eq!(b.execution, 0.0);
        assert_eq!(b.match_, 0.0);
    }

    #[test]
    fn warm_start_prefers_template() {
        let t = task();
        for mode in [PolicyMode::Positionwise, PolicyMode::Bigram] {
            let p = t.initial_policy(mode, 5.0).unwrap();
            let lp: f64 = p.logprob(&t.gold_tokens()).unwrap().iter().sum();
            let u = t.initial_policy(mode, 0.0).unwrap();
            let lu: f64 = u.logprob(&t.gold_tokens()).unwrap().iter().sum();
            assert!(lp > lu + 10.0, "{mode:?}");
        }
    }
}
