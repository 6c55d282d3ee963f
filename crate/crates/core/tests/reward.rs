mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;

use common::EXAMPLE_COMPLETION;
use proptest::prelude::*;
use spanpo::reward::{
    aggregate, format_reward, jaccard, match_reward, plan_following, schema_linking, Cell, Channels, ExecStatus,
    ExecutionResult, FixtureBackend, GoldRecord, ScoreConfig, Scorer, TransportPolicy,
};
use spanpo::sqlref::RefSet;
use spanpo::{Error, Grammar, WeightProfile};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn golds() -> Vec<GoldRecord> {
    std::fs::read_to_string(data("example_gold.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn gold(id: &str) -> GoldRecord {
    golds().into_iter().find(|g| g.question_id == id).unwrap()
}

fn fixture() -> FixtureBackend {
    FixtureBackend::load(&data("fixture.jsonl")).unwrap()
}

/// A think/answer completion declaring `sources` and answering with `sql`.
fn completion(sources: &[&str], sql: &str) -> String {
    format!("<think>\nplan\n```yml\n{}\n```\n</think>\n<answer>\n{sql}\n</answer>\n", sources.join("\n"))
}

const HEAD: &str = "spider1_department_management.PUBLIC.head";

fn set(xs: &[&str]) -> BTreeSet<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn cfg(profile: WeightProfile) -> ScoreConfig {
    ScoreConfig { profile, grammar: Grammar::ThinkAnswer, ..ScoreConfig::default() }
}

#[test]
fn jaccard_examples() {
    assert!((jaccard(&set(&["a", "b"]), &set(&["b", "c"])) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(jaccard(&set(&["a", "b"]), &set(&["b", "a"])), 1.0);
    assert_eq!(jaccard(&set(&[]), &set(&[])), 1.0);
}

#[test]
fn linking_and_following_examples() {
    let r = |t: &[&str]| RefSet::from_raw(t.iter().copied(), Vec::<String>::new());
    assert_eq!(schema_linking(&r(&["head"]), &r(&["head"])).0, 1.0);
    assert_eq!(schema_linking(&r(&["a", "b"]), &r(&["a"])).0, 0.5);
    assert_eq!(schema_linking(&r(&[]), &r(&["a"])).0, 0.0);
    assert_eq!(plan_following(&r(&["x"]), &r(&["x"])).0, 1.0);
    assert_eq!(plan_following(&r(&["x", "y"]), &r(&["x"])).0, 0.5);
    assert_eq!(plan_following(&r(&["y"]), &r(&["x"])).0, 0.0);
}

#[test]
fn format_examples() {
    assert_eq!(format_reward(EXAMPLE_COMPLETION), 1.0);
    assert_eq!(format_reward("<plan>\n```yml\na\n```\n</plan>\nno sql here"), 0.0);
    assert_eq!(format_reward(""), 0.0);
    assert_eq!(format_reward("<plan>\n```yml\na\n```\n</plan>\n```sql\nSELECT 1\n```"), 1.0);
}

#[test]
fn match_examples() {
    let ok = |rows: Vec<Vec<Cell>>| ExecutionResult::ok(rows);
    let a = ok(vec![vec![Cell::Int(1)], vec![Cell::Int(2)]]);
    let b = ok(vec![vec![Cell::Int(2)], vec![Cell::Int(1)]]);
    assert_eq!(match_reward(&a, &b, false), 1.0);
    assert_eq!(match_reward(&a, &b, true), 0.0);
    let x = ok(vec![vec![Cell::Real(1.0)]]);
    let y = ok(vec![vec![Cell::Real(1.0 + 1e-12)]]);
    assert_eq!(match_reward(&x, &y, true), 1.0);
    let z = ok(vec![vec![Cell::Real(1.0 + 1e-6)]]);
    assert_eq!(match_reward(&x, &z, true), 0.0);
    assert_eq!(match_reward(&x, &ExecutionResult::error("boom"), false), 0.0);
    let n = ok(vec![vec![Cell::Null, Cell::Text("a".into())]]);
    assert_eq!(match_reward(&n, &n.clone(), false), 1.0);
    // duplicates count: multiset, not set
    let dup = ok(vec![vec![Cell::Int(1)], vec![Cell::Int(1)]]);
    let one_two = ok(vec![vec![Cell::Int(1)], vec![Cell::Int(2)]]);
    assert_eq!(match_reward(&dup, &one_two, false), 0.0);
}

#[test]
fn profile_arithmetic() {
    let spider = Channels { format: Some(1.0), sl_table: Some(0.5), match_: Some(1.0), ..Channels::default() };
    let a = aggregate(&spider, &WeightProfile::spider());
    assert!((a.r_total - 0.84).abs() < 1e-12);
    assert!((a.r_rea - 0.4 * (0.2 + 0.8 * 0.5)).abs() < 1e-12);
    let t = aggregate(&Channels::all(1.0), &WeightProfile::thinkquel());
    assert!((t.r_ans - 0.78).abs() < 1e-12);
    assert!((t.r_rea - 0.22).abs() < 1e-12);
    assert!((t.r_total - 1.0).abs() < 1e-12);
    let z = aggregate(&Channels::all(0.0), &WeightProfile::thinkquel());
    assert_eq!((z.r_ans, z.r_rea, z.r_total), (0.0, 0.0, 0.0));
    // unscored weighted channels are flagged, unweighted ones are not
    let m = aggregate(&Channels { format: Some(1.0), ..Channels::default() }, &WeightProfile::spider());
    assert_eq!(m.missing.len(), 2);
    assert!(WeightProfile::from_name("bird").is_err());
}

#[test]
fn example_example_scores() {
    let fx = fixture();
    let g = gold("head_over_56");
    let t = Scorer::new(cfg(WeightProfile::thinkquel()), &fx)
        .unwrap()
        .score(&g.question_id, EXAMPLE_COMPLETION, &g)
        .unwrap();
    let b = t.breakdown.unwrap();
    // plan lists the table but no columns; the SQL reads column `age`
    assert_eq!((b.format, b.sl_table, b.sl_column), (1.0, 1.0, 0.0));
    assert_eq!((b.pf_table, b.pf_column), (1.0, 0.0));
    assert_eq!((b.execution, b.match_), (1.0, 1.0));
    assert!((b.r_ans - (0.2 + 0.5 + 0.05)).abs() < 1e-12);
    assert!((b.r_rea - (0.1 + 0.07)).abs() < 1e-12);
    assert!((b.r_total - 0.92).abs() < 1e-12);
    assert_eq!(t.exec_status, Some(ExecStatus::Ok));

    let s =
        Scorer::new(cfg(WeightProfile::spider()), &fx).unwrap().score(&g.question_id, EXAMPLE_COMPLETION, &g).unwrap();
    let b = s.breakdown.unwrap();
    assert!((b.r_rea - 0.4).abs() < 1e-12);
    assert!((b.r_ans - 0.6).abs() < 1e-12);
    assert!((b.r_total - 1.0).abs() < 1e-12);
}

#[test]
fn execution_outcomes() {
    let fx = fixture();
    let scorer = Scorer::new(cfg(WeightProfile::thinkquel()), &fx).unwrap();
    let g = gold("head_over_56");
    let run = |sql: &str| scorer.score(&g.question_id, &completion(&[HEAD], sql), &g).unwrap();

    let wrong = run("SELECT COUNT(*) FROM spider1_department_management.PUBLIC.head WHERE age > 60;");
    assert_eq!((wrong.breakdown.as_ref().unwrap().execution, wrong.breakdown.unwrap().match_), (1.0, 0.0));

    let err = run("SELECT * FROM spider1_department_management.PUBLIC.heads");
    assert_eq!(err.exec_status, Some(ExecStatus::Error));
    let b = err.breakdown.unwrap();
    assert_eq!((b.execution, b.match_, b.pf_table), (0.0, 0.0, 0.0));

    let slow = run("SELECT COUNT(*) FROM spider1_department_management.PUBLIC.head h1, spider1_department_management.PUBLIC.head h2");
    assert_eq!(slow.exec_status, Some(ExecStatus::Timeout));
    assert_eq!(slow.breakdown.unwrap().execution, 0.0);

    // ran, but reported past the 30 s limit
    let late = run("SELECT SUM(age) FROM spider1_department_management.PUBLIC.head");
    assert_eq!(late.exec_status, Some(ExecStatus::Timeout));

    let unknown = run("SELECT nothing FROM nowhere");
    assert_eq!(unknown.exec_status, Some(ExecStatus::Error));

    let empty = scorer.score(&g.question_id, "<think>no answer</think>", &g).unwrap();
    assert_eq!(empty.exec_status, None);
    let b = empty.breakdown.unwrap();
    assert_eq!((b.format, b.execution, b.pf_table, b.sl_table), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn order_sensitivity_follows_predicted_query() {
    let fx = fixture();
    let scorer = Scorer::new(cfg(WeightProfile::thinkquel()), &fx).unwrap();
    let g = gold("head_names");
    let score = |sql: &str| scorer.score(&g.question_id, &completion(&[HEAD], sql), &g).unwrap().breakdown.unwrap();
    // gold result is fetched by running the gold SQL
    assert_eq!(score(&g.gold_sql).match_, 1.0);
    assert_eq!(
        score("SELECT name FROM spider1_department_management.PUBLIC.head WHERE age > 56 ORDER BY name DESC").match_,
        0.0
    );
    assert_eq!(score("SELECT name FROM spider1_department_management.PUBLIC.head WHERE age > 56").match_, 1.0);
    // no gold columns in the bundle: column linking is unscored and flagged
    let b = score(&g.gold_sql);
    assert!(b.missing.iter().any(|c| format!("{c:?}") == "SlColumn"));
}

#[test]
fn numeric_tolerance_and_columns() {
    let fx = fixture();
    let scorer = Scorer::new(cfg(WeightProfile::thinkquel()), &fx).unwrap();
    let g = gold("dept_budget");
    let text = "<think>\n```yml\ntables:\n  - spider1_department_management.PUBLIC.department\ncolumns:\n  - name\n  - budget_in_billions\n```\n</think>\n<answer>SELECT name, budget_in_billions FROM spider1_department_management.PUBLIC.department</answer>";
    let b = scorer.score(&g.question_id, text, &g).unwrap().breakdown.unwrap();
    assert_eq!((b.sl_table, b.sl_column, b.pf_table, b.pf_column), (1.0, 1.0, 1.0, 1.0));
    assert_eq!(b.match_, 1.0);
    assert!((b.r_total - 1.0).abs() < 1e-12);
}

#[test]
fn transport_failures() {
    let fx = fixture();
    let g = gold("head_over_56");
    let dead = completion(&[HEAD], "SELECT 1 FROM spider1_department_management.PUBLIC.flaky");
    let flaky = completion(&[HEAD], "SELECT 2 FROM spider1_department_management.PUBLIC.flaky");

    let retry = Scorer::new(
        ScoreConfig { on_transport_failure: TransportPolicy::Retry(2), ..cfg(WeightProfile::thinkquel()) },
        &fx,
    )
    .unwrap();
    assert!(matches!(retry.score("q", &dead, &g), Err(Error::Transport(_))));
    let ok = retry.score("q", &flaky, &g).unwrap();
    assert_eq!(ok.breakdown.unwrap().execution, 1.0);

    let exclude = Scorer::new(
        ScoreConfig { on_transport_failure: TransportPolicy::Exclude, ..cfg(WeightProfile::thinkquel()) },
        &fx,
    )
    .unwrap();
    let r = exclude.score("q", &dead, &g).unwrap();
    assert!(r.excluded && r.breakdown.is_none() && r.note.is_some());
}

#[test]
fn derive_gold_from_sql() {
    let fx = fixture();
    let mut g = gold("head_names");
    g.gold_tables.clear();
    let config = ScoreConfig { derive_gold_from_sql: true, ..cfg(WeightProfile::thinkquel()) };
    let text = completion(&["tables:", HEAD, "columns:", "name", "age"], &g.gold_sql);
    let b = Scorer::new(config, &fx).unwrap().score("q", &text, &g).unwrap().breakdown.unwrap();
    assert_eq!((b.sl_table, b.sl_column), (1.0, 1.0));
    assert!(b.missing.is_empty());
}

fn channel() -> impl Strategy<Value = Option<f64>> {
    prop::option::weighted(0.9, 0.0f64..=1.0)
}

fn channels() -> impl Strategy<Value = Channels> {
    (channel(), channel(), channel(), channel(), channel(), channel(), channel()).prop_map(
        |(f, st, sc, pt, pc, e, m)| Channels {
            format: f,
            sl_table: st,
            sl_column: sc,
            pf_table: pt,
            pf_column: pc,
            execution: e,
            match_: m,
        },
    )
}

fn ident_set() -> impl Strategy<Value = BTreeSet<String>> {
    prop::collection::btree_set("[a-d]{1,2}", 0..6)
}

proptest! {
    #[test]
    fn jaccard_properties(a in ident_set(), b in ident_set()) {
        let j = jaccard(&a, &b);
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, jaccard(&b, &a));
        prop_assert_eq!(jaccard(&a, &a), 1.0);
        prop_assert_eq!(j == 1.0, a == b);
    }

    #[test]
    fn aggregate_is_linear_and_split(c in channels(), d in channels(), k in 0.0f64..3.0) {
        for p in [WeightProfile::spider(), WeightProfile::thinkquel()] {
            let a = aggregate(&c, &p);
            prop_assert!((a.r_total - (a.r_ans + a.r_rea)).abs() < 1e-15);
            let v = |x: Option<f64>| x.unwrap_or(0.0);
            let add = |x: Option<f64>, y: Option<f64>| Some(v(x) + k * v(y));
            let sum = Channels {
                format: add(c.format, d.format),
                sl_table: add(c.sl_table, d.sl_table),
                sl_column: add(c.sl_column, d.sl_column),
                pf_table: add(c.pf_table, d.pf_table),
                pf_column: add(c.pf_column, d.pf_column),
                execution: add(c.execution, d.execution),
                match_: add(c.match_, d.match_),
            };
            let s = aggregate(&sum, &p);
            let b = aggregate(&d, &p);
            prop_assert!((s.r_ans - (a.r_ans + k * b.r_ans)).abs() < 1e-12);
            prop_assert!((s.r_rea - (a.r_rea + k * b.r_rea)).abs() < 1e-12);
            // answer channels never leak into r_rea and vice versa
            let ans_only = Channels { format: None, sl_table: None, sl_column: None, ..c };
            prop_assert_eq!(aggregate(&ans_only, &p).r_rea, 0.0);
        }
    }

    #[test]
    fn match_implies_execution(rows in prop::collection::vec(prop::collection::vec(-3i64..3, 1..3), 0..4), status in 0u8..3) {
        let cells: Vec<Vec<Cell>> = rows.iter().map(|r| r.iter().map(|&x| Cell::Int(x)).collect()).collect();
        let gold = ExecutionResult::ok(cells.clone());
        let pred = match status {
            0 => ExecutionResult::ok(cells),
            1 => ExecutionResult::error("e"),
            _ => ExecutionResult::timeout(None),
        };
        let m = match_reward(&pred, &gold, false);
        if m == 1.0 {
            prop_assert!(pred.is_ok());
        }
        prop_assert_eq!(m == 1.0, status == 0);
    }

    #[test]
    fn unordered_match_ignores_permutation(rows in prop::collection::vec(prop::collection::vec(-3i64..3, 2), 0..6), seed in any::<u64>()) {
        let cells: Vec<Vec<Cell>> = rows.iter().map(|r| r.iter().map(|&x| Cell::Int(x)).collect()).collect();
        let mut shuffled = cells.clone();
        let n = shuffled.len();
        if n > 1 {
            shuffled.rotate_left((seed as usize) % n);
        }
        prop_assert_eq!(match_reward(&ExecutionResult::ok(cells), &ExecutionResult::ok(shuffled), false), 1.0);
    }
}
