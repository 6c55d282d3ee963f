//! Source table and column harvesting from SQL and dbt model bodies.
//!
//! This is a scanner, not a parser: identifiers are classified by the keyword
//! that precedes them and by a handful of positional rules. Every input is
//! accepted; regions that make no sense are skipped.
//!
//! Tables are the relations named after `FROM`/`JOIN` (including
//! comma-separated lists) plus dbt `ref('m')` / `source('s', 't')` macros,
//! minus names defined by a `WITH` clause. Columns are qualified references
//! (`alias.col` → `col`) and bare identifiers that are not keywords, calls,
//! tables, aliases or literals.

mod scan;

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use scan::{functions, scan, Item};

pub(crate) use scan::canonical_text;

/// Canonical identifier sets harvested from one query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefSet {
    pub tables: BTreeSet<String>,
    pub columns: BTreeSet<String>,
    /// CTE names that were seen in table position and dropped.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub ctes_excluded: BTreeSet<String>,
}

impl RefSet {
    /// Normalizes raw table and column strings. Columns keep their final
    /// segment only. Empty strings are skipped.
    pub fn from_raw<T, C>(tables: T, columns: C) -> Self
    where
        T: IntoIterator,
        T::Item: AsRef<str>,
        C: IntoIterator,
        C::Item: AsRef<str>,
    {
        let tables = tables.into_iter().filter_map(|t| normalize_ident(t.as_ref()).ok()).collect();
        let columns = columns
            .into_iter()
            .filter_map(|c| normalize_ident(c.as_ref()).ok())
            .map(|c| final_segment(&c).to_string())
            .collect();
        Self { tables, columns, ctes_excluded: BTreeSet::new() }
    }
}

pub fn final_segment(ident: &str) -> &str {
    ident.rsplit('.').next().unwrap_or(ident)
}

/// Canonical form of a possibly quoted, possibly dotted identifier:
/// quotes (`"`, backtick, `[]`) removed, lowercased, segments joined by `.`.
pub fn normalize_ident(raw: &str) -> Result<String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Err(Error::Input("empty identifier".into()));
    }
    let mut segments = Vec::new();
    let mut cur = String::new();
    let mut chars = raw.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' | '`' | '[' => {
                let close = if c == '[' { ']' } else { c };
                for d in chars.by_ref() {
                    if d == close {
                        break;
                    }
                    cur.push(d);
                }
            }
            '.' => segments.push(std::mem::take(&mut cur)),
            c => cur.push(c),
        }
    }
    segments.push(cur);
    let joined = segments.iter().map(|s| s.trim().to_lowercase()).collect::<Vec<_>>().join(".");
    if joined.chars().all(|c| c == '.') {
        return Err(Error::Input(format!("identifier '{raw}' has no content")));
    }
    Ok(joined)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Free,
    Table,
    AliasDef,
    CteDef,
    /// Column lists of CTEs or derived-table aliases.
    Definition,
    /// Type names and date-part words.
    TypeWord,
}

struct Analysis {
    items: Vec<Item>,
    roles: Vec<Role>,
    matching: Vec<Option<usize>>,
    /// Name of the call owning the innermost enclosing parenthesis, per item.
    enclosing_call: Vec<Option<String>>,
    tables: BTreeSet<String>,
    ctes: BTreeSet<String>,
    ctes_excluded: BTreeSet<String>,
    aliases: HashSet<String>,
}

const FROM_TAKING_CALLS: &[&str] = &["extract", "substring", "trim", "position", "overlay"];

fn single(item: Option<&Item>) -> Option<&str> {
    match item {
        Some(Item::Name { segments, .. }) if segments.len() == 1 => Some(&segments[0]),
        _ => None,
    }
}

fn is_kw(item: Option<&Item>, kw: &str) -> bool {
    matches!(item, Some(Item::Kw(k)) if k == kw)
}

impl Analysis {
    fn new(sql: &str) -> Self {
        let items = scan(sql);
        let n = items.len();
        let mut matching = vec![None; n];
        let mut enclosing_call = vec![None; n];
        let mut stack: Vec<(usize, Option<String>)> = Vec::new();
        for (k, item) in items.iter().enumerate() {
            enclosing_call[k] = stack.last().and_then(|(_, owner)| owner.clone());
            match item {
                Item::Open => {
                    let owner = match k.checked_sub(1).map(|p| &items[p]) {
                        Some(Item::Name { segments, .. }) => segments.last().cloned(),
                        Some(Item::Kw(kw)) => Some(kw.to_ascii_lowercase()),
                        _ => None,
                    };
                    stack.push((k, owner));
                }
                Item::Close => {
                    if let Some((open, _)) = stack.pop() {
                        matching[open] = Some(k);
                    }
                }
                _ => {}
            }
        }
        let mut a = Self {
            roles: vec![Role::Free; n],
            items,
            matching,
            enclosing_call,
            tables: BTreeSet::new(),
            ctes: BTreeSet::new(),
            ctes_excluded: BTreeSet::new(),
            aliases: HashSet::new(),
        };
        a.mark_ctes();
        a.mark_tables();
        a.mark_type_words();
        a.mark_aliases();
        a
    }

    fn after_paren(&self, open: usize) -> usize {
        self.matching[open].map_or(self.items.len(), |c| c + 1)
    }

    fn mark_region(&mut self, open: usize, role: Role) -> usize {
        let end = self.after_paren(open);
        for r in &mut self.roles[open..end] {
            *r = role;
        }
        end
    }

    fn mark_ctes(&mut self) {
        for k in 0..self.items.len() {
            if !is_kw(self.items.get(k), "WITH") {
                continue;
            }
            let mut j = k + 1;
            if is_kw(self.items.get(j), "RECURSIVE") {
                j += 1;
            }
            while let Some(name) = single(self.items.get(j)).map(str::to_string) {
                // confirm `name [(cols)] AS [NOT] [MATERIALIZED] (` before marking
                let mut p = j + 1;
                let cols = matches!(self.items.get(p), Some(Item::Open)).then_some(p);
                if let Some(open) = cols {
                    p = self.after_paren(open);
                }
                if !is_kw(self.items.get(p), "AS") {
                    break;
                }
                p += 1;
                while is_kw(self.items.get(p), "NOT") || is_kw(self.items.get(p), "MATERIALIZED") {
                    p += 1;
                }
                if !matches!(self.items.get(p), Some(Item::Open)) {
                    break;
                }
                self.roles[j] = Role::CteDef;
                self.ctes.insert(name);
                if let Some(open) = cols {
                    self.mark_region(open, Role::Definition);
                }
                j = self.after_paren(p);
                if matches!(self.items.get(j), Some(Item::Comma)) {
                    j += 1;
                } else {
                    break;
                }
            }
        }
    }

    fn mark_tables(&mut self) {
        for (k, item) in self.items.iter().enumerate() {
            if let Item::Macro(Some(rel)) = item {
                self.tables.insert(rel.clone());
                self.roles[k] = Role::Table;
            }
        }
        for k in 0..self.items.len() {
            let starts_list = is_kw(self.items.get(k), "FROM") || is_kw(self.items.get(k), "JOIN");
            if !starts_list {
                continue;
            }
            if self.enclosing_call[k].as_deref().is_some_and(|c| FROM_TAKING_CALLS.contains(&c)) {
                continue;
            }
            let mut j = k + 1;
            loop {
                while is_kw(self.items.get(j), "LATERAL") || is_kw(self.items.get(j), "ONLY") {
                    j += 1;
                }
                match self.items.get(j) {
                    Some(Item::Name { segments, .. }) => {
                        if matches!(self.items.get(j + 1), Some(Item::Open)) {
                            // table-valued function
                            j = self.after_paren(j + 1);
                        } else {
                            self.tables.insert(segments.join("."));
                            self.roles[j] = Role::Table;
                            j += 1;
                        }
                    }
                    Some(Item::Macro(_)) => j += 1,
                    Some(Item::Open) => j = self.after_paren(j),
                    _ => break,
                }
                if is_kw(self.items.get(j), "AS") {
                    j += 1;
                }
                if let Some(alias) = single(self.items.get(j)).map(str::to_string) {
                    self.roles[j] = Role::AliasDef;
                    self.aliases.insert(alias);
                    j += 1;
                    if matches!(self.items.get(j), Some(Item::Open)) {
                        j = self.mark_region(j, Role::Definition);
                    }
                }
                if matches!(self.items.get(j), Some(Item::Comma)) {
                    j += 1;
                } else {
                    break;
                }
            }
        }
        let ctes = &self.ctes;
        let (dropped, kept): (BTreeSet<String>, BTreeSet<String>) =
            std::mem::take(&mut self.tables).into_iter().partition(|t| ctes.contains(t));
        self.tables = kept;
        self.ctes_excluded = dropped;
    }

    fn mark_type_words(&mut self) {
        for k in 0..self.items.len() {
            if self.roles[k] != Role::Free || single(self.items.get(k)).is_none() {
                continue;
            }
            let prev = k.checked_sub(1).map(|p| &self.items[p]);
            let next = self.items.get(k + 1);
            let after_cast = matches!(prev, Some(Item::Cast));
            // DATE '2020-01-01', TIMESTAMP '...'
            let typed_literal = matches!(next, Some(Item::Str));
            // INTERVAL '1' DAY
            let interval_unit = matches!(prev, Some(Item::Str)) && k >= 2 && is_kw(self.items.get(k - 2), "INTERVAL");
            // EXTRACT(YEAR FROM d)
            let date_part = matches!(prev, Some(Item::Open)) && self.enclosing_call[k].as_deref() == Some("extract");
            if after_cast || typed_literal || interval_unit || date_part {
                self.roles[k] = Role::TypeWord;
            }
        }
    }

    fn mark_aliases(&mut self) {
        for k in 0..self.items.len() {
            if self.roles[k] != Role::Free {
                continue;
            }
            let Some(name) = single(self.items.get(k)).map(str::to_string) else {
                continue;
            };
            let prev = k.checked_sub(1).map(|p| &self.items[p]);
            let explicit = is_kw(prev, "AS");
            let implicit =
                matches!(prev, Some(Item::Name { .. } | Item::Close | Item::Str | Item::Num)) || is_kw(prev, "END");
            let is_call = matches!(self.items.get(k + 1), Some(Item::Open));
            if explicit || (implicit && !is_call) {
                self.roles[k] = Role::AliasDef;
                self.aliases.insert(name);
            }
        }
    }

    fn columns(&self) -> BTreeSet<String> {
        let table_names: HashSet<&str> = self.tables.iter().flat_map(|t| [t.as_str(), final_segment(t)]).collect();
        let mut out = BTreeSet::new();
        for (k, item) in self.items.iter().enumerate() {
            let Item::Name { segments, .. } = item else {
                continue;
            };
            if self.roles[k] != Role::Free || matches!(self.items.get(k + 1), Some(Item::Open)) {
                continue;
            }
            let col = segments.last().expect("names have at least one segment");
            if segments.len() > 1 {
                out.insert(col.clone());
                continue;
            }
            if functions().niladic.contains(col.as_str()) {
                continue;
            }
            let shadowed = self.aliases.contains(col) || self.ctes.contains(col) || table_names.contains(col.as_str());
            let aliased_expr = is_kw(self.items.get(k + 1), "AS");
            if !shadowed || aliased_expr {
                out.insert(col.clone());
            }
        }
        out
    }
}

/// Source tables referenced by `sql`.
pub fn extract_tables(sql: &str) -> RefSet {
    let a = Analysis::new(sql);
    RefSet { tables: a.tables, columns: BTreeSet::new(), ctes_excluded: a.ctes_excluded }
}

/// Column names referenced by `sql` (final segments only).
pub fn extract_columns(sql: &str) -> RefSet {
    let a = Analysis::new(sql);
    RefSet { tables: BTreeSet::new(), columns: a.columns(), ctes_excluded: BTreeSet::new() }
}

/// Tables and columns in one pass.
pub fn extract_refs(sql: &str) -> RefSet {
    let a = Analysis::new(sql);
    let columns = a.columns();
    RefSet { tables: a.tables, columns, ctes_excluded: a.ctes_excluded }
}

/// True when the outermost statement has an `ORDER BY`; window and subquery
/// orderings do not count.
pub fn has_top_level_order_by(sql: &str) -> bool {
    let items = scan(sql);
    let mut depth = 0usize;
    for (k, item) in items.iter().enumerate() {
        match item {
            Item::Open => depth += 1,
            Item::Close => depth = depth.saturating_sub(1),
            Item::Kw(kw) if kw == "ORDER" && depth == 0 && is_kw(items.get(k + 1), "BY") => return true,
            _ => {}
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_ident("\"PUBLIC\".\"Head\"").unwrap(), "public.head");
        assert_eq!(normalize_ident("`db`.`tbl`").unwrap(), "db.tbl");
        assert_eq!(normalize_ident("HEAD").unwrap(), "head");
        assert_eq!(normalize_ident("[dbo].[Users]").unwrap(), "dbo.users");
        assert!(normalize_ident("").is_err());
        assert!(normalize_ident("  ").is_err());
    }

    #[test]
    fn keyword_driven_tables() {
        assert_eq!(extract_tables("SELECT * FROM s.t JOIN u ON s.t.a = u.a").tables, set(&["s.t", "u"]));
    }

    #[test]
    fn cte_names_excluded() {
        let r = extract_tables("WITH c AS (SELECT * FROM x) SELECT * FROM c");
        assert_eq!(r.tables, set(&["x"]));
        assert!(r.ctes_excluded.contains("c"));
    }

    #[test]
    fn dbt_ref_macro() {
        let body = "select id, amount\nfrom {{ ref('stg_orders') }}\nwhere amount > 0";
        assert_eq!(extract_tables(body).tables, set(&["stg_orders"]));
    }

    #[test]
    fn column_examples() {
        assert_eq!(extract_columns("SELECT a, t.b FROM t WHERE c > 1").columns, set(&["a", "b", "c"]));
        assert!(extract_columns("SELECT COUNT(*) FROM t").columns.is_empty());
        assert_eq!(extract_columns("SELECT x AS y FROM t ORDER BY y").columns, set(&["x"]));
    }

    #[test]
    fn top_level_order_by_detection() {
        assert!(has_top_level_order_by("select a from t order by a"));
        assert!(!has_top_level_order_by("select row_number() over (order by a) from t"));
        assert!(!has_top_level_order_by("select * from (select a from t order by a) s"));
        assert!(!has_top_level_order_by("select 'order by' from t"));
    }

    #[test]
    fn extract_from_inside_function_is_not_a_table() {
        let r = extract_refs("SELECT EXTRACT(YEAR FROM created_at) FROM orders");
        assert_eq!(r.tables, set(&["orders"]));
        assert_eq!(r.columns, set(&["created_at"]));
    }
}
