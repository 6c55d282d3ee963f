//! Lexer for best-effort SQL reference harvesting.
//!
//! Comments are dropped, string literals collapse to a single token, quoted
//! identifiers are unquoted, dotted names are joined, and dbt `{{ ... }}`
//! expressions are reduced to the relation they name (if any). Jinja
//! statements and comments (`{% %}`, `{# #}`) are skipped entirely.

use std::collections::HashSet;
use std::sync::OnceLock;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Item {
    /// Dotted identifier chain, segments lowercased and unquoted.
    Name {
        segments: Vec<String>,
        quoted: bool,
    },
    /// Reserved word, uppercased.
    Kw(String),
    /// `name.*` or `*`.
    Star,
    Str,
    Num,
    Open,
    Close,
    Comma,
    Semi,
    /// `::` cast operator.
    Cast,
    /// dbt relation macro; `None` for expressions that name no relation.
    Macro(Option<String>),
    Other,
}

fn keywords() -> &'static HashSet<String> {
    static KW: OnceLock<HashSet<String>> = OnceLock::new();
    KW.get_or_init(|| {
        include_str!("../../data/sql_keywords.txt")
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_ascii_uppercase)
            .collect()
    })
}

pub(crate) struct FunctionNames {
    pub call: HashSet<String>,
    pub niladic: HashSet<String>,
}

pub(crate) fn functions() -> &'static FunctionNames {
    static FNS: OnceLock<FunctionNames> = OnceLock::new();
    FNS.get_or_init(|| {
        let mut names = FunctionNames { call: HashSet::new(), niladic: HashSet::new() };
        let mut niladic = false;
        for line in include_str!("../../data/sql_functions.txt").lines().map(str::trim) {
            match line {
                "" => {}
                l if l.starts_with('#') => {}
                "[call]" => niladic = false,
                "[niladic]" => niladic = true,
                l if niladic => {
                    names.niladic.insert(l.to_ascii_lowercase());
                }
                l => {
                    names.call.insert(l.to_ascii_lowercase());
                }
            }
        }
        names
    })
}

pub(crate) fn is_keyword(word: &str) -> bool {
    keywords().contains(&word.to_ascii_uppercase())
}

#[derive(Debug, Clone, PartialEq)]
enum Raw {
    Ident { text: String, quoted: bool },
    Str(String),
    Num,
    Dot,
    Star,
    Open,
    Close,
    Comma,
    Semi,
    Cast,
    Macro(Option<String>),
    Other,
}

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_'
}

fn is_ident_continue(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$'
}

/// Reads a delimited run starting after the opening delimiter. A doubled
/// closing delimiter is an escaped literal. Returns (content, next index).
fn read_delimited(chars: &[char], mut i: usize, close: char) -> (String, usize) {
    let mut out = String::new();
    while i < chars.len() {
        if chars[i] == close {
            if close != ']' && chars.get(i + 1) == Some(&close) {
                out.push(close);
                i += 2;
                continue;
            }
            return (out, i + 1);
        }
        out.push(chars[i]);
        i += 1;
    }
    (out, i)
}

fn find_seq(chars: &[char], from: usize, pat: &[char]) -> Option<usize> {
    (from..chars.len().saturating_sub(pat.len() - 1)).find(|&k| chars[k..].starts_with(pat))
}

/// Interprets the interior of a `{{ ... }}` expression.
fn parse_macro(body: &str) -> Option<String> {
    let body = body.trim();
    let (func, rest) = body.split_once('(')?;
    let func = func.trim();
    let args_str = rest.rsplit_once(')')?.0;
    let mut args = Vec::new();
    let chars: Vec<char> = args_str.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        match chars[i] {
            q @ ('\'' | '"') => {
                let (s, next) = read_delimited(&chars, i + 1, q);
                args.push(s);
                i = next;
                // skip to the next top-level comma
                while i < chars.len() && chars[i] != ',' {
                    i += 1;
                }
            }
            ',' | ' ' | '\t' | '\n' | '\r' => i += 1,
            _ => {
                // keyword argument such as v=2; not a positional name
                while i < chars.len() && chars[i] != ',' {
                    i += 1;
                }
            }
        }
    }
    let clean = |s: &str| s.trim().to_lowercase();
    match (func, args.as_slice()) {
        ("ref", [.., name]) => Some(clean(name)),
        ("source", [src, tbl]) => Some(format!("{}.{}", clean(src), clean(tbl))),
        _ => None,
    }
}

fn lex(sql: &str) -> Vec<Raw> {
    let chars: Vec<char> = sql.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        match c {
            c if c.is_whitespace() => i += 1,
            '-' if next == Some('-') => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '/' if next == Some('*') => {
                i = find_seq(&chars, i + 2, &['*', '/']).map_or(chars.len(), |k| k + 2);
            }
            '{' if next == Some('{') => {
                let end = find_seq(&chars, i + 2, &['}', '}']);
                let stop = end.unwrap_or(chars.len());
                let body: String = chars[i + 2..stop].iter().collect();
                out.push(Raw::Macro(parse_macro(&body)));
                i = end.map_or(chars.len(), |k| k + 2);
            }
            '{' if next == Some('%') => {
                i = find_seq(&chars, i + 2, &['%', '}']).map_or(chars.len(), |k| k + 2);
            }
            '{' if next == Some('#') => {
                i = find_seq(&chars, i + 2, &['#', '}']).map_or(chars.len(), |k| k + 2);
            }
            '\'' => {
                let (s, n) = read_delimited(&chars, i + 1, '\'');
                out.push(Raw::Str(s));
                i = n;
            }
            '"' => {
                let (s, n) = read_delimited(&chars, i + 1, '"');
                out.push(Raw::Ident { text: s, quoted: true });
                i = n;
            }
            '`' => {
                let (s, n) = read_delimited(&chars, i + 1, '`');
                out.push(Raw::Ident { text: s, quoted: true });
                i = n;
            }
            '[' => {
                let (s, n) = read_delimited(&chars, i + 1, ']');
                out.push(Raw::Ident { text: s, quoted: true });
                i = n;
            }
            c if c.is_ascii_digit() || (c == '.' && next.is_some_and(|d| d.is_ascii_digit())) => {
                i += 1;
                while i < chars.len() {
                    let d = chars[i];
                    let exp_sign = matches!(d, '+' | '-') && matches!(chars[i - 1], 'e' | 'E');
                    if d.is_ascii_alphanumeric() || d == '.' || d == '_' || exp_sign {
                        i += 1;
                    } else {
                        break;
                    }
                }
                out.push(Raw::Num);
            }
            c if is_ident_start(c) => {
                let start = i;
                while i < chars.len() && is_ident_continue(chars[i]) {
                    i += 1;
                }
                out.push(Raw::Ident { text: chars[start..i].iter().collect(), quoted: false });
            }
            '.' => {
                out.push(Raw::Dot);
                i += 1;
            }
            '*' => {
                out.push(Raw::Star);
                i += 1;
            }
            '(' => {
                out.push(Raw::Open);
                i += 1;
            }
            ')' => {
                out.push(Raw::Close);
                i += 1;
            }
            ',' => {
                out.push(Raw::Comma);
                i += 1;
            }
            ';' => {
                out.push(Raw::Semi);
                i += 1;
            }
            ':' if next == Some(':') => {
                out.push(Raw::Cast);
                i += 2;
            }
            _ => {
                out.push(Raw::Other);
                i += 1;
            }
        }
    }
    out
}

/// Lexes `sql` and folds dotted identifier chains into single items.
pub(crate) fn scan(sql: &str) -> Vec<Item> {
    let raw = lex(sql);
    let mut items = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        match &raw[i] {
            Raw::Ident { text, quoted } => {
                let mut segments = vec![text.to_lowercase()];
                let mut any_quoted = *quoted;
                let mut star = false;
                let mut j = i + 1;
                while j + 1 < raw.len() && raw[j] == Raw::Dot {
                    match &raw[j + 1] {
                        Raw::Ident { text, quoted } => {
                            segments.push(text.to_lowercase());
                            any_quoted |= *quoted;
                            j += 2;
                        }
                        Raw::Star => {
                            star = true;
                            j += 2;
                            break;
                        }
                        _ => break,
                    }
                }
                for s in &mut segments {
                    *s = s.trim().to_string();
                }
                if star {
                    items.push(Item::Star);
                } else if segments.iter().any(String::is_empty) {
                    // `""`, an unterminated quote at end of input, or `a.""`
                    items.push(Item::Other);
                } else if segments.len() == 1 && !any_quoted && is_keyword(&segments[0]) {
                    items.push(Item::Kw(segments[0].to_ascii_uppercase()));
                } else {
                    items.push(Item::Name { segments, quoted: any_quoted });
                }
                i = j;
            }
            other => {
                items.push(match other {
                    Raw::Str(_) => Item::Str,
                    Raw::Num => Item::Num,
                    Raw::Star => Item::Star,
                    Raw::Open => Item::Open,
                    Raw::Close => Item::Close,
                    Raw::Comma => Item::Comma,
                    Raw::Semi => Item::Semi,
                    Raw::Cast => Item::Cast,
                    Raw::Macro(m) => Item::Macro(m.clone()),
                    Raw::Dot | Raw::Other | Raw::Ident { .. } => Item::Other,
                });
                i += 1;
            }
        }
    }
    items
}

/// Lowercases everything outside string literals, drops comments, collapses
/// whitespace and trailing semicolons. Used as the key for scripted results.
pub(crate) fn canonical_text(sql: &str) -> String {
    let chars: Vec<char> = sql.chars().collect();
    let mut out = String::with_capacity(sql.len());
    let mut pending_space = false;
    let mut i = 0;
    let push_space = |out: &mut String, pending: &mut bool| {
        if *pending && !out.is_empty() {
            out.push(' ');
        }
        *pending = false;
    };
    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        if c == '-' && next == Some('-') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            pending_space = true;
        } else if c == '/' && next == Some('*') {
            i = find_seq(&chars, i + 2, &['*', '/']).map_or(chars.len(), |k| k + 2);
            pending_space = true;
        } else if c.is_whitespace() {
            pending_space = true;
            i += 1;
        } else if c == '\'' {
            push_space(&mut out, &mut pending_space);
            let (s, n) = read_delimited(&chars, i + 1, '\'');
            out.push('\'');
            out.push_str(&s.replace('\'', "''"));
            out.push('\'');
            i = n;
        } else {
            push_space(&mut out, &mut pending_space);
            out.extend(c.to_lowercase());
            i += 1;
        }
    }
    let trimmed = out.trim_end_matches([';', ' ']);
    trimmed.to_string()
}
