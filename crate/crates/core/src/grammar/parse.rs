use std::collections::HashMap;

use super::{Grammar, GrammarError, Rule, Symbol, RENORMALIZE_WINDOW};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Arrow,
    Pipe,
    Quoted(String),
    Ident(String),
    Weight(f64),
}

struct Lexed {
    tok: Tok,
    column: usize,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> GrammarError {
    GrammarError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn is_ident_char(c: char) -> bool {
    !c.is_whitespace() && !matches!(c, '"' | '|' | '[' | ']' | '#')
}

fn lex_line(text: &str, line: usize) -> Result<Vec<Lexed>, GrammarError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c == '#' {
            break;
        } else if c == '|' {
            out.push(Lexed {
                tok: Tok::Pipe,
                column,
            });
            i += 1;
        } else if c == '-' && chars.get(i + 1) == Some(&'>') {
            out.push(Lexed {
                tok: Tok::Arrow,
                column,
            });
            i += 2;
        } else if c == '"' {
            let mut s = String::new();
            i += 1;
            loop {
                match chars.get(i) {
                    None => return Err(syntax(line, column, "unterminated string")),
                    Some('"') => {
                        i += 1;
                        break;
                    }
                    Some('\\') => {
                        let esc = chars
                            .get(i + 1)
                            .ok_or_else(|| syntax(line, i + 1, "dangling escape"))?;
                        s.push(*esc);
                        i += 2;
                    }
                    Some(&ch) => {
                        s.push(ch);
                        i += 1;
                    }
                }
            }
            out.push(Lexed {
                tok: Tok::Quoted(s),
                column,
            });
        } else if c == '[' {
            let close = chars[i..]
                .iter()
                .position(|&ch| ch == ']')
                .ok_or_else(|| syntax(line, column, "unterminated weight"))?;
            let body: String = chars[i + 1..i + close].iter().collect();
            let w: f64 = body
                .trim()
                .parse()
                .map_err(|_| syntax(line, column + 1, format!("bad weight `{}`", body.trim())))?;
            out.push(Lexed {
                tok: Tok::Weight(w),
                column,
            });
            i += close + 1;
        } else if is_ident_char(c) {
            let mut s = String::new();
            while i < chars.len() && is_ident_char(chars[i]) {
                if chars[i] == '-' && chars.get(i + 1) == Some(&'>') {
                    break;
                }
                s.push(chars[i]);
                i += 1;
            }
            out.push(Lexed {
                tok: Tok::Ident(s),
                column,
            });
        } else {
            return Err(syntax(line, column, format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

enum Line {
    Start(String),
    Name(String),
    Group {
        lhs: String,
        lhs_column: usize,
        alts: Vec<(Vec<Lexed>, f64)>,
    },
}

fn header(text: &str, key: &str) -> Option<String> {
    let t = text.trim_start();
    let rest = t.strip_prefix(key)?.trim_start();
    let rest = rest.strip_prefix(':')?;
    let value = rest.split('#').next().unwrap_or("").trim();
    Some(value.to_string())
}

fn parse_line(text: &str, line: usize) -> Result<Option<Line>, GrammarError> {
    if let Some(v) = header(text, "start") {
        if v.is_empty() || v.contains(char::is_whitespace) {
            return Err(syntax(line, 1, "expected a single start symbol"));
        }
        return Ok(Some(Line::Start(v)));
    }
    if let Some(v) = header(text, "name") {
        return Ok(Some(Line::Name(v)));
    }
    let toks = lex_line(text, line)?;
    if toks.is_empty() {
        return Ok(None);
    }
    let mut it = toks.into_iter().peekable();
    let first = it.next().unwrap();
    let Tok::Ident(lhs) = first.tok else {
        return Err(syntax(line, first.column, "expected a nonterminal name"));
    };
    let lhs_column = first.column;
    match it.next() {
        Some(Lexed {
            tok: Tok::Arrow, ..
        }) => {}
        Some(other) => return Err(syntax(line, other.column, "expected `->`")),
        None => return Err(syntax(line, text.len() + 1, "expected `->`")),
    }
    let mut alts = Vec::new();
    let mut current = Vec::new();
    let mut last_column = lhs_column;
    loop {
        match it.next() {
            None => {
                return Err(syntax(
                    line,
                    last_column,
                    "alternative is missing a `[weight]`",
                ))
            }
            Some(Lexed {
                tok: Tok::Weight(w),
                column,
            }) => {
                alts.push((std::mem::take(&mut current), w));
                last_column = column;
                match it.next() {
                    None => break,
                    Some(Lexed {
                        tok: Tok::Pipe, ..
                    }) => continue,
                    Some(other) => {
                        return Err(syntax(line, other.column, "expected `|` after weight"))
                    }
                }
            }
            Some(Lexed {
                tok: Tok::Pipe,
                column,
            }) => return Err(syntax(line, column, "alternative is missing a `[weight]`")),
            Some(Lexed {
                tok: Tok::Arrow,
                column,
            }) => return Err(syntax(line, column, "unexpected `->`")),
            Some(lexed) => {
                last_column = lexed.column;
                current.push(lexed);
            }
        }
    }
    Ok(Some(Line::Group {
        lhs,
        lhs_column,
        alts,
    }))
}

/// Parses the grammar text format.
///
/// ```text
/// # comment
/// name: nested_parens
/// start: L0
/// L0 -> "(" L1 ")" [0.7] | L0 L0 [0.3]
/// L1 -> "(" L1 ")" [0.8] | "a" [0.2]
/// ```
///
/// Terminals are double-quoted, `""` is ε, bare identifiers are
/// nonterminals and must have a rule group somewhere in the file. A
/// nonterminal may span several lines; alternatives accumulate in order.
///
/// Weight sums that miss one by less than [`RENORMALIZE_WINDOW`] are
/// renormalized once; larger deviations are kept as written so that
/// [`super::validate`] can report them. Use [`parse_grammar_strict`] to
/// reject them instead.
pub fn parse_grammar(text: &str) -> Result<Grammar, GrammarError> {
    let mut start: Option<(String, usize)> = None;
    let mut name = String::from("grammar");
    let mut groups = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        match parse_line(raw, line)? {
            None => {}
            Some(Line::Start(s)) => {
                if start.is_some() {
                    return Err(GrammarError::DuplicateStart { line });
                }
                start = Some((s, line));
            }
            Some(Line::Name(n)) => name = n,
            Some(Line::Group {
                lhs,
                lhs_column,
                alts,
            }) => groups.push((line, lhs, lhs_column, alts)),
        }
    }

    let mut nonterminals: Vec<String> = Vec::new();
    let mut nt_ids: HashMap<String, usize> = HashMap::new();
    for (_, lhs, _, _) in &groups {
        if !nt_ids.contains_key(lhs) {
            nt_ids.insert(lhs.clone(), nonterminals.len());
            nonterminals.push(lhs.clone());
        }
    }
    let (start_name, _) = start.ok_or(GrammarError::MissingStart)?;
    let start = *nt_ids
        .get(&start_name)
        .ok_or_else(|| GrammarError::UnknownStart(start_name.clone()))?;

    let mut terminals: Vec<String> = Vec::new();
    let mut t_ids: HashMap<String, usize> = HashMap::new();
    let mut rules = Vec::new();
    for (line, lhs, _, alts) in groups {
        let lhs_id = nt_ids[&lhs];
        for (items, weight) in alts {
            let mut rhs = Vec::with_capacity(items.len());
            for item in items {
                match item.tok {
                    Tok::Quoted(s) if s.is_empty() => {}
                    Tok::Quoted(s) => {
                        if s.contains(char::is_whitespace) {
                            return Err(syntax(
                                line,
                                item.column,
                                "terminals may not contain whitespace",
                            ));
                        }
                        if nt_ids.contains_key(&s) {
                            return Err(GrammarError::Overlap(s));
                        }
                        let id = *t_ids.entry(s.clone()).or_insert_with(|| {
                            terminals.push(s);
                            terminals.len() - 1
                        });
                        rhs.push(Symbol::Terminal(id));
                    }
                    Tok::Ident(s) => match nt_ids.get(&s) {
                        Some(&n) => rhs.push(Symbol::Nonterminal(n)),
                        None => {
                            return Err(GrammarError::UndeclaredSymbol {
                                name: s,
                                line,
                                column: item.column,
                            })
                        }
                    },
                    _ => return Err(syntax(line, item.column, "unexpected token")),
                }
            }
            rules.push(Rule {
                lhs: lhs_id,
                rhs,
                weight,
            });
        }
    }

    let mut sums = vec![0.0; nonterminals.len()];
    for r in &rules {
        sums[r.lhs] += r.weight;
    }
    for r in &mut rules {
        let dev = (sums[r.lhs] - 1.0).abs();
        if dev > 0.0 && dev < RENORMALIZE_WINDOW {
            r.weight /= sums[r.lhs];
        }
    }
    Grammar::new(name, terminals, nonterminals, start, rules)
}

/// Like [`parse_grammar`] but rejects weight sums outside tolerance.
pub fn parse_grammar_strict(text: &str) -> Result<Grammar, GrammarError> {
    let g = parse_grammar(text)?;
    g.check_weight_sums()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rule() {
        let g = parse_grammar("start: S\nS -> \"a\" [1.0]").unwrap();
        assert_eq!(g.rules().len(), 1);
        assert_eq!(g.terminals(), ["a"]);
        assert_eq!(g.rule(0).weight, 1.0);
    }

    #[test]
    fn epsilon_and_comments() {
        let g = parse_grammar(
            "# leading comment\nstart: S   # trailing\nS -> \"\" [0.5] | \"x\" S [0.5]\n",
        )
        .unwrap();
        assert!(g.rule(0).rhs.is_empty());
        assert_eq!(g.rule(1).rhs.len(), 2);
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse_grammar("start: S\nS -> \"a\" [1.0] \"b\"") {
            Err(GrammarError::Syntax { line, column, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(column, 16);
            }
            other => panic!("{other:?}"),
        }
        match parse_grammar("start: S\nS -> \"a\"") {
            Err(GrammarError::Syntax { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_grammar("start: S\nS -> \"a [1.0]") {
            Err(GrammarError::Syntax { line: 2, column: 6, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn undeclared_symbol() {
        match parse_grammar("start: S\nS -> T [1.0]") {
            Err(GrammarError::UndeclaredSymbol { name, line, column }) => {
                assert_eq!((name.as_str(), line, column), ("T", 2, 6));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_start() {
        assert_eq!(
            parse_grammar("start: S\nstart: S\nS -> \"a\" [1]"),
            Err(GrammarError::DuplicateStart { line: 2 })
        );
    }

    #[test]
    fn small_deviation_renormalized_large_kept() {
        let g = parse_grammar("start: S\nS -> \"a\" [0.3333333] | \"b\" [0.6666666]").unwrap();
        assert!((g.weight_sums()[0] - 1.0).abs() < 1e-15);
        let g = parse_grammar("start: S\nS -> \"a\" [0.5] | \"b\" [0.4]").unwrap();
        assert!((g.weight_sums()[0] - 0.9).abs() < 1e-15);
        assert!(matches!(
            parse_grammar_strict("start: S\nS -> \"a\" [0.5] | \"b\" [0.4]"),
            Err(GrammarError::WeightSum { .. })
        ));
    }

    #[test]
    fn overlap_rejected() {
        assert_eq!(
            parse_grammar("start: S\nS -> \"S\" [1.0]"),
            Err(GrammarError::Overlap("S".into()))
        );
    }

    #[test]
    fn multi_line_groups_accumulate() {
        let g = parse_grammar("start: S\nS -> \"a\" [0.5]\nS -> \"b\" [0.5]").unwrap();
        assert_eq!(g.rules_for(0).len(), 2);
    }

    #[test]
    fn print_round_trip() {
        let text = "name: t\nstart: S\nS -> \"a\" S \"\\\"q\" [0.25] | \"\" [0.75]\n";
        let g = parse_grammar(text).unwrap();
        let printed = g.to_string();
        assert_eq!(parse_grammar(&printed).unwrap(), g);
        assert!(printed.contains("[0.250000]"));
    }
}
