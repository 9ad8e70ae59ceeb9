//! Hand-written lexer and recursive-descent parser for the family DSL.
//!
//! ```text
//! query   := FAMILY BY key (',' key)* [WHERE pred] SELECT sel (',' sel)*
//!            [RANGE int '..' int [STEP int]]
//! key     := name | metric | 'literal' | tag('k') | tag['k']
//!          | concat(key, ...) | split(key, 'sep')[int]
//! pred    := conj (OR conj)*
//! conj    := unary (AND unary)*
//! unary   := NOT unary | '(' pred ')' | key cmp
//! cmp     := '=' str | '!=' str | [NOT] IN '(' str, ... ')' | GLOB str
//! sel     := agg '(' val ')' [AS ident] | percentile '(' val ',' num ')' [AS ident]
//! val     := value | lag '(' value ',' int ')'
//! ```
//!
//! Keywords and function names are case-insensitive; `--` starts a comment.

use super::ast::{Aggregate, GlobPattern, KeyExpr, Predicate, QueryAst, RangeSpec, SelectExpr};
use super::QueryError;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Num(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Eq,
    Ne,
    DotDot,
    Semi,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, QueryError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let err = |line, col, message: String| QueryError::Syntax { line, col, message };
    while i < chars.len() {
        let c = chars[i];
        let (start_line, start_col) = (line, col);
        let advance = |n: usize, i: &mut usize, col: &mut usize| {
            *i += n;
            *col += n;
        };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            advance(1, &mut i, &mut col);
            continue;
        }
        if c == '-' && chars.get(i + 1) == Some(&'-') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let tok = match c {
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '[' => Some(Tok::LBracket),
            ']' => Some(Tok::RBracket),
            ',' => Some(Tok::Comma),
            ';' => Some(Tok::Semi),
            '=' => Some(Tok::Eq),
            _ => None,
        };
        if let Some(tok) = tok {
            out.push(Token { tok, line, col });
            advance(1, &mut i, &mut col);
            continue;
        }
        if c == '!' && chars.get(i + 1) == Some(&'=') {
            out.push(Token { tok: Tok::Ne, line, col });
            advance(2, &mut i, &mut col);
            continue;
        }
        if c == '.' && chars.get(i + 1) == Some(&'.') {
            out.push(Token { tok: Tok::DotDot, line, col });
            advance(2, &mut i, &mut col);
            continue;
        }
        if c == '\'' {
            let mut s = String::new();
            i += 1;
            col += 1;
            loop {
                match chars.get(i) {
                    None => return Err(err(start_line, start_col, "unterminated string".into())),
                    Some('\'') if chars.get(i + 1) == Some(&'\'') => {
                        s.push('\'');
                        i += 2;
                        col += 2;
                    }
                    Some('\'') => {
                        i += 1;
                        col += 1;
                        break;
                    }
                    Some('\n') => {
                        s.push('\n');
                        i += 1;
                        line += 1;
                        col = 1;
                    }
                    Some(&ch) => {
                        s.push(ch);
                        i += 1;
                        col += 1;
                    }
                }
            }
            out.push(Token {
                tok: Tok::Str(s),
                line: start_line,
                col: start_col,
            });
            continue;
        }
        let negative = c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit());
        if c.is_ascii_digit() || negative {
            let mut s = String::new();
            if negative {
                s.push('-');
                i += 1;
                col += 1;
            }
            while i < chars.len() {
                let d = chars[i];
                let decimal_point =
                    d == '.' && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit()) && !s.contains('.');
                if d.is_ascii_digit() || decimal_point {
                    s.push(d);
                    i += 1;
                    col += 1;
                } else {
                    break;
                }
            }
            out.push(Token {
                tok: Tok::Num(s),
                line: start_line,
                col: start_col,
            });
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let mut s = String::new();
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                s.push(chars[i]);
                i += 1;
                col += 1;
            }
            out.push(Token {
                tok: Tok::Ident(s),
                line: start_line,
                col: start_col,
            });
            continue;
        }
        return Err(err(line, col, format!("unexpected character `{c}`")));
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    /// Position reported for errors at end of input.
    end: (usize, usize),
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.tok)
    }

    fn here(&self) -> (usize, usize) {
        self.tokens
            .get(self.pos)
            .map(|t| (t.line, t.col))
            .unwrap_or(self.end)
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, QueryError> {
        let (line, col) = self.here();
        Err(QueryError::Syntax {
            line,
            col,
            message: message.into(),
        })
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).map(|t| t.tok.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s.eq_ignore_ascii_case(kw))
    }

    fn keyword(&mut self, kw: &str) -> Result<(), QueryError> {
        if self.at_keyword(kw) {
            self.pos += 1;
            Ok(())
        } else {
            self.error(format!("expected {kw}"))
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), QueryError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            self.error(format!("expected {what}"))
        }
    }

    fn string(&mut self) -> Result<String, QueryError> {
        match self.peek() {
            Some(Tok::Str(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.error("expected a quoted string"),
        }
    }

    fn integer(&mut self) -> Result<i64, QueryError> {
        match self.peek() {
            Some(Tok::Num(n)) => match n.parse::<i64>() {
                Ok(v) => {
                    self.pos += 1;
                    Ok(v)
                }
                Err(_) => self.error(format!("expected an integer, found `{n}`")),
            },
            _ => self.error("expected an integer"),
        }
    }

    fn unsigned(&mut self, what: &str) -> Result<usize, QueryError> {
        let (line, col) = self.here();
        let v = self.integer()?;
        usize::try_from(v).map_err(|_| QueryError::Syntax {
            line,
            col,
            message: format!("{what} must be ≥ 0"),
        })
    }

    fn number(&mut self) -> Result<f64, QueryError> {
        match self.peek() {
            Some(Tok::Num(n)) => {
                let v = n.parse::<f64>().map_err(|_| QueryError::Syntax {
                    line: self.here().0,
                    col: self.here().1,
                    message: format!("bad number `{n}`"),
                })?;
                self.pos += 1;
                Ok(v)
            }
            _ => self.error("expected a number"),
        }
    }

    fn query(&mut self) -> Result<QueryAst, QueryError> {
        self.keyword("FAMILY")?;
        self.keyword("BY")?;
        let mut family_by = vec![self.key_expr()?];
        while self.peek() == Some(&Tok::Comma) {
            self.pos += 1;
            family_by.push(self.key_expr()?);
        }
        let filter = if self.at_keyword("WHERE") {
            self.pos += 1;
            Some(self.predicate()?)
        } else {
            None
        };
        self.keyword("SELECT")?;
        let mut select = vec![self.select_expr()?];
        while self.peek() == Some(&Tok::Comma) {
            self.pos += 1;
            select.push(self.select_expr()?);
        }
        let range = if self.at_keyword("RANGE") {
            self.pos += 1;
            let start = self.integer()?;
            self.expect(Tok::DotDot, "`..`")?;
            let end = self.integer()?;
            let step = if self.at_keyword("STEP") {
                self.pos += 1;
                let (line, col) = self.here();
                let step = self.integer()?;
                if step < 1 {
                    return Err(QueryError::Syntax {
                        line,
                        col,
                        message: "STEP must be ≥ 1".into(),
                    });
                }
                Some(step)
            } else {
                None
            };
            if start >= end {
                return self.error("RANGE start must precede its end");
            }
            Some(RangeSpec { start, end, step })
        } else {
            None
        };
        Ok(QueryAst {
            family_by,
            filter,
            select,
            range,
        })
    }

    fn function_name(&mut self) -> Option<String> {
        match (self.tokens.get(self.pos), self.tokens.get(self.pos + 1)) {
            (Some(Token { tok: Tok::Ident(name), .. }), Some(Token { tok: Tok::LParen | Tok::LBracket, .. })) => {
                Some(name.to_ascii_lowercase())
            }
            _ => None,
        }
    }

    fn unknown_function<T>(&self, name: &str) -> Result<T, QueryError> {
        let (line, col) = self.here();
        Err(QueryError::UnknownFunction {
            name: name.to_string(),
            line,
            col,
        })
    }

    fn key_expr(&mut self) -> Result<KeyExpr, QueryError> {
        if let Some(Tok::Str(_)) = self.peek() {
            return Ok(KeyExpr::Literal(self.string()?));
        }
        if let Some(func) = self.function_name() {
            let bracket = self.tokens[self.pos + 1].tok == Tok::LBracket;
            match (func.as_str(), bracket) {
                ("tag", true) => {
                    self.pos += 2;
                    let k = self.string()?;
                    self.expect(Tok::RBracket, "`]`")?;
                    return Ok(KeyExpr::Tag(k));
                }
                ("tag", false) => {
                    self.pos += 2;
                    let k = self.string()?;
                    self.expect(Tok::RParen, "`)`")?;
                    return Ok(KeyExpr::Tag(k));
                }
                ("concat", false) => {
                    self.pos += 2;
                    let mut parts = vec![self.key_expr()?];
                    while self.peek() == Some(&Tok::Comma) {
                        self.pos += 1;
                        parts.push(self.key_expr()?);
                    }
                    self.expect(Tok::RParen, "`)`")?;
                    return Ok(KeyExpr::Concat(parts));
                }
                ("split", false) => {
                    self.pos += 2;
                    let expr = self.key_expr()?;
                    self.expect(Tok::Comma, "`,`")?;
                    let sep = self.string()?;
                    if sep.is_empty() {
                        return self.error("split separator must not be empty");
                    }
                    self.expect(Tok::RParen, "`)`")?;
                    self.expect(Tok::LBracket, "`[index]` after split(...)")?;
                    let index = self.unsigned("split index")?;
                    self.expect(Tok::RBracket, "`]`")?;
                    return Ok(KeyExpr::Split {
                        expr: Box::new(expr),
                        sep,
                        index,
                    });
                }
                (_, false) => return self.unknown_function(&func),
                (_, true) => return self.error(format!("`{func}` cannot be indexed")),
            }
        }
        match self.peek() {
            Some(Tok::Ident(s)) if s.eq_ignore_ascii_case("name") || s.eq_ignore_ascii_case("metric") => {
                self.pos += 1;
                Ok(KeyExpr::Name)
            }
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.error(format!("unknown column `{s}` (use name, metric or tag('key'))"))
            }
            _ => self.error("expected a key expression"),
        }
    }

    fn predicate(&mut self) -> Result<Predicate, QueryError> {
        let mut left = self.conjunction()?;
        while self.at_keyword("OR") {
            self.pos += 1;
            let right = self.conjunction()?;
            left = Predicate::Or(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn conjunction(&mut self) -> Result<Predicate, QueryError> {
        let mut left = self.unary()?;
        while self.at_keyword("AND") {
            self.pos += 1;
            let right = self.unary()?;
            left = Predicate::And(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn unary(&mut self) -> Result<Predicate, QueryError> {
        if self.at_keyword("NOT") {
            self.pos += 1;
            return Ok(Predicate::Not(Box::new(self.unary()?)));
        }
        if self.peek() == Some(&Tok::LParen) {
            self.pos += 1;
            let inner = self.predicate()?;
            self.expect(Tok::RParen, "`)`")?;
            return Ok(inner);
        }
        let key = self.key_expr()?;
        match self.peek() {
            Some(Tok::Eq) => {
                self.pos += 1;
                Ok(Predicate::Eq(key, self.string()?))
            }
            Some(Tok::Ne) => {
                self.pos += 1;
                Ok(Predicate::Ne(key, self.string()?))
            }
            Some(Tok::Ident(s)) if s.eq_ignore_ascii_case("IN") => {
                self.pos += 1;
                Ok(Predicate::In(key, self.string_list()?))
            }
            Some(Tok::Ident(s)) if s.eq_ignore_ascii_case("NOT") => {
                self.pos += 1;
                self.keyword("IN")?;
                Ok(Predicate::Not(Box::new(Predicate::In(key, self.string_list()?))))
            }
            Some(Tok::Ident(s)) if s.eq_ignore_ascii_case("GLOB") => {
                self.pos += 1;
                let (line, col) = self.here();
                let text = self.string()?;
                let pattern = GlobPattern::new(&text).map_err(|e| QueryError::Syntax {
                    line,
                    col,
                    message: format!("bad glob pattern: {e}"),
                })?;
                Ok(Predicate::Glob(key, pattern))
            }
            _ => self.error("expected =, !=, IN or GLOB"),
        }
    }

    fn string_list(&mut self) -> Result<Vec<String>, QueryError> {
        self.expect(Tok::LParen, "`(`")?;
        let mut out = vec![self.string()?];
        while self.peek() == Some(&Tok::Comma) {
            self.pos += 1;
            out.push(self.string()?);
        }
        self.expect(Tok::RParen, "`)`")?;
        Ok(out)
    }

    fn select_expr(&mut self) -> Result<SelectExpr, QueryError> {
        let Some(func) = self.function_name() else {
            return self.error("expected an aggregate such as avg(value)");
        };
        let aggregate = match func.as_str() {
            "avg" => Aggregate::Avg,
            "max" => Aggregate::Max,
            "min" => Aggregate::Min,
            "sum" => Aggregate::Sum,
            "count" => Aggregate::Count,
            "percentile" => Aggregate::Percentile(0.0),
            _ => return self.unknown_function(&func),
        };
        self.pos += 1;
        self.expect(Tok::LParen, "`(`")?;
        let lag = self.value_expr()?;
        let aggregate = if let Aggregate::Percentile(_) = aggregate {
            self.expect(Tok::Comma, "`,` and a percentile")?;
            let q = self.number()?;
            if !(0.0..=100.0).contains(&q) {
                return self.error("percentile must lie in [0, 100]");
            }
            Aggregate::Percentile(q)
        } else {
            aggregate
        };
        self.expect(Tok::RParen, "`)`")?;
        let alias = if self.at_keyword("AS") {
            self.pos += 1;
            match self.next() {
                Some(Tok::Ident(a)) => Some(a),
                _ => {
                    self.pos -= 1;
                    return self.error("expected an alias after AS");
                }
            }
        } else {
            None
        };
        Ok(SelectExpr { aggregate, lag, alias })
    }

    /// Returns the LAG offset (0 for plain `value`).
    fn value_expr(&mut self) -> Result<usize, QueryError> {
        if let Some(func) = self.function_name() {
            if func != "lag" {
                return self.unknown_function(&func);
            }
            self.pos += 1;
            self.expect(Tok::LParen, "`(`")?;
            match self.next() {
                Some(Tok::Ident(v)) if v.eq_ignore_ascii_case("value") => {}
                _ => {
                    self.pos -= 1;
                    return self.error("lag() takes `value` as its first argument");
                }
            }
            self.expect(Tok::Comma, "`,`")?;
            let k = self.unsigned("LAG offset")?;
            self.expect(Tok::RParen, "`)`")?;
            return Ok(k);
        }
        match self.next() {
            Some(Tok::Ident(v)) if v.eq_ignore_ascii_case("value") => Ok(0),
            _ => {
                self.pos = self.pos.saturating_sub(1);
                self.error("expected `value` or lag(value, k)")
            }
        }
    }
}

fn end_position(text: &str) -> (usize, usize) {
    let line = text.lines().count().max(1);
    let col = text.lines().last().map(|l| l.chars().count() + 1).unwrap_or(1);
    (line, col)
}

pub fn parse_query(text: &str) -> Result<QueryAst, QueryError> {
    let mut queries = parse_queries(text)?;
    match queries.len() {
        1 => Ok(queries.remove(0)),
        0 => {
            let (line, col) = end_position(text);
            Err(QueryError::Syntax {
                line,
                col,
                message: "empty query".into(),
            })
        }
        n => Err(QueryError::Syntax {
            line: 1,
            col: 1,
            message: format!("expected one statement, found {n}"),
        }),
    }
}

/// Parses a file of `;`-separated statements.
pub fn parse_queries(text: &str) -> Result<Vec<QueryAst>, QueryError> {
    let tokens = lex(text)?;
    let mut out = Vec::new();
    let mut statement = Vec::new();
    let end = end_position(text);
    let mut flush = |statement: &mut Vec<Token>, end: (usize, usize)| -> Result<(), QueryError> {
        if statement.is_empty() {
            return Ok(());
        }
        let mut parser = Parser {
            tokens: std::mem::take(statement),
            pos: 0,
            end,
        };
        let q = parser.query()?;
        if parser.pos < parser.tokens.len() {
            return parser.error("unexpected trailing input");
        }
        out.push(q);
        Ok(())
    };
    for t in tokens {
        if t.tok == Tok::Semi {
            let at = (t.line, t.col);
            flush(&mut statement, at)?;
        } else {
            statement.push(t);
        }
    }
    flush(&mut statement, end)?;
    Ok(out)
}
