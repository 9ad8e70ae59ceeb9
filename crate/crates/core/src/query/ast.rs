use std::fmt;

/// Expression over a record's metric name and tags. Evaluates to a string,
/// or NULL when a referenced tag is absent.
#[derive(Debug, Clone, PartialEq)]
pub enum KeyExpr {
    /// The metric name (`name` or `metric`).
    Name,
    Tag(String),
    Literal(String),
    Concat(Vec<KeyExpr>),
    /// `split(expr, sep)[index]`
    Split {
        expr: Box<KeyExpr>,
        sep: String,
        index: usize,
    },
}

impl KeyExpr {
    pub fn eval<'a>(&self, metric: &'a str, tags: &'a std::collections::BTreeMap<String, String>) -> Option<String> {
        match self {
            KeyExpr::Name => Some(metric.to_string()),
            KeyExpr::Tag(k) => tags.get(k).cloned(),
            KeyExpr::Literal(s) => Some(s.clone()),
            KeyExpr::Concat(parts) => {
                let mut out = String::new();
                for p in parts {
                    out.push_str(&p.eval(metric, tags)?);
                }
                Some(out)
            }
            KeyExpr::Split { expr, sep, index } => {
                let value = expr.eval(metric, tags)?;
                value.split(sep.as_str()).nth(*index).map(str::to_string)
            }
        }
    }

    /// Tag keys this expression reads.
    pub fn tags_used(&self, out: &mut Vec<String>) {
        match self {
            KeyExpr::Tag(k) => out.push(k.clone()),
            KeyExpr::Concat(parts) => parts.iter().for_each(|p| p.tags_used(out)),
            KeyExpr::Split { expr, .. } => expr.tags_used(out),
            KeyExpr::Name | KeyExpr::Literal(_) => {}
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlobPattern {
    pub text: String,
    pub compiled: glob::Pattern,
}

impl PartialEq for GlobPattern {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text
    }
}

impl GlobPattern {
    pub fn new(text: &str) -> Result<Self, glob::PatternError> {
        Ok(GlobPattern {
            text: text.to_string(),
            compiled: glob::Pattern::new(text)?,
        })
    }

    pub fn matches(&self, s: &str) -> bool {
        self.compiled.matches(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Eq(KeyExpr, String),
    Ne(KeyExpr, String),
    In(KeyExpr, Vec<String>),
    Glob(KeyExpr, GlobPattern),
    Not(Box<Predicate>),
    And(Box<Predicate>, Box<Predicate>),
    Or(Box<Predicate>, Box<Predicate>),
}

impl Predicate {
    /// Comparisons against NULL are false.
    pub fn eval(&self, metric: &str, tags: &std::collections::BTreeMap<String, String>) -> bool {
        match self {
            Predicate::Eq(e, v) => e.eval(metric, tags).is_some_and(|s| &s == v),
            Predicate::Ne(e, v) => e.eval(metric, tags).is_some_and(|s| &s != v),
            Predicate::In(e, vs) => e.eval(metric, tags).is_some_and(|s| vs.contains(&s)),
            Predicate::Glob(e, p) => e.eval(metric, tags).is_some_and(|s| p.matches(&s)),
            Predicate::Not(p) => !p.eval(metric, tags),
            Predicate::And(a, b) => a.eval(metric, tags) && b.eval(metric, tags),
            Predicate::Or(a, b) => a.eval(metric, tags) || b.eval(metric, tags),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregate {
    Avg,
    Max,
    Min,
    Sum,
    Count,
    /// Percentile in `[0, 100]`, linear interpolation between ranks.
    Percentile(f64),
}

impl Aggregate {
    pub fn apply(&self, values: &mut [f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        Some(match self {
            Aggregate::Avg => values.iter().sum::<f64>() / n,
            Aggregate::Sum => values.iter().sum(),
            Aggregate::Count => n,
            Aggregate::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregate::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            Aggregate::Percentile(q) => {
                values.sort_by(|a, b| a.total_cmp(b));
                let rank = q / 100.0 * (n - 1.0);
                let lo = rank.floor() as usize;
                let hi = rank.ceil() as usize;
                let frac = rank - lo as f64;
                values[lo] + (values[hi] - values[lo]) * frac
            }
        })
    }

    fn label(&self) -> String {
        match self {
            Aggregate::Avg => "avg".into(),
            Aggregate::Max => "max".into(),
            Aggregate::Min => "min".into(),
            Aggregate::Sum => "sum".into(),
            Aggregate::Count => "count".into(),
            Aggregate::Percentile(q) => format!("p{q}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectExpr {
    pub aggregate: Aggregate,
    /// Grid steps to shift back; 0 means no LAG.
    pub lag: usize,
    pub alias: Option<String>,
}

impl SelectExpr {
    /// Suffix used to tell select expressions apart in feature names.
    pub fn label(&self) -> String {
        match &self.alias {
            Some(a) => a.clone(),
            None if self.lag > 0 => format!("{}_lag{}", self.aggregate.label(), self.lag),
            None => self.aggregate.label(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeSpec {
    pub start: i64,
    pub end: i64,
    pub step: Option<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryAst {
    pub family_by: Vec<KeyExpr>,
    pub filter: Option<Predicate>,
    pub select: Vec<SelectExpr>,
    pub range: Option<RangeSpec>,
}

fn quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

impl fmt::Display for KeyExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyExpr::Name => f.write_str("name"),
            KeyExpr::Tag(k) => write!(f, "tag({})", quote(k)),
            KeyExpr::Literal(s) => f.write_str(&quote(s)),
            KeyExpr::Concat(parts) => {
                f.write_str("concat(")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{p}")?;
                }
                f.write_str(")")
            }
            KeyExpr::Split { expr, sep, index } => write!(f, "split({expr}, {})[{index}]", quote(sep)),
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Eq(e, v) => write!(f, "{e} = {}", quote(v)),
            Predicate::Ne(e, v) => write!(f, "{e} != {}", quote(v)),
            Predicate::In(e, vs) => {
                write!(f, "{e} IN (")?;
                for (i, v) in vs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    f.write_str(&quote(v))?;
                }
                f.write_str(")")
            }
            Predicate::Glob(e, p) => write!(f, "{e} GLOB {}", quote(&p.text)),
            Predicate::Not(p) => write!(f, "NOT {p}"),
            Predicate::And(a, b) => write!(f, "({a} AND {b})"),
            Predicate::Or(a, b) => write!(f, "({a} OR {b})"),
        }
    }
}

impl fmt::Display for SelectExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let value = if self.lag > 0 {
            format!("lag(value, {})", self.lag)
        } else {
            "value".to_string()
        };
        match self.aggregate {
            Aggregate::Percentile(q) => write!(f, "percentile({value}, {q})")?,
            other => write!(f, "{}({value})", other.label())?,
        }
        if let Some(alias) = &self.alias {
            write!(f, " AS {alias}")?;
        }
        Ok(())
    }
}

/// Canonical form; parsing it yields an equal AST.
impl fmt::Display for QueryAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FAMILY BY ")?;
        for (i, k) in self.family_by.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}")?;
        }
        if let Some(p) = &self.filter {
            write!(f, " WHERE {p}")?;
        }
        f.write_str(" SELECT ")?;
        for (i, s) in self.select.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{s}")?;
        }
        if let Some(r) = &self.range {
            write!(f, " RANGE {}..{}", r.start, r.end)?;
            if let Some(step) = r.step {
                write!(f, " STEP {step}")?;
            }
        }
        Ok(())
    }
}
