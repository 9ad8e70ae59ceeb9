use serde::{Deserialize, Serialize};

use super::ast::GlobPattern;
use super::QueryError;
use crate::model::{validate_hypothesis, FamilyTable, Hypothesis};

/// Glob filter over family keys; an empty filter admits every family.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FamilyFilter {
    patterns: Vec<GlobPattern>,
}

impl FamilyFilter {
    pub fn all() -> Self {
        FamilyFilter::default()
    }

    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self, QueryError> {
        let patterns = patterns
            .iter()
            .map(|p| {
                GlobPattern::new(p.as_ref()).map_err(|e| QueryError::Syntax {
                    line: 1,
                    col: e.pos + 1,
                    message: format!("bad family filter `{}`: {}", p.as_ref(), e.msg),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(FamilyFilter { patterns })
    }

    pub fn matches(&self, key: &str) -> bool {
        self.patterns.is_empty() || self.patterns.iter().any(|p| p.matches(key))
    }

    pub fn patterns(&self) -> Vec<String> {
        self.patterns.iter().map(|p| p.text.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub family: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSet {
    pub hypotheses: Vec<Hypothesis>,
    pub excluded: Vec<Exclusion>,
}

/// Pairs the target and conditioning families with every search family (a
/// broadcast join over the shared time index). Families that are the target,
/// part of the conditioning set, listed in `skip`, or that share metrics with
/// them are excluded with a reason rather than failing the whole set.
pub fn generate_hypotheses(
    table: &FamilyTable,
    target: &str,
    condition: &[String],
    search: &FamilyFilter,
    skip: &[String],
) -> Result<HypothesisSet, QueryError> {
    table.get(target)?;
    for c in condition {
        table.get(c)?;
    }
    let mut out = HypothesisSet::default();
    for key in table.keys().filter(|k| search.matches(k)) {
        let reason = if key == target {
            Some("target family".to_string())
        } else if condition.iter().any(|c| c == key) {
            Some("conditioning family".to_string())
        } else if skip.iter().any(|s| s == key) {
            Some("derived from the target".to_string())
        } else {
            None
        };
        if let Some(reason) = reason {
            out.excluded.push(Exclusion {
                family: key.to_string(),
                reason,
            });
            continue;
        }
        let h = Hypothesis::new(key, target, condition.to_vec());
        match validate_hypothesis(&h, table) {
            Ok(()) => out.hypotheses.push(h),
            Err(e) => out.excluded.push(Exclusion {
                family: key.to_string(),
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}
