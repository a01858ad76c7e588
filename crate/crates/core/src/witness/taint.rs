use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::facts::FunctionFacts;
use crate::ir::{FunctionId, ValueId};
use crate::token::{CellKey, Tag, Token};

use super::WitnessBounds;

/// Tainted values (qualified by function) and the tags carried with them.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaintSet {
    pub values: BTreeSet<(FunctionId, ValueId)>,
    pub tags: BTreeSet<Tag>,
}

impl TaintSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Set seeded with `tokens` in `function`.
    pub fn from_tokens<'a>(function: &FunctionId, tokens: impl IntoIterator<Item = &'a Token>) -> Self {
        let mut s = TaintSet::new();
        for t in tokens {
            s.insert(function, t.clone());
        }
        s
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty() && self.tags.is_empty()
    }

    pub fn has_values(&self) -> bool {
        !self.values.is_empty()
    }

    pub fn len(&self) -> usize {
        self.values.len() + self.tags.len()
    }

    pub fn insert(&mut self, function: &FunctionId, token: Token) -> bool {
        match token {
            Token::Value(v) => self.values.insert((function.clone(), v)),
            Token::Tag(t) => self.tags.insert(t),
        }
    }

    pub fn contains(&self, function: &FunctionId, token: &Token) -> bool {
        match token {
            Token::Value(v) => self.contains_value(function, v),
            Token::Tag(t) => self.tags.contains(t),
        }
    }

    pub fn contains_value(&self, function: &FunctionId, v: &ValueId) -> bool {
        self.values.contains(&(function.clone(), v.clone()))
    }

    /// Tokens visible in `function`: its values, then every tag.
    pub fn tokens_in(&self, function: &FunctionId) -> Vec<Token> {
        let mut out: Vec<Token> = self
            .values
            .iter()
            .filter(|(f, _)| f == function)
            .map(|(_, v)| Token::Value(v.clone()))
            .collect();
        out.extend(self.tags.iter().cloned().map(Token::Tag));
        out
    }

    pub fn is_subset(&self, other: &TaintSet) -> bool {
        self.values.is_subset(&other.values) && self.tags.is_subset(&other.tags)
    }

    pub fn union_with(&mut self, other: &TaintSet) {
        self.values.extend(other.values.iter().cloned());
        self.tags.extend(other.tags.iter().cloned());
    }
}

impl fmt::Display for TaintSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = self
            .values
            .iter()
            .map(|(func, v)| format!("{v}@{func}"))
            .collect();
        parts.extend(self.tags.iter().map(ToString::to_string));
        write!(f, "{{{}}}", parts.join(", "))
    }
}

#[derive(Serialize, Deserialize)]
struct TaintSetRepr {
    values: Vec<String>,
    tags: Vec<Tag>,
}

impl Serialize for TaintSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TaintSetRepr {
            values: self
                .values
                .iter()
                .map(|(f, v)| format!("{f}/{v}"))
                .collect(),
            tags: self.tags.iter().cloned().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TaintSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = TaintSetRepr::deserialize(d)?;
        let mut out = TaintSet::new();
        for q in repr.values {
            match q.split_once('/') {
                Some((f, v)) if v.starts_with('%') => {
                    out.values.insert((FunctionId::new(f), ValueId::new(v)));
                }
                _ => return Err(serde::de::Error::custom(format!("malformed value token '{q}'"))),
            }
        }
        out.tags.extend(repr.tags);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("local expansion in '{function}' exceeded {budget} steps")]
pub struct ExpansionBudgetExceeded {
    pub function: FunctionId,
    pub budget: usize,
    pub partial: TaintSet,
}

/// Result of a traced expansion: the closed set and, for every token it
/// added, the tokens that justified it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expansion {
    pub set: TaintSet,
    pub parents: BTreeMap<Token, Vec<Token>>,
    pub steps: usize,
}

struct Expander<'a> {
    function: &'a FunctionId,
    set: TaintSet,
    parents: BTreeMap<Token, Vec<Token>>,
    steps: usize,
    budget: usize,
    changed: bool,
}

impl Expander<'_> {
    fn has_value(&self, v: &ValueId) -> bool {
        self.set.contains_value(self.function, v)
    }

    fn has_cell(&self, c: &CellKey) -> bool {
        self.set.tags.contains(&c.tag())
    }

    fn add(&mut self, token: Token, because: Vec<Token>) -> Result<(), ()> {
        if self.set.contains(self.function, &token) {
            return Ok(());
        }
        self.steps += 1;
        self.set.insert(self.function, token.clone());
        self.parents.insert(token, because);
        self.changed = true;
        if self.steps > self.budget {
            Err(())
        } else {
            Ok(())
        }
    }
}

/// Closes `entry` under the local transfer rules of one function.
pub fn expand_local_taint(
    facts: &FunctionFacts,
    function: &FunctionId,
    entry: &TaintSet,
    bounds: &WitnessBounds,
) -> Result<TaintSet, ExpansionBudgetExceeded> {
    expand_traced(facts, function, entry, bounds).map(|e| e.set)
}

pub fn expand_traced(
    facts: &FunctionFacts,
    function: &FunctionId,
    entry: &TaintSet,
    bounds: &WitnessBounds,
) -> Result<Expansion, ExpansionBudgetExceeded> {
    let mut ex = Expander {
        function,
        set: entry.clone(),
        parents: BTreeMap::new(),
        steps: 0,
        budget: bounds.max_local_expansion_steps,
        changed: true,
    };
    let run = |ex: &mut Expander| -> Result<(), ()> {
        while ex.changed {
            ex.changed = false;
            for flow in &facts.value_flows {
                let hits: Vec<Token> = flow
                    .sources
                    .iter()
                    .filter(|s| ex.has_value(s))
                    .map(|s| Token::Value(s.clone()))
                    .collect();
                if !hits.is_empty() {
                    ex.add(Token::Value(flow.result.clone()), hits)?;
                }
            }
            for op in &facts.pointer_ops {
                let hits: Vec<Token> = std::iter::once(&op.base)
                    .chain(op.offsets.iter().filter_map(|o| o.value()))
                    .filter(|v| ex.has_value(v))
                    .map(|v| Token::Value(v.clone()))
                    .collect();
                if !hits.is_empty() {
                    ex.add(Token::Value(op.result.clone()), hits)?;
                }
            }
            for st in &facts.cell_stores {
                if let Some(v) = &st.value {
                    if ex.has_value(v) {
                        ex.add(Token::Tag(st.cell.tag()), vec![Token::Value(v.clone())])?;
                    }
                }
            }
            for ld in &facts.cell_loads {
                if ex.has_cell(&ld.cell) {
                    ex.add(Token::Value(ld.result.clone()), vec![Token::Tag(ld.cell.tag())])?;
                }
            }
            for alias in &facts.arg_aliases {
                let pairs = [(&alias.arg, &alias.derived), (&alias.derived, &alias.arg)];
                for (a, b) in pairs {
                    if ex.has_value(a) {
                        ex.add(Token::Value(b.clone()), vec![Token::Value(a.clone())])?;
                    }
                    let ca = Tag::Cell(function.clone(), a.clone());
                    if ex.set.tags.contains(&ca) {
                        let cb = Tag::Cell(function.clone(), b.clone());
                        ex.add(Token::Tag(cb), vec![Token::Tag(ca)])?;
                    }
                }
            }
        }
        Ok(())
    };
    match run(&mut ex) {
        Ok(()) => Ok(Expansion {
            set: ex.set,
            parents: ex.parents,
            steps: ex.steps,
        }),
        Err(()) => Err(ExpansionBudgetExceeded {
            function: function.clone(),
            budget: ex.budget,
            partial: ex.set,
        }),
    }
}
