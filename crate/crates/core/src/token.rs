//! Taint tokens: SSA values and the symbolic tags that travel with them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ir::{FunctionId, ValueId};

/// Memory cell identity under the cell-keying rule.
///
/// Two addresses share a cell iff they are the same SSA value, the same
/// global, or the same alloca reached through bitcasts only.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CellKey {
    Global(ValueId),
    Local(FunctionId, ValueId),
}

impl CellKey {
    pub fn tag(&self) -> Tag {
        match self {
            CellKey::Global(g) => Tag::Global(g.clone()),
            CellKey::Local(f, v) => Tag::Cell(f.clone(), v.clone()),
        }
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellKey::Global(g) => write!(f, "{g}"),
            CellKey::Local(func, v) => write!(f, "{func}/{v}"),
        }
    }
}

/// A symbolic tag: a tainted global object or a tainted local memory cell.
///
/// Cell tags name their owning function so they never alias a cell of the
/// same name in another frame.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tag {
    Global(ValueId),
    Cell(FunctionId, ValueId),
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Global(g) => write!(f, "global:{g}"),
            Tag::Cell(func, v) => write!(f, "cell:{func}/{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed token '{0}'")]
pub struct TokenParseError(pub String);

impl FromStr for Tag {
    type Err = TokenParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(g) = s.strip_prefix("global:") {
            if g.starts_with('@') && g.len() > 1 {
                return Ok(Tag::Global(ValueId::new(g)));
            }
        } else if let Some(rest) = s.strip_prefix("cell:") {
            if let Some((func, v)) = rest.split_once('/') {
                if !func.is_empty() && v.starts_with('%') {
                    return Ok(Tag::Cell(FunctionId::new(func), ValueId::new(v)));
                }
            }
        }
        Err(TokenParseError(s.to_string()))
    }
}

/// Anything a frame can track: a function-local value or a tag.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Token {
    Value(ValueId),
    Tag(Tag),
}

impl Token {
    pub fn value(v: impl Into<String>) -> Self {
        Token::Value(ValueId::new(v))
    }

    pub fn global(g: impl Into<String>) -> Self {
        Token::Tag(Tag::Global(ValueId::new(g)))
    }

    pub fn as_value(&self) -> Option<&ValueId> {
        match self {
            Token::Value(v) => Some(v),
            Token::Tag(_) => None,
        }
    }

    pub fn as_tag(&self) -> Option<&Tag> {
        match self {
            Token::Tag(t) => Some(t),
            Token::Value(_) => None,
        }
    }

    /// Key used in reasoning states: locals are qualified by their function.
    pub fn qualified(&self, function: &FunctionId) -> String {
        match self {
            Token::Value(v) => format!("{function}/{v}"),
            Token::Tag(t) => t.to_string(),
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Value(v) => write!(f, "{v}"),
            Token::Tag(t) => write!(f, "{t}"),
        }
    }
}

impl FromStr for Token {
    type Err = TokenParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.starts_with('%') && s.len() > 1 {
            Ok(Token::Value(ValueId::new(s)))
        } else {
            s.parse::<Tag>().map(Token::Tag)
        }
    }
}

macro_rules! string_serde {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

pub(crate) use string_serde;

string_serde!(Tag);
string_serde!(Token);

impl Serialize for CellKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CellKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.starts_with('@') {
            return Ok(CellKey::Global(ValueId::new(s)));
        }
        match s.split_once('/') {
            Some((f, v)) if v.starts_with('%') => {
                Ok(CellKey::Local(FunctionId::new(f), ValueId::new(v)))
            }
            _ => Err(serde::de::Error::custom(format!("malformed cell key '{s}'"))),
        }
    }
}
