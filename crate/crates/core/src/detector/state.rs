use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::facts::SinkFamily;
use crate::ir::{FunctionId, InstrId};
use crate::token::Token;

use super::interval::Interval;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    OobRead,
    OobWrite,
    DangerousApi,
}

impl From<SinkFamily> for ViolationKind {
    fn from(f: SinkFamily) -> Self {
        match f {
            SinkFamily::GepLoad => ViolationKind::OobRead,
            SinkFamily::GepStore => ViolationKind::OobWrite,
            SinkFamily::DangerousApi => ViolationKind::DangerousApi,
        }
    }
}

/// Valid byte offsets of a memory object; `None` when its size is unknown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectBounds {
    pub valid: Option<Interval>,
    pub unit: String,
}

impl ObjectBounds {
    pub fn of_size(bytes: Option<u64>) -> Self {
        ObjectBounds {
            valid: bytes.map(|n| Interval::new(Some(0), i64::try_from(n).ok().map(|n| n - 1))),
            unit: "bytes".into(),
        }
    }
}

/// A tainted memory access seen at some step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub step: usize,
    pub function: FunctionId,
    pub instr: InstrId,
    pub rule_name: String,
    pub kind: ViolationKind,
    pub object: String,
    /// Qualified demanded operand that carries taint.
    pub operand: String,
    /// Byte offsets touched, relative to the object start.
    pub extent: Interval,
    pub bounds: ObjectBounds,
    /// False when the guards reaching the access contradict each other.
    pub feasible: bool,
}

/// Accumulated knowledge after `step` frames. Plain data with value
/// equality, so cached states compare exactly.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningState {
    pub step: usize,
    /// Qualified token -> origin chain, root marker first, token last.
    pub tracked_values: BTreeMap<String, Vec<String>>,
    pub object_bounds: BTreeMap<String, ObjectBounds>,
    /// Ranges of tracked values plus `callee/%formal`, `ret:callee` and
    /// `global:@g` summaries handed to later frames.
    pub value_ranges: BTreeMap<String, Interval>,
    pub constraints: Vec<String>,
    pub accesses: Vec<AccessRecord>,
    pub notes: Vec<String>,
}

/// `fn/%v` for values, the tag text for tags.
pub fn qualify(function: &FunctionId, t: &Token) -> String {
    match t {
        Token::Value(v) => format!("{function}/{v}"),
        Token::Tag(tag) => tag.to_string(),
    }
}

/// Note a reasoner leaves for a propagation token it chose not to track.
pub fn dismissal(qualified: &str) -> String {
    format!("dismissed {qualified}")
}

impl ReasoningState {
    pub fn acknowledges(&self, qualified: &str) -> bool {
        self.tracked_values.contains_key(qualified) || self.notes.iter().any(|n| *n == dismissal(qualified))
    }
}
