use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::flows::FlowObject;
use crate::ir::InstrId;

use super::interval::Interval;
use super::state::{ReasoningState, ViolationKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub sink_function: crate::ir::FunctionId,
    pub sink_instr: InstrId,
    pub kind: ViolationKind,
    pub accessed_object: String,
    pub access_extent: Interval,
    /// `None` when the object's size could not be reconstructed.
    pub valid_bounds: Option<Interval>,
    /// Source token first, sink-demanded operand last.
    pub taint_chain: Vec<String>,
    pub feasibility_note: String,
}

/// Marker a reasoner puts at the head of every chain seeded by this flow's
/// source.
pub fn root_marker(flow: &FlowObject) -> String {
    let first = &flow.frames[0].function;
    format!("{}@{}#{}", flow.source_annotation.rule_name, first, flow.source_annotation.instr.0)
}

/// Accesses recorded by the final step that are tainted from this flow's
/// root, feasible, and not provably inside their object.
pub fn verify_path(flow: &FlowObject, state: &ReasoningState) -> Vec<Violation> {
    let root = root_marker(flow);
    let mut out = Vec::new();
    for a in state.accesses.iter().filter(|a| a.step == state.step) {
        let Some(chain) = state.tracked_values.get(&a.operand) else {
            continue;
        };
        if chain.first() != Some(&root) || !a.feasible || a.extent.is_empty() {
            continue;
        }
        let (violates, note) = match a.bounds.valid {
            Some(v) => {
                let over = match (a.extent.hi, v.hi) {
                    (None, _) => true,
                    (Some(h), Some(vh)) => h > vh,
                    (Some(_), None) => false,
                };
                let under = match (a.extent.lo, v.lo) {
                    (None, _) => true,
                    (Some(l), Some(vl)) => l < vl,
                    (Some(_), None) => false,
                };
                (over || under, format!("extent {} exceeds valid {}", a.extent, v))
            }
            None => (
                !a.extent.is_bounded(),
                format!("object size unknown and extent {} unconstrained", a.extent),
            ),
        };
        if violates {
            out.push(Violation {
                sink_function: a.function.clone(),
                sink_instr: a.instr,
                kind: a.kind,
                accessed_object: a.object.clone(),
                access_extent: a.extent,
                valid_bounds: a.bounds.valid,
                taint_chain: chain[1..].to_vec(),
                feasibility_note: note,
            });
        }
    }
    out
}

/// Collapses violations sharing (object, kind, root token), keeping the one
/// with the earliest sink instruction. Output is ordered by that key.
pub fn dedup_violations(vs: Vec<Violation>) -> Vec<Violation> {
    let mut kept: BTreeMap<(String, ViolationKind, Option<String>), Violation> = BTreeMap::new();
    for v in vs {
        let key = (v.accessed_object.clone(), v.kind, v.taint_chain.first().cloned());
        match kept.get(&key) {
            Some(old) if (old.sink_function.clone(), old.sink_instr) <= (v.sink_function.clone(), v.sink_instr) => {}
            _ => {
                kept.insert(key, v);
            }
        }
    }
    kept.into_values().collect()
}
