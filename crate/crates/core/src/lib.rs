//! Interprocedural taint slicing over lifted LLVM IR.

pub mod baseline;
pub mod detector;
pub mod facts;
pub mod flows;
pub mod graph;
pub mod ir;
pub mod json;
pub mod token;
pub mod witness;

pub use detector::{analyze_flow, detect_flows, DetectionReport, PrefixTrie, Reasoner, ReasoningState, ReferenceReasoner};
pub use facts::{extract_facts, EndpointHit, FactBase, SourceSinkModel};
pub use flows::{build_flows, compact_view, dedupe_flows, enrich_flow, FlowObject, FrameKey, Provenance};
pub use graph::{build_graph, EdgeKind, PropEdge, PropagationGraph};
pub use ir::{parse_module, FunctionId, InstrId, IrModule, ParseOptions, ValueId};
pub use token::{CellKey, Tag, Token};
pub use witness::{find_witnesses, TaintSet, Witness, WitnessBounds, WitnessSearch};
