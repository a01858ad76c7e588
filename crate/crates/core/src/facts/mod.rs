//! Fact extraction: everything later stages know about a module.
//!
//! Extraction is total. Opaque instructions contribute nothing, indirect
//! calls are recorded as diagnostics, and every other instruction produces
//! the facts its opcode implies.

mod model;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ir::{
    Callee, CastOp, FunctionId, InstrId, InstrKind, Instruction, IrFunction, IrModule, Operand,
    OperandValue, ValueId,
};
use crate::token::{CellKey, Tag, Token};

pub use model::{
    Channel, ModelError, SinkFamily, SinkRule, SourceRule, SourceSinkModel, MODEL_SCHEMA,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactBase {
    pub per_function: BTreeMap<FunctionId, FunctionFacts>,
    pub call_facts: Vec<CallFact>,
    pub global_summaries: BTreeMap<ValueId, GlobalAccessSummary>,
    pub source_hits: Vec<EndpointHit>,
    pub sink_hits: Vec<EndpointHit>,
    pub diagnostics: FactDiagnostics,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionFacts {
    /// Formal parameters by position.
    pub params: Vec<Option<ValueId>>,
    /// Named parameters, then instruction results, in program order.
    pub definitions: Vec<ValueId>,
    /// Local and argument values with the instructions that read them.
    pub def_use: BTreeMap<ValueId, Vec<InstrId>>,
    pub value_flows: Vec<ValueFlow>,
    pub cell_stores: Vec<CellStore>,
    pub cell_loads: Vec<CellLoad>,
    pub load_store_links: Vec<LoadStoreLink>,
    pub pointer_ops: Vec<PointerOpRecord>,
    pub arg_aliases: Vec<ArgAlias>,
    pub returns: Vec<ReturnFact>,
}

impl FunctionFacts {
    pub fn is_empty(&self) -> bool {
        self.def_use.is_empty()
            && self.value_flows.is_empty()
            && self.cell_stores.is_empty()
            && self.cell_loads.is_empty()
            && self.load_store_links.is_empty()
            && self.pointer_ops.is_empty()
            && self.arg_aliases.is_empty()
            && self.returns.is_empty()
    }

    /// Position of `v` in program order; unknown values sort last.
    pub fn definition_rank(&self, v: &ValueId) -> usize {
        self.definitions.iter().position(|d| d == v).unwrap_or(usize::MAX)
    }

    /// Values returned by the function, in order, without duplicates.
    pub fn returned_values(&self) -> Vec<&ValueId> {
        let mut out: Vec<&ValueId> = Vec::new();
        for r in &self.returns {
            if !out.contains(&&r.value) {
                out.push(&r.value);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    Arith,
    Cast,
    Select,
    Phi,
}

/// `result` carries data from each of `sources`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueFlow {
    pub instr: InstrId,
    pub kind: FlowKind,
    pub result: ValueId,
    pub sources: Vec<ValueId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellStore {
    pub instr: InstrId,
    /// Stored local value; `None` for constants and global addresses.
    pub value: Option<ValueId>,
    pub cell: CellKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellLoad {
    pub instr: InstrId,
    pub cell: CellKey,
    pub result: ValueId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStoreLink {
    pub store: InstrId,
    pub load: InstrId,
    pub cell: CellKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointerOpKind {
    Gep,
    Bitcast,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Offset {
    Value(ValueId),
    Const(i64),
}

impl Offset {
    pub fn value(&self) -> Option<&ValueId> {
        match self {
            Offset::Value(v) => Some(v),
            Offset::Const(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointerOpRecord {
    pub instr: InstrId,
    pub kind: PointerOpKind,
    pub base: ValueId,
    pub offsets: Vec<Offset>,
    pub result: ValueId,
}

/// A pointer argument and a value derived from it through bitcasts only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgAlias {
    pub arg: ValueId,
    pub derived: ValueId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReturnFact {
    pub instr: InstrId,
    pub value: ValueId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActualFormal {
    pub actual: ValueId,
    pub index: usize,
    /// Formal parameter id when the callee is defined in the module.
    pub formal: Option<ValueId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallFact {
    pub caller: FunctionId,
    pub callee: FunctionId,
    /// The callee has a body in this module.
    pub resolved: bool,
    pub call_instr: InstrId,
    pub actual_to_formal: Vec<ActualFormal>,
    pub returns_value_to: Option<ValueId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalWrite {
    pub function: FunctionId,
    pub instr: InstrId,
    /// Stored operand as written (a value id or a constant).
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalRead {
    pub function: FunctionId,
    pub instr: InstrId,
    pub value: ValueId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalAccessSummary {
    pub global_id: ValueId,
    pub writers: Vec<GlobalWrite>,
    pub readers: Vec<GlobalRead>,
}

/// A source or sink rule matched at one instruction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EndpointHit {
    pub function: FunctionId,
    pub instr: InstrId,
    pub rule_name: String,
    /// Introduced tokens for sources, demanded tokens for sinks.
    pub tainted_tokens: Vec<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<Channel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<SinkFamily>,
}

impl EndpointHit {
    pub fn is_source(&self) -> bool {
        self.family.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrRef {
    pub function: FunctionId,
    pub instr: InstrId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactDiagnostics {
    pub unresolved_calls: Vec<InstrRef>,
    pub opaque_instructions: Vec<InstrRef>,
}

impl FactBase {
    pub fn function(&self, id: &FunctionId) -> Option<&FunctionFacts> {
        self.per_function.get(id)
    }

    pub fn calls_from<'a>(&'a self, caller: &'a FunctionId) -> impl Iterator<Item = &'a CallFact> {
        self.call_facts.iter().filter(move |c| &c.caller == caller)
    }

    pub fn call_at(&self, caller: &FunctionId, instr: InstrId) -> Option<&CallFact> {
        self.call_facts
            .iter()
            .find(|c| &c.caller == caller && c.call_instr == instr)
    }

    pub fn fact_count(&self) -> usize {
        let local: usize = self
            .per_function
            .values()
            .map(|f| {
                f.def_use.values().map(Vec::len).sum::<usize>()
                    + f.value_flows.len()
                    + f.cell_stores.len()
                    + f.cell_loads.len()
                    + f.load_store_links.len()
                    + f.pointer_ops.len()
                    + f.arg_aliases.len()
                    + f.returns.len()
            })
            .sum();
        let global: usize = self
            .global_summaries
            .values()
            .map(|g| g.writers.len() + g.readers.len())
            .sum();
        local + global + self.call_facts.len() + self.source_hits.len() + self.sink_hits.len()
    }
}

/// Definitions of one function, indexed by result id.
struct Defs<'a> {
    by_result: HashMap<&'a ValueId, &'a Instruction>,
}

impl<'a> Defs<'a> {
    fn new(f: &'a IrFunction) -> Self {
        let by_result = f
            .instructions()
            .filter_map(|i| i.result.as_ref().map(|r| (r, i)))
            .collect();
        Defs { by_result }
    }

    fn get(&self, v: &ValueId) -> Option<&'a Instruction> {
        self.by_result.get(v).copied()
    }

    /// Follows bitcasts back to the underlying operand.
    fn strip_bitcasts<'b>(&self, mut op: &'b Operand) -> &'b Operand
    where
        'a: 'b,
    {
        for _ in 0..self.by_result.len() + 1 {
            let Some(v) = op.local_id() else { return op };
            match self.get(v).map(|i| &i.kind) {
                Some(InstrKind::Cast {
                    op: CastOp::Bitcast,
                    value,
                }) => op = value,
                _ => return op,
            }
        }
        op
    }

    /// Memory cell addressed by `addr` under the cell-keying rule.
    fn cell_key(&self, func: &FunctionId, addr: &Operand) -> Option<CellKey> {
        let root = self.strip_bitcasts(addr);
        match &root.value {
            OperandValue::Global(g) => Some(CellKey::Global(g.clone())),
            OperandValue::Local(v) if matches!(self.get(v).map(|i| &i.kind), Some(InstrKind::Alloca { .. })) => {
                Some(CellKey::Local(func.clone(), v.clone()))
            }
            OperandValue::Const(_) => None,
            _ => addr.local_id().map(|v| CellKey::Local(func.clone(), v.clone())),
        }
    }

    /// Non-constant offsets demanded by an access through `addr`: the
    /// offsets of the addressing GEP and of every GEP nested in its base.
    fn gep_chain_offsets(&self, addr: &Operand) -> Option<Vec<ValueId>> {
        let mut op = self.strip_bitcasts(addr);
        let mut out: Vec<ValueId> = Vec::new();
        let mut found = false;
        for _ in 0..self.by_result.len() + 1 {
            let Some(v) = op.local_id() else { break };
            let Some(InstrKind::GetElementPtr { base, indices, .. }) = self.get(v).map(|i| &i.kind)
            else {
                break;
            };
            found = true;
            for ix in indices {
                if let Some(id) = ix.local_id() {
                    if !out.contains(id) {
                        out.push(id.clone());
                    }
                }
            }
            op = self.strip_bitcasts(base);
        }
        found.then_some(out)
    }
}

fn local_sources<'o>(ops: impl IntoIterator<Item = &'o Operand>) -> Vec<ValueId> {
    let mut out: Vec<ValueId> = Vec::new();
    for op in ops {
        if let Some(v) = op.local_id() {
            if !out.contains(v) {
                out.push(v.clone());
            }
        }
    }
    out
}

fn is_pointer_type(ty: &str) -> bool {
    ty == "ptr" || ty.ends_with('*')
}

/// Per-function extraction output before merging.
struct Partial {
    function: FunctionId,
    facts: FunctionFacts,
    calls: Vec<CallFact>,
    writes: Vec<(ValueId, GlobalWrite)>,
    reads: Vec<(ValueId, GlobalRead)>,
    sources: Vec<EndpointHit>,
    sinks: Vec<EndpointHit>,
    diagnostics: FactDiagnostics,
}

fn extract_function(module: &IrModule, model: &SourceSinkModel, f: &IrFunction) -> Partial {
    let defs = Defs::new(f);
    let fid = &f.id;
    let mut facts = FunctionFacts {
        params: f.params.iter().map(|p| p.id.clone()).collect(),
        definitions: f.definition_order(),
        ..FunctionFacts::default()
    };
    let mut out = Partial {
        function: fid.clone(),
        facts: FunctionFacts::default(),
        calls: Vec::new(),
        writes: Vec::new(),
        reads: Vec::new(),
        sources: Vec::new(),
        sinks: Vec::new(),
        diagnostics: FactDiagnostics::default(),
    };
    let here = |instr: InstrId| InstrRef {
        function: fid.clone(),
        instr,
    };

    for inst in f.instructions() {
        for v in local_sources(inst.operands()) {
            facts.def_use.entry(v).or_default().push(inst.id);
        }
        let result = inst.result.clone();
        match &inst.kind {
            InstrKind::Binary { lhs, rhs, .. } => {
                push_flow(&mut facts, inst, FlowKind::Arith, [lhs, rhs]);
            }
            InstrKind::Cast { op, value } => {
                if *op == CastOp::Bitcast && is_pointer_type(&value.ty) {
                    if let (Some(base), Some(r)) = (value.value_id(), result) {
                        facts.pointer_ops.push(PointerOpRecord {
                            instr: inst.id,
                            kind: PointerOpKind::Bitcast,
                            base: base.clone(),
                            offsets: Vec::new(),
                            result: r,
                        });
                    }
                } else {
                    push_flow(&mut facts, inst, FlowKind::Cast, [value]);
                }
            }
            InstrKind::Select {
                on_true, on_false, ..
            } => push_flow(&mut facts, inst, FlowKind::Select, [on_true, on_false]),
            InstrKind::Phi { incoming } => {
                push_flow(&mut facts, inst, FlowKind::Phi, incoming.iter().map(|(v, _)| v));
            }
            InstrKind::GetElementPtr { base, indices, .. } => {
                if let (Some(b), Some(r)) = (base.value_id(), result) {
                    facts.pointer_ops.push(PointerOpRecord {
                        instr: inst.id,
                        kind: PointerOpKind::Gep,
                        base: b.clone(),
                        offsets: indices
                            .iter()
                            .map(|ix| match ix.local_id() {
                                Some(v) => Offset::Value(v.clone()),
                                None => Offset::Const(ix.const_int().unwrap_or(0)),
                            })
                            .collect(),
                        result: r,
                    });
                }
            }
            InstrKind::Store { value, addr } => {
                if let Some(cell) = defs.cell_key(fid, addr) {
                    if let CellKey::Global(g) = &cell {
                        out.writes.push((
                            g.clone(),
                            GlobalWrite {
                                function: fid.clone(),
                                instr: inst.id,
                                value: value.text(),
                            },
                        ));
                    }
                    facts.cell_stores.push(CellStore {
                        instr: inst.id,
                        value: value.local_id().cloned(),
                        cell,
                    });
                }
                if let Some(tokens) = defs.gep_chain_offsets(addr) {
                    push_pattern_hits(&mut out.sinks, model, SinkFamily::GepStore, fid, inst.id, tokens);
                }
            }
            InstrKind::Load { addr } => {
                if let (Some(cell), Some(r)) = (defs.cell_key(fid, addr), result) {
                    if let CellKey::Global(g) = &cell {
                        out.reads.push((
                            g.clone(),
                            GlobalRead {
                                function: fid.clone(),
                                instr: inst.id,
                                value: r.clone(),
                            },
                        ));
                    }
                    facts.cell_loads.push(CellLoad {
                        instr: inst.id,
                        cell,
                        result: r,
                    });
                }
                if let Some(tokens) = defs.gep_chain_offsets(addr) {
                    push_pattern_hits(&mut out.sinks, model, SinkFamily::GepLoad, fid, inst.id, tokens);
                }
            }
            InstrKind::Call { callee, args } => match callee {
                Callee::Indirect(_) => out.diagnostics.unresolved_calls.push(here(inst.id)),
                Callee::Direct(name) => {
                    let target = module.function(name).filter(|c| !c.is_declaration);
                    let actual_to_formal = args
                        .iter()
                        .enumerate()
                        .filter_map(|(index, a)| {
                            a.local_id().map(|v| ActualFormal {
                                actual: v.clone(),
                                index,
                                formal: target
                                    .and_then(|t| t.params.get(index))
                                    .and_then(|p| p.id.clone()),
                            })
                        })
                        .collect();
                    out.calls.push(CallFact {
                        caller: fid.clone(),
                        callee: name.clone(),
                        resolved: target.is_some(),
                        call_instr: inst.id,
                        actual_to_formal,
                        returns_value_to: result.clone(),
                    });
                    for rule in model.source_for(name.as_str()) {
                        let mut tokens: Vec<Token> = Vec::new();
                        if rule.taint_result {
                            if let Some(r) = &result {
                                tokens.push(Token::Value(r.clone()));
                            }
                        }
                        for &ix in &rule.taint_args {
                            let cell = args.get(ix).and_then(|a| defs.cell_key(fid, a));
                            if let Some(cell) = cell {
                                let t = Token::Tag(cell.tag());
                                if !tokens.contains(&t) {
                                    tokens.push(t);
                                }
                            }
                        }
                        if !tokens.is_empty() {
                            out.sources.push(EndpointHit {
                                function: fid.clone(),
                                instr: inst.id,
                                rule_name: rule.name.clone(),
                                tainted_tokens: tokens,
                                channel: Some(rule.channel),
                                family: None,
                            });
                        }
                    }
                    for rule in model.dangerous_api_for(name.as_str()) {
                        let mut tokens: Vec<Token> = Vec::new();
                        for &ix in &rule.args {
                            if let Some(v) = args.get(ix).and_then(|a| a.local_id()) {
                                let t = Token::Value(v.clone());
                                if !tokens.contains(&t) {
                                    tokens.push(t);
                                }
                            }
                        }
                        if !tokens.is_empty() {
                            out.sinks.push(EndpointHit {
                                function: fid.clone(),
                                instr: inst.id,
                                rule_name: rule.name.clone(),
                                tainted_tokens: tokens,
                                channel: None,
                                family: Some(SinkFamily::DangerousApi),
                            });
                        }
                    }
                }
            },
            InstrKind::Ret { value: Some(v) } => {
                if let Some(id) = v.local_id() {
                    facts.returns.push(ReturnFact {
                        instr: inst.id,
                        value: id.clone(),
                    });
                }
            }
            InstrKind::Opaque { .. } => out.diagnostics.opaque_instructions.push(here(inst.id)),
            InstrKind::Alloca { .. } | InstrKind::Icmp { .. } | InstrKind::Br(_) | InstrKind::Ret { value: None } => {}
        }
    }

    for s in &facts.cell_stores {
        for l in &facts.cell_loads {
            if s.cell == l.cell {
                facts.load_store_links.push(LoadStoreLink {
                    store: s.instr,
                    load: l.instr,
                    cell: s.cell.clone(),
                });
            }
        }
    }

    for p in f.params.iter().filter(|p| is_pointer_type(&p.ty)) {
        let Some(arg) = &p.id else { continue };
        let mut frontier = vec![arg.clone()];
        while let Some(cur) = frontier.pop() {
            for op in &facts.pointer_ops {
                if op.kind == PointerOpKind::Bitcast
                    && op.base == cur
                    && !facts.arg_aliases.iter().any(|a| a.arg == *arg && a.derived == op.result)
                {
                    facts.arg_aliases.push(ArgAlias {
                        arg: arg.clone(),
                        derived: op.result.clone(),
                    });
                    frontier.push(op.result.clone());
                }
            }
        }
    }

    out.facts = facts;
    out
}

fn push_flow<'o>(
    facts: &mut FunctionFacts,
    inst: &Instruction,
    kind: FlowKind,
    ops: impl IntoIterator<Item = &'o Operand>,
) {
    if let Some(r) = &inst.result {
        facts.value_flows.push(ValueFlow {
            instr: inst.id,
            kind,
            result: r.clone(),
            sources: local_sources(ops),
        });
    }
}

fn push_pattern_hits(
    hits: &mut Vec<EndpointHit>,
    model: &SourceSinkModel,
    family: SinkFamily,
    function: &FunctionId,
    instr: InstrId,
    offsets: Vec<ValueId>,
) {
    if offsets.is_empty() {
        return;
    }
    for rule in model.pattern_rules(family) {
        hits.push(EndpointHit {
            function: function.clone(),
            instr,
            rule_name: rule.name.clone(),
            tainted_tokens: offsets.iter().cloned().map(Token::Value).collect(),
            channel: None,
            family: Some(family),
        });
    }
}

/// Extracts the fact base of `module` under `model`.
pub fn extract_facts(module: &IrModule, model: &SourceSinkModel) -> FactBase {
    let partials: Vec<Partial> = module
        .functions
        .par_iter()
        .filter(|f| !f.is_declaration)
        .map(|f| extract_function(module, model, f))
        .collect();

    let mut base = FactBase {
        per_function: BTreeMap::new(),
        call_facts: Vec::new(),
        global_summaries: BTreeMap::new(),
        source_hits: Vec::new(),
        sink_hits: Vec::new(),
        diagnostics: FactDiagnostics::default(),
    };
    for p in partials {
        base.call_facts.extend(p.calls);
        for (g, w) in p.writes {
            summary(&mut base.global_summaries, &g).writers.push(w);
        }
        for (g, r) in p.reads {
            summary(&mut base.global_summaries, &g).readers.push(r);
        }
        base.source_hits.extend(p.sources);
        base.sink_hits.extend(p.sinks);
        base.diagnostics.unresolved_calls.extend(p.diagnostics.unresolved_calls);
        base.diagnostics.opaque_instructions.extend(p.diagnostics.opaque_instructions);
        base.per_function.insert(p.function, p.facts);
    }
    base.source_hits.sort();
    base.sink_hits.sort();
    base
}

fn summary<'a>(
    map: &'a mut BTreeMap<ValueId, GlobalAccessSummary>,
    g: &ValueId,
) -> &'a mut GlobalAccessSummary {
    map.entry(g.clone()).or_insert_with(|| GlobalAccessSummary {
        global_id: g.clone(),
        writers: Vec::new(),
        readers: Vec::new(),
    })
}

/// Tag denoting the memory behind a tainted pointer operand, if any.
pub fn pointee_tag(module: &IrModule, function: &FunctionId, addr: &Operand) -> Option<Tag> {
    let f = module.function(function)?;
    Defs::new(f).cell_key(function, addr).map(|c| c.tag())
}
