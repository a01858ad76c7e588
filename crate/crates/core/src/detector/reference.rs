//! Deterministic rule-based reasoner.
//!
//! Each step re-derives taint for one function with the witness transfer
//! rules, extends origin chains, and runs a forward interval pass in which
//! `icmp`-against-constant branches and selects refine ranges. Tainted
//! accesses at sink sites are recorded with their byte extents.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::facts::{extract_facts, FactBase, FunctionFacts, SourceSinkModel};
use crate::flows::AnchorCues;
use crate::graph::{build_graph, EdgeMeta, PropagationGraph};
use crate::ir::types::IrType;
use crate::ir::{
    BinOp, Branch, Callee, CastOp, FunctionId, IcmpPred, InstrKind, IrFunction, IrModule, Operand, OperandValue,
    ValueId,
};
use crate::token::{CellKey, Tag, Token};
use crate::witness::{expand_traced, transfer_across_edge, TaintSet, WitnessBounds};

use super::interval::Interval;
use super::state::{dismissal, qualify, AccessRecord, ObjectBounds, ReasoningState};
use super::view::FunctionView;
use super::{Reasoner, ReasonerFailure};

pub struct ReferenceReasoner<'m> {
    module: &'m IrModule,
    facts: FactBase,
    graph: PropagationGraph,
}

impl<'m> ReferenceReasoner<'m> {
    pub fn new(module: &'m IrModule, model: &SourceSinkModel) -> Self {
        let facts = extract_facts(module, model);
        let graph = build_graph(&facts);
        ReferenceReasoner { module, facts, graph }
    }
}

/// Everything tracked so far as one taint set.
fn tracked_set(state: &ReasoningState) -> TaintSet {
    let mut s = TaintSet::new();
    for q in state.tracked_values.keys() {
        if let Ok(tag) = q.parse::<Tag>() {
            s.tags.insert(tag);
        } else if let Some((f, v)) = q.split_once('/') {
            s.values.insert((FunctionId::new(f), ValueId::new(v)));
        }
    }
    s
}

/// A branch condition of the form `x pred C`, holding on the edge `from->to`
/// and therefore in every block only reachable through that edge.
struct Guard {
    value: ValueId,
    range: Interval,
    text: String,
    blocks: BTreeSet<usize>,
}

fn reachable_without(f: &IrFunction, cut: (usize, usize)) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([0]);
    let mut queue = VecDeque::from([0]);
    while let Some(b) = queue.pop_front() {
        for s in f.successors(b) {
            if (b, s) != cut && seen.insert(s) {
                queue.push_back(s);
            }
        }
    }
    seen
}

/// `(x, pred, c)` for `x pred c` or `c pred x`.
fn compare_with_const(f: &IrFunction, cond: &Operand) -> Option<(ValueId, IcmpPred, i64)> {
    let InstrKind::Icmp { pred, lhs, rhs } = &f.definition(cond.local_id()?)?.kind else {
        return None;
    };
    match (lhs.local_id(), rhs.const_int(), lhs.const_int(), rhs.local_id()) {
        (Some(x), Some(c), _, _) => Some((x.clone(), *pred, c)),
        (_, _, Some(c), Some(x)) => Some((x.clone(), pred.swap(), c)),
        _ => None,
    }
}

fn guards(f: &IrFunction) -> (Vec<Guard>, Vec<ValueId>) {
    let mut out = Vec::new();
    let mut opaque = Vec::new();
    let all: BTreeSet<usize> = (0..f.blocks.len()).collect();
    for (p, block) in f.blocks.iter().enumerate() {
        let Some(InstrKind::Br(Branch::Conditional {
            cond,
            then_label,
            else_label,
        })) = block.instructions.last().map(|i| &i.kind)
        else {
            continue;
        };
        let (Some(t), Some(e)) = (f.block_index(then_label), f.block_index(else_label)) else {
            continue;
        };
        if t == e {
            continue;
        }
        let Some((x, pred, c)) = compare_with_const(f, cond) else {
            if let Some(v) = cond.local_id() {
                opaque.push(v.clone());
            }
            continue;
        };
        for (target, label, pred) in [(t, then_label, pred), (e, else_label, pred.negate())] {
            let reach = reachable_without(f, (p, target));
            out.push(Guard {
                value: x.clone(),
                range: Interval::satisfying(pred, c),
                text: format!("{}/{} {} {} on %{}->%{}", f.id, x, pred.as_str(), c, block.label, label),
                blocks: all.difference(&reach).copied().collect(),
            });
        }
    }
    (out, opaque)
}

struct Ranges<'a> {
    module: &'a IrModule,
    f: &'a IrFunction,
    ff: &'a FunctionFacts,
    guards: &'a [Guard],
    state: &'a ReasoningState,
    values: BTreeMap<ValueId, Interval>,
    cells: BTreeMap<CellKey, Interval>,
    global_stores: BTreeMap<ValueId, Interval>,
}

impl Ranges<'_> {
    fn refine(&self, v: &ValueId, block: usize, base: Interval) -> Interval {
        self.guards
            .iter()
            .filter(|g| &g.value == v && g.blocks.contains(&block))
            .fold(base, |acc, g| acc.meet(&g.range))
    }

    fn operand(&self, op: &Operand, block: usize) -> Interval {
        if let Some(c) = op.const_int() {
            return Interval::exact(c);
        }
        match op.local_id() {
            Some(v) => self.refine(v, block, self.values.get(v).copied().unwrap_or(Interval::TOP)),
            None => Interval::TOP,
        }
    }

    /// Range of an arm of `select cond, ..`, refined by the condition when
    /// it compares that very arm against a constant.
    fn arm(&self, cond: &Operand, arm: &Operand, block: usize, taken: bool) -> Interval {
        let r = self.operand(arm, block);
        match (compare_with_const(self.f, cond), arm.local_id()) {
            (Some((x, pred, c)), Some(a)) if &x == a => {
                let pred = if taken { pred } else { pred.negate() };
                r.meet(&Interval::satisfying(pred, c))
            }
            _ => r,
        }
    }

    fn cell_of(&self, instr: crate::ir::InstrId, loads: bool) -> Option<&CellKey> {
        if loads {
            self.ff.cell_loads.iter().find(|l| l.instr == instr).map(|l| &l.cell)
        } else {
            self.ff.cell_stores.iter().find(|s| s.instr == instr).map(|s| &s.cell)
        }
    }

    fn run(&mut self) {
        for p in self.f.params.iter().filter_map(|p| p.id.as_ref()) {
            let key = format!("{}/{}", self.f.id, p);
            let r = self.state.value_ranges.get(&key).copied().unwrap_or(Interval::TOP);
            self.values.insert(p.clone(), r);
        }
        for (b, block) in self.f.blocks.iter().enumerate() {
            for inst in &block.instructions {
                let r = match &inst.kind {
                    InstrKind::Binary { op, lhs, rhs } => {
                        let (l, r) = (self.operand(lhs, b), self.operand(rhs, b));
                        Some(match op {
                            BinOp::Add => l.add(&r),
                            BinOp::Sub => l.sub(&r),
                            BinOp::Mul => l.mul(&r),
                        })
                    }
                    InstrKind::Cast { op, value } => {
                        let v = self.operand(value, b);
                        Some(if *op == CastOp::Zext { v.zext() } else { v })
                    }
                    InstrKind::Select {
                        cond,
                        on_true,
                        on_false,
                    } => Some(self.arm(cond, on_true, b, true).hull(&self.arm(cond, on_false, b, false))),
                    InstrKind::Phi { incoming } => Some(
                        incoming
                            .iter()
                            .map(|(op, lbl)| self.operand(op, self.f.block_index(lbl).unwrap_or(b)))
                            .reduce(|a, c| a.hull(&c))
                            .unwrap_or(Interval::TOP),
                    ),
                    InstrKind::Load { .. } => Some(match self.cell_of(inst.id, true) {
                        Some(CellKey::Global(g)) => self
                            .state
                            .value_ranges
                            .get(&Tag::Global(g.clone()).to_string())
                            .copied()
                            .unwrap_or(Interval::TOP),
                        Some(c) => self.cells.get(c).copied().unwrap_or(Interval::TOP),
                        None => Interval::TOP,
                    }),
                    InstrKind::Store { value, .. } => {
                        let r = self.operand(value, b);
                        match self.cell_of(inst.id, false).cloned() {
                            Some(CellKey::Global(g)) => {
                                let e = self.global_stores.entry(g).or_insert(Interval::new(Some(1), Some(0)));
                                *e = e.hull(&r);
                            }
                            Some(c) => {
                                let e = self.cells.entry(c).or_insert(Interval::new(Some(1), Some(0)));
                                *e = e.hull(&r);
                            }
                            None => {}
                        }
                        None
                    }
                    InstrKind::Call { callee, args } => {
                        // memory reachable from pointer arguments is clobbered
                        for a in args {
                            if let Some(c) = self.pointer_cell(a) {
                                self.cells.insert(c, Interval::TOP);
                            }
                        }
                        inst.result.as_ref().map(|_| match callee {
                            Callee::Direct(g) => {
                                self.state.value_ranges.get(&format!("ret:{g}")).copied().unwrap_or(Interval::TOP)
                            }
                            Callee::Indirect(_) => Interval::TOP,
                        })
                    }
                    _ => None,
                };
                if let (Some(r), Some(v)) = (r, &inst.result) {
                    self.values.insert(v.clone(), r);
                }
            }
        }
    }

    fn pointer_cell(&self, a: &Operand) -> Option<CellKey> {
        let v = a.local_id()?;
        let mut cur = v.clone();
        loop {
            match self.f.definition(&cur).map(|d| &d.kind) {
                Some(InstrKind::Cast {
                    op: CastOp::Bitcast,
                    value,
                }) => cur = value.local_id()?.clone(),
                Some(InstrKind::Alloca { .. }) => return Some(CellKey::Local(self.f.id.clone(), cur)),
                _ => return Some(CellKey::Local(self.f.id.clone(), v.clone())),
            }
        }
    }

    /// Infeasible when the guards reaching `block` leave some value empty.
    fn feasible(&self, block: usize) -> bool {
        self.guards.iter().filter(|g| g.blocks.contains(&block)).all(|g| {
            let base = self.values.get(&g.value).copied().unwrap_or(Interval::TOP);
            !self.refine(&g.value, block, base).is_empty()
        })
    }

    /// Object an address points into and the byte offset range within it.
    fn decompose(&self, addr: &Operand, block: usize) -> (String, ObjectBounds, Interval) {
        let defs = &self.module.type_defs;
        let mut offset = Interval::exact(0);
        let mut cur = addr.clone();
        loop {
            match &cur.value {
                OperandValue::Global(g) => {
                    let size = self.module.global(g).and_then(|gv| IrType::parse(&gv.ty).size_of(defs));
                    return (g.to_string(), ObjectBounds::of_size(size), offset);
                }
                OperandValue::Argument(p) => {
                    let key = format!("{}/{}", self.f.id, p);
                    let b = self.state.object_bounds.get(&key).cloned().unwrap_or(ObjectBounds::of_size(None));
                    return (key, b, offset);
                }
                OperandValue::Const(_) => return ("null".into(), ObjectBounds::of_size(None), offset),
                OperandValue::Local(v) => {
                    let key = format!("{}/{}", self.f.id, v);
                    match self.f.definition(v).map(|d| &d.kind) {
                        Some(InstrKind::Cast {
                            op: CastOp::Bitcast,
                            value,
                        }) => cur = value.clone(),
                        Some(InstrKind::GetElementPtr {
                            source_type,
                            base,
                            indices,
                            ..
                        }) => {
                            offset = offset.add(&self.gep_offset(source_type, indices, block));
                            cur = base.clone();
                        }
                        Some(InstrKind::Alloca { allocated, count }) => {
                            let n = count.as_ref().map_or(Some(1), |c| c.const_int());
                            let size = IrType::parse(allocated)
                                .size_of(defs)
                                .zip(n.and_then(|n| u64::try_from(n).ok()))
                                .map(|(s, n)| s * n);
                            return (key, ObjectBounds::of_size(size), offset);
                        }
                        _ => return (key, ObjectBounds::of_size(None), offset),
                    }
                }
            }
        }
    }

    fn gep_offset(&self, source_type: &str, indices: &[Operand], block: usize) -> Interval {
        let defs = &self.module.type_defs;
        let mut ty = IrType::parse(source_type);
        let Some(first) = indices.first() else {
            return Interval::exact(0);
        };
        let Some(size) = ty.size_of(defs) else {
            return Interval::TOP;
        };
        let mut off = self.operand(first, block).scale(size);
        for idx in &indices[1..] {
            match ty.resolve(defs) {
                IrType::Array(_, elem) => {
                    let Some(es) = elem.size_of(defs) else {
                        return Interval::TOP;
                    };
                    off = off.add(&self.operand(idx, block).scale(es));
                    ty = *elem;
                }
                IrType::Struct(fields) => {
                    let Some(k) = idx.const_int().and_then(|k| usize::try_from(k).ok()).filter(|k| *k < fields.len())
                    else {
                        return Interval::TOP;
                    };
                    let before: Option<u64> = fields[..k].iter().map(|t| t.size_of(defs)).sum();
                    let Some(before) = before else {
                        return Interval::TOP;
                    };
                    off = off.add(&Interval::exact(before as i64));
                    ty = fields[k].clone();
                }
                _ => return Interval::TOP,
            }
        }
        off
    }
}

impl Reasoner for ReferenceReasoner<'_> {
    fn step(
        &self,
        state: &ReasoningState,
        view: &FunctionView,
        anchors: &AnchorCues,
    ) -> Result<ReasoningState, ReasonerFailure> {
        let fid = &view.function;
        let f = self
            .module
            .function(fid)
            .filter(|f| !f.is_declaration)
            .ok_or_else(|| ReasonerFailure(format!("no body for '{fid}'")))?;
        let ff = self
            .facts
            .function(fid)
            .ok_or_else(|| ReasonerFailure(format!("no facts for '{fid}'")))?;
        let mut next = state.clone();
        next.step += 1;

        // Seeds: source tokens on the first step, every tracked tag, values
        // of this function tracked on an earlier visit, and whatever crosses
        // a graph edge from a tracked function.
        let mut chains: BTreeMap<Token, Vec<String>> = BTreeMap::new();
        if state.step == 0 {
            if let Some(src) = &anchors.source_endpoint {
                let root = format!("{}@{}#{}", src.rule_name, fid, src.instr.0);
                for t in &src.tokens {
                    chains.insert(t.clone(), vec![root.clone(), qualify(fid, t)]);
                }
            }
        }
        let tracked = tracked_set(state);
        for (q, chain) in &state.tracked_values {
            if let Ok(tag) = q.parse::<Tag>() {
                chains.insert(Token::Tag(tag), chain.clone());
            } else if let Some(v) = q.strip_prefix(&format!("{fid}/")) {
                chains.insert(Token::Value(ValueId::new(v)), chain.clone());
            }
        }
        for e in self.graph.edges.iter().filter(|e| &e.to == fid) {
            let moved = transfer_across_edge(&tracked, e);
            for (_, v) in moved.values.iter().filter(|(g, _)| g == fid) {
                let parent = match &e.meta {
                    EdgeMeta::Call(m) => m
                        .param_pairs
                        .iter()
                        .find(|p| &p.formal == v && tracked.contains_value(&e.from, &p.actual))
                        .map(|p| format!("{}/{}", e.from, p.actual)),
                    EdgeMeta::Return(m) => m
                        .callee_values
                        .iter()
                        .find(|c| tracked.contains_value(&e.from, c))
                        .map(|c| format!("{}/{}", e.from, c)),
                    EdgeMeta::Global(l) => Some(Tag::Global(l.global.clone()).to_string()),
                };
                let Some(pc) = parent.and_then(|p| state.tracked_values.get(&p)) else {
                    continue;
                };
                let mut chain = pc.clone();
                chain.push(qualify(fid, &Token::Value(v.clone())));
                let t = Token::Value(v.clone());
                if chains.get(&t).is_none_or(|c| chain.len() < c.len()) {
                    chains.insert(t, chain);
                }
            }
        }
        let entry = TaintSet::from_tokens(fid, chains.keys());
        let unbounded = WitnessBounds {
            max_local_expansion_steps: usize::MAX,
            ..WitnessBounds::default()
        };
        let exp = expand_traced(ff, fid, &entry, &unbounded).map_err(|e| ReasonerFailure(e.to_string()))?;
        loop {
            let mut changed = false;
            for (tok, parents) in &exp.parents {
                let best = parents.iter().filter_map(|p| chains.get(p)).min_by_key(|c| c.len());
                if let Some(p) = best {
                    let mut cand = p.clone();
                    cand.push(qualify(fid, tok));
                    if chains.get(tok).is_none_or(|c| cand.len() < c.len()) {
                        chains.insert(tok.clone(), cand);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let before = next.tracked_values.len();
        for (t, chain) in &chains {
            next.tracked_values.entry(qualify(fid, t)).or_insert_with(|| chain.clone());
        }
        let is_tracked = |v: &ValueId| next.tracked_values.contains_key(&format!("{fid}/{v}"));

        // Intervals.
        let (guards, opaque) = guards(f);
        let mut rg = Ranges {
            module: self.module,
            f,
            ff,
            guards: &guards,
            state: &next,
            values: BTreeMap::new(),
            cells: BTreeMap::new(),
            global_stores: BTreeMap::new(),
        };
        rg.run();

        let mut ranges: Vec<(String, Interval)> = Vec::new();
        let mut bounds: Vec<(String, ObjectBounds)> = Vec::new();
        for (v, r) in &rg.values {
            if is_tracked(v) {
                ranges.push((format!("{fid}/{v}"), *r));
            }
        }
        for (g, r) in &rg.global_stores {
            let stored_tracked = ff.cell_stores.iter().any(|s| {
                s.cell == CellKey::Global(g.clone()) && s.value.as_ref().is_some_and(is_tracked)
            });
            if stored_tracked && !r.is_empty() {
                let key = Tag::Global(g.clone()).to_string();
                let merged = next.value_ranges.get(&key).map_or(*r, |old| old.hull(r));
                ranges.push((key, merged));
            }
        }
        for (b, block) in f.blocks.iter().enumerate() {
            for inst in &block.instructions {
                match &inst.kind {
                    InstrKind::Call {
                        callee: Callee::Direct(g),
                        args,
                    } => {
                        let Some(target) = self.module.function(g).filter(|t| !t.is_declaration) else {
                            continue;
                        };
                        for (a, p) in args.iter().zip(&target.params) {
                            let Some(formal) = &p.id else { continue };
                            let key = format!("{g}/{formal}");
                            if a.local_id().is_some_and(is_tracked) {
                                ranges.push((key.clone(), rg.operand(a, b)));
                            }
                            if IrType::parse(&a.ty).is_pointer() {
                                let (_, ob, off) = rg.decompose(a, b);
                                if let (Some(valid), Some(k)) = (ob.valid, off.lo.filter(|l| Some(*l) == off.hi)) {
                                    let hi = valid.hi.map(|h| h - k);
                                    bounds.push((key, ObjectBounds { valid: Some(Interval::new(Some(0), hi)), unit: ob.unit }));
                                }
                            }
                        }
                    }
                    InstrKind::Ret { value: Some(v) } if v.local_id().is_some_and(is_tracked) => {
                        let key = format!("ret:{fid}");
                        let r = rg.operand(v, b);
                        let merged = ranges
                            .iter()
                            .rev()
                            .find(|(k, _)| *k == key)
                            .map_or(r, |(_, old)| old.hull(&r));
                        ranges.push((key, merged));
                    }
                    _ => {}
                }
            }
        }

        // Tainted accesses at sink sites.
        let mut accesses = Vec::new();
        for hit in self.facts.sink_hits.iter().filter(|h| &h.function == fid) {
            let Some(operand) = hit.tainted_tokens.iter().find(|t| next.tracked_values.contains_key(&qualify(fid, t)))
            else {
                continue;
            };
            let (Some(inst), Some(b)) = (f.instruction(hit.instr), f.block_of(hit.instr)) else {
                continue;
            };
            let Some(family) = hit.family else { continue };
            let (object, ob, extent) = match &inst.kind {
                InstrKind::Load { addr } => {
                    let (k, ob, off) = rg.decompose(addr, b);
                    let width = IrType::parse(&inst.result_type).size_of(&self.module.type_defs).unwrap_or(1);
                    (k, ob, Interval::new(off.lo, off.hi.and_then(|h| h.checked_add(width as i64 - 1))))
                }
                InstrKind::Store { value, addr } => {
                    let (k, ob, off) = rg.decompose(addr, b);
                    let width = IrType::parse(&value.ty).size_of(&self.module.type_defs).unwrap_or(1);
                    (k, ob, Interval::new(off.lo, off.hi.and_then(|h| h.checked_add(width as i64 - 1))))
                }
                InstrKind::Call { args, .. } => {
                    let Some(dst) = args.first() else { continue };
                    let (k, ob, off) = rg.decompose(dst, b);
                    let demanded = args.iter().find(|a| a.local_id().map(|v| Token::Value(v.clone())).as_ref() == Some(operand));
                    // a count bounds the copy; a source string does not
                    let len = match demanded {
                        Some(a) if !IrType::parse(&a.ty).is_pointer() => rg.operand(a, b).hi,
                        _ => None,
                    };
                    let hi = off.hi.zip(len).and_then(|(h, n)| h.checked_add(n - 1));
                    (k, ob, Interval::new(off.lo, hi))
                }
                _ => continue,
            };
            bounds.push((object.clone(), ob.clone()));
            accesses.push(AccessRecord {
                step: next.step,
                function: fid.clone(),
                instr: hit.instr,
                rule_name: hit.rule_name.clone(),
                kind: family.into(),
                object,
                operand: qualify(fid, operand),
                extent,
                bounds: ob,
                feasible: rg.feasible(b),
            });
        }
        let mut constraints: Vec<String> = guards
            .iter()
            .filter(|g| is_tracked(&g.value))
            .map(|g| g.text.clone())
            .collect();
        let mut notes = vec![format!(
            "step {}: {} ({}) +{} tracked",
            next.step,
            fid,
            if anchors.source_endpoint.is_some() { "source" } else { "frame" },
            next.tracked_values.len() - before
        )];
        for v in opaque.iter().filter(|v| is_tracked(v)) {
            notes.push(format!("unknown constraint: {fid}/{v}"));
        }
        for a in accesses.iter().filter(|a| !a.feasible) {
            constraints.push(format!("{}#{} unreachable: guards contradict", a.function, a.instr.0));
        }

        for (k, r) in ranges {
            next.value_ranges.insert(k, r);
        }
        for (k, b) in bounds {
            next.object_bounds.entry(k).or_insert(b);
        }
        next.constraints.extend(constraints);
        next.accesses.extend(accesses);
        for t in &anchors.propagation_tokens {
            let q = qualify(fid, t);
            if !next.tracked_values.contains_key(&q) {
                notes.push(dismissal(&q));
            }
        }
        next.notes.extend(notes);
        Ok(next)
    }
}
