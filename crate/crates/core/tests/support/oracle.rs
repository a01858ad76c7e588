//! Brute-force reference for witness acceptance.
//!
//! Works on the parsed module directly: it re-derives sources, sinks, cell
//! identities and interprocedural links from the instructions, closes taint
//! locally without any step budget, and enumerates every path of at most
//! `max_edges` link instances by depth-first search. Shares no code with the
//! fact base, graph or witness search.

use std::collections::{BTreeMap, BTreeSet};

use defuse_core::facts::{SinkFamily, SourceSinkModel};
use defuse_core::ir::{
    Callee, CastOp, InstrKind, Instruction, IrFunction, IrModule, Operand, OperandValue,
};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum T {
    Val(String, String),
    Glob(String),
    Cell(String, String),
}

type Set = BTreeSet<T>;

/// (function, instruction index, rule name)
pub type Site = (String, u32, String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Link {
    Call { caller: String, at: u32 },
    Ret { caller: String, at: u32 },
    Glob { g: String, writer: String, reader: String },
}

struct Sink {
    site: Site,
    demanded: Vec<String>,
}

fn lookup<'a>(f: &'a IrFunction, v: &str) -> Option<&'a Instruction> {
    f.instructions()
        .find(|i| i.result.as_ref().map(|r| r.as_str()) == Some(v))
}

fn local(op: &Operand) -> Option<String> {
    match &op.value {
        OperandValue::Local(v) | OperandValue::Argument(v) => Some(v.0.clone()),
        _ => None,
    }
}

fn through_bitcasts<'a>(f: &'a IrFunction, mut op: &'a Operand) -> &'a Operand {
    loop {
        let Some(v) = local(op) else { return op };
        match lookup(f, &v).map(|i| &i.kind) {
            Some(InstrKind::Cast {
                op: CastOp::Bitcast,
                value,
            }) => op = value,
            _ => return op,
        }
    }
}

/// Tag naming the memory `addr` points at.
fn cell_of(f: &IrFunction, addr: &Operand) -> Option<T> {
    let root = through_bitcasts(f, addr);
    match &root.value {
        OperandValue::Global(g) => Some(T::Glob(g.0.clone())),
        OperandValue::Const(_) => None,
        _ => {
            let r = local(root)?;
            if matches!(lookup(f, &r).map(|i| &i.kind), Some(InstrKind::Alloca { .. })) {
                Some(T::Cell(f.id.0.clone(), r))
            } else {
                Some(T::Cell(f.id.0.clone(), local(addr)?))
            }
        }
    }
}

fn is_ptr(ty: &str) -> bool {
    ty == "ptr" || ty.ends_with('*')
}

fn has(set: &Set, f: &str, op: &Operand) -> bool {
    local(op).is_some_and(|v| set.contains(&T::Val(f.to_string(), v)))
}

/// Unbudgeted local closure of `set` inside `f`.
fn close(f: &IrFunction, set: &mut Set) {
    let fname = f.id.0.clone();
    let val = |v: &str| T::Val(fname.clone(), v.to_string());
    // pointer parameters and the values obtained from them by bitcasts
    let mut aliases: Vec<(String, String)> = Vec::new();
    for p in f.params.iter().filter(|p| is_ptr(&p.ty)) {
        let Some(id) = &p.id else { continue };
        let mut group = vec![id.0.clone()];
        let mut grew = true;
        while grew {
            grew = false;
            for i in f.instructions() {
                if let (InstrKind::Cast { op: CastOp::Bitcast, value }, Some(r)) = (&i.kind, &i.result) {
                    if local(value).is_some_and(|v| group.contains(&v)) && !group.contains(&r.0) {
                        group.push(r.0.clone());
                        grew = true;
                    }
                }
            }
        }
        for d in &group[1..] {
            aliases.push((id.0.clone(), d.clone()));
        }
    }
    loop {
        let before = set.len();
        for i in f.instructions() {
            let res = i.result.as_ref().map(|r| r.0.clone());
            match &i.kind {
                InstrKind::Binary { lhs, rhs, .. } => {
                    if has(set, &fname, lhs) || has(set, &fname, rhs) {
                        set.insert(val(res.as_deref().unwrap()));
                    }
                }
                InstrKind::Cast { value, .. } => {
                    if has(set, &fname, value) {
                        set.insert(val(res.as_deref().unwrap()));
                    }
                }
                InstrKind::Select { on_true, on_false, .. } => {
                    if has(set, &fname, on_true) || has(set, &fname, on_false) {
                        set.insert(val(res.as_deref().unwrap()));
                    }
                }
                InstrKind::Phi { incoming } => {
                    if incoming.iter().any(|(v, _)| has(set, &fname, v)) {
                        set.insert(val(res.as_deref().unwrap()));
                    }
                }
                InstrKind::GetElementPtr { base, indices, .. } => {
                    if has(set, &fname, base) || indices.iter().any(|x| has(set, &fname, x)) {
                        set.insert(val(res.as_deref().unwrap()));
                    }
                }
                InstrKind::Store { value, addr } => {
                    if has(set, &fname, value) {
                        if let Some(c) = cell_of(f, addr) {
                            set.insert(c);
                        }
                    }
                }
                InstrKind::Load { addr } => {
                    if cell_of(f, addr).is_some_and(|c| set.contains(&c)) {
                        set.insert(val(res.as_deref().unwrap()));
                    }
                }
                _ => {}
            }
        }
        for (a, d) in &aliases {
            for (x, y) in [(a, d), (d, a)] {
                if set.contains(&val(x)) {
                    set.insert(val(y));
                }
                if set.contains(&T::Cell(fname.clone(), x.clone())) {
                    set.insert(T::Cell(fname.clone(), y.clone()));
                }
            }
        }
        if set.len() == before {
            return;
        }
    }
}

fn sources(m: &IrModule, model: &SourceSinkModel) -> Vec<(Site, Set)> {
    let mut out = Vec::new();
    for f in m.defined_functions() {
        for i in f.instructions() {
            let InstrKind::Call { callee: Callee::Direct(name), args } = &i.kind else { continue };
            for rule in &model.sources {
                if !rule.callees.iter().any(|c| c == name.as_str()) {
                    continue;
                }
                let mut set = Set::new();
                if rule.taint_result {
                    if let Some(r) = &i.result {
                        set.insert(T::Val(f.id.0.clone(), r.0.clone()));
                    }
                }
                for &ix in &rule.taint_args {
                    if let Some(c) = args.get(ix).and_then(|a| cell_of(f, a)) {
                        set.insert(c);
                    }
                }
                if !set.is_empty() {
                    out.push(((f.id.0.clone(), i.id.0, rule.name.clone()), set));
                }
            }
        }
    }
    out
}

fn gep_offsets(f: &IrFunction, addr: &Operand) -> Option<Vec<String>> {
    let mut op = through_bitcasts(f, addr);
    let mut out: Vec<String> = Vec::new();
    let mut any = false;
    while let Some(v) = local(op) {
        let Some(InstrKind::GetElementPtr { base, indices, .. }) = lookup(f, &v).map(|i| &i.kind) else {
            break;
        };
        any = true;
        for x in indices {
            if let Some(l) = local(x) {
                if !out.contains(&l) {
                    out.push(l);
                }
            }
        }
        op = through_bitcasts(f, base);
    }
    any.then_some(out)
}

fn sinks(m: &IrModule, model: &SourceSinkModel) -> Vec<Sink> {
    let mut out = Vec::new();
    for f in m.defined_functions() {
        for i in f.instructions() {
            let here = |rule: &str| (f.id.0.clone(), i.id.0, rule.to_string());
            match &i.kind {
                InstrKind::Call { callee: Callee::Direct(name), args } => {
                    for rule in &model.sinks {
                        if rule.family != SinkFamily::DangerousApi
                            || !rule.callees.iter().any(|c| c == name.as_str())
                        {
                            continue;
                        }
                        let demanded: Vec<String> =
                            rule.args.iter().filter_map(|&ix| args.get(ix).and_then(local)).collect();
                        if !demanded.is_empty() {
                            out.push(Sink { site: here(&rule.name), demanded });
                        }
                    }
                }
                InstrKind::Load { addr } | InstrKind::Store { addr, .. } => {
                    let family = if matches!(i.kind, InstrKind::Load { .. }) {
                        SinkFamily::GepLoad
                    } else {
                        SinkFamily::GepStore
                    };
                    let Some(demanded) = gep_offsets(f, addr) else { continue };
                    if demanded.is_empty() {
                        continue;
                    }
                    for rule in model.sinks.iter().filter(|r| r.family == family) {
                        out.push(Sink {
                            site: here(&rule.name),
                            demanded: demanded.clone(),
                        });
                    }
                }
                _ => {}
            }
        }
    }
    out
}

/// Outgoing link instances of every defined function.
fn links(m: &IrModule) -> BTreeMap<String, Vec<(Link, String)>> {
    let defined: BTreeSet<String> = m.defined_functions().map(|f| f.id.0.clone()).collect();
    let mut out: BTreeMap<String, Vec<(Link, String)>> = BTreeMap::new();
    let mut writers: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut readers: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for f in m.defined_functions() {
        let fname = f.id.0.clone();
        for i in f.instructions() {
            match &i.kind {
                InstrKind::Call { callee: Callee::Direct(name), .. } if defined.contains(name.as_str()) => {
                    out.entry(fname.clone()).or_default().push((
                        Link::Call { caller: fname.clone(), at: i.id.0 },
                        name.0.clone(),
                    ));
                    if i.result.is_some() {
                        out.entry(name.0.clone()).or_default().push((
                            Link::Ret { caller: fname.clone(), at: i.id.0 },
                            fname.clone(),
                        ));
                    }
                }
                InstrKind::Store { addr, .. } => {
                    if let Some(T::Glob(g)) = cell_of(f, addr) {
                        writers.entry(g).or_default().insert(fname.clone());
                    }
                }
                InstrKind::Load { addr } => {
                    if let Some(T::Glob(g)) = cell_of(f, addr) {
                        readers.entry(g).or_default().insert(fname.clone());
                    }
                }
                _ => {}
            }
        }
    }
    for (g, ws) in &writers {
        for w in ws {
            for r in readers.get(g).into_iter().flatten() {
                out.entry(w.clone()).or_default().push((
                    Link::Glob { g: g.clone(), writer: w.clone(), reader: r.clone() },
                    r.clone(),
                ));
            }
        }
    }
    out
}

fn carry(m: &IrModule, exit: &Set, link: &Link, from: &str, to: &str) -> Set {
    let mut next: Set = exit.iter().filter(|t| !matches!(t, T::Val(..))).cloned().collect();
    let callee_fn = |name: &str| m.defined_functions().find(|f| f.id.0 == name).unwrap();
    match link {
        Link::Call { caller, at } => {
            let f = callee_fn(caller);
            let InstrKind::Call { args, .. } = &f.instructions().find(|i| i.id.0 == *at).unwrap().kind else {
                unreachable!()
            };
            let target = callee_fn(to);
            for (ix, a) in args.iter().enumerate() {
                if has(exit, from, a) {
                    if let Some(Some(p)) = target.params.get(ix).map(|p| p.id.as_ref()) {
                        next.insert(T::Val(to.to_string(), p.0.clone()));
                    }
                }
            }
        }
        Link::Ret { caller, at } => {
            let callee = callee_fn(from);
            let tainted_ret = callee.instructions().any(|i| match &i.kind {
                InstrKind::Ret { value: Some(v) } => has(exit, from, v),
                _ => false,
            });
            if tainted_ret {
                let f = callee_fn(caller);
                let r = f.instructions().find(|i| i.id.0 == *at).unwrap().result.clone().unwrap();
                next.insert(T::Val(to.to_string(), r.0));
            }
        }
        Link::Glob { g, .. } => {
            if exit.contains(&T::Glob(g.clone())) {
                let reader = callee_fn(to);
                for i in reader.instructions() {
                    if let InstrKind::Load { addr } = &i.kind {
                        if cell_of(reader, addr) == Some(T::Glob(g.clone())) {
                            next.insert(T::Val(to.to_string(), i.result.clone().unwrap().0));
                        }
                    }
                }
            }
        }
    }
    next
}

struct Search<'a> {
    m: &'a IrModule,
    links: BTreeMap<String, Vec<(Link, String)>>,
    sinks: Vec<Sink>,
    max_edges: usize,
    reached: BTreeSet<Site>,
}

impl Search<'_> {
    fn walk(&mut self, at: &str, mut set: Set, used: &mut Vec<Link>) {
        let f = self.m.defined_functions().find(|f| f.id.0 == at).unwrap();
        close(f, &mut set);
        for s in &self.sinks {
            if s.site.0 == at && s.demanded.iter().any(|d| set.contains(&T::Val(at.to_string(), d.clone()))) {
                self.reached.insert(s.site.clone());
            }
        }
        if used.len() == self.max_edges {
            return;
        }
        let outgoing = self.links.get(at).cloned().unwrap_or_default();
        for (link, to) in outgoing {
            if used.contains(&link) {
                continue;
            }
            let next = carry(self.m, &set, &link, at, &to);
            if !next.iter().any(|t| matches!(t, T::Val(..))) {
                continue;
            }
            used.push(link);
            self.walk(&to, next, used);
            used.pop();
        }
    }
}

/// Every (source site, sink site) pair joined by some path of at most
/// `max_edges` links.
pub fn reachable_pairs(m: &IrModule, model: &SourceSinkModel, max_edges: usize) -> BTreeSet<(Site, Site)> {
    let mut out = BTreeSet::new();
    let mut search = Search {
        m,
        links: links(m),
        sinks: sinks(m, model),
        max_edges,
        reached: BTreeSet::new(),
    };
    for (site, seed) in sources(m, model) {
        search.reached.clear();
        search.walk(&site.0.clone(), seed, &mut Vec::new());
        for s in &search.reached {
            out.insert((site.clone(), s.clone()));
        }
    }
    out
}
