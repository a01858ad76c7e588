//! Canonical textual rendering of the model.
//!
//! The detector uses [`print_function`] as the stand-in decompiled view when
//! no sidecar text exists for a function.

use std::fmt::Write;

use super::{Branch, Callee, InstrKind, Instruction, IrFunction, IrModule, Operand};

fn typed(op: &Operand) -> String {
    format!("{} {}", op.ty, op.text())
}

fn render_instruction(inst: &Instruction) -> String {
    let lhs = inst
        .result
        .as_ref()
        .map(|r| format!("{r} = "))
        .unwrap_or_default();
    let body = match &inst.kind {
        InstrKind::Alloca { allocated, count } => match count {
            Some(c) => format!("alloca {allocated}, {}", typed(c)),
            None => format!("alloca {allocated}"),
        },
        InstrKind::Load { addr } => format!("load {}, {}", inst.result_type, typed(addr)),
        InstrKind::Store { value, addr } => format!("store {}, {}", typed(value), typed(addr)),
        InstrKind::GetElementPtr {
            source_type,
            inbounds,
            base,
            indices,
        } => {
            let mut s = format!(
                "getelementptr {}{source_type}, {}",
                if *inbounds { "inbounds " } else { "" },
                typed(base)
            );
            for ix in indices {
                s.push_str(", ");
                s.push_str(&typed(ix));
            }
            s
        }
        InstrKind::Cast { op, value } => {
            format!("{} {} to {}", op.as_str(), typed(value), inst.result_type)
        }
        InstrKind::Binary { op, lhs: a, rhs: b } => {
            format!("{} {} {}, {}", op.as_str(), a.ty, a.text(), b.text())
        }
        InstrKind::Icmp { pred, lhs: a, rhs: b } => {
            format!("icmp {} {} {}, {}", pred.as_str(), a.ty, a.text(), b.text())
        }
        InstrKind::Select {
            cond,
            on_true,
            on_false,
        } => format!(
            "select {}, {}, {}",
            typed(cond),
            typed(on_true),
            typed(on_false)
        ),
        InstrKind::Phi { incoming } => {
            let arms: Vec<String> = incoming
                .iter()
                .map(|(v, l)| format!("[ {}, %{l} ]", v.text()))
                .collect();
            format!("phi {} {}", inst.result_type, arms.join(", "))
        }
        InstrKind::Call { callee, args } => {
            let target = match callee {
                Callee::Direct(f) => format!("@{f}"),
                Callee::Indirect(op) => op.text(),
            };
            let args: Vec<String> = args.iter().map(typed).collect();
            format!("call {} {target}({})", inst.result_type, args.join(", "))
        }
        InstrKind::Br(Branch::Unconditional(l)) => format!("br label %{l}"),
        InstrKind::Br(Branch::Conditional {
            cond,
            then_label,
            else_label,
        }) => format!(
            "br {}, label %{then_label}, label %{else_label}",
            typed(cond)
        ),
        InstrKind::Ret { value: None } => "ret void".to_string(),
        InstrKind::Ret { value: Some(v) } => format!("ret {}", typed(v)),
        InstrKind::Opaque { text, .. } => return text.clone(),
    };
    format!("{lhs}{body}")
}

fn render_header(f: &IrFunction, keyword: &str) -> String {
    let mut params: Vec<String> = f
        .params
        .iter()
        .map(|p| match &p.id {
            Some(id) if keyword == "define" => format!("{} {id}", p.ty),
            _ => p.ty.clone(),
        })
        .collect();
    if f.is_vararg {
        params.push("...".to_string());
    }
    format!("{keyword} {} @{}({})", f.return_type, f.id, params.join(", "))
}

/// Renders one function in canonical form.
pub fn print_function(f: &IrFunction) -> String {
    if f.is_declaration {
        return render_header(f, "declare");
    }
    let mut out = render_header(f, "define");
    out.push_str(" {\n");
    for b in &f.blocks {
        let _ = writeln!(out, "{}:", b.label);
        for inst in &b.instructions {
            let _ = writeln!(out, "  {}", render_instruction(inst));
        }
    }
    out.push('}');
    out
}

pub fn print_module(m: &IrModule) -> String {
    let mut out = String::new();
    for (name, body) in &m.type_defs {
        let _ = writeln!(out, "{name} = type {body}");
    }
    for g in &m.globals {
        let kw = if g.is_constant { "constant" } else { "global" };
        match &g.initializer {
            Some(init) => {
                let _ = writeln!(out, "{} = {kw} {} {init}", g.id, g.ty);
            }
            None => {
                let _ = writeln!(out, "{} = external {kw} {}", g.id, g.ty);
            }
        }
    }
    for f in &m.functions {
        out.push('\n');
        out.push_str(&print_function(f));
        out.push('\n');
    }
    out
}
