//! In-memory model of the supported LLVM IR subset.
//!
//! The model is deliberately small: seventeen opcodes, textual types, and
//! names preserved exactly as written. Everything downstream (facts, the
//! propagation graph, the witness engine, the detector) reads from an
//! [`IrModule`] and never mutates it.

mod lexer;
mod parser;
mod print;
mod sidecar;
pub mod types;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use parser::{parse_module, ParseError, ParseMode, ParseOptions};
pub use print::{print_function, print_module};
pub use sidecar::{attach_decompiled, PairingReport};

/// Name of a function as written in the module, without the `@` sigil.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionId(pub String);

impl FunctionId {
    pub fn new(name: impl Into<String>) -> Self {
        FunctionId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FunctionId {
    fn from(s: &str) -> Self {
        FunctionId(s.to_string())
    }
}

/// An SSA value token, sigil included (`%v7`, `@g_len`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueId(pub String);

impl ValueId {
    pub fn new(name: impl Into<String>) -> Self {
        ValueId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_global(&self) -> bool {
        self.0.starts_with('@')
    }
}

impl fmt::Display for ValueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ValueId {
    fn from(s: &str) -> Self {
        ValueId(s.to_string())
    }
}

/// Position of an instruction inside its function, counted across blocks in
/// block order starting at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstrId(pub u32);

impl fmt::Display for InstrId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrModule {
    pub name: String,
    pub type_defs: BTreeMap<String, String>,
    pub globals: Vec<GlobalVar>,
    pub functions: Vec<IrFunction>,
    pub sidecar_decompiled: BTreeMap<FunctionId, String>,
}

impl IrModule {
    pub fn function(&self, id: &FunctionId) -> Option<&IrFunction> {
        self.functions.iter().find(|f| &f.id == id)
    }

    pub fn global(&self, id: &ValueId) -> Option<&GlobalVar> {
        self.globals.iter().find(|g| &g.id == id)
    }

    pub fn defined_functions(&self) -> impl Iterator<Item = &IrFunction> {
        self.functions.iter().filter(|f| !f.is_declaration)
    }

    pub fn instruction_count(&self) -> usize {
        self.functions.iter().map(|f| f.instruction_count()).sum()
    }

    pub fn decompiled(&self, id: &FunctionId) -> Option<&str> {
        self.sidecar_decompiled.get(id).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalVar {
    pub id: ValueId,
    pub ty: String,
    pub is_constant: bool,
    pub initializer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Param {
    pub id: Option<ValueId>,
    pub ty: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrFunction {
    pub id: FunctionId,
    /// Position of the function in the module (declarations included).
    pub ordinal: u32,
    pub return_type: String,
    pub params: Vec<Param>,
    pub is_vararg: bool,
    pub blocks: Vec<BasicBlock>,
    pub is_declaration: bool,
    /// The function's text exactly as it appeared in the source module.
    pub source_text: String,
}

impl IrFunction {
    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.blocks.iter().flat_map(|b| b.instructions.iter())
    }

    pub fn instruction(&self, id: InstrId) -> Option<&Instruction> {
        self.instructions().find(|i| i.id == id)
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instructions.len()).sum()
    }

    /// Index of the block holding `id`.
    pub fn block_of(&self, id: InstrId) -> Option<usize> {
        self.blocks
            .iter()
            .position(|b| b.instructions.iter().any(|i| i.id == id))
    }

    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn param_index(&self, id: &ValueId) -> Option<usize> {
        self.params.iter().position(|p| p.id.as_ref() == Some(id))
    }

    /// Instruction that defines the local value `id`, if any.
    pub fn definition(&self, id: &ValueId) -> Option<&Instruction> {
        self.instructions().find(|i| i.result.as_ref() == Some(id))
    }

    /// Every locally defined value in definition order: parameters first,
    /// then instruction results in block order.
    pub fn definition_order(&self) -> Vec<ValueId> {
        let mut out: Vec<ValueId> = self.params.iter().filter_map(|p| p.id.clone()).collect();
        out.extend(self.instructions().filter_map(|i| i.result.clone()));
        out
    }

    /// Successor block indices of block `b`.
    pub fn successors(&self, b: usize) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(last) = self.blocks[b].instructions.last() {
            if let InstrKind::Br(br) = &last.kind {
                for label in br.targets() {
                    if let Some(ix) = self.block_index(label) {
                        if !out.contains(&ix) {
                            out.push(ix);
                        }
                    }
                }
            }
        }
        out
    }

    /// Non-constant values returned by `ret` instructions, in order, without
    /// duplicates.
    pub fn returned_values(&self) -> Vec<ValueId> {
        let mut out: Vec<ValueId> = Vec::new();
        for inst in self.instructions() {
            if let InstrKind::Ret { value: Some(op) } = &inst.kind {
                if let Some(v) = op.value_id() {
                    if !out.contains(v) {
                        out.push(v.clone());
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    pub label: String,
    pub instructions: Vec<Instruction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub id: InstrId,
    pub result: Option<ValueId>,
    pub result_type: String,
    pub kind: InstrKind,
    /// 1-based source line.
    pub line: usize,
}

impl Instruction {
    pub fn opcode(&self) -> &str {
        self.kind.opcode()
    }

    /// Operands read by this instruction, in written order.
    pub fn operands(&self) -> Vec<&Operand> {
        self.kind.operands()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CastOp {
    Bitcast,
    Zext,
    Sext,
    Trunc,
}

impl CastOp {
    pub fn as_str(self) -> &'static str {
        match self {
            CastOp::Bitcast => "bitcast",
            CastOp::Zext => "zext",
            CastOp::Sext => "sext",
            CastOp::Trunc => "trunc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

impl BinOp {
    pub fn as_str(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IcmpPred {
    Eq,
    Ne,
    Ugt,
    Uge,
    Ult,
    Ule,
    Sgt,
    Sge,
    Slt,
    Sle,
}

impl IcmpPred {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "eq" => IcmpPred::Eq,
            "ne" => IcmpPred::Ne,
            "ugt" => IcmpPred::Ugt,
            "uge" => IcmpPred::Uge,
            "ult" => IcmpPred::Ult,
            "ule" => IcmpPred::Ule,
            "sgt" => IcmpPred::Sgt,
            "sge" => IcmpPred::Sge,
            "slt" => IcmpPred::Slt,
            "sle" => IcmpPred::Sle,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IcmpPred::Eq => "eq",
            IcmpPred::Ne => "ne",
            IcmpPred::Ugt => "ugt",
            IcmpPred::Uge => "uge",
            IcmpPred::Ult => "ult",
            IcmpPred::Ule => "ule",
            IcmpPred::Sgt => "sgt",
            IcmpPred::Sge => "sge",
            IcmpPred::Slt => "slt",
            IcmpPred::Sle => "sle",
        }
    }

    /// Predicate holding when this one fails.
    pub fn negate(self) -> Self {
        match self {
            IcmpPred::Eq => IcmpPred::Ne,
            IcmpPred::Ne => IcmpPred::Eq,
            IcmpPred::Ugt => IcmpPred::Ule,
            IcmpPred::Uge => IcmpPred::Ult,
            IcmpPred::Ult => IcmpPred::Uge,
            IcmpPred::Ule => IcmpPred::Ugt,
            IcmpPred::Sgt => IcmpPred::Sle,
            IcmpPred::Sge => IcmpPred::Slt,
            IcmpPred::Slt => IcmpPred::Sge,
            IcmpPred::Sle => IcmpPred::Sgt,
        }
    }

    /// Predicate with operands exchanged (`a < b` becomes `b > a`).
    pub fn swap(self) -> Self {
        match self {
            IcmpPred::Eq => IcmpPred::Eq,
            IcmpPred::Ne => IcmpPred::Ne,
            IcmpPred::Ugt => IcmpPred::Ult,
            IcmpPred::Uge => IcmpPred::Ule,
            IcmpPred::Ult => IcmpPred::Ugt,
            IcmpPred::Ule => IcmpPred::Uge,
            IcmpPred::Sgt => IcmpPred::Slt,
            IcmpPred::Sge => IcmpPred::Sle,
            IcmpPred::Slt => IcmpPred::Sgt,
            IcmpPred::Sle => IcmpPred::Sge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Callee {
    Direct(FunctionId),
    Indirect(Operand),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Branch {
    Unconditional(String),
    Conditional {
        cond: Operand,
        then_label: String,
        else_label: String,
    },
}

impl Branch {
    pub fn targets(&self) -> Vec<&str> {
        match self {
            Branch::Unconditional(l) => vec![l.as_str()],
            Branch::Conditional {
                then_label,
                else_label,
                ..
            } => vec![then_label.as_str(), else_label.as_str()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstrKind {
    Alloca {
        allocated: String,
        count: Option<Operand>,
    },
    Load {
        addr: Operand,
    },
    Store {
        value: Operand,
        addr: Operand,
    },
    GetElementPtr {
        source_type: String,
        inbounds: bool,
        base: Operand,
        indices: Vec<Operand>,
    },
    Cast {
        op: CastOp,
        value: Operand,
    },
    Binary {
        op: BinOp,
        lhs: Operand,
        rhs: Operand,
    },
    Icmp {
        pred: IcmpPred,
        lhs: Operand,
        rhs: Operand,
    },
    Select {
        cond: Operand,
        on_true: Operand,
        on_false: Operand,
    },
    Phi {
        incoming: Vec<(Operand, String)>,
    },
    Call {
        callee: Callee,
        args: Vec<Operand>,
    },
    Br(Branch),
    Ret {
        value: Option<Operand>,
    },
    /// Anything outside the supported subset, kept verbatim in tolerant mode.
    /// Defines and uses no tracked values.
    Opaque {
        opcode: String,
        text: String,
    },
}

impl InstrKind {
    pub fn opcode(&self) -> &str {
        match self {
            InstrKind::Alloca { .. } => "alloca",
            InstrKind::Load { .. } => "load",
            InstrKind::Store { .. } => "store",
            InstrKind::GetElementPtr { .. } => "getelementptr",
            InstrKind::Cast { op, .. } => op.as_str(),
            InstrKind::Binary { op, .. } => op.as_str(),
            InstrKind::Icmp { .. } => "icmp",
            InstrKind::Select { .. } => "select",
            InstrKind::Phi { .. } => "phi",
            InstrKind::Call { .. } => "call",
            InstrKind::Br(_) => "br",
            InstrKind::Ret { .. } => "ret",
            InstrKind::Opaque { opcode, .. } => opcode,
        }
    }

    pub fn operands(&self) -> Vec<&Operand> {
        match self {
            InstrKind::Alloca { count, .. } => count.iter().collect(),
            InstrKind::Load { addr } => vec![addr],
            InstrKind::Store { value, addr } => vec![value, addr],
            InstrKind::GetElementPtr { base, indices, .. } => {
                std::iter::once(base).chain(indices.iter()).collect()
            }
            InstrKind::Cast { value, .. } => vec![value],
            InstrKind::Binary { lhs, rhs, .. } | InstrKind::Icmp { lhs, rhs, .. } => {
                vec![lhs, rhs]
            }
            InstrKind::Select {
                cond,
                on_true,
                on_false,
            } => vec![cond, on_true, on_false],
            InstrKind::Phi { incoming } => incoming.iter().map(|(v, _)| v).collect(),
            InstrKind::Call { callee, args } => {
                let mut out: Vec<&Operand> = Vec::new();
                if let Callee::Indirect(op) = callee {
                    out.push(op);
                }
                out.extend(args.iter());
                out
            }
            InstrKind::Br(Branch::Conditional { cond, .. }) => vec![cond],
            InstrKind::Br(Branch::Unconditional(_)) => Vec::new(),
            InstrKind::Ret { value } => value.iter().collect(),
            InstrKind::Opaque { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Local,
    Global,
    Argument,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Constant {
    Int(i64),
    Bool(bool),
    Null,
    Undef,
    Poison,
    ZeroInitializer,
}

impl fmt::Display for Constant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constant::Int(v) => write!(f, "{v}"),
            Constant::Bool(b) => write!(f, "{b}"),
            Constant::Null => f.write_str("null"),
            Constant::Undef => f.write_str("undef"),
            Constant::Poison => f.write_str("poison"),
            Constant::ZeroInitializer => f.write_str("zeroinitializer"),
        }
    }
}

/// A typed operand reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operand {
    pub ty: String,
    pub value: OperandValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OperandValue {
    Local(ValueId),
    Argument(ValueId),
    Global(ValueId),
    Const(Constant),
}

impl Operand {
    pub fn kind(&self) -> ValueKind {
        match self.value {
            OperandValue::Local(_) => ValueKind::Local,
            OperandValue::Argument(_) => ValueKind::Argument,
            OperandValue::Global(_) => ValueKind::Global,
            OperandValue::Const(_) => ValueKind::Constant,
        }
    }

    pub fn value_id(&self) -> Option<&ValueId> {
        match &self.value {
            OperandValue::Local(v) | OperandValue::Argument(v) | OperandValue::Global(v) => {
                Some(v)
            }
            OperandValue::Const(_) => None,
        }
    }

    /// Function-local SSA value (local or argument), if any.
    pub fn local_id(&self) -> Option<&ValueId> {
        match &self.value {
            OperandValue::Local(v) | OperandValue::Argument(v) => Some(v),
            _ => None,
        }
    }

    pub fn const_int(&self) -> Option<i64> {
        match &self.value {
            OperandValue::Const(Constant::Int(v)) => Some(*v),
            OperandValue::Const(Constant::Bool(b)) => Some(*b as i64),
            OperandValue::Const(Constant::Null) | OperandValue::Const(Constant::ZeroInitializer) => {
                Some(0)
            }
            _ => None,
        }
    }

    pub fn is_const(&self) -> bool {
        matches!(self.value, OperandValue::Const(_))
    }

    /// The operand as written, without its type.
    pub fn text(&self) -> String {
        match &self.value {
            OperandValue::Local(v) | OperandValue::Argument(v) | OperandValue::Global(v) => {
                v.0.clone()
            }
            OperandValue::Const(c) => c.to_string(),
        }
    }
}
