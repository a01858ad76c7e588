use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use thiserror::Error;

use super::lexer::{lex_line, Spanned, Tok};
use super::{
    BasicBlock, BinOp, Branch, Callee, CastOp, Constant, FunctionId, GlobalVar, IcmpPred,
    InstrId, InstrKind, Instruction, IrFunction, IrModule, Operand, OperandValue, Param, ValueId,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at {line}:{column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported construct '{opcode}' at line {line}")]
    UnsupportedConstruct { opcode: String, line: usize },
    #[error("invalid module at line {line}: {message}")]
    Invalid { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Reject any opcode outside the supported subset.
    Strict,
    /// Keep unsupported instructions as [`InstrKind::Opaque`].
    #[default]
    Tolerant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOptions {
    pub mode: ParseMode,
    pub module_name: String,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            mode: ParseMode::Tolerant,
            module_name: "module".to_string(),
        }
    }
}

impl ParseOptions {
    pub fn strict() -> Self {
        ParseOptions {
            mode: ParseMode::Strict,
            ..Default::default()
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.module_name = name.into();
        self
    }
}

const SUPPORTED_OPCODES: &[&str] = &[
    "alloca",
    "load",
    "store",
    "getelementptr",
    "bitcast",
    "zext",
    "sext",
    "trunc",
    "add",
    "sub",
    "mul",
    "icmp",
    "select",
    "phi",
    "call",
    "br",
    "ret",
];

const LINKAGE_WORDS: &[&str] = &[
    "private",
    "internal",
    "external",
    "extern_weak",
    "weak",
    "weak_odr",
    "linkonce",
    "linkonce_odr",
    "common",
    "appending",
    "available_externally",
    "dso_local",
    "dso_preemptable",
    "hidden",
    "protected",
    "default",
    "unnamed_addr",
    "local_unnamed_addr",
    "thread_local",
    "externally_initialized",
    "fastcc",
    "ccc",
    "coldcc",
    "noundef",
    "zeroext",
    "signext",
    "inreg",
    "noalias",
    "nonnull",
];

const CONSTANT_WORDS: &[&str] = &["true", "false", "null", "undef", "poison", "zeroinitializer"];

fn is_type_word(w: &str) -> bool {
    matches!(w, "ptr" | "void" | "float" | "double" | "half" | "label")
        || w.strip_prefix('i')
            .is_some_and(|b| !b.is_empty() && b.bytes().all(|c| c.is_ascii_digit()))
}

/// Parses textual IR into a validated [`IrModule`].
pub fn parse_module(source: &str, options: &ParseOptions) -> Result<IrModule, ParseError> {
    Parser::new(source, options).run()
}

struct Cursor<'a> {
    toks: &'a [Spanned],
    pos: usize,
    line: usize,
    line_len: usize,
}

impl<'a> Cursor<'a> {
    fn new(toks: &'a [Spanned], line: usize, line_len: usize) -> Self {
        Cursor {
            toks,
            pos: 0,
            line,
            line_len,
        }
    }

    fn peek(&self) -> Option<&'a Tok> {
        self.toks.get(self.pos).map(|s| &s.tok)
    }

    fn peek_at(&self, offset: usize) -> Option<&'a Tok> {
        self.toks.get(self.pos + offset).map(|s| &s.tok)
    }

    fn next(&mut self) -> Option<&'a Tok> {
        let t = self.toks.get(self.pos).map(|s| &s.tok);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn col(&self) -> usize {
        self.toks
            .get(self.pos)
            .map(|s| s.col)
            .unwrap_or(self.line_len + 1)
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            line: self.line,
            column: self.col(),
            message: message.into(),
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Punct(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat_punct(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected '{c}'")))
        }
    }

    fn eat_word(&mut self, w: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Word(x)) if x == w) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_word(&mut self, w: &str) -> Result<(), ParseError> {
        if self.eat_word(w) {
            Ok(())
        } else {
            Err(self.err(format!("expected '{w}'")))
        }
    }

    fn expect_int(&mut self) -> Result<i64, ParseError> {
        match self.peek() {
            Some(Tok::Int(v)) => {
                self.pos += 1;
                Ok(*v)
            }
            _ => Err(self.err("expected integer")),
        }
    }

    /// Drops trailing `, !name !N` metadata attachments.
    fn strip_metadata(&mut self) {
        let cut = (0..self.toks.len()).find(|&i| {
            matches!(self.toks[i].tok, Tok::Punct(','))
                && matches!(self.toks.get(i + 1).map(|s| &s.tok), Some(Tok::Meta(_)))
        });
        if let Some(cut) = cut {
            self.toks = &self.toks[..cut];
        }
    }
}

struct Parser<'s> {
    lines: Vec<&'s str>,
    options: &'s ParseOptions,
    type_names: BTreeSet<String>,
}

/// Header of a function-like item (definition or declaration).
struct Header {
    name: String,
    return_type: String,
    params: Vec<Param>,
    vararg: bool,
}

impl<'s> Parser<'s> {
    fn new(source: &'s str, options: &'s ParseOptions) -> Self {
        Parser {
            lines: source.lines().collect(),
            options,
            type_names: BTreeSet::new(),
        }
    }

    fn lex(&self, idx: usize) -> Result<Vec<Spanned>, ParseError> {
        lex_line(self.lines[idx]).map_err(|e| ParseError::Syntax {
            line: idx + 1,
            column: e.col,
            message: e.message,
        })
    }

    /// Collects top-level names so operands can be classified in one pass.
    fn prescan(&mut self) -> Result<(), ParseError> {
        for idx in 0..self.lines.len() {
            let toks = self.lex(idx)?;
            if let Some(Tok::Local(name)) = toks.first().map(|s| &s.tok) {
                if matches!(toks.get(1).map(|s| &s.tok), Some(Tok::Punct('=')))
                    && matches!(toks.get(2).map(|s| &s.tok), Some(Tok::Word(w)) if w == "type")
                {
                    self.type_names.insert(name.clone());
                }
            }
        }
        Ok(())
    }

    fn run(mut self) -> Result<IrModule, ParseError> {
        self.prescan()?;
        let mut module = IrModule {
            name: self.options.module_name.clone(),
            type_defs: BTreeMap::new(),
            globals: Vec::new(),
            functions: Vec::new(),
            sidecar_decompiled: BTreeMap::new(),
        };
        let mut function_lines: HashMap<String, usize> = HashMap::new();
        let mut global_lines: HashMap<String, usize> = HashMap::new();
        let mut idx = 0;
        while idx < self.lines.len() {
            let toks = self.lex(idx)?;
            let line_no = idx + 1;
            let mut c = Cursor::new(&toks, line_no, self.lines[idx].len());
            match c.peek() {
                None => {
                    idx += 1;
                }
                Some(Tok::Word(w))
                    if matches!(w.as_str(), "target" | "source_filename" | "attributes") =>
                {
                    idx += 1;
                }
                Some(Tok::Meta(_)) => {
                    idx += 1;
                }
                Some(Tok::Local(name)) => {
                    let name = name.clone();
                    c.next();
                    c.expect_punct('=')?;
                    c.expect_word("type")?;
                    let body = self.parse_type(&mut c)?;
                    module.type_defs.insert(name, body);
                    idx += 1;
                }
                Some(Tok::Global(_)) => {
                    let g = self.parse_global(&mut c)?;
                    if global_lines.insert(g.id.0.clone(), line_no).is_some() {
                        return Err(ParseError::Invalid {
                            line: line_no,
                            message: format!("duplicate global {}", g.id),
                        });
                    }
                    module.globals.push(g);
                    idx += 1;
                }
                Some(Tok::Word(w)) if w == "declare" => {
                    c.next();
                    let header = self.parse_header(&mut c, false)?;
                    if function_lines.insert(header.name.clone(), line_no).is_some() {
                        return Err(ParseError::Invalid {
                            line: line_no,
                            message: format!("duplicate function @{}", header.name),
                        });
                    }
                    let ordinal = module.functions.len() as u32;
                    module.functions.push(IrFunction {
                        id: FunctionId(header.name),
                        ordinal,
                        return_type: header.return_type,
                        params: header.params,
                        is_vararg: header.vararg,
                        blocks: Vec::new(),
                        is_declaration: true,
                        source_text: self.lines[idx].trim_end().to_string(),
                    });
                    idx += 1;
                }
                Some(Tok::Word(w)) if w == "define" => {
                    c.next();
                    let header = self.parse_header(&mut c, true)?;
                    // skip trailing attributes up to `{`
                    while !c.at_end() && !c.eat_punct('{') {
                        c.next();
                    }
                    if function_lines.insert(header.name.clone(), line_no).is_some() {
                        return Err(ParseError::Invalid {
                            line: line_no,
                            message: format!("duplicate function @{}", header.name),
                        });
                    }
                    let (function, end) =
                        self.parse_body(idx, header, module.functions.len() as u32)?;
                    module.functions.push(function);
                    idx = end + 1;
                }
                Some(_) => return Err(c.err("unexpected top-level item")),
            }
        }
        self.validate(&module, &function_lines)?;
        Ok(module)
    }

    fn parse_type(&self, c: &mut Cursor) -> Result<String, ParseError> {
        let mut text = match c.peek() {
            Some(Tok::Punct('[')) => {
                c.next();
                let n = c.expect_int()?;
                c.expect_word("x")?;
                let elem = self.parse_type(c)?;
                c.expect_punct(']')?;
                format!("[{n} x {elem}]")
            }
            Some(Tok::Punct('{')) => {
                c.next();
                let mut fields = Vec::new();
                if !c.eat_punct('}') {
                    loop {
                        fields.push(self.parse_type(c)?);
                        if c.eat_punct('}') {
                            break;
                        }
                        c.expect_punct(',')?;
                    }
                }
                if fields.is_empty() {
                    "{}".to_string()
                } else {
                    format!("{{ {} }}", fields.join(", "))
                }
            }
            Some(Tok::Word(w)) if is_type_word(w) => {
                c.next();
                w.clone()
            }
            Some(Tok::Local(name)) if self.type_names.contains(name) => {
                c.next();
                name.clone()
            }
            _ => return Err(c.err("expected type")),
        };
        while c.eat_punct('*') {
            text.push('*');
        }
        Ok(text)
    }

    fn is_type_start(&self, c: &Cursor) -> bool {
        match c.peek() {
            Some(Tok::Punct('[')) | Some(Tok::Punct('{')) => true,
            Some(Tok::Word(w)) => is_type_word(w),
            Some(Tok::Local(n)) => self.type_names.contains(n),
            _ => false,
        }
    }

    fn parse_global(&self, c: &mut Cursor) -> Result<GlobalVar, ParseError> {
        let id = match c.next() {
            Some(Tok::Global(g)) => ValueId(g.clone()),
            _ => return Err(c.err("expected global name")),
        };
        c.expect_punct('=')?;
        while matches!(c.peek(), Some(Tok::Word(w)) if LINKAGE_WORDS.contains(&w.as_str())) {
            c.next();
        }
        let is_constant = if c.eat_word("constant") {
            true
        } else if c.eat_word("global") {
            false
        } else {
            return Err(c.err("expected 'global' or 'constant'"));
        };
        let ty = self.parse_type(c)?;
        c.strip_metadata();
        let mut init = Vec::new();
        while let Some(t) = c.peek() {
            if t == &Tok::Punct(',') && matches!(c.peek_at(1), Some(Tok::Word(w)) if w == "align" || w == "section")
            {
                break;
            }
            init.push(tok_text(t));
            c.next();
        }
        let initializer = if init.is_empty() {
            None
        } else {
            Some(join_tokens(&init))
        };
        Ok(GlobalVar {
            id,
            ty,
            is_constant,
            initializer,
        })
    }

    fn skip_param_attrs(&self, c: &mut Cursor) {
        loop {
            match c.peek() {
                Some(Tok::Word(w)) if !is_type_word(w) && !CONSTANT_WORDS.contains(&w.as_str()) => {
                    let w = w.clone();
                    c.next();
                    if w == "align" {
                        if let Some(Tok::Int(_)) = c.peek() {
                            c.next();
                        }
                    } else if c.peek() == Some(&Tok::Punct('(')) {
                        while let Some(t) = c.next() {
                            if t == &Tok::Punct(')') {
                                break;
                            }
                        }
                    }
                }
                Some(Tok::AttrRef(_)) => {
                    c.next();
                }
                _ => return,
            }
        }
    }

    fn parse_header(&self, c: &mut Cursor, named_params: bool) -> Result<Header, ParseError> {
        while matches!(c.peek(), Some(Tok::Word(w)) if !is_type_word(w)) {
            c.next();
        }
        let return_type = self.parse_type(c)?;
        let name = match c.next() {
            Some(Tok::Global(g)) => g.trim_start_matches('@').to_string(),
            _ => return Err(c.err("expected function name")),
        };
        c.expect_punct('(')?;
        let mut params = Vec::new();
        let mut vararg = false;
        if !c.eat_punct(')') {
            loop {
                if c.peek() == Some(&Tok::Ellipsis) {
                    c.next();
                    vararg = true;
                    c.expect_punct(')')?;
                    break;
                }
                let ty = self.parse_type(c)?;
                self.skip_param_attrs(c);
                let id = match c.peek() {
                    Some(Tok::Local(n)) => {
                        let n = n.clone();
                        c.next();
                        Some(ValueId(n))
                    }
                    _ if named_params => Some(ValueId(format!("%{}", params.len()))),
                    _ => None,
                };
                params.push(Param { id, ty });
                if c.eat_punct(')') {
                    break;
                }
                c.expect_punct(',')?;
            }
        }
        Ok(Header {
            name,
            return_type,
            params,
            vararg,
        })
    }

    /// Parses lines after a `define` header up to the closing brace.
    fn parse_body(
        &self,
        header_idx: usize,
        header: Header,
        ordinal: u32,
    ) -> Result<(IrFunction, usize), ParseError> {
        let args: HashSet<String> = header
            .params
            .iter()
            .filter_map(|p| p.id.as_ref().map(|v| v.0.clone()))
            .collect();
        let mut blocks: Vec<BasicBlock> = Vec::new();
        let mut next_id = 0u32;
        let mut idx = header_idx + 1;
        loop {
            if idx >= self.lines.len() {
                return Err(ParseError::Syntax {
                    line: self.lines.len(),
                    column: 1,
                    message: format!("unterminated function @{}", header.name),
                });
            }
            let toks = self.lex(idx)?;
            let line_no = idx + 1;
            let mut c = Cursor::new(&toks, line_no, self.lines[idx].len());
            match (c.peek(), c.peek_at(1)) {
                (None, _) => {}
                (Some(Tok::Punct('}')), _) => break,
                (Some(Tok::Word(label)), Some(Tok::Punct(':'))) if toks.len() == 2 => {
                    blocks.push(BasicBlock {
                        label: label.clone(),
                        instructions: Vec::new(),
                    });
                }
                (Some(Tok::Int(n)), Some(Tok::Punct(':'))) if toks.len() == 2 => {
                    blocks.push(BasicBlock {
                        label: n.to_string(),
                        instructions: Vec::new(),
                    });
                }
                _ => {
                    let inst = self.parse_instruction(&mut c, &args, InstrId(next_id))?;
                    next_id += 1;
                    if blocks.is_empty() {
                        blocks.push(BasicBlock {
                            label: "entry".to_string(),
                            instructions: Vec::new(),
                        });
                    }
                    blocks.last_mut().expect("block exists").instructions.push(inst);
                }
            }
            idx += 1;
        }
        let source_text = self.lines[header_idx..=idx]
            .iter()
            .map(|l| l.trim_end())
            .collect::<Vec<_>>()
            .join("\n");
        Ok((
            IrFunction {
                id: FunctionId(header.name),
                ordinal,
                return_type: header.return_type,
                params: header.params,
                is_vararg: header.vararg,
                blocks,
                is_declaration: false,
                source_text,
            },
            idx,
        ))
    }

    fn parse_value(
        &self,
        c: &mut Cursor,
        ty: &str,
        args: &HashSet<String>,
    ) -> Result<Operand, ParseError> {
        let value = match c.peek() {
            Some(Tok::Local(n)) => {
                let v = ValueId(n.clone());
                if args.contains(n) {
                    OperandValue::Argument(v)
                } else {
                    OperandValue::Local(v)
                }
            }
            Some(Tok::Global(g)) => OperandValue::Global(ValueId(g.clone())),
            Some(Tok::Int(v)) => OperandValue::Const(Constant::Int(*v)),
            Some(Tok::Word(w)) => match w.as_str() {
                "true" => OperandValue::Const(Constant::Bool(true)),
                "false" => OperandValue::Const(Constant::Bool(false)),
                "null" => OperandValue::Const(Constant::Null),
                "undef" => OperandValue::Const(Constant::Undef),
                "poison" => OperandValue::Const(Constant::Poison),
                "zeroinitializer" => OperandValue::Const(Constant::ZeroInitializer),
                _ => return Err(c.err(format!("unsupported operand '{w}'"))),
            },
            _ => return Err(c.err("expected operand")),
        };
        c.next();
        Ok(Operand {
            ty: ty.to_string(),
            value,
        })
    }

    fn parse_typed_operand(
        &self,
        c: &mut Cursor,
        args: &HashSet<String>,
    ) -> Result<Operand, ParseError> {
        let ty = self.parse_type(c)?;
        self.skip_param_attrs(c);
        self.parse_value(c, &ty, args)
    }

    fn parse_label_ref(&self, c: &mut Cursor) -> Result<String, ParseError> {
        c.expect_word("label")?;
        match c.next() {
            Some(Tok::Local(l)) => Ok(l.trim_start_matches('%').to_string()),
            _ => Err(c.err("expected label")),
        }
    }

    fn skip_words(&self, c: &mut Cursor, words: &[&str]) {
        while matches!(c.peek(), Some(Tok::Word(w)) if words.contains(&w.as_str())) {
            c.next();
        }
    }

    /// Consumes `, align N`-style trailers; anything else is an error.
    fn finish(&self, c: &mut Cursor) -> Result<(), ParseError> {
        while c.eat_punct(',') {
            match c.next() {
                Some(Tok::Word(w)) if w == "align" => {
                    c.expect_int()?;
                }
                _ => return Err(c.err("unexpected trailing operand")),
            }
        }
        while let Some(Tok::AttrRef(_)) = c.peek() {
            c.next();
        }
        if c.at_end() {
            Ok(())
        } else {
            Err(c.err("unexpected trailing tokens"))
        }
    }

    fn parse_instruction(
        &self,
        c: &mut Cursor,
        args: &HashSet<String>,
        id: InstrId,
    ) -> Result<Instruction, ParseError> {
        c.strip_metadata();
        let line = c.line;
        let result = match (c.peek(), c.peek_at(1)) {
            (Some(Tok::Local(n)), Some(Tok::Punct('='))) => {
                let n = n.clone();
                c.next();
                c.next();
                Some(ValueId(n))
            }
            _ => None,
        };
        self.skip_words(c, &["tail", "musttail", "notail"]);
        let opcode = match c.next() {
            Some(Tok::Word(w)) => w.clone(),
            _ => return Err(c.err("expected opcode")),
        };
        if !SUPPORTED_OPCODES.contains(&opcode.as_str()) {
            return match self.options.mode {
                ParseMode::Strict => Err(ParseError::UnsupportedConstruct { opcode, line }),
                ParseMode::Tolerant => Ok(Instruction {
                    id,
                    result,
                    result_type: String::new(),
                    kind: InstrKind::Opaque {
                        opcode,
                        text: self.lines[line - 1].trim().to_string(),
                    },
                    line,
                }),
            };
        }
        let (kind, result_type) = match opcode.as_str() {
            "alloca" => {
                self.skip_words(c, &["inalloca"]);
                let allocated = self.parse_type(c)?;
                let mut count = None;
                if c.peek() == Some(&Tok::Punct(',')) && self.is_type_start_at(c, 1) {
                    c.next();
                    count = Some(self.parse_typed_operand(c, args)?);
                }
                self.finish(c)?;
                (InstrKind::Alloca { allocated, count }, "ptr".to_string())
            }
            "load" => {
                self.skip_words(c, &["volatile", "atomic"]);
                let ty = self.parse_type(c)?;
                c.expect_punct(',')?;
                let addr = self.parse_typed_operand(c, args)?;
                self.finish(c)?;
                (InstrKind::Load { addr }, ty)
            }
            "store" => {
                self.skip_words(c, &["volatile", "atomic"]);
                let value = self.parse_typed_operand(c, args)?;
                c.expect_punct(',')?;
                let addr = self.parse_typed_operand(c, args)?;
                self.finish(c)?;
                (InstrKind::Store { value, addr }, "void".to_string())
            }
            "getelementptr" => {
                let mut inbounds = false;
                while let Some(Tok::Word(w)) = c.peek() {
                    match w.as_str() {
                        "inbounds" => inbounds = true,
                        "nuw" | "nusw" => {}
                        _ => break,
                    }
                    c.next();
                }
                let source_type = self.parse_type(c)?;
                c.expect_punct(',')?;
                let base = self.parse_typed_operand(c, args)?;
                let mut indices = Vec::new();
                while c.eat_punct(',') {
                    indices.push(self.parse_typed_operand(c, args)?);
                }
                self.finish(c)?;
                (
                    InstrKind::GetElementPtr {
                        source_type,
                        inbounds,
                        base,
                        indices,
                    },
                    "ptr".to_string(),
                )
            }
            "bitcast" | "zext" | "sext" | "trunc" => {
                let op = match opcode.as_str() {
                    "bitcast" => CastOp::Bitcast,
                    "zext" => CastOp::Zext,
                    "sext" => CastOp::Sext,
                    _ => CastOp::Trunc,
                };
                self.skip_words(c, &["nneg", "nuw", "nsw"]);
                let value = self.parse_typed_operand(c, args)?;
                c.expect_word("to")?;
                let to = self.parse_type(c)?;
                self.finish(c)?;
                (InstrKind::Cast { op, value }, to)
            }
            "add" | "sub" | "mul" => {
                let op = match opcode.as_str() {
                    "add" => BinOp::Add,
                    "sub" => BinOp::Sub,
                    _ => BinOp::Mul,
                };
                self.skip_words(c, &["nuw", "nsw"]);
                let ty = self.parse_type(c)?;
                let lhs = self.parse_value(c, &ty, args)?;
                c.expect_punct(',')?;
                let rhs = self.parse_value(c, &ty, args)?;
                self.finish(c)?;
                (InstrKind::Binary { op, lhs, rhs }, ty)
            }
            "icmp" => {
                self.skip_words(c, &["samesign"]);
                let pred = match c.next() {
                    Some(Tok::Word(w)) => {
                        IcmpPred::parse(w).ok_or_else(|| c.err(format!("bad predicate '{w}'")))?
                    }
                    _ => return Err(c.err("expected predicate")),
                };
                let ty = self.parse_type(c)?;
                let lhs = self.parse_value(c, &ty, args)?;
                c.expect_punct(',')?;
                let rhs = self.parse_value(c, &ty, args)?;
                self.finish(c)?;
                (InstrKind::Icmp { pred, lhs, rhs }, "i1".to_string())
            }
            "select" => {
                let cond = self.parse_typed_operand(c, args)?;
                c.expect_punct(',')?;
                let on_true = self.parse_typed_operand(c, args)?;
                c.expect_punct(',')?;
                let on_false = self.parse_typed_operand(c, args)?;
                self.finish(c)?;
                let ty = on_true.ty.clone();
                (
                    InstrKind::Select {
                        cond,
                        on_true,
                        on_false,
                    },
                    ty,
                )
            }
            "phi" => {
                let ty = self.parse_type(c)?;
                let mut incoming = Vec::new();
                loop {
                    c.expect_punct('[')?;
                    let v = self.parse_value(c, &ty, args)?;
                    c.expect_punct(',')?;
                    let label = match c.next() {
                        Some(Tok::Local(l)) => l.trim_start_matches('%').to_string(),
                        _ => return Err(c.err("expected incoming label")),
                    };
                    c.expect_punct(']')?;
                    incoming.push((v, label));
                    if !c.eat_punct(',') {
                        break;
                    }
                }
                self.finish(c)?;
                (InstrKind::Phi { incoming }, ty)
            }
            "call" => {
                while matches!(c.peek(), Some(Tok::Word(w)) if !is_type_word(w)) {
                    c.next();
                }
                let ret_ty = self.parse_type(c)?;
                if c.peek() == Some(&Tok::Punct('(')) {
                    // explicit function type, e.g. `i32 (ptr, ...)`
                    while let Some(t) = c.next() {
                        if t == &Tok::Punct(')') {
                            break;
                        }
                    }
                }
                let callee = match c.peek() {
                    Some(Tok::Global(g)) => {
                        let g = g.trim_start_matches('@').to_string();
                        c.next();
                        Callee::Direct(FunctionId(g))
                    }
                    Some(Tok::Local(_)) => Callee::Indirect(self.parse_value(c, "ptr", args)?),
                    _ => return Err(c.err("expected callee")),
                };
                c.expect_punct('(')?;
                let mut call_args = Vec::new();
                if !c.eat_punct(')') {
                    loop {
                        call_args.push(self.parse_typed_operand(c, args)?);
                        if c.eat_punct(')') {
                            break;
                        }
                        c.expect_punct(',')?;
                    }
                }
                self.finish(c)?;
                (
                    InstrKind::Call {
                        callee,
                        args: call_args,
                    },
                    ret_ty,
                )
            }
            "br" => {
                let kind = if matches!(c.peek(), Some(Tok::Word(w)) if w == "label") {
                    InstrKind::Br(Branch::Unconditional(self.parse_label_ref(c)?))
                } else {
                    let cond = self.parse_typed_operand(c, args)?;
                    c.expect_punct(',')?;
                    let then_label = self.parse_label_ref(c)?;
                    c.expect_punct(',')?;
                    let else_label = self.parse_label_ref(c)?;
                    InstrKind::Br(Branch::Conditional {
                        cond,
                        then_label,
                        else_label,
                    })
                };
                self.finish(c)?;
                (kind, "void".to_string())
            }
            "ret" => {
                let value = if c.eat_word("void") {
                    None
                } else {
                    Some(self.parse_typed_operand(c, args)?)
                };
                self.finish(c)?;
                (InstrKind::Ret { value }, "void".to_string())
            }
            _ => unreachable!("opcode filtered above"),
        };
        Ok(Instruction {
            id,
            result,
            result_type,
            kind,
            line,
        })
    }

    fn is_type_start_at(&self, c: &Cursor, offset: usize) -> bool {
        let probe = Cursor {
            toks: c.toks,
            pos: c.pos + offset,
            line: c.line,
            line_len: c.line_len,
        };
        self.is_type_start(&probe)
    }

    fn validate(
        &self,
        module: &IrModule,
        function_lines: &HashMap<String, usize>,
    ) -> Result<(), ParseError> {
        let globals: HashSet<&str> = module.globals.iter().map(|g| g.id.as_str()).collect();
        let functions: HashMap<&str, &IrFunction> = module
            .functions
            .iter()
            .map(|f| (f.id.as_str(), f))
            .collect();
        for f in module.defined_functions() {
            let header_line = function_lines[f.id.as_str()];
            if f.blocks.is_empty() {
                return Err(ParseError::Invalid {
                    line: header_line,
                    message: format!("function @{} has no blocks", f.id),
                });
            }
            let mut labels = HashSet::new();
            for b in &f.blocks {
                if !labels.insert(b.label.as_str()) {
                    return Err(ParseError::Invalid {
                        line: header_line,
                        message: format!("duplicate block label '{}' in @{}", b.label, f.id),
                    });
                }
            }
            let mut all_defs: HashSet<&str> = HashSet::new();
            for p in &f.params {
                if let Some(id) = &p.id {
                    if !all_defs.insert(id.as_str()) {
                        return Err(ParseError::Invalid {
                            line: header_line,
                            message: format!("duplicate parameter {id} in @{}", f.id),
                        });
                    }
                }
            }
            for inst in f.instructions() {
                if let Some(r) = &inst.result {
                    if !all_defs.insert(r.as_str()) {
                        return Err(ParseError::Invalid {
                            line: inst.line,
                            message: format!("value {r} defined twice"),
                        });
                    }
                }
            }
            let mut defined: HashSet<&str> = f
                .params
                .iter()
                .filter_map(|p| p.id.as_ref().map(|v| v.as_str()))
                .collect();
            for inst in f.instructions() {
                let produces = !matches!(
                    inst.kind,
                    InstrKind::Store { .. }
                        | InstrKind::Br(_)
                        | InstrKind::Ret { .. }
                        | InstrKind::Call { .. }
                        | InstrKind::Opaque { .. }
                );
                if produces && inst.result.is_none() {
                    return Err(ParseError::Invalid {
                        line: inst.line,
                        message: format!("'{}' result must be named", inst.opcode()),
                    });
                }
                if !produces && inst.result.is_some() && !matches!(inst.kind, InstrKind::Call { .. } | InstrKind::Opaque { .. }) {
                    return Err(ParseError::Invalid {
                        line: inst.line,
                        message: format!("'{}' does not produce a value", inst.opcode()),
                    });
                }
                let is_phi = matches!(inst.kind, InstrKind::Phi { .. });
                for op in inst.operands() {
                    match &op.value {
                        OperandValue::Local(v) => {
                            let ok = if is_phi {
                                all_defs.contains(v.as_str())
                            } else {
                                defined.contains(v.as_str())
                            };
                            if !ok {
                                return Err(ParseError::Invalid {
                                    line: inst.line,
                                    message: format!("use of {v} before its definition"),
                                });
                            }
                        }
                        OperandValue::Global(g) => {
                            let bare = g.as_str().trim_start_matches('@');
                            if !globals.contains(g.as_str()) && !functions.contains_key(bare) {
                                return Err(ParseError::Invalid {
                                    line: inst.line,
                                    message: format!("undeclared global {g}"),
                                });
                            }
                        }
                        _ => {}
                    }
                }
                match &inst.kind {
                    InstrKind::Br(br) => {
                        for t in br.targets() {
                            if !labels.contains(t) {
                                return Err(ParseError::Invalid {
                                    line: inst.line,
                                    message: format!("branch to unknown label %{t}"),
                                });
                            }
                        }
                    }
                    InstrKind::Phi { incoming } => {
                        for (_, l) in incoming {
                            if !labels.contains(l.as_str()) {
                                return Err(ParseError::Invalid {
                                    line: inst.line,
                                    message: format!("phi names unknown block %{l}"),
                                });
                            }
                        }
                    }
                    InstrKind::Call {
                        callee: Callee::Direct(name),
                        args,
                    } => match functions.get(name.as_str()) {
                        None => {
                            return Err(ParseError::Invalid {
                                line: inst.line,
                                message: format!("call to undeclared function @{name}"),
                            })
                        }
                        Some(target) => {
                            if args.len() < target.params.len()
                                || (!target.is_vararg && args.len() != target.params.len())
                            {
                                return Err(ParseError::Invalid {
                                    line: inst.line,
                                    message: format!(
                                        "call to @{name} passes {} arguments, expected {}",
                                        args.len(),
                                        target.params.len()
                                    ),
                                });
                            }
                        }
                    },
                    _ => {}
                }
                if let Some(r) = &inst.result {
                    defined.insert(r.as_str());
                }
            }
        }
        Ok(())
    }
}

fn tok_text(t: &Tok) -> String {
    match t {
        Tok::Local(s) | Tok::Global(s) | Tok::Word(s) => s.clone(),
        Tok::AttrRef(s) => format!("#{s}"),
        Tok::Meta(s) => format!("!{s}"),
        Tok::Int(v) => v.to_string(),
        Tok::Str(s) => format!("c\"{s}\""),
        Tok::Punct(c) => c.to_string(),
        Tok::Ellipsis => "...".to_string(),
    }
}

fn join_tokens(parts: &[String]) -> String {
    let mut out = String::new();
    for p in parts {
        let glue = matches!(p.as_str(), "," | "]" | "}" | ")" | "*");
        if !out.is_empty() && !glue && !out.ends_with(['[', '{', '(']) {
            out.push(' ');
        }
        out.push_str(p);
    }
    out
}
