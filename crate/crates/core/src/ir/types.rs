//! Layout queries over normalized type text.
//!
//! Types are stored as text throughout the model. This module parses that
//! text on demand to answer size and element questions for bound checks.
//! Struct layout ignores padding.

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IrType {
    Int(u32),
    Ptr,
    Void,
    Array(u64, Box<IrType>),
    Struct(Vec<IrType>),
    Named(String),
    Other(String),
}

impl IrType {
    pub fn parse(text: &str) -> IrType {
        let mut p = TypeText {
            s: text.trim().as_bytes(),
            pos: 0,
        };
        match p.parse() {
            Some(t) if p.rest_is_empty() => t,
            _ => IrType::Other(text.trim().to_string()),
        }
    }

    pub fn is_pointer(&self) -> bool {
        matches!(self, IrType::Ptr)
    }

    pub fn int_bits(&self) -> Option<u32> {
        match self {
            IrType::Int(b) => Some(*b),
            _ => None,
        }
    }

    /// Allocation size in bytes, if the layout is known.
    pub fn size_of(&self, defs: &BTreeMap<String, String>) -> Option<u64> {
        self.size_inner(defs, 0)
    }

    fn size_inner(&self, defs: &BTreeMap<String, String>, depth: u32) -> Option<u64> {
        if depth > 16 {
            return None;
        }
        match self {
            IrType::Int(bits) => Some(u64::from(bits.div_ceil(8)).max(1)),
            IrType::Ptr => Some(8),
            IrType::Void | IrType::Other(_) => None,
            IrType::Array(n, elem) => elem.size_inner(defs, depth + 1)?.checked_mul(*n),
            IrType::Struct(fields) => fields
                .iter()
                .map(|f| f.size_inner(defs, depth + 1))
                .sum::<Option<u64>>(),
            IrType::Named(name) => {
                let body = defs.get(name)?;
                IrType::parse(body).size_inner(defs, depth + 1)
            }
        }
    }

    /// Resolves a named type to its definition, leaving other types as is.
    pub fn resolve(&self, defs: &BTreeMap<String, String>) -> IrType {
        let mut t = self.clone();
        for _ in 0..16 {
            match &t {
                IrType::Named(n) => match defs.get(n) {
                    Some(body) => t = IrType::parse(body),
                    None => return t,
                },
                _ => return t,
            }
        }
        t
    }
}

struct TypeText<'a> {
    s: &'a [u8],
    pos: usize,
}

impl TypeText<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn rest_is_empty(&mut self) -> bool {
        self.skip_ws();
        self.pos == self.s.len()
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.pos < self.s.len() && self.s[self.pos] == c {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn word(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len()
            && (self.s[self.pos].is_ascii_alphanumeric()
                || matches!(self.s[self.pos], b'_' | b'.' | b'%' | b'$' | b'-'))
        {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.s[start..self.pos]).into_owned()
    }

    fn parse(&mut self) -> Option<IrType> {
        self.skip_ws();
        let mut base = if self.eat(b'[') {
            let n: u64 = self.word().parse().ok()?;
            if self.word() != "x" {
                return None;
            }
            let elem = self.parse()?;
            if !self.eat(b']') {
                return None;
            }
            IrType::Array(n, Box::new(elem))
        } else if self.eat(b'{') {
            let mut fields = Vec::new();
            if !self.eat(b'}') {
                loop {
                    fields.push(self.parse()?);
                    if self.eat(b'}') {
                        break;
                    }
                    if !self.eat(b',') {
                        return None;
                    }
                }
            }
            IrType::Struct(fields)
        } else {
            let w = self.word();
            if w == "ptr" {
                IrType::Ptr
            } else if w == "void" {
                IrType::Void
            } else if let Some(bits) = w.strip_prefix('i').and_then(|b| b.parse::<u32>().ok()) {
                IrType::Int(bits)
            } else if w.starts_with('%') {
                IrType::Named(w)
            } else if w.is_empty() {
                return None;
            } else {
                IrType::Other(w)
            }
        };
        while self.eat(b'*') {
            base = IrType::Ptr;
        }
        Some(base)
    }
}

/// Byte size of `text`, or `None` when the layout is unknown.
pub fn size_of(text: &str, defs: &BTreeMap<String, String>) -> Option<u64> {
    IrType::parse(text).size_of(defs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_of_common_types() {
        let defs = BTreeMap::new();
        assert_eq!(size_of("i8", &defs), Some(1));
        assert_eq!(size_of("i1", &defs), Some(1));
        assert_eq!(size_of("i32", &defs), Some(4));
        assert_eq!(size_of("ptr", &defs), Some(8));
        assert_eq!(size_of("i8*", &defs), Some(8));
        assert_eq!(size_of("[16 x i8]", &defs), Some(16));
        assert_eq!(size_of("[4 x [4 x i32]]", &defs), Some(64));
        assert_eq!(size_of("{ i32, ptr }", &defs), Some(12));
        assert_eq!(size_of("void", &defs), None);
    }

    #[test]
    fn named_struct_sizes_resolve_through_definitions() {
        let mut defs = BTreeMap::new();
        defs.insert("%struct.hdr".to_string(), "{ i32, [8 x i8] }".to_string());
        assert_eq!(size_of("%struct.hdr", &defs), Some(12));
        assert_eq!(size_of("%struct.missing", &defs), None);
    }

    #[test]
    fn typed_pointer_is_pointer() {
        assert!(IrType::parse("[4 x i8]*").is_pointer());
        assert!(IrType::parse("i8**").is_pointer());
    }
}
