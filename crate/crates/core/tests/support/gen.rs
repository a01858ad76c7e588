//! Small random modules in the supported subset, built from a byte script.
//!
//! Every function has signature `i32 (i32, ptr)` and a single block, so any
//! call between generated functions is well formed and every use follows its
//! definition.

use proptest::prelude::*;

/// Opcode choice per byte; sources, calls and sinks are over-represented.
const OPS: [u8; 21] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 2, 3, 5, 5, 6, 6, 7, 8];

struct Body {
    lines: Vec<String>,
    ints: Vec<String>,
    ptrs: Vec<String>,
    next: usize,
}

impl Body {
    fn fresh(&mut self, stem: &str) -> String {
        self.next += 1;
        format!("%{stem}{}", self.next)
    }

    /// Mostly one of the three newest integers, sometimes a constant.
    fn int(&self, b: u8) -> String {
        if b % 8 == 0 {
            return (b % 16).to_string();
        }
        let back = (b as usize / 8) % self.ints.len().min(3);
        self.ints[self.ints.len() - 1 - back].clone()
    }

    /// A global, the pointer parameter, or one of the three newest pointers.
    fn ptr(&self, b: u8) -> String {
        match b % 5 {
            0 => ["@g0", "@g1"][(b as usize / 5) % 2].to_string(),
            1 => "%p".to_string(),
            _ => {
                let back = (b as usize / 5) % self.ptrs.len().min(3);
                self.ptrs[self.ptrs.len() - 1 - back].clone()
            }
        }
    }
}

/// Builds module text with one function `@fK` per script.
pub fn build(scripts: &[Vec<u8>]) -> String {
    let n = scripts.len();
    let mut out = String::from(
        "@g0 = global i32 0\n@g1 = global i32 0\n@arr = global [8 x i32] zeroinitializer\n\n\
         declare i32 @read(i32, ptr, i32)\ndeclare i32 @getenv(ptr)\n\
         declare ptr @memcpy(ptr, ptr, i32)\n\n",
    );
    for (k, script) in scripts.iter().enumerate() {
        let mut b = Body {
            lines: vec!["  %s0 = alloca i32".into(), "  %buf0 = alloca [8 x i32]".into()],
            ints: vec!["%a".into()],
            ptrs: vec!["%p".into(), "%s0".into(), "%buf0".into()],
            next: 0,
        };
        for w in script.chunks(3) {
            let (op, x, y) = (OPS[w[0] as usize % OPS.len()], *w.get(1).unwrap_or(&0), *w.get(2).unwrap_or(&0));
            match op {
                0 | 1 => {
                    let r = b.fresh("v");
                    let opn = if op == 0 { "add" } else { "mul" };
                    b.lines.push(format!("  {r} = {opn} i32 {}, {}", b.int(x), b.int(y)));
                    b.ints.push(r);
                }
                2 => {
                    let line = format!("  store i32 {}, ptr {}", b.int(x), b.ptr(y));
                    b.lines.push(line);
                }
                3 => {
                    let r = b.fresh("v");
                    b.lines.push(format!("  {r} = load i32, ptr {}", b.ptr(x)));
                    b.ints.push(r);
                }
                4 => {
                    let r = b.fresh("c");
                    b.lines.push(format!("  {r} = bitcast ptr {} to ptr", b.ptr(x)));
                    b.ptrs.push(r);
                }
                5 => {
                    let r = b.fresh("v");
                    b.lines.push(format!("  {r} = call i32 @read(i32 0, ptr {}, i32 4)", b.ptr(x)));
                    b.ints.push(r);
                }
                6 => {
                    let r = b.fresh("v");
                    let callee = x as usize % n;
                    b.lines.push(format!("  {r} = call i32 @f{callee}(i32 {}, ptr {})", b.int(y), b.ptr(y / 2)));
                    b.ints.push(r);
                }
                7 => {
                    let g = b.fresh("g");
                    b.lines.push(format!("  {g} = getelementptr [8 x i32], ptr @arr, i32 0, i32 {}", b.int(x)));
                    b.lines.push(format!("  store i32 {}, ptr {g}", b.int(y)));
                    b.ptrs.push(g);
                }
                8 => {
                    let g = b.fresh("g");
                    let r = b.fresh("v");
                    b.lines.push(format!("  {g} = getelementptr i32, ptr {}, i32 {}", b.ptr(y), b.int(x)));
                    b.lines.push(format!("  {r} = load i32, ptr {g}"));
                    b.ints.push(r);
                    b.ptrs.push(g);
                }
                9 => {
                    let r = b.fresh("m");
                    b.lines.push(format!("  {r} = call ptr @memcpy(ptr {}, ptr {}, i32 {})", b.ptr(y), b.ptr(y / 3), b.int(x)));
                }
                10 => {
                    let c = b.fresh("cmp");
                    let r = b.fresh("v");
                    b.lines.push(format!("  {c} = icmp ult i32 {}, 8", b.int(x)));
                    b.lines.push(format!("  {r} = select i1 {c}, i32 {}, i32 {}", b.int(x), b.int(y)));
                    b.ints.push(r);
                }
                12 => {
                    let line = format!("  store ptr {}, ptr {}", b.ptr(x), b.ptr(y));
                    b.lines.push(line);
                }
                _ => {
                    let r = b.fresh("v");
                    b.lines.push(format!("  {r} = zext i32 {} to i32", b.int(x)));
                    b.ints.push(r);
                }
            }
        }
        let ret = b.ints.last().cloned().unwrap();
        out.push_str(&format!("define i32 @f{k}(i32 %a, ptr %p) {{\nentry:\n"));
        for l in &b.lines {
            out.push_str(l);
            out.push('\n');
        }
        out.push_str(&format!("  ret i32 {ret}\n}}\n\n"));
    }
    out
}

pub fn module_text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::collection::vec(any::<u8>(), 3..24), 1..4).prop_map(|s| build(&s))
}
