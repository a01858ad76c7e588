//! Inputs shared by the benchmarks.

use std::path::{Path, PathBuf};

use defuse_core::{parse_module, IrModule, ParseOptions};

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

/// Every corpus module in name order.
pub fn corpus() -> Vec<IrModule> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(corpus_dir())
        .expect("corpus directory")
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ll"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy();
            let text = std::fs::read_to_string(p).expect("readable module");
            parse_module(&text, &ParseOptions::default().named(stem.as_ref())).expect("corpus parses")
        })
        .collect()
}

/// A module whose source value passes through `depth` calls before
/// reaching an indexed store.
pub fn call_chain(depth: usize) -> String {
    let mut out = String::from("@g = global [4 x i32] zeroinitializer\n\ndeclare i32 @read(i32, ptr, i32)\n\n");
    out.push_str("define void @f0(i32 %x) {\nentry:\n  %p = getelementptr [4 x i32], ptr @g, i32 0, i32 %x\n  store i32 1, ptr %p\n  ret void\n}\n\n");
    for i in 1..=depth {
        out.push_str(&format!(
            "define void @f{i}(i32 %x) {{\nentry:\n  %y = add i32 %x, 1\n  call void @f{}(i32 %y)\n  ret void\n}}\n\n",
            i - 1
        ));
    }
    out.push_str(&format!(
        "define i32 @main() {{\nentry:\n  %n = call i32 @read(i32 0, ptr null, i32 4)\n  call void @f{depth}(i32 %n)\n  ret i32 0\n}}\n"
    ));
    out
}
