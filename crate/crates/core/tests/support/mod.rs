#![allow(dead_code)]

pub mod gen;
pub mod invariants;
pub mod oracle;

use std::path::PathBuf;

use defuse_core::{parse_module, IrModule, ParseOptions};

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

/// Every corpus module, parsed strictly, in name order.
pub fn corpus() -> Vec<(String, IrModule)> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ll"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
            let text = std::fs::read_to_string(&p).unwrap();
            let m = parse_module(&text, &ParseOptions::strict().named(&stem)).unwrap();
            (stem, m)
        })
        .collect()
}

pub fn module(stem: &str) -> IrModule {
    corpus().into_iter().find(|(s, _)| s == stem).unwrap().1
}
