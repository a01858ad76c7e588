use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use defuse_core::baseline::{cg_outcome, slicer_outcome, summarize, truth_from_json, BaselineTable, TruthRecord};
use defuse_core::detector::{
    detect_flows, echo_step, reports_to_json, AdapterReasoner, Decision, DetectError, DetectSummary, FunctionView,
    Reasoner, ReasoningState, ReferenceReasoner,
};
use defuse_core::flows::{flows_from_json, flows_to_json, AnchorCues};
use defuse_core::{FlowObject, IrModule, PrefixTrie};
use serde::{Deserialize, Serialize};

use crate::pipeline::{self, *};
use crate::{BaselineArgs, DetectArgs, GraphArgs, InputArgs, ReasonerKind, ReportArgs, SliceArgs};

fn module_of(path: &Path, input: &InputArgs) -> Result<(IrModule, Option<defuse_core::ir::PairingReport>), CliError> {
    load_module(path, input.strict, input.decompiled.as_deref())
}

pub fn slice(a: &SliceArgs) -> Result<(), CliError> {
    let model = load_model(a.input.model.as_deref())?;
    let (module, pairing) = module_of(&a.module, &a.input)?;
    let opts = SliceOptions {
        bounds: a.bounds.bounds()?,
        compact: a.compact,
        dedupe: !a.no_dedupe,
    };
    let s = pipeline::slice(&module, &model, &opts);
    write_output(a.out.as_deref(), &flows_to_json(&s.flows))?;
    let timings = a.timings.then(|| s.timings.clone());
    let report = run_report(&module, &s, pairing, timings);
    if let Some(p) = &a.report {
        write_output(Some(p), &to_pretty(&report))?;
    }
    if a.out.is_some() {
        println!(
            "witnesses {} flows {} (raw {})",
            report.counts.witnesses, report.counts.flows_deduped, report.counts.flows_raw
        );
    }
    Ok(())
}

fn reasoner_error(e: DetectError, adapter: bool) -> CliError {
    match e {
        DetectError::Reasoner { .. } if adapter => CliError::Adapter(e.to_string()),
        other => CliError::Other(other.to_string()),
    }
}

pub fn detect(a: &DetectArgs) -> Result<(), CliError> {
    let flows = flows_from_json(&read_text(&a.flows)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.flows.display())))?;
    let model = load_model(a.input.model.as_deref())?;
    let (module, _) = module_of(&a.module, &a.input)?;
    let adapter = a.reasoner == ReasonerKind::Adapter;
    let reasoner: Box<dyn Reasoner + '_> = if adapter {
        let cmd = a.adapter_cmd.as_deref().unwrap_or_default();
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts.next().ok_or_else(|| CliError::Adapter("empty adapter command".into()))?;
        let args: Vec<String> = parts.collect();
        Box::new(AdapterReasoner::spawn(&program, &args).map_err(|e| CliError::Adapter(e.0))?)
    } else {
        Box::new(ReferenceReasoner::new(&module, &model))
    };
    let trie = PrefixTrie::new();
    let reports = detect_flows(&flows, &module, reasoner.as_ref(), &trie).map_err(|e| reasoner_error(e, adapter))?;
    write_output(a.out.as_deref(), &reports_to_json(&reports))?;
    let s = DetectSummary::of(&reports);
    let line = format!(
        "analyzed/vulnerable/benign/reasoner-calls: {}/{}/{}/{}",
        s.analyzed, s.vulnerable, s.benign, s.reasoner_calls
    );
    if a.out.is_some() {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
    Ok(())
}

pub fn graph(a: &GraphArgs) -> Result<(), CliError> {
    let model = load_model(a.input.model.as_deref())?;
    let (module, _) = module_of(&a.module, &a.input)?;
    let facts = defuse_core::extract_facts(&module, &model);
    write_output(a.out.as_deref(), &defuse_core::build_graph(&facts).to_json())
}

fn truth_of(corpus: &Path, truth: Option<&Path>) -> Result<Vec<TruthRecord>, CliError> {
    let path = truth.map(Path::to_path_buf).unwrap_or_else(|| corpus.join("truth.json"));
    if !path.exists() {
        return Err(CliError::Input(format!("missing ground truth {}", path.display())));
    }
    truth_from_json(&read_text(&path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn module_path(corpus: &Path, stem: &str) -> PathBuf {
    corpus.join(format!("{stem}.ll"))
}

pub fn baseline(a: &BaselineArgs) -> Result<(), CliError> {
    let truth = truth_of(&a.corpus, a.truth.as_deref())?;
    let model = load_model(a.input.model.as_deref())?;
    let opts = SliceOptions {
        bounds: a.bounds.bounds()?,
        compact: true,
        dedupe: false,
    };
    let mut outcomes = Vec::new();
    for rec in truth.iter().filter(|r| r.expected == Decision::Vulnerable) {
        let (module, _) = module_of(&module_path(&a.corpus, &rec.module), &a.input)?;
        let s = pipeline::slice(&module, &model, &opts);
        for &k in &a.k {
            outcomes.push(cg_outcome(rec, &s.graph, k).map_err(|e| CliError::Input(format!("{}: {e}", rec.module)))?);
        }
        outcomes.push(slicer_outcome(rec, &s.flows));
    }
    let mut contexts: Vec<String> = a.k.iter().map(|k| format!("CG-{k}")).collect();
    contexts.push("slicer".into());
    let table = BaselineTable {
        rows: contexts.iter().map(|c| summarize(c, &outcomes)).collect(),
        outcomes,
    };
    if let Some(p) = &a.out {
        write_output(Some(p), &table.to_json())?;
    }
    print!("{}", table.to_text());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Scored {
    module: String,
    expected: Decision,
    actual: Decision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Score {
    flaws: usize,
    detected: usize,
    safe: usize,
    false_positives: usize,
}

#[derive(Serialize)]
struct CorpusReport {
    schema: &'static str,
    score: Score,
    truth: Vec<Scored>,
    modules: Vec<RunReport>,
}

fn corpus_modules(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ll"))
        .collect();
    out.sort();
    Ok(out)
}

/// Vulnerable when any flow ending at the record's sink is; records without
/// a sink consider every flow of the module.
fn decide(rec: &TruthRecord, flows: &[FlowObject], decisions: &[Decision]) -> Decision {
    let relevant = flows.iter().zip(decisions).filter(|(f, _)| match &rec.sink {
        Some(s) => f.witness.sink_hit.function == s.function && f.witness.sink_hit.instr == s.instr,
        None => true,
    });
    if relevant.into_iter().any(|(_, d)| *d == Decision::Vulnerable) {
        Decision::Vulnerable
    } else {
        Decision::Benign
    }
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let truth = truth_of(&a.corpus, a.truth.as_deref())?;
    let model = load_model(a.input.model.as_deref())?;
    let opts = SliceOptions {
        bounds: a.bounds.bounds()?,
        compact: a.compact,
        dedupe: true,
    };
    let mut modules = Vec::new();
    let mut scored = Vec::new();
    for path in corpus_modules(&a.corpus)? {
        let (module, pairing) = module_of(&path, &a.input)?;
        let s = pipeline::slice(&module, &model, &opts);
        let reasoner = ReferenceReasoner::new(&module, &model);
        let reports =
            detect_flows(&s.flows, &module, &reasoner, &PrefixTrie::new()).map_err(|e| CliError::Other(e.to_string()))?;
        let mut rr = run_report(&module, &s, pairing, None);
        rr.counts.candidates = Some(DetectSummary::of(&reports));
        let decisions: Vec<Decision> = reports.iter().map(|r| r.decision).collect();
        for rec in truth.iter().filter(|r| r.module == module.name) {
            scored.push(Scored {
                module: rec.module.clone(),
                expected: rec.expected,
                actual: decide(rec, &s.flows, &decisions),
            });
        }
        modules.push(rr);
    }
    let count = |e: Decision, a: Decision| scored.iter().filter(|s| s.expected == e && s.actual == a).count();
    let score = Score {
        flaws: scored.iter().filter(|s| s.expected == Decision::Vulnerable).count(),
        detected: count(Decision::Vulnerable, Decision::Vulnerable),
        safe: scored.iter().filter(|s| s.expected == Decision::Benign).count(),
        false_positives: count(Decision::Benign, Decision::Vulnerable),
    };
    let doc = CorpusReport {
        schema: "defuse-corpus/1",
        score,
        truth: scored,
        modules,
    };
    if let Some(p) = &a.out {
        write_output(Some(p), &to_pretty(&doc))?;
    }
    println!(
        "recall {}/{} false-positives {}/{}",
        score.detected, score.flaws, score.false_positives, score.safe
    );
    Ok(())
}

#[derive(Deserialize)]
struct EchoRequest {
    state: ReasoningState,
    view: FunctionView,
    anchors: AnchorCues,
}

pub fn adapter_echo() -> Result<(), CliError> {
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| CliError::Other(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let req: EchoRequest = serde_json::from_str(&line).map_err(|e| CliError::Input(e.to_string()))?;
        let reply = serde_json::to_string(&echo_step(&req.state, &req.view, &req.anchors)).expect("state serializes");
        writeln!(stdout, "{reply}")
            .and_then(|_| stdout.flush())
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    Ok(())
}
