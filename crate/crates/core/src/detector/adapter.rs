//! Out-of-process reasoner. One JSON request per line on the child's stdin,
//! `{"state":..,"view":..,"anchors":..}`, answered by one JSON state per
//! line on its stdout.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::Serialize;

use crate::flows::AnchorCues;

use super::state::ReasoningState;
use super::view::FunctionView;
use super::{Reasoner, ReasonerFailure};

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

pub struct AdapterReasoner {
    pipe: Mutex<Pipe>,
}

#[derive(Serialize)]
struct Request<'a> {
    state: &'a ReasoningState,
    view: &'a FunctionView,
    anchors: &'a AnchorCues,
}

impl AdapterReasoner {
    /// Starts `program` with `args`.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, ReasonerFailure> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| ReasonerFailure(format!("cannot start adapter '{program}': {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(AdapterReasoner {
            pipe: Mutex::new(Pipe { child, stdin, stdout }),
        })
    }
}

impl Reasoner for AdapterReasoner {
    fn step(
        &self,
        state: &ReasoningState,
        view: &FunctionView,
        anchors: &AnchorCues,
    ) -> Result<ReasoningState, ReasonerFailure> {
        let mut p = self.pipe.lock().map_err(|_| ReasonerFailure("adapter lock poisoned".into()))?;
        let mut line = serde_json::to_string(&Request { state, view, anchors })
            .map_err(|e| ReasonerFailure(e.to_string()))?;
        line.push('\n');
        p.stdin
            .write_all(line.as_bytes())
            .and_then(|_| p.stdin.flush())
            .map_err(|e| ReasonerFailure(format!("adapter write: {e}")))?;
        let mut reply = String::new();
        let n = p
            .stdout
            .read_line(&mut reply)
            .map_err(|e| ReasonerFailure(format!("adapter read: {e}")))?;
        if n == 0 {
            return Err(ReasonerFailure("adapter closed its output".into()));
        }
        serde_json::from_str(&reply).map_err(|e| ReasonerFailure(format!("adapter reply: {e}")))
    }
}

impl Drop for AdapterReasoner {
    fn drop(&mut self) {
        if let Ok(p) = self.pipe.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}

/// The echo stub's answer: the input state with `step + 1` and a dismissal
/// for every propagation token.
pub fn echo_step(state: &ReasoningState, view: &FunctionView, anchors: &AnchorCues) -> ReasoningState {
    let mut next = state.clone();
    next.step += 1;
    for t in &anchors.propagation_tokens {
        next.notes.push(super::state::dismissal(&super::state::qualify(&view.function, t)));
    }
    next
}
