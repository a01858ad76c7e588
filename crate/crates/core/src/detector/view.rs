use serde::{Deserialize, Serialize};

use crate::ir::{print_function, FunctionId, IrModule};

use super::DetectError;

/// What the reasoner sees of one function. Endpoint frames get both texts;
/// other frames get the decompiled text only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionView {
    pub function: FunctionId,
    pub decompiled: String,
    /// Set when no decompiled text was paired and printed IR stands in.
    pub decompiled_is_standin: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ir_text: Option<String>,
    pub dual: bool,
}

pub fn select_view(function: &FunctionId, module: &IrModule, is_endpoint: bool) -> Result<FunctionView, DetectError> {
    let f = module
        .function(function)
        .filter(|f| !f.is_declaration)
        .ok_or_else(|| DetectError::UnknownFunction(function.clone()))?;
    let printed = || {
        if f.source_text.is_empty() {
            print_function(f)
        } else {
            f.source_text.clone()
        }
    };
    let (decompiled, standin) = match module.decompiled(function) {
        Some(d) => (d.to_string(), false),
        None => (printed(), true),
    };
    Ok(FunctionView {
        function: function.clone(),
        decompiled,
        decompiled_is_standin: standin,
        ir_text: is_endpoint.then(printed),
        dual: is_endpoint,
    })
}
