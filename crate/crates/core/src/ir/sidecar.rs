use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{FunctionId, IrModule};

/// Outcome of pairing sidecar decompiled text with module functions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingReport {
    pub paired: usize,
    /// Sidecar keys that matched no function.
    pub unmatched: Vec<String>,
}

/// Pairs decompiled text with functions: exact id first, then a
/// case-insensitive name match. Unmatched entries are reported, not fatal.
pub fn attach_decompiled(
    mut module: IrModule,
    listing: &BTreeMap<String, String>,
) -> (IrModule, PairingReport) {
    let mut report = PairingReport::default();
    let mut pending: Vec<(&String, &String)> = Vec::new();
    for (key, text) in listing {
        let id = FunctionId(key.clone());
        if module.function(&id).is_some_and(|f| !f.is_declaration) {
            module.sidecar_decompiled.insert(id, text.clone());
            report.paired += 1;
        } else {
            pending.push((key, text));
        }
    }
    for (key, text) in pending {
        let folded = key.to_lowercase();
        let hit = module
            .defined_functions()
            .find(|f| {
                f.id.as_str().to_lowercase() == folded && !module.sidecar_decompiled.contains_key(&f.id)
            })
            .map(|f| f.id.clone());
        match hit {
            Some(id) => {
                module.sidecar_decompiled.insert(id, text.clone());
                report.paired += 1;
            }
            None => report.unmatched.push(key.clone()),
        }
    }
    (module, report)
}
