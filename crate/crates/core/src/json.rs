//! Line-oriented JSON documents: a header object whose list member holds one
//! record per line. The layout is stable so outputs compare byte-for-byte.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum DocumentError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("expected schema '{expected}', found '{found}'")]
    Schema { expected: String, found: String },
    #[error("missing member '{0}'")]
    Missing(&'static str),
}

/// Renders `{"schema":..,<header>..,"<list_key>":[\n<rec>,\n<rec>\n]}\n`.
pub fn write_document<T: Serialize>(
    schema: &str,
    header: &[(&str, Value)],
    list_key: &str,
    records: &[T],
) -> Result<String, serde_json::Error> {
    let mut out = String::from("{\"schema\":");
    out.push_str(&serde_json::to_string(schema)?);
    for (k, v) in header {
        out.push(',');
        out.push_str(&serde_json::to_string(k)?);
        out.push(':');
        out.push_str(&serde_json::to_string(v)?);
    }
    out.push(',');
    out.push_str(&serde_json::to_string(list_key)?);
    out.push_str(":[");
    for (i, r) in records.iter().enumerate() {
        out.push_str(if i == 0 { "\n" } else { ",\n" });
        out.push_str(&serde_json::to_string(r)?);
    }
    if !records.is_empty() {
        out.push('\n');
    }
    out.push_str("]}\n");
    Ok(out)
}

/// Parses a document written by [`write_document`], returning the header
/// members and the records.
pub fn read_document<T: DeserializeOwned>(
    text: &str,
    schema: &str,
    list_key: &'static str,
) -> Result<(Map<String, Value>, Vec<T>), DocumentError> {
    let mut root: Map<String, Value> = serde_json::from_str(text)?;
    let found = root
        .get("schema")
        .and_then(Value::as_str)
        .ok_or(DocumentError::Missing("schema"))?;
    if found != schema {
        return Err(DocumentError::Schema {
            expected: schema.to_string(),
            found: found.to_string(),
        });
    }
    let list = root.remove(list_key).ok_or(DocumentError::Missing(list_key))?;
    let records: Vec<T> = serde_json::from_value(list)?;
    root.remove("schema");
    Ok((root, records))
}
