//! Source and sink rules, loaded from a TOML document.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub const MODEL_SCHEMA: &str = "defuse-model/1";

const DEFAULT_MODEL: &str = include_str!("../../../../config/default-model.toml");

/// Where a source's data comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    File,
    Cli,
    Network,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkFamily {
    DangerousApi,
    GepLoad,
    GepStore,
}

impl SinkFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            SinkFamily::DangerousApi => "dangerous_api",
            SinkFamily::GepLoad => "gep_load",
            SinkFamily::GepStore => "gep_store",
        }
    }
}

impl fmt::Display for SinkFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceRule {
    pub name: String,
    pub callees: Vec<String>,
    #[serde(default)]
    pub taint_result: bool,
    #[serde(default)]
    pub taint_args: Vec<usize>,
    pub channel: Channel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkRule {
    pub name: String,
    pub family: SinkFamily,
    #[serde(default)]
    pub callees: Vec<String>,
    #[serde(default)]
    pub args: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SourceSinkModel {
    pub sources: Vec<SourceRule>,
    pub sinks: Vec<SinkRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("model schema error{}: {message}", rule.as_ref().map(|r| format!(" in rule '{r}'")).unwrap_or_default())]
    Schema {
        rule: Option<String>,
        message: String,
    },
    #[error("duplicate rule name '{0}'")]
    DuplicateRuleName(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    schema: Option<String>,
    #[serde(default)]
    sources: Vec<SourceRule>,
    #[serde(default)]
    sinks: Vec<SinkRule>,
}

fn schema_err(rule: &str, message: impl Into<String>) -> ModelError {
    ModelError::Schema {
        rule: Some(rule.to_string()),
        message: message.into(),
    }
}

impl SourceSinkModel {
    /// The model shipped with the tool.
    pub fn default_model() -> Self {
        Self::load(DEFAULT_MODEL).expect("shipped model is valid")
    }

    pub fn default_text() -> &'static str {
        DEFAULT_MODEL
    }

    pub fn load(text: &str) -> Result<Self, ModelError> {
        let doc: ModelDoc = toml::from_str(text).map_err(|e| ModelError::Schema {
            rule: None,
            message: e.message().to_string(),
        })?;
        if let Some(schema) = &doc.schema {
            if schema != MODEL_SCHEMA {
                return Err(ModelError::Schema {
                    rule: None,
                    message: format!("unsupported schema '{schema}'"),
                });
            }
        }
        let model = SourceSinkModel {
            sources: doc.sources,
            sinks: doc.sinks,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = BTreeSet::new();
        let names = self
            .sources
            .iter()
            .map(|r| &r.name)
            .chain(self.sinks.iter().map(|r| &r.name));
        for name in names {
            if name.trim().is_empty() {
                return Err(ModelError::Schema {
                    rule: None,
                    message: "rule with empty name".into(),
                });
            }
            if !seen.insert(name.as_str()) {
                return Err(ModelError::DuplicateRuleName(name.clone()));
            }
        }
        for r in &self.sources {
            if r.callees.is_empty() {
                return Err(schema_err(&r.name, "source rule needs at least one callee"));
            }
            if !r.taint_result && r.taint_args.is_empty() {
                return Err(schema_err(&r.name, "source rule taints nothing"));
            }
        }
        for r in &self.sinks {
            match r.family {
                SinkFamily::DangerousApi => {
                    if r.callees.is_empty() || r.args.is_empty() {
                        return Err(schema_err(
                            &r.name,
                            "dangerous_api rule needs callees and args",
                        ));
                    }
                }
                SinkFamily::GepLoad | SinkFamily::GepStore => {
                    if !r.callees.is_empty() || !r.args.is_empty() {
                        return Err(schema_err(
                            &r.name,
                            "pattern rule takes no callees or args",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn rule_count(&self) -> usize {
        self.sources.len() + self.sinks.len()
    }

    pub fn has_rule(&self, name: &str) -> bool {
        self.sources.iter().any(|r| r.name == name) || self.sinks.iter().any(|r| r.name == name)
    }

    pub fn sink_families(&self) -> BTreeSet<SinkFamily> {
        self.sinks.iter().map(|r| r.family).collect()
    }

    /// Copy of the model with the named rule removed.
    pub fn without_rule(&self, name: &str) -> Self {
        SourceSinkModel {
            sources: self.sources.iter().filter(|r| r.name != name).cloned().collect(),
            sinks: self.sinks.iter().filter(|r| r.name != name).cloned().collect(),
        }
    }

    pub fn source_for<'a>(&'a self, callee: &'a str) -> impl Iterator<Item = &'a SourceRule> {
        self.sources
            .iter()
            .filter(move |r| r.callees.iter().any(|c| c == callee))
    }

    pub fn dangerous_api_for<'a>(&'a self, callee: &'a str) -> impl Iterator<Item = &'a SinkRule> {
        self.sinks.iter().filter(move |r| {
            r.family == SinkFamily::DangerousApi && r.callees.iter().any(|c| c == callee)
        })
    }

    pub fn pattern_rules(&self, family: SinkFamily) -> impl Iterator<Item = &SinkRule> {
        self.sinks.iter().filter(move |r| r.family == family)
    }
}
