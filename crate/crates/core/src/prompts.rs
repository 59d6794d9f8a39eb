//! System prompt templates.
//!
//! Defaults are compiled in. A directory holding files with the same names
//! (`setup.md`, `judge.md`, ...) overrides them one by one. Placeholders are
//! written `{{name}}`; unknown placeholders are left as they are.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Setup,
    RetrieverSummary,
    RetrieverSelect,
    RetrieverAudit,
    Verifier,
    Prosecutor,
    Judge,
    DistillerExtract,
    DistillerSchema,
    DistillerDedup,
}

impl PromptKind {
    pub const ALL: [PromptKind; 10] = [
        PromptKind::Setup,
        PromptKind::RetrieverSummary,
        PromptKind::RetrieverSelect,
        PromptKind::RetrieverAudit,
        PromptKind::Verifier,
        PromptKind::Prosecutor,
        PromptKind::Judge,
        PromptKind::DistillerExtract,
        PromptKind::DistillerSchema,
        PromptKind::DistillerDedup,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptKind::Setup => "setup.md",
            PromptKind::RetrieverSummary => "retriever_summary.md",
            PromptKind::RetrieverSelect => "retriever_select.md",
            PromptKind::RetrieverAudit => "retriever_audit.md",
            PromptKind::Verifier => "verifier.md",
            PromptKind::Prosecutor => "prosecutor.md",
            PromptKind::Judge => "judge.md",
            PromptKind::DistillerExtract => "distiller_extract.md",
            PromptKind::DistillerSchema => "distiller_schema.md",
            PromptKind::DistillerDedup => "distiller_dedup.md",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            PromptKind::Setup => include_str!("../prompts/setup.md"),
            PromptKind::RetrieverSummary => include_str!("../prompts/retriever_summary.md"),
            PromptKind::RetrieverSelect => include_str!("../prompts/retriever_select.md"),
            PromptKind::RetrieverAudit => include_str!("../prompts/retriever_audit.md"),
            PromptKind::Verifier => include_str!("../prompts/verifier.md"),
            PromptKind::Prosecutor => include_str!("../prompts/prosecutor.md"),
            PromptKind::Judge => include_str!("../prompts/judge.md"),
            PromptKind::DistillerExtract => include_str!("../prompts/distiller_extract.md"),
            PromptKind::DistillerSchema => include_str!("../prompts/distiller_schema.md"),
            PromptKind::DistillerDedup => include_str!("../prompts/distiller_dedup.md"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prompts {
    templates: BTreeMap<PromptKind, String>,
}

impl Default for Prompts {
    fn default() -> Self {
        Self {
            templates: PromptKind::ALL
                .iter()
                .map(|k| (*k, k.builtin().to_string()))
                .collect(),
        }
    }
}

impl Prompts {
    /// Defaults, overridden by any matching file in `dir`.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut p = Self::default();
        for kind in PromptKind::ALL {
            let path = dir.join(kind.file_name());
            if path.is_file() {
                p.templates.insert(kind, std::fs::read_to_string(&path)?);
            }
        }
        Ok(p)
    }

    pub fn set(&mut self, kind: PromptKind, template: impl Into<String>) {
        self.templates.insert(kind, template.into());
    }

    pub fn raw(&self, kind: PromptKind) -> &str {
        &self.templates[&kind]
    }

    pub fn render(&self, kind: PromptKind, vars: &[(&str, &str)]) -> String {
        render(self.raw(kind), vars)
    }
}

pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}
