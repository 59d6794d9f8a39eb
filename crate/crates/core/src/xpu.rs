//! Experience units: the record type, its telemetry, tiering, composite
//! ranking score and atom rendering.
//!
//! Everything in this module is a pure function over value types. Mutation of
//! telemetry happens only through [`crate::store::XpuStore`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while validating, rendering or merging experience units.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum XpuError {
    #[error("unknown atom kind `{0}`")]
    UnknownAtomKind(String),
    #[error("missing required atom argument `{0}`")]
    MissingArg(String),
    #[error("fused advice is empty")]
    EmptyFusedAdvice,
    #[error("invalid experience unit: {0}")]
    Invalid(String),
}

/// Opaque identifier of an experience unit.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct XpuId(pub String);

impl XpuId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for XpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for XpuId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Environment facets an experience applies to.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub python: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub os: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tools: Vec<String>,
}

/// Retrieval index of an experience: what the failure looks like.
///
/// Regexes use the syntax of the `regex` crate (RE2-style, no look-around or
/// back-references). Entries whose regexes fail to compile are rejected at
/// ingest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signals {
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default, rename = "regex")]
    pub regexes: Vec<String>,
    #[serde(default)]
    pub situation_triggers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<Context>,
}

impl Signals {
    /// Ordered set union: `self` first, then unseen items of `other`.
    pub fn union(&self, other: &Signals) -> Signals {
        let context = match (&self.context, &other.context) {
            (Some(a), Some(b)) => Some(Context {
                python: a.python.clone().or_else(|| b.python.clone()),
                os: union_list(&a.os, &b.os),
                tools: union_list(&a.tools, &b.tools),
            }),
            (a, b) => a.clone().or_else(|| b.clone()),
        };
        Signals {
            keywords: union_list(&self.keywords, &other.keywords),
            regexes: union_list(&self.regexes, &other.regexes),
            situation_triggers: union_list(&self.situation_triggers, &other.situation_triggers),
            context,
        }
    }

    /// Compiles every regex; reports the first one that fails.
    pub fn compile(&self) -> Result<Vec<Regex>, XpuError> {
        self.regexes
            .iter()
            .map(|r| Regex::new(r).map_err(|e| XpuError::Invalid(format!("regex `{r}`: {e}"))))
            .collect()
    }
}

pub(crate) fn union_list(a: &[String], b: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(a.len() + b.len());
    for item in a.iter().chain(b) {
        if !out.contains(item) {
            out.push(item.clone());
        }
    }
    out
}

/// The fixed roster of renderable atom kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", try_from = "String", into = "String")]
pub enum AtomKind {
    Shell,
    InspectFile,
    PipInstall,
    PipUninstall,
    AptInstall,
    SetEnv,
    WriteFile,
    GitClone,
    CreateVenv,
    PoetryInstall,
    Download,
    MakeBuild,
}

impl AtomKind {
    pub const ALL: [AtomKind; 12] = [
        AtomKind::Shell,
        AtomKind::InspectFile,
        AtomKind::PipInstall,
        AtomKind::PipUninstall,
        AtomKind::AptInstall,
        AtomKind::SetEnv,
        AtomKind::WriteFile,
        AtomKind::GitClone,
        AtomKind::CreateVenv,
        AtomKind::PoetryInstall,
        AtomKind::Download,
        AtomKind::MakeBuild,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AtomKind::Shell => "shell",
            AtomKind::InspectFile => "inspect_file",
            AtomKind::PipInstall => "pip_install",
            AtomKind::PipUninstall => "pip_uninstall",
            AtomKind::AptInstall => "apt_install",
            AtomKind::SetEnv => "set_env",
            AtomKind::WriteFile => "write_file",
            AtomKind::GitClone => "git_clone",
            AtomKind::CreateVenv => "create_venv",
            AtomKind::PoetryInstall => "poetry_install",
            AtomKind::Download => "download",
            AtomKind::MakeBuild => "make_build",
        }
    }

    /// Arguments that must be present and non-empty.
    pub fn required_args(self) -> &'static [&'static str] {
        match self {
            AtomKind::Shell => &["cmd"],
            AtomKind::InspectFile => &["path"],
            AtomKind::PipInstall | AtomKind::PipUninstall | AtomKind::AptInstall => &["package"],
            AtomKind::SetEnv => &["key", "value"],
            AtomKind::WriteFile => &["path", "content"],
            AtomKind::GitClone => &["url"],
            AtomKind::CreateVenv => &["path"],
            AtomKind::PoetryInstall | AtomKind::MakeBuild => &[],
            AtomKind::Download => &["url", "dest"],
        }
    }
}

impl fmt::Display for AtomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AtomKind {
    type Err = XpuError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AtomKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| XpuError::UnknownAtomKind(s.to_string()))
    }
}

impl TryFrom<String> for AtomKind {
    type Error = XpuError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<AtomKind> for String {
    fn from(k: AtomKind) -> Self {
        k.as_str().to_string()
    }
}

/// One typed executable operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Atom {
    #[serde(rename = "name")]
    pub kind: AtomKind,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
}

impl Atom {
    pub fn new(kind: AtomKind, args: &[(&str, &str)]) -> Self {
        Self {
            kind,
            args: args
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn shell(cmd: &str) -> Self {
        Self::new(AtomKind::Shell, &[("cmd", cmd)])
    }

    pub fn validate(&self) -> Result<(), XpuError> {
        for name in self.kind.required_args() {
            match self.args.get(*name) {
                Some(v) if !v.trim().is_empty() => {}
                // set_env may legitimately carry an empty value
                Some(_) if self.kind == AtomKind::SetEnv && *name == "value" => {}
                _ => return Err(XpuError::MissingArg((*name).to_string())),
            }
        }
        Ok(())
    }
}

/// Deployment record of an experience.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Telemetry {
    pub hits: u64,
    pub successes: u64,
    pub failures: u64,
}

impl Telemetry {
    pub const ZERO: Telemetry = Telemetry {
        hits: 0,
        successes: 0,
        failures: 0,
    };

    pub fn new(hits: u64, successes: u64, failures: u64) -> Self {
        Self {
            hits,
            successes,
            failures,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.successes
            .checked_add(self.failures)
            .is_some_and(|s| s <= self.hits)
    }

    pub fn success_rate(&self) -> f64 {
        success_rate(self)
    }
}

impl std::ops::Add for Telemetry {
    type Output = Telemetry;

    fn add(self, rhs: Telemetry) -> Telemetry {
        Telemetry {
            hits: self.hits + rhs.hits,
            successes: self.successes + rhs.successes,
            failures: self.failures + rhs.failures,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Golden,
    Normal,
    Cold,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Golden => "golden",
            Tier::Normal => "normal",
            Tier::Cold => "cold",
        })
    }
}

/// Tier cut-offs and multiplicative boosts used by the composite score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TierThresholds {
    pub golden_min_rate: f64,
    pub cold_max_rate: f64,
    pub min_hits: u64,
    pub golden_boost: f64,
    pub cold_boost: f64,
    pub normal_boost: f64,
}

impl Default for TierThresholds {
    fn default() -> Self {
        Self {
            golden_min_rate: 0.2,
            cold_max_rate: 0.1,
            min_hits: 5,
            golden_boost: 1.5,
            cold_boost: 0.6,
            normal_boost: 1.0,
        }
    }
}

impl TierThresholds {
    pub fn validate(&self) -> Result<(), XpuError> {
        let (a, b) = (self.golden_min_rate, self.cold_max_rate);
        if !(0.0 <= b && b < a && a <= 1.0) {
            return Err(XpuError::Invalid(format!(
                "tier thresholds must satisfy 0 <= cold_max_rate < golden_min_rate <= 1 (got {b}, {a})"
            )));
        }
        if [self.golden_boost, self.cold_boost, self.normal_boost]
            .iter()
            .any(|x| !(x.is_finite() && *x > 0.0))
        {
            return Err(XpuError::Invalid("tier boosts must be positive".into()));
        }
        Ok(())
    }

    pub fn boost(&self, tier: Tier) -> f64 {
        match tier {
            Tier::Golden => self.golden_boost,
            Tier::Normal => self.normal_boost,
            Tier::Cold => self.cold_boost,
        }
    }
}

/// `successes / max(hits, 1)`.
pub fn success_rate(t: &Telemetry) -> f64 {
    t.successes as f64 / t.hits.max(1) as f64
}

pub fn assign_tier(t: &Telemetry, th: &TierThresholds) -> Tier {
    if t.hits < th.min_hits {
        return Tier::Normal;
    }
    let rate = success_rate(t);
    if rate >= th.golden_min_rate {
        Tier::Golden
    } else if rate < th.cold_max_rate {
        Tier::Cold
    } else {
        Tier::Normal
    }
}

/// Similarity weighted by historical success and the tier boost.
pub fn composite_score(sim: f64, t: &Telemetry, th: &TierThresholds) -> f64 {
    sim * (1.0 + success_rate(t)) * th.boost(assign_tier(t, th))
}

fn quote(s: &str) -> String {
    // `=` is harmless outside the command-word position, keep specs like pkg==1.0 bare
    let bare = !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || "=,._+:@%/-".contains(c));
    if bare {
        s.to_string()
    } else {
        shell_words::quote(s).into_owned()
    }
}

fn arg<'a>(atom: &'a Atom, name: &str) -> Result<&'a str, XpuError> {
    match atom.args.get(name) {
        Some(v) if !v.trim().is_empty() => Ok(v.as_str()),
        _ => Err(XpuError::MissingArg(name.to_string())),
    }
}

fn opt_arg<'a>(atom: &'a Atom, ctx: &'a BTreeMap<String, String>, name: &str) -> Option<&'a str> {
    atom.args
        .get(name)
        .or_else(|| ctx.get(name))
        .map(String::as_str)
        .filter(|v| !v.trim().is_empty())
}

/// Renders an atom into one shell command.
///
/// `ctx` supplies defaults for optional arguments (for example `python` for
/// `create_venv` or `pip` for the pip atoms); atom arguments take precedence.
pub fn render_atom(atom: &Atom, ctx: &BTreeMap<String, String>) -> Result<String, XpuError> {
    let pip = opt_arg(atom, ctx, "pip").unwrap_or("pip");
    let cmd = match atom.kind {
        AtomKind::Shell => arg(atom, "cmd")?.to_string(),
        AtomKind::InspectFile => format!("cat {}", quote(arg(atom, "path")?)),
        AtomKind::PipInstall => {
            let package = arg(atom, "package")?;
            let spec = match opt_arg(atom, ctx, "version") {
                Some(v) => format!("{package}=={v}"),
                None => package.to_string(),
            };
            format!("{pip} install {}", quote(&spec))
        }
        AtomKind::PipUninstall => format!("{pip} uninstall -y {}", quote(arg(atom, "package")?)),
        AtomKind::AptInstall => format!("apt-get install -y {}", quote(arg(atom, "package")?)),
        AtomKind::SetEnv => {
            let key = arg(atom, "key")?;
            let value = atom.args.get("value").map(String::as_str).unwrap_or("");
            format!("export {key}={}", quote(value))
        }
        AtomKind::WriteFile => format!(
            "printf '%s' {} > {}",
            quote(arg(atom, "content")?),
            quote(arg(atom, "path")?)
        ),
        AtomKind::GitClone => {
            let url = arg(atom, "url")?;
            let mut cmd = format!("git clone {}", quote(url));
            let dest = opt_arg(atom, ctx, "dest");
            if let Some(dest) = dest {
                cmd.push(' ');
                cmd.push_str(&quote(dest));
            }
            if let Some(rev) = opt_arg(atom, ctx, "rev") {
                let dir = dest
                    .map(str::to_string)
                    .unwrap_or_else(|| repo_dir_from_url(url));
                cmd.push_str(&format!(" && git -C {} checkout {}", quote(&dir), quote(rev)));
            }
            cmd
        }
        AtomKind::CreateVenv => {
            let python = opt_arg(atom, ctx, "python").unwrap_or("python3");
            format!("{python} -m venv {}", quote(arg(atom, "path")?))
        }
        AtomKind::PoetryInstall => match opt_arg(atom, ctx, "extra_args") {
            Some(extra) => format!("poetry install --no-interaction {extra}"),
            None => "poetry install --no-interaction".to_string(),
        },
        AtomKind::Download => format!(
            "curl -fsSL {} -o {}",
            quote(arg(atom, "url")?),
            quote(arg(atom, "dest")?)
        ),
        AtomKind::MakeBuild => {
            let mut cmd = "make".to_string();
            if let Some(dir) = opt_arg(atom, ctx, "dir") {
                cmd.push_str(&format!(" -C {}", quote(dir)));
            }
            if let Some(target) = opt_arg(atom, ctx, "target") {
                cmd.push(' ');
                cmd.push_str(&quote(target));
            }
            cmd
        }
    };
    Ok(cmd)
}

fn repo_dir_from_url(url: &str) -> String {
    let last = url.trim_end_matches('/').rsplit('/').next().unwrap_or(url);
    last.trim_end_matches(".git").to_string()
}

/// A structured experience: failure signals, advice, executable atoms and a
/// deployment record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Xpu {
    #[serde(default, skip_serializing_if = "XpuId::is_empty")]
    pub id: XpuId,
    #[serde(default)]
    pub signals: Signals,
    #[serde(default)]
    pub advice_nl: Vec<String>,
    #[serde(default)]
    pub atoms: Vec<Atom>,
    #[serde(default)]
    pub telemetry: Telemetry,
    /// Source repositories the entry was distilled from.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<String>,
}

impl Xpu {
    /// Checks the schema rules that apply to any entry, stored or candidate.
    pub fn validate(&self) -> Result<(), XpuError> {
        if self.advice_nl.iter().all(|a| a.trim().is_empty()) {
            return Err(XpuError::Invalid("advice_nl is empty".into()));
        }
        self.signals.compile()?;
        for atom in &self.atoms {
            atom.validate().map_err(|e| {
                XpuError::Invalid(format!("atom `{}`: {e}", atom.kind))
            })?;
        }
        if !self.telemetry.is_consistent() {
            return Err(XpuError::Invalid(format!(
                "telemetry violates successes + failures <= hits: {:?}",
                self.telemetry
            )));
        }
        Ok(())
    }

    /// Renders every atom, in order.
    pub fn render_atoms(&self, ctx: &BTreeMap<String, String>) -> Result<Vec<String>, XpuError> {
        self.atoms.iter().map(|a| render_atom(a, ctx)).collect()
    }
}

/// Fuses a confirmed duplicate into `primary`.
pub fn merge_xpus(primary: &Xpu, duplicate: &Xpu, fused_advice: Vec<String>) -> Result<Xpu, XpuError> {
    if fused_advice.iter().all(|a| a.trim().is_empty()) {
        return Err(XpuError::EmptyFusedAdvice);
    }
    let mut atoms = primary.atoms.clone();
    for atom in &duplicate.atoms {
        if !atoms.contains(atom) {
            atoms.push(atom.clone());
        }
    }
    Ok(Xpu {
        id: primary.id.clone(),
        signals: primary.signals.union(&duplicate.signals),
        advice_nl: fused_advice,
        atoms,
        telemetry: primary.telemetry + duplicate.telemetry,
        provenance: union_list(&primary.provenance, &duplicate.provenance),
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// The poetry lock-conflict experience used throughout the tests.
    pub fn poetry_lock_conflict() -> Xpu {
        serde_json::from_str(POETRY_LOCK_JSON).unwrap()
    }

    pub const POETRY_LOCK_JSON: &str = r#"{
      "id": "xpu_poetry_lock_conflict",
      "signals": {
        "keywords": ["poetry.lock", "pyproject.toml", "dependency conflict"],
        "regex": ["Because .* depends on .*", "version solving failed"],
        "situation_triggers": [
          "Poetry-managed project where manual pip fallback risks losing the lock graph"
        ]
      },
      "advice_nl": [
        "Do not bypass Poetry with manual pip installation.",
        "Preserve the locked dependency graph and resolve the conflict inside Poetry.",
        "Run Poetry installation end-to-end after checking the lock file."
      ],
      "atoms": [
        {"name": "inspect_file", "args": {"path": "pyproject.toml"}},
        {"name": "inspect_file", "args": {"path": "poetry.lock"}},
        {"name": "shell", "args": {"cmd": "poetry install --no-interaction"}}
      ],
      "telemetry": {"hits": 63, "successes": 37, "failures": 15}
    }"#;
}
