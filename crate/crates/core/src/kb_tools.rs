//! Knowledge-base utilities: synthetic noise for robustness runs, and stats.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::store::{StoredEntry, XpuStore};
use crate::xpu::{assign_tier, success_rate, union_list, Telemetry, Tier, TierThresholds, Xpu, XpuId};

#[derive(Debug, thiserror::Error)]
pub enum KbToolsError {
    #[error("the store has no entries to derive noise from")]
    EmptyStore,
    #[error("bad noise configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseClass {
    ContextPerturbation,
    CrossGrafting,
    GeneralizationBlur,
}

impl NoiseClass {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseClass::ContextPerturbation => "context_perturbation",
            NoiseClass::CrossGrafting => "cross_grafting",
            NoiseClass::GeneralizationBlur => "generalization_blur",
        }
    }

    /// Provenance tag carried by generated entries.
    pub fn tag(self) -> String {
        format!("noise:{}", self.as_str())
    }
}

/// Fixed vocabulary used by the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseTemplates {
    pub advice_templates: Vec<String>,
    pub keyword_groups: Vec<Vec<String>>,
    pub python_versions: Vec<String>,
    pub os_pool: Vec<String>,
    pub extra_tools: Vec<String>,
}

impl Default for NoiseTemplates {
    fn default() -> Self {
        serde_json::from_str(include_str!("../data/noise_templates.json")).expect("bundled noise templates")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub context_perturbation: usize,
    pub cross_grafting: usize,
    pub generalization_blur: usize,
    pub seed: u64,
    /// Parent-child cosine is drawn uniformly from this range.
    pub min_cosine: f64,
    pub max_cosine: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            context_perturbation: 600,
            cross_grafting: 450,
            generalization_blur: 450,
            seed: 0,
            min_cosine: 0.92,
            max_cosine: 0.98,
        }
    }
}

impl NoiseConfig {
    pub fn total(&self) -> usize {
        self.context_perturbation + self.cross_grafting + self.generalization_blur
    }

    fn validate(&self) -> Result<(), KbToolsError> {
        if !(0.0 < self.min_cosine && self.min_cosine <= self.max_cosine && self.max_cosine <= 1.0) {
            return Err(KbToolsError::Config(format!(
                "cosine range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.min_cosine, self.max_cosine
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub class: NoiseClass,
    /// The entry whose embedding neighbourhood the child shares.
    pub parent: XpuId,
    pub xpu: Xpu,
    pub embedding: Vec<f64>,
}

/// A unit vector at cosine `target` from `parent`, in a random direction.
pub fn jitter(parent: &[f64], target: f64, rng: &mut impl Rng) -> Vec<f64> {
    let norm = parent.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || parent.len() < 2 {
        return parent.to_vec();
    }
    let p: Vec<f64> = parent.iter().map(|x| x / norm).collect();
    loop {
        let mut u: Vec<f64> = (0..p.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let dot: f64 = u.iter().zip(&p).map(|(a, b)| a * b).sum();
        for (ui, pi) in u.iter_mut().zip(&p) {
            *ui -= dot * pi;
        }
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if un < 1e-9 {
            continue;
        }
        let sin = (1.0 - target * target).max(0.0).sqrt();
        return p.iter().zip(&u).map(|(pi, ui)| target * pi + sin * ui / un).collect();
    }
}

fn noise_xpu(mut x: Xpu, class: NoiseClass) -> Xpu {
    x.id = XpuId::default();
    x.telemetry = Telemetry::ZERO;
    x.provenance.push(class.tag());
    x
}

/// Generates the three noise classes from the real entries of `store`.
pub fn generate_noise(store: &XpuStore, cfg: &NoiseConfig, templates: &NoiseTemplates) -> Result<Vec<NoiseEntry>, KbToolsError> {
    cfg.validate()?;
    let real: Vec<StoredEntry> = store.entries();
    if real.is_empty() {
        return Err(KbToolsError::EmptyStore);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.total());
    let child = |parent: &StoredEntry, x: Xpu, class: NoiseClass, rng: &mut ChaCha8Rng| {
        let target = rng.gen_range(cfg.min_cosine..=cfg.max_cosine);
        NoiseEntry {
            class,
            parent: parent.xpu.id.clone(),
            xpu: noise_xpu(x, class),
            embedding: jitter(&parent.embedding, target, rng),
        }
    };

    for i in 0..cfg.context_perturbation {
        let parent = &real[i % real.len()];
        let mut x = parent.xpu.clone();
        let mut ctx = x.signals.context.take().unwrap_or_default();
        ctx.python = templates.python_versions.choose(&mut rng).cloned();
        let missing: Vec<&String> = templates.os_pool.iter().filter(|o| !ctx.os.contains(o)).collect();
        if let Some(os) = missing.choose(&mut rng) {
            ctx.os.push((*os).clone());
        }
        if let Some(tool) = templates.extra_tools.choose(&mut rng) {
            if !ctx.tools.contains(tool) {
                ctx.tools.push(tool.clone());
            }
        }
        x.signals.context = Some(ctx);
        out.push(child(parent, x, NoiseClass::ContextPerturbation, &mut rng));
    }

    for _ in 0..cfg.cross_grafting {
        let a = &real[rng.gen_range(0..real.len())];
        let b = &real[rng.gen_range(0..real.len())];
        let c = &real[rng.gen_range(0..real.len())];
        let donor = [a, b, c][rng.gen_range(0..3)];
        let atoms = donor.xpu.atoms.iter().filter(|_| rng.gen_bool(0.5)).cloned().collect();
        let mut signals = b.xpu.signals.clone();
        signals.context = a.xpu.signals.context.clone();
        let x = Xpu {
            id: XpuId::default(),
            signals,
            advice_nl: c.xpu.advice_nl.clone(),
            atoms,
            telemetry: Telemetry::ZERO,
            provenance: union_list(&union_list(&b.xpu.provenance, &a.xpu.provenance), &c.xpu.provenance),
        };
        out.push(child(b, x, NoiseClass::CrossGrafting, &mut rng));
    }

    for _ in 0..cfg.generalization_blur {
        let parent = &real[rng.gen_range(0..real.len())];
        let mut x = parent.xpu.clone();
        x.advice_nl = vec![templates
            .advice_templates
            .choose(&mut rng)
            .cloned()
            .unwrap_or_else(|| "Check the environment.".into())];
        x.signals.keywords = templates.keyword_groups.choose(&mut rng).cloned().unwrap_or_default();
        x.atoms.clear();
        out.push(child(parent, x, NoiseClass::GeneralizationBlur, &mut rng));
    }
    Ok(out)
}

/// Copies `noise` into `store`; returns the assigned ids.
pub fn ingest_noise(store: &XpuStore, noise: &[NoiseEntry]) -> Result<Vec<XpuId>, crate::store::StoreError> {
    noise.iter().map(|n| store.ingest(n.xpu.clone(), n.embedding.clone())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbStats {
    pub entries: usize,
    pub tiers: BTreeMap<Tier, usize>,
    pub mean_success_rate: f64,
    pub dimension: usize,
}

pub fn kb_stats(store: &XpuStore, th: &TierThresholds) -> KbStats {
    let entries = store.entries();
    let mut tiers: BTreeMap<Tier, usize> = [Tier::Golden, Tier::Normal, Tier::Cold].into_iter().map(|t| (t, 0)).collect();
    let mut rate_sum = 0.0;
    for e in &entries {
        *tiers.entry(assign_tier(&e.xpu.telemetry, th)).or_default() += 1;
        rate_sum += success_rate(&e.xpu.telemetry);
    }
    KbStats {
        entries: entries.len(),
        tiers,
        mean_success_rate: if entries.is_empty() { 0.0 } else { rate_sum / entries.len() as f64 },
        dimension: store.dimension(),
    }
}
