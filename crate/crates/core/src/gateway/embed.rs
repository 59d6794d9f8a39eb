use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{EmbeddingBackend, GatewayError};

/// Cosine similarity; zero-norm inputs give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub(crate) fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Seeded feature-hashing projection: stable across runs and platforms.
///
/// Each lowercase word and adjacent word pair is hashed (SHA-256 over the seed
/// and the feature) onto two signed coordinates. Texts sharing vocabulary land
/// close together, which is all the hermetic tests need.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    fn add_feature(&self, v: &mut [f64], feature: &str, weight: f64) {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(feature.as_bytes());
        let digest = h.finalize();
        for chunk in digest.chunks(8).take(2) {
            let word = u64::from_le_bytes(chunk.try_into().unwrap());
            let idx = (word >> 1) as usize % self.dim;
            let sign = if word & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign * weight;
        }
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let mut v = vec![0.0; self.dim];
        let words: Vec<String> = text
            .split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '.'))
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            self.add_feature(&mut v, "\u{0}empty", 1.0);
        }
        for w in &words {
            self.add_feature(&mut v, w, 1.0);
        }
        for pair in words.windows(2) {
            self.add_feature(&mut v, &format!("{} {}", pair[0], pair[1]), 0.5);
        }
        normalize(&mut v);
        Ok(v)
    }
}

/// Returns fixed vectors for known texts, then the `*` entry if present,
/// optionally falling back to hashing.
#[derive(Debug, Clone)]
pub struct FixtureEmbedder {
    dim: usize,
    map: HashMap<String, Vec<f64>>,
    fallback: Option<HashEmbedder>,
}

impl FixtureEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            map: HashMap::new(),
            fallback: None,
        }
    }

    pub fn with_fallback(mut self, seed: u64) -> Self {
        self.fallback = Some(HashEmbedder::new(self.dim, seed));
        self
    }

    /// Vector returned for any text without its own entry (stored under `*`).
    pub fn with_constant(mut self, v: Vec<f64>) -> Self {
        self.map.insert("*".into(), v);
        self
    }

    pub fn insert(&mut self, text: impl Into<String>, v: Vec<f64>) {
        self.map.insert(text.into(), v);
    }

    /// Loads a `{text: [floats]}` JSON map; the dimension is taken from the
    /// first vector unless `dim` is given.
    pub fn from_file(path: &Path, dim: Option<usize>) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let map: HashMap<String, Vec<f64>> =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let dim = dim
            .or_else(|| map.values().next().map(Vec::len))
            .ok_or_else(|| format!("{}: empty fixture map needs an explicit dimension", path.display()))?;
        if let Some((k, v)) = map.iter().find(|(_, v)| v.len() != dim) {
            return Err(format!("fixture vector for `{k}` has dimension {}, expected {dim}", v.len()));
        }
        Ok(Self {
            dim,
            map,
            fallback: None,
        })
    }
}

impl EmbeddingBackend for FixtureEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        if let Some(v) = self.map.get(text).or_else(|| self.map.get("*")) {
            return Ok(v.clone());
        }
        match &self.fallback {
            Some(h) => h.embed(text),
            None => Err(GatewayError::Failure(format!(
                "no fixture embedding for text `{}`",
                crate::text::truncate_head(text, 80)
            ))),
        }
    }
}
