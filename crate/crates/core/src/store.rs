//! Embedded experience store: an exact cosine index over JSON Lines storage.
//!
//! Reads take a shared lock; ingests and telemetry updates take the write
//! lock, so concurrent runs sharing one store never lose an increment.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::cosine;
use crate::xpu::{composite_score, Telemetry, Tier, TierThresholds, Xpu, XpuId};

pub const DEFAULT_DIMENSION: usize = 1536;
pub const DUPLICATE_THRESHOLD: f64 = 0.85;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("embedding dimension {got} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid experience unit: {0}")]
    InvalidXpu(String),
    #[error("unknown experience id `{0}`")]
    UnknownId(XpuId),
    #[error("telemetry update would make a counter negative for `{0}`")]
    NegativeCounter(XpuId),
    #[error("telemetry update would break successes + failures <= hits for `{0}`")]
    InconsistentTelemetry(XpuId),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt record at line {line}: {reason}")]
    CorruptRecord { line: usize, reason: String },
}

/// One stored experience with its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEntry {
    pub xpu: Xpu,
    pub embedding: Vec<f64>,
}

/// Signed counter deltas applied atomically to one entry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TelemetryDelta {
    pub hits: i64,
    pub successes: i64,
    pub failures: i64,
}

impl TelemetryDelta {
    pub const HIT: TelemetryDelta = TelemetryDelta {
        hits: 1,
        successes: 0,
        failures: 0,
    };

    pub fn new(hits: i64, successes: i64, failures: i64) -> Self {
        Self {
            hits,
            successes,
            failures,
        }
    }
}

/// A ranked retrieval candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCandidate {
    pub xpu_id: XpuId,
    pub sim: f64,
    pub score: f64,
    pub tier: Tier,
    pub telemetry: Telemetry,
}

#[derive(Debug, Default)]
struct Inner {
    entries: BTreeMap<XpuId, StoredEntry>,
    next_id: u64,
}

#[derive(Debug)]
pub struct XpuStore {
    dim: usize,
    inner: RwLock<Inner>,
}

fn check_embedding(dim: usize, v: &[f64]) -> Result<(), StoreError> {
    if v.len() != dim {
        return Err(StoreError::DimensionMismatch {
            expected: dim,
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(StoreError::InvalidXpu("embedding has non-finite components".into()));
    }
    Ok(())
}

fn apply(t: Telemetry, d: TelemetryDelta) -> Option<Telemetry> {
    let add = |x: u64, dx: i64| -> Option<u64> {
        let v = x as i128 + dx as i128;
        (v >= 0).then_some(v as u64)
    };
    Some(Telemetry {
        hits: add(t.hits, d.hits)?,
        successes: add(t.successes, d.successes)?,
        failures: add(t.failures, d.failures)?,
    })
}

impl XpuStore {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "store dimension must be positive");
        Self {
            dim,
            inner: RwLock::new(Inner::default()),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &XpuId) -> Option<StoredEntry> {
        self.inner.read().unwrap().entries.get(id).cloned()
    }

    pub fn telemetry(&self, id: &XpuId) -> Option<Telemetry> {
        self.inner
            .read()
            .unwrap()
            .entries
            .get(id)
            .map(|e| e.xpu.telemetry)
    }

    /// Snapshot of all entries in id order.
    pub fn entries(&self) -> Vec<StoredEntry> {
        self.inner.read().unwrap().entries.values().cloned().collect()
    }

    /// Inserts or replaces an entry; assigns `xpu_NNNNNN` when the id is empty.
    pub fn ingest(&self, mut xpu: Xpu, embedding: Vec<f64>) -> Result<XpuId, StoreError> {
        check_embedding(self.dim, &embedding)?;
        xpu.validate().map_err(|e| StoreError::InvalidXpu(e.to_string()))?;
        let mut inner = self.inner.write().unwrap();
        if xpu.id.is_empty() {
            loop {
                inner.next_id += 1;
                let candidate = XpuId(format!("xpu_{:06}", inner.next_id));
                if !inner.entries.contains_key(&candidate) {
                    xpu.id = candidate;
                    break;
                }
            }
        }
        let id = xpu.id.clone();
        inner.entries.insert(id.clone(), StoredEntry { xpu, embedding });
        Ok(id)
    }

    /// Replaces the record of an existing entry, keeping its embedding.
    pub fn replace_xpu(&self, xpu: Xpu) -> Result<(), StoreError> {
        xpu.validate().map_err(|e| StoreError::InvalidXpu(e.to_string()))?;
        let mut inner = self.inner.write().unwrap();
        let entry = inner
            .entries
            .get_mut(&xpu.id)
            .ok_or_else(|| StoreError::UnknownId(xpu.id.clone()))?;
        entry.xpu = xpu;
        Ok(())
    }

    pub fn remove(&self, id: &XpuId) -> Option<StoredEntry> {
        self.inner.write().unwrap().entries.remove(id)
    }

    /// Exact cosine k-nearest neighbours; ties go to the smaller id.
    pub fn knn(&self, query: &[f64], n: usize) -> Result<Vec<(XpuId, f64)>, StoreError> {
        check_embedding(self.dim, query)?;
        let inner = self.inner.read().unwrap();
        let mut scored: Vec<(XpuId, f64)> = inner
            .entries
            .iter()
            .map(|(id, e)| (id.clone(), cosine(query, &e.embedding)))
            .collect();
        sort_desc(&mut scored);
        scored.truncate(n);
        Ok(scored)
    }

    /// Top-`n` by similarity, re-ranked by composite score (id tie-break).
    pub fn ranked_candidates(
        &self,
        query: &[f64],
        n: usize,
        th: &TierThresholds,
    ) -> Result<Vec<RetrievalCandidate>, StoreError> {
        let near = self.knn(query, n)?;
        let inner = self.inner.read().unwrap();
        let mut out: Vec<RetrievalCandidate> = near
            .into_iter()
            .filter_map(|(id, sim)| {
                let t = inner.entries.get(&id)?.xpu.telemetry;
                Some(RetrievalCandidate {
                    score: composite_score(sim, &t, th),
                    tier: crate::xpu::assign_tier(&t, th),
                    xpu_id: id,
                    sim,
                    telemetry: t,
                })
            })
            .collect();
        out.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.xpu_id.cmp(&b.xpu_id))
        });
        Ok(out)
    }

    /// Entries with similarity at or above `threshold`, most similar first.
    pub fn find_duplicates(&self, embedding: &[f64], threshold: f64) -> Result<Vec<(XpuId, f64)>, StoreError> {
        check_embedding(self.dim, embedding)?;
        let inner = self.inner.read().unwrap();
        let mut hits: Vec<(XpuId, f64)> = inner
            .entries
            .iter()
            .map(|(id, e)| (id.clone(), cosine(embedding, &e.embedding)))
            .filter(|(_, s)| *s >= threshold)
            .collect();
        sort_desc(&mut hits);
        Ok(hits)
    }

    /// Applies `delta` as one atomic effect and returns the new counters.
    pub fn update_telemetry(&self, id: &XpuId, delta: TelemetryDelta) -> Result<Telemetry, StoreError> {
        let mut inner = self.inner.write().unwrap();
        let entry = inner
            .entries
            .get_mut(id)
            .ok_or_else(|| StoreError::UnknownId(id.clone()))?;
        let next = apply(entry.xpu.telemetry, delta).ok_or_else(|| StoreError::NegativeCounter(id.clone()))?;
        if !next.is_consistent() {
            return Err(StoreError::InconsistentTelemetry(id.clone()));
        }
        entry.xpu.telemetry = next;
        Ok(next)
    }

    /// Removes every entry whose provenance names one of `repos`.
    pub fn prune_provenance(&self, repos: &[String]) -> Vec<XpuId> {
        let wanted: BTreeSet<&str> = repos.iter().map(String::as_str).collect();
        let mut inner = self.inner.write().unwrap();
        let doomed: Vec<XpuId> = inner
            .entries
            .values()
            .filter(|e| e.xpu.provenance.iter().any(|p| wanted.contains(p.as_str())))
            .map(|e| e.xpu.id.clone())
            .collect();
        for id in &doomed {
            inner.entries.remove(id);
        }
        doomed
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let io = |source| StoreError::IoFailure {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut out = BufWriter::new(File::create(&tmp).map_err(io)?);
            for entry in self.inner.read().unwrap().entries.values() {
                serde_json::to_writer(&mut out, entry).map_err(|e| io(e.into()))?;
                out.write_all(b"\n").map_err(io)?;
            }
            out.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    /// Loads a JSON Lines store. Blank lines are skipped; the dimension comes
    /// from `dim` or, failing that, the first record.
    pub fn load(path: &Path, dim: Option<usize>) -> Result<Self, StoreError> {
        let io = |source| StoreError::IoFailure {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: StoredEntry = serde_json::from_str(&line).map_err(|e| StoreError::CorruptRecord {
                line: idx + 1,
                reason: e.to_string(),
            })?;
            records.push((idx + 1, entry));
        }
        let dim = dim
            .or_else(|| records.first().map(|(_, e)| e.embedding.len()))
            .unwrap_or(DEFAULT_DIMENSION);
        let store = XpuStore::new(dim);
        for (line, entry) in records {
            if entry.xpu.id.is_empty() {
                return Err(StoreError::CorruptRecord {
                    line,
                    reason: "record has no id".into(),
                });
            }
            store
                .ingest(entry.xpu, entry.embedding)
                .map_err(|e| StoreError::CorruptRecord {
                    line,
                    reason: e.to_string(),
                })?;
        }
        Ok(store)
    }
}

fn sort_desc(v: &mut [(XpuId, f64)]) {
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xpu::fixtures::poetry_lock_conflict;
    use crate::xpu::Signals;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn xpu(id: &str) -> Xpu {
        Xpu {
            id: XpuId::new(id),
            signals: Signals::default(),
            advice_nl: vec![format!("advice for {id}")],
            atoms: vec![],
            telemetry: Telemetry::ZERO,
            provenance: vec![],
        }
    }

    fn unit(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    /// Vector at cosine `c` to `unit(dim, 0)`.
    fn at_cos(dim: usize, c: f64) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[0] = c;
        v[1] = (1.0 - c * c).sqrt();
        v
    }

    #[test]
    fn ingest_assigns_and_replaces() {
        let store = XpuStore::new(DEFAULT_DIMENSION);
        let mut x = poetry_lock_conflict();
        x.id = XpuId::default();
        let id = store.ingest(x, unit(DEFAULT_DIMENSION, 0)).unwrap();
        assert_eq!(id.as_str(), "xpu_000001");
        assert!(matches!(
            store.ingest(xpu("a"), vec![0.0; 8]),
            Err(StoreError::DimensionMismatch { expected: 1536, got: 8 })
        ));
        store.ingest(xpu("a"), unit(DEFAULT_DIMENSION, 1)).unwrap();
        assert_eq!(store.len(), 2);
        store.ingest(xpu("a"), unit(DEFAULT_DIMENSION, 2)).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.get(&"a".into()).unwrap().embedding, unit(DEFAULT_DIMENSION, 2));
        let mut bad = xpu("b");
        bad.advice_nl.clear();
        assert!(matches!(
            store.ingest(bad, unit(DEFAULT_DIMENSION, 0)),
            Err(StoreError::InvalidXpu(_))
        ));
    }

    #[test]
    fn knn_examples() {
        let store = XpuStore::new(4);
        assert!(store.knn(&unit(4, 0), 3).unwrap().is_empty());
        store.ingest(xpu("a"), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let got = store.knn(&[1.0, 2.0, 3.0, 4.0], 1).unwrap();
        assert_eq!(got[0].0.as_str(), "a");
        assert!((got[0].1 - 1.0).abs() < 1e-9);

        let single = XpuStore::new(4);
        single.ingest(xpu("z"), unit(4, 0)).unwrap();
        assert_eq!(single.knn(&unit(4, 1), 5).unwrap()[0].1, 0.0);
        assert!(single.knn(&[1.0], 1).is_err());
    }

    #[test]
    fn knn_ties_break_by_id() {
        let store = XpuStore::new(2);
        store.ingest(xpu("b"), vec![1.0, 0.0]).unwrap();
        store.ingest(xpu("a"), vec![2.0, 0.0]).unwrap();
        let ids: Vec<_> = store.knn(&[1.0, 0.0], 2).unwrap().into_iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![XpuId::new("a"), XpuId::new("b")]);
    }

    #[test]
    fn telemetry_updates() {
        let store = XpuStore::new(2);
        store.ingest(poetry_lock_conflict(), vec![1.0, 0.0]).unwrap();
        let id = XpuId::new("xpu_poetry_lock_conflict");
        let t = store.update_telemetry(&id, TelemetryDelta::new(0, 1, 0)).unwrap();
        assert_eq!(t, Telemetry::new(63, 38, 15));
        assert_eq!(store.update_telemetry(&id, TelemetryDelta::default()).unwrap(), t);
        assert!(matches!(
            store.update_telemetry(&"nope".into(), TelemetryDelta::HIT),
            Err(StoreError::UnknownId(_))
        ));
        assert!(matches!(
            store.update_telemetry(&id, TelemetryDelta::new(-100, 0, 0)),
            Err(StoreError::NegativeCounter(_))
        ));
        assert!(matches!(
            store.update_telemetry(&id, TelemetryDelta::new(0, 20, 0)),
            Err(StoreError::InconsistentTelemetry(_))
        ));
        assert_eq!(store.telemetry(&id).unwrap(), t);
    }

    #[test]
    fn concurrent_hits_are_not_lost() {
        let store = Arc::new(XpuStore::new(2));
        store.ingest(xpu("a"), vec![1.0, 0.0]).unwrap();
        let handles: Vec<_> = (0..2)
            .map(|_| {
                let s = store.clone();
                std::thread::spawn(move || s.update_telemetry(&"a".into(), TelemetryDelta::HIT).unwrap())
            })
            .collect();
        handles.into_iter().for_each(|h| {
            h.join().unwrap();
        });
        assert_eq!(store.telemetry(&"a".into()).unwrap(), Telemetry::new(2, 0, 0));
    }

    #[test]
    fn duplicate_prefilter() {
        let store = XpuStore::new(4);
        assert!(store.find_duplicates(&unit(4, 0), DUPLICATE_THRESHOLD).unwrap().is_empty());
        store.ingest(xpu("hi"), at_cos(4, 0.86)).unwrap();
        store.ingest(xpu("lo"), at_cos(4, 0.84)).unwrap();
        let d = store.find_duplicates(&unit(4, 0), DUPLICATE_THRESHOLD).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].0.as_str(), "hi");
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let store = XpuStore::new(3);
        store.ingest(poetry_lock_conflict(), vec![0.1, 0.2, 0.3]).unwrap();
        store.ingest(xpu("b"), vec![1.0 / 3.0, -2.5e-17, 7.0]).unwrap();
        let mut c = xpu("c");
        c.provenance = vec!["github.com/o/r".into()];
        store.ingest(c, vec![0.0, 0.0, 1.0]).unwrap();
        store.save(&path).unwrap();
        let back = XpuStore::load(&path, None).unwrap();
        assert_eq!(back.entries(), store.entries());
        assert_eq!(back.dimension(), 3);
        // ids assigned after a reload must not collide
        let fresh = back.ingest(xpu(""), vec![1.0, 1.0, 1.0]).unwrap();
        assert!(!["b", "c", "xpu_poetry_lock_conflict"].contains(&fresh.as_str()));
    }

    #[test]
    fn corrupt_and_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let store = XpuStore::new(3);
        store.ingest(xpu("a"), vec![0.1, 0.2, 0.3]).unwrap();
        store.ingest(xpu("b"), vec![0.1, 0.2, 0.4]).unwrap();
        store.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 10]).unwrap();
        assert!(matches!(
            XpuStore::load(&path, None),
            Err(StoreError::CorruptRecord { line: 2, .. })
        ));
        std::fs::write(&path, "").unwrap();
        let empty = XpuStore::load(&path, Some(8)).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.dimension(), 8);
        assert!(matches!(
            XpuStore::load(&dir.path().join("missing"), None),
            Err(StoreError::IoFailure { .. })
        ));
    }

    #[test]
    fn prune_by_provenance() {
        let store = XpuStore::new(2);
        for (id, prov) in [("a", "r1"), ("b", "r2"), ("c", "r3")] {
            let mut x = xpu(id);
            x.provenance = vec![prov.into()];
            store.ingest(x, vec![1.0, 0.0]).unwrap();
        }
        let removed = store.prune_provenance(&["r1".into(), "r3".into()]);
        assert_eq!(removed.len(), 2);
        assert_eq!(store.len(), 1);
        assert!(store
            .entries()
            .iter()
            .all(|e| !e.xpu.provenance.iter().any(|p| p == "r1" || p == "r3")));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn knn_matches_exhaustive_scan(
            vecs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 1..40),
            query in prop::collection::vec(-1.0f64..1.0, 6),
            n in 1usize..50,
        ) {
            let store = XpuStore::new(6);
            for (i, v) in vecs.iter().enumerate() {
                store.ingest(xpu(&format!("e{i:03}")), v.clone()).unwrap();
            }
            // oracle: independent dot-product scan
            let mut oracle: Vec<(String, f64)> = vecs.iter().enumerate().map(|(i, v)| {
                let dot: f64 = v.iter().zip(&query).map(|(a, b)| a * b).sum();
                let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nq: f64 = query.iter().map(|a| a * a).sum::<f64>().sqrt();
                let s = if nv == 0.0 || nq == 0.0 { 0.0 } else { dot / (nv * nq) };
                (format!("e{i:03}"), s)
            }).collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            oracle.truncate(n);
            let got = store.knn(&query, n).unwrap();
            prop_assert_eq!(got.len(), oracle.len());
            for ((gid, gs), (oid, os)) in got.iter().zip(&oracle) {
                prop_assert!((gs - os).abs() < 1e-12);
                if (gs - os).abs() < 1e-12 && gid.as_str() != oid {
                    // only permissible when the two similarities tie numerically
                    let other = oracle.iter().find(|x| x.0 == gid.as_str()).map(|x| x.1);
                    prop_assert!(other.is_some_and(|s| (s - os).abs() < 1e-12));
                }
            }
            // duplicates are the knn prefix down to the threshold
            let dups = store.find_duplicates(&query, 0.5).unwrap();
            let all = store.knn(&query, store.len()).unwrap();
            let prefix: Vec<_> = all.into_iter().take_while(|(_, s)| *s >= 0.5).collect();
            prop_assert_eq!(dups, prefix);
        }
    }
}
