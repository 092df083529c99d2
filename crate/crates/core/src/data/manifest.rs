use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Sketches.
    A,
    /// Photos.
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Paths (relative to the dataset root) of one identity's image in each domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub a: String,
    pub b: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub resolution: usize,
    pub domain_a_dir: String,
    pub domain_b_dir: String,
    pub splits: Splits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pairing: Option<BTreeMap<String, PairEntry>>,
    /// Free-form provenance (e.g. synthesis parameters).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<serde_json::Value>,
    #[serde(skip)]
    root: PathBuf,
    #[serde(skip)]
    pairing_reads: Arc<AtomicUsize>,
}

impl DatasetManifest {
    pub fn new(
        root: &Path,
        resolution: usize,
        splits: Splits,
        pairing: Option<BTreeMap<String, PairEntry>>,
    ) -> Result<Self> {
        let m = Self {
            version: MANIFEST_VERSION,
            resolution,
            domain_a_dir: "domain_a".into(),
            domain_b_dir: "domain_b".into(),
            splits,
            pairing,
            source: None,
            root: root.to_path_buf(),
            pairing_reads: Arc::default(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!("unsupported manifest version {}", self.version)));
        }
        let train: BTreeSet<_> = self.splits.train.iter().collect();
        let test: BTreeSet<_> = self.splits.test.iter().collect();
        if train.len() != self.splits.train.len() || test.len() != self.splits.test.len() {
            return Err(Error::Dataset("split lists contain duplicate identities".into()));
        }
        if let Some(id) = train.intersection(&test).next() {
            return Err(Error::Dataset(format!("identity `{id}` is in both train and test splits")));
        }
        Ok(())
    }

    /// Reads `<dir>/manifest.json` (or the given file) and anchors relative
    /// paths at its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: Self =
            serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", file.display())))?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self) -> Result<PathBuf> {
        let file = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Dataset(e.to_string()))?;
        std::fs::write(&file, text + "\n").map_err(|e| Error::io(&file, e))?;
        Ok(file)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn domain_dir(&self, domain: Domain) -> PathBuf {
        match domain {
            Domain::A => self.root.join(&self.domain_a_dir),
            Domain::B => self.root.join(&self.domain_b_dir),
        }
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.splits.train,
            Split::Test => &self.splits.test,
        }
    }

    /// Identity-level correspondence. Only evaluation may call this; every
    /// call is counted so tests can prove training never does.
    pub fn pairing(&self) -> Option<&BTreeMap<String, PairEntry>> {
        self.pairing_reads.fetch_add(1, Ordering::SeqCst);
        self.pairing.as_ref()
    }

    pub fn pairing_reads(&self) -> usize {
        self.pairing_reads.load(Ordering::SeqCst)
    }

    /// Image files of one domain and split, as `(identity, path)` sorted by
    /// file name. Files named for identities outside the split are ignored.
    pub fn files(&self, domain: Domain, split: Split) -> Result<Vec<(String, PathBuf)>> {
        let dir = self.domain_dir(domain).join(split.dir_name());
        let ids: BTreeSet<&str> = self.ids(split).iter().map(String::as_str).collect();
        let entries = match std::fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&dir, e)),
        };
        let mut out = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(id) = identity_of(name) else { continue };
            if ids.contains(id) {
                out.push((id.to_string(), path.clone()));
            }
        }
        out.sort_by(|a, b| a.1.cmp(&b.1));
        Ok(out)
    }
}

/// Copies a dataset into `out_dir` under a fresh identity split drawn with
/// `seed`. Images keep their file names; the pairing, if any, is rewritten to
/// the new locations.
pub fn resplit_dataset(manifest: &DatasetManifest, train_fraction: f64, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let mut all: Vec<String> = manifest.splits.train.iter().chain(&manifest.splits.test).cloned().collect();
    all.sort();
    let (train, test) = split_identities(&all, train_fraction, seed)?;
    let test_set: BTreeSet<&str> = test.iter().map(String::as_str).collect();
    let mut moved: BTreeMap<(Domain, String), String> = BTreeMap::new();
    for domain in [Domain::A, Domain::B] {
        let dir_name = match domain {
            Domain::A => &manifest.domain_a_dir,
            Domain::B => &manifest.domain_b_dir,
        };
        for split in [Split::Train, Split::Test] {
            for (id, src) in manifest.files(domain, split)? {
                let target = if test_set.contains(id.as_str()) { Split::Test } else { Split::Train };
                let name = src.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                let rel = format!("{dir_name}/{}/{name}", target.dir_name());
                let dst = out_dir.join(&rel);
                if let Some(parent) = dst.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                std::fs::copy(&src, &dst).map_err(|e| Error::io(&dst, e))?;
                moved.entry((domain, id)).or_insert(rel);
            }
        }
    }
    let pairing = manifest.pairing().map(|p| {
        p.keys()
            .filter_map(|id| {
                let a = moved.get(&(Domain::A, id.clone()))?;
                let b = moved.get(&(Domain::B, id.clone()))?;
                Some((id.clone(), PairEntry { a: a.clone(), b: b.clone() }))
            })
            .collect()
    });
    let mut out = DatasetManifest::new(out_dir, manifest.resolution, Splits { train, test }, pairing)?;
    out.domain_a_dir = manifest.domain_a_dir.clone();
    out.domain_b_dir = manifest.domain_b_dir.clone();
    out.source = Some(serde_json::json!({ "resplit_of": manifest.root().display().to_string(), "seed": seed }));
    out.save()?;
    Ok(out)
}

/// `<identity>__<k>.png` → `identity`.
pub fn identity_of(file_name: &str) -> Option<&str> {
    let stem = file_name.strip_suffix(".png")?;
    let (id, k) = stem.rsplit_once("__")?;
    if id.is_empty() || k.is_empty() || !k.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    Some(id)
}

/// Number of training identities for `n` identities at `train_fraction`:
/// `round(n · fraction)`, kept inside `[1, n − 1]`.
pub fn train_count(n: usize, train_fraction: f64) -> usize {
    ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1)
}

/// Seeded disjoint partition. Each side is returned sorted.
pub fn split_identities(ids: &[String], train_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Domain(format!("train fraction {train_fraction} must lie strictly between 0 and 1")));
    }
    if ids.len() < 2 {
        return Err(Error::Domain("need ≥ 2 identities".into()));
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Domain("identity list contains duplicates".into()));
    }
    let mut order: Vec<String> = unique.into_iter().cloned().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = train_count(order.len(), train_fraction);
    let mut test = order.split_off(n_train);
    order.sort();
    test.sort();
    Ok((order, test))
}
