//! Category vocabulary with a base/novel partition and the frozen prototype
//! embeddings shared by the detector's classifier head and the external
//! teacher.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile")]
pub struct Vocabulary {
    names: Vec<String>,
    base_ids: Vec<usize>,
    novel_ids: Vec<usize>,
}

#[derive(Deserialize)]
struct VocabularyFile {
    names: Vec<String>,
    base_ids: Vec<usize>,
    novel_ids: Vec<usize>,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabularyFile) -> Result<Self> {
        Vocabulary::new(f.names, f.base_ids, f.novel_ids)
    }
}

impl Vocabulary {
    pub fn new(names: Vec<String>, mut base_ids: Vec<usize>, mut novel_ids: Vec<usize>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Vocabulary("no category names".into()));
        }
        base_ids.sort_unstable();
        novel_ids.sort_unstable();
        let base: BTreeSet<usize> = base_ids.iter().copied().collect();
        let novel: BTreeSet<usize> = novel_ids.iter().copied().collect();
        if base.len() != base_ids.len() || novel.len() != novel_ids.len() {
            return Err(Error::Vocabulary("duplicate category id".into()));
        }
        if !base.is_disjoint(&novel) {
            return Err(Error::Vocabulary("base and novel ids overlap".into()));
        }
        let all: BTreeSet<usize> = base.union(&novel).copied().collect();
        if all != (0..names.len()).collect() {
            return Err(Error::Vocabulary("base and novel ids must cover every category exactly".into()));
        }
        Ok(Self { names, base_ids, novel_ids })
    }

    /// The five-shape benchmark vocabulary: three base, two novel.
    pub fn shapes() -> Self {
        let names = ["circle", "square", "triangle", "star", "cross"].map(String::from).to_vec();
        Self::new(names, vec![0, 1, 2], vec![3, 4]).expect("static vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn base_ids(&self) -> &[usize] {
        &self.base_ids
    }

    pub fn novel_ids(&self) -> &[usize] {
        &self.novel_ids
    }

    pub fn is_base(&self, id: usize) -> bool {
        self.base_ids.binary_search(&id).is_ok()
    }

    pub fn is_novel(&self, id: usize) -> bool {
        self.novel_ids.binary_search(&id).is_ok()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

pub fn build_prompts(vocab: &Vocabulary) -> Vec<String> {
    vocab.names().iter().map(|n| format!("a photo of {n}")).collect()
}

/// Unit-norm prototype vector for one category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticEmbedding(Vec<f64>);

impl SemanticEmbedding {
    /// Normalises `v`; fails on a zero vector.
    pub fn from_raw(v: Vec<f64>) -> Result<Self> {
        let n = l2_norm(&v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm(0));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (l2_norm(a) * l2_norm(b))
}

pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, prompt: &str) -> SemanticEmbedding;
}

/// Deterministic stand-in for a pretrained text tower: each prompt keys a
/// ChaCha stream through SHA-256, and a Gaussian draw from that stream is
/// normalised onto the unit sphere.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl HashTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &str) -> SemanticEmbedding {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(prompt.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = Rng::from_seed(key);
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if let Ok(e) = SemanticEmbedding::from_raw(v) {
                return e;
            }
        }
    }
}

pub fn encode_vocabulary(prompts: &[String], encoder: &impl TextEncoder) -> Vec<SemanticEmbedding> {
    prompts.iter().map(|p| encoder.encode(p)).collect()
}

/// Immutable embedding table, one row per vocabulary entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub rows: Vec<SemanticEmbedding>,
}

impl EmbeddingTable {
    pub fn for_vocabulary(vocab: &Vocabulary, encoder: &impl TextEncoder) -> Self {
        Self { rows: encode_vocabulary(&build_prompts(vocab), encoder) }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, SemanticEmbedding::dim)
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.rows[j].as_slice()
    }

    /// Restrict to a subset of rows, keeping their order.
    pub fn select(&self, ids: &[usize]) -> Self {
        Self { rows: ids.iter().map(|&i| self.rows[i].clone()).collect() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}
