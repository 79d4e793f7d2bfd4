//! Pseudo-label queue: one entry per image, overwritten wholesale on
//! re-insertion, plus a class → image-id index for class-balanced replay.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::external::PseudoLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub image_id: String,
    pub labels: Vec<PseudoLabel>,
    pub version: u64,
}

/// `category → image ids`, each id listed once per class it carries.
pub type IndexDictionary = BTreeMap<usize, Vec<String>>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelQueue {
    entries: BTreeMap<String, QueueEntry>,
    index: IndexDictionary,
    overwrites: u64,
    pushes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueueStats {
    #[serde(with = "string_keys")]
    pub per_class: BTreeMap<usize, usize>,
    pub total: usize,
    pub overwrites: u64,
    pub pushes: u64,
}

/// Map keys as strings, so stats survive buffering inside tagged records.
mod string_keys {
    use std::collections::BTreeMap;

    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, usize>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(k, v)| (k.to_string(), v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, usize>, D::Error> {
        BTreeMap::<String, usize>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(D::Error::custom))
            .collect()
    }
}

fn classes(labels: &[PseudoLabel]) -> BTreeSet<usize> {
    labels.iter().map(|l| l.category).collect()
}

impl LabelQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&QueueEntry> {
        self.entries.get(image_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.values()
    }

    pub fn index(&self) -> &IndexDictionary {
        &self.index
    }

    /// Replace the entry of `image_id` with `labels`.
    pub fn push(&mut self, image_id: &str, labels: Vec<PseudoLabel>) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::EmptyInput("queue labels"));
        }
        let new_classes = classes(&labels);
        let version = match self.entries.get(image_id) {
            Some(old) => {
                for c in classes(&old.labels).difference(&new_classes) {
                    let ids = self.index.get_mut(c).expect("indexed class");
                    ids.retain(|i| i != image_id);
                    if ids.is_empty() {
                        self.index.remove(c);
                    }
                }
                self.overwrites += 1;
                old.version + 1
            }
            None => 0,
        };
        let old_classes = self.entries.get(image_id).map(|e| classes(&e.labels)).unwrap_or_default();
        for c in new_classes.difference(&old_classes) {
            self.index.entry(*c).or_default().push(image_id.to_string());
        }
        self.pushes += 1;
        self.entries.insert(image_id.to_string(), QueueEntry { image_id: image_id.to_string(), labels, version });
        Ok(())
    }

    /// `n` draws with replacement: a class uniformly among non-empty
    /// classes, then an image uniformly within that class.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<&QueueEntry> {
        if self.index.is_empty() {
            return Vec::new();
        }
        let lists: Vec<&Vec<String>> = self.index.values().collect();
        (0..n)
            .map(|_| {
                let ids = lists[rng.gen_range(0..lists.len())];
                let id = &ids[rng.gen_range(0..ids.len())];
                &self.entries[id]
            })
            .collect()
    }

    pub fn stats(&self) -> QueueStats {
        QueueStats {
            per_class: self.index.iter().map(|(c, ids)| (*c, ids.len())).collect(),
            total: self.entries.len(),
            overwrites: self.overwrites,
            pushes: self.pushes,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("queue serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
    }
}
