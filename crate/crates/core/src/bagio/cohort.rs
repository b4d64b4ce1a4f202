use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::format::{read_bag, write_bag, BAG_EXTENSION};
use super::synth::ScmConfig;
use super::FeatureBag;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "cohort.json";

// Keeps the split shuffle stream apart from the generator stream.
const SPLIT_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Bags with one split tag each.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub bags: Vec<FeatureBag>,
    pub splits: Vec<Split>,
    pub class_count: usize,
    pub class_names: Vec<String>,
}

impl Cohort {
    /// Tags bags 60/15/25 train/val/test after a seeded shuffle.
    pub fn with_auto_split(bags: Vec<FeatureBag>, class_count: usize, seed: u64) -> Result<Self> {
        let splits = auto_split(bags.len(), seed);
        let class_names = (0..class_count).map(|c| format!("class_{c}")).collect();
        let cohort = Self {
            bags,
            splits,
            class_count,
            class_names,
        };
        cohort.validate()?;
        Ok(cohort)
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits.len() != self.bags.len() {
            return Err(Error::Config(
                "every bag needs exactly one split tag".into(),
            ));
        }
        if self.class_names.len() != self.class_count {
            return Err(Error::Config(
                "class name count differs from class count".into(),
            ));
        }
        let dim = self.bags.first().map(FeatureBag::feature_dim);
        for bag in &self.bags {
            bag.validate()?;
            if bag.class_count != self.class_count {
                return Err(Error::Config(format!(
                    "bag {} has {} classes",
                    bag.bag_id, bag.class_count
                )));
            }
            if Some(bag.feature_dim()) != dim {
                return Err(Error::Config(format!(
                    "bag {} has a different feature dim",
                    bag.bag_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.bags.first().map(FeatureBag::feature_dim)
    }

    pub fn has_survival(&self) -> bool {
        !self.bags.is_empty() && self.bags.iter().all(|b| b.survival.is_some())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.bags.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn split_bags(&self, split: Split) -> Vec<&FeatureBag> {
        self.indices(split)
            .into_iter()
            .map(|i| &self.bags[i])
            .collect()
    }
}

/// Split tags for `n` bags: round(0.6n) train, round(0.15n) val, rest test.
pub fn auto_split(n: usize, seed: u64) -> Vec<Split> {
    let n_train = (0.60 * n as f64).round() as usize;
    let n_val = ((0.15 * n as f64).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(
        seed.wrapping_add(SPLIT_SALT),
    ));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagEntry {
    pub path: String,
    pub split: Split,
}

/// JSON manifest listing bag files relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub format: String,
    pub version: u32,
    pub class_count: usize,
    pub class_names: Vec<String>,
    pub bags: Vec<BagEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<ScmConfig>,
}

/// Writes `dir/cohort.json` and `dir/bags/<id>.mcb`. Returns the manifest path.
pub fn write_cohort(cohort: &Cohort, dir: &Path, generator: Option<&ScmConfig>) -> Result<PathBuf> {
    cohort.validate()?;
    let bag_dir = dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    let mut entries = Vec::with_capacity(cohort.len());
    for (bag, &split) in cohort.bags.iter().zip(&cohort.splits) {
        let rel = format!("bags/{}.{BAG_EXTENSION}", bag.bag_id);
        write_bag(bag, &dir.join(&rel))?;
        entries.push(BagEntry { path: rel, split });
    }
    let manifest = CohortManifest {
        format: "mcml-cohort".into(),
        version: 1,
        class_count: cohort.class_count,
        class_names: cohort.class_names.clone(),
        bags: entries,
        generator: generator.cloned(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a cohort from a manifest file, or from a directory containing one.
pub fn read_cohort(path: &Path) -> Result<Cohort> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CohortManifest = serde_json::from_str(&text)?;
    if manifest.format != "mcml-cohort" || manifest.version != 1 {
        return Err(Error::Config(format!(
            "unsupported manifest {} v{}",
            manifest.format, manifest.version
        )));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut bags = Vec::with_capacity(manifest.bags.len());
    let mut splits = Vec::with_capacity(manifest.bags.len());
    for entry in &manifest.bags {
        bags.push(read_bag(&root.join(&entry.path))?);
        splits.push(entry.split);
    }
    let cohort = Cohort {
        bags,
        splits,
        class_count: manifest.class_count,
        class_names: manifest.class_names,
    };
    cohort.validate()?;
    Ok(cohort)
}
