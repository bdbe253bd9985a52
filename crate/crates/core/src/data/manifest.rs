use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mix_seed;
use crate::error::{Error, Result};

pub const IMAGE_EXTENSIONS: [&str; 5] = ["ppm", "png", "jpg", "jpeg", "pnm"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    /// Path relative to the manifest root.
    pub path: PathBuf,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Labeled index of an image corpus; classes are folder names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub entries: Vec<Entry>,
    /// Seed of the split that assigned the split tags, if any.
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    root: PathBuf,
    class_names: Vec<String>,
    seed: Option<u64>,
}

/// Split proportions; must be positive and sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&p| !p.is_finite() || p <= 0.0) {
            return Err(Error::config(format!("split ratios must be positive: {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split ratios must sum to 1: {parts:?}")));
        }
        Ok(())
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    paths.sort();
    Ok(paths)
}

/// Indexes `root`: each immediate subdirectory is a class, each image file
/// inside it an entry. Files directly under `root` and non-image files are
/// skipped with a warning.
pub fn scan_directory(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Ingestion {
            path: root.to_path_buf(),
            reason: "not a directory".into(),
        });
    }
    let mut class_names = Vec::new();
    let mut entries = Vec::new();
    for path in sorted_dir(root)? {
        if !path.is_dir() {
            log::warn!("ignoring {} outside any class folder", path.display());
            continue;
        }
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Ingestion {
                path: path.clone(),
                reason: "class folder name is not UTF-8".into(),
            })?
            .to_string();
        let class = class_names.len();
        let before = entries.len();
        for file in sorted_dir(&path)? {
            if file.is_file() && is_image(&file) {
                let rel = file.strip_prefix(root).expect("scanned below root").to_path_buf();
                entries.push(Entry {
                    path: rel,
                    class,
                    split: None,
                });
            } else {
                log::warn!("ignoring non-image {}", file.display());
            }
        }
        if entries.len() == before {
            return Err(Error::Ingestion {
                path,
                reason: format!("class folder {name:?} contains no images"),
            });
        }
        class_names.push(name);
    }
    if class_names.is_empty() {
        return Err(Error::Ingestion {
            path: root.to_path_buf(),
            reason: "no class folders found".into(),
        });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        class_names,
        entries,
        seed: None,
    })
}

/// Entries assigned to val or test for a class of `n` items:
/// `floor(ratio * n)` each, the remainder going to train.
pub fn split_sizes(n: usize, ratios: &SplitRatios) -> (usize, usize, usize) {
    let take = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let val = take(ratios.val).min(n);
    let test = take(ratios.test).min(n - val);
    (n - val - test, val, test)
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> =
            self.class_names.iter().map(|n| (n.clone(), 0)).collect();
        for e in &self.entries {
            *counts.get_mut(&self.class_names[e.class]).expect("valid class") += 1;
        }
        counts
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].split == Some(split))
            .collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == Some(split)).count()
    }

    pub fn full_path(&self, entry: &Entry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn validate(&self) -> Result<()> {
        crate::model::validate_class_names(&self.class_names)?;
        for e in &self.entries {
            if e.class >= self.class_names.len() {
                return Err(Error::Label {
                    label: e.class,
                    classes: self.class_names.len(),
                });
            }
        }
        Ok(())
    }

    /// Stratified split: each class is shuffled with a generator keyed by
    /// `(seed, class)` and cut into val, test and train portions.
    pub fn split(&self, ratios: SplitRatios, seed: u64) -> Result<DatasetManifest> {
        ratios.validate()?;
        let mut out = self.clone();
        out.seed = Some(seed);
        for class in 0..self.class_names.len() {
            let mut members: Vec<usize> = (0..self.entries.len())
                .filter(|&i| self.entries[i].class == class)
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, class as u64]));
            members.shuffle(&mut rng);
            let (_, val, test) = split_sizes(members.len(), &ratios);
            if val == 0 || test == 0 {
                log::warn!(
                    "class {:?} has {} entries: val gets {val}, test gets {test}",
                    self.class_names[class],
                    members.len()
                );
            }
            for (k, &i) in members.iter().enumerate() {
                out.entries[i].split = Some(if k < val {
                    Split::Val
                } else if k < val + test {
                    Split::Test
                } else {
                    Split::Train
                });
            }
        }
        Ok(out)
    }

    /// JSON lines: a header record, then one record per entry.
    pub fn write_jsonl(&self, out: impl Write) -> Result<()> {
        let io = |e| Error::io("<manifest stream>", e);
        let mut w = BufWriter::new(out);
        let header = HeaderRecord {
            root: self.root.clone(),
            class_names: self.class_names.clone(),
            seed: self.seed,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(io)?;
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_jsonl(input: impl std::io::Read) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::config("empty manifest"))?
            .map_err(|e| Error::io("<manifest stream>", e))?;
        let header: HeaderRecord = serde_json::from_str(&first)?;
        let mut entries = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io("<manifest stream>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        let m = DatasetManifest {
            root: header.root,
            class_names: header.class_names,
            entries,
            seed: header.seed,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(file)
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(file)
    }
}
