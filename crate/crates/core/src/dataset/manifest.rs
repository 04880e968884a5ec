//! Tab-separated clip manifest.
//!
//! ```text
//! #classes<TAB>name0<TAB>name1...
//! clip_id<TAB>audio_path<TAB>frames_dir<TAB>label<TAB>split
//! ```
//!
//! followed by one entry per line. `label` is a class name; relative paths
//! are resolved against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, IoContext, Result};
use crate::seed::{self, Purpose};

pub const HEADER: &str = "clip_id\taudio_path\tframes_dir\tlabel\tsplit";
const CLASSES_TAG: &str = "#classes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
            other => Err(Error::input(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub audio_path: PathBuf,
    pub frames_dir: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(class_names: Vec<String>, entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            class_names,
            entries,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::input("a manifest needs at least 2 classes"));
        }
        let mut names = HashSet::new();
        for c in &self.class_names {
            if c.is_empty() || c.contains(['\t', '\n']) || !names.insert(c) {
                return Err(Error::input(format!("bad or duplicate class name {c:?}")));
            }
        }
        let mut ids = HashSet::new();
        for e in &self.entries {
            if e.clip_id.is_empty() || e.clip_id.contains(['\t', '\n', '/']) {
                return Err(Error::input(format!("bad clip id {:?}", e.clip_id)));
            }
            if !ids.insert(&e.clip_id) {
                return Err(Error::input(format!("duplicate clip id {:?}", e.clip_id)));
            }
            if e.label >= self.class_names.len() {
                return Err(Error::input(format!("clip {:?} has undeclared label {}", e.clip_id, e.label)));
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(CLASSES_TAG);
        for c in &self.class_names {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        out.push_str(HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.clip_id,
                e.audio_path.display(),
                e.frames_dir.display(),
                self.class_names[e.label],
                e.split
            ));
        }
        out
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |n: usize, msg: String| Error::input(format!("manifest line {}: {msg}", n + 1));
        let (n, first) = lines.next().ok_or_else(|| Error::input("empty manifest"))?;
        let mut classes = first.split('\t');
        if classes.next() != Some(CLASSES_TAG) {
            return Err(bad(n, format!("expected {CLASSES_TAG:?} line")));
        }
        let class_names: Vec<String> = classes.map(str::to_string).collect();
        let by_name: BTreeMap<&str, usize> = class_names.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        match lines.next() {
            Some((_, h)) if h.trim_end_matches('\r') == HEADER => {}
            Some((n, _)) => return Err(bad(n, format!("expected header {HEADER:?}"))),
            None => return Err(Error::input("manifest has no header line")),
        }
        let mut entries = Vec::new();
        for (n, line) in lines {
            let f: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            let [clip_id, audio, frames, label, split] = f[..] else {
                return Err(bad(n, format!("expected 5 columns, got {}", f.len())));
            };
            let label = *by_name.get(label).ok_or_else(|| bad(n, format!("undeclared class {label:?}")))?;
            entries.push(ManifestEntry {
                clip_id: clip_id.to_string(),
                audio_path: audio.into(),
                frames_dir: frames.into(),
                label,
                split: Split::parse(split).map_err(|e| bad(n, e.to_string()))?,
            });
        }
        Self::new(class_names, entries, base_dir)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base).map_err(|e| match e {
            Error::InvalidInput(m) => Error::input(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).at(path)
    }
}

/// Re-splits the non-test clips of every class into train and val. Each class
/// contributes `round(val_fraction * n)` val clips, clamped to `[1, n - 1]`.
pub fn split_train_val(m: &Manifest, val_fraction: f64, seed: u64) -> Result<Manifest> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::input(format!("val fraction {val_fraction} outside (0, 1)")));
    }
    let mut out = m.clone();
    for class in 0..m.n_classes() {
        let mut pool: Vec<usize> = (0..m.entries.len())
            .filter(|&i| m.entries[i].label == class && m.entries[i].split != Split::Test)
            .collect();
        if pool.is_empty() {
            continue;
        }
        if pool.len() < 2 {
            return Err(Error::input(format!(
                "class {:?} has {} train clip(s); at least 2 are needed to split",
                m.class_names[class],
                pool.len()
            )));
        }
        let n_val = ((val_fraction * pool.len() as f64).round() as usize).clamp(1, pool.len() - 1);
        pool.shuffle(&mut seed::rng(seed, Purpose::Split, class as u64, 0));
        for (k, &i) in pool.iter().enumerate() {
            out.entries[i].split = if k < n_val { Split::Val } else { Split::Train };
        }
    }
    Ok(out)
}
