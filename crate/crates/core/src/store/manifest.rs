use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{read_bag_file, EmbeddingBag, StoreError};
use crate::rng::{streams, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(StoreError::Manifest(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub slide_id: String,
    pub split: Split,
}

/// Train/valid/test assignment of bag files.
///
/// Text form: a `# seed=<n>` line, then one `path<TAB>slide_id<TAB>split`
/// line per bag. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

/// Input to [`make_split`]: one slide and its stratification class, if any.
#[derive(Clone, Debug)]
pub struct SplitItem {
    pub path: PathBuf,
    pub slide_id: String,
    pub class: Option<u8>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# seed={}\n", self.seed);
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                e.path.display(),
                e.slide_id,
                e.split
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, StoreError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| StoreError::Manifest("empty manifest".into()))?;
        let seed = header
            .strip_prefix("# seed=")
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| StoreError::Manifest(format!("bad header line `{header}`")))?;
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(StoreError::Manifest(format!(
                    "line {}: expected 3 tab-separated fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(fields[0]),
                slide_id: fields[1].to_string(),
                split: fields[2].parse()?,
            });
        }
        Ok(Self { seed, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Reads every bag of one split, checking that each file's slide id matches.
    pub fn load_bags(
        &self,
        base_dir: &Path,
        split: Split,
    ) -> Result<Vec<EmbeddingBag>, StoreError> {
        self.split(split)
            .map(|e| {
                let path = if e.path.is_absolute() {
                    e.path.clone()
                } else {
                    base_dir.join(&e.path)
                };
                let bag = read_bag_file(&path)?;
                if bag.slide_id() != e.slide_id {
                    return Err(StoreError::Manifest(format!(
                        "{} holds slide `{}`, manifest says `{}`",
                        path.display(),
                        bag.slide_id(),
                        e.slide_id
                    )));
                }
                Ok(bag)
            })
            .collect()
    }
}

/// Stratified, seeded three-way split.
///
/// Items are ordered by slide id before shuffling, so the result does not
/// depend on input order. Per class, train and valid sizes are
/// `round(fraction * n_class)` and test takes the remainder.
pub fn make_split(
    items: &[SplitItem],
    fractions: [f64; 3],
    seed: u64,
) -> Result<DatasetManifest, StoreError> {
    if fractions.iter().any(|&f| f.is_nan() || f <= 0.0) {
        return Err(StoreError::Split("fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(StoreError::Split(format!(
            "fractions sum to {total}, not 1"
        )));
    }

    let mut strata: BTreeMap<Option<u8>, Vec<&SplitItem>> = BTreeMap::new();
    for item in items {
        strata.entry(item.class).or_default().push(item);
    }
    let mut entries = Vec::with_capacity(items.len());
    for (class, mut members) in strata {
        if members.len() < fractions.len() {
            return Err(StoreError::Split(format!(
                "class {class:?} has {} samples, fewer than {} splits",
                members.len(),
                fractions.len()
            )));
        }
        members.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
        let stream = streams::SPLIT + u64::from(class.map_or(0xff, |c| c));
        StreamRng::new(seed, stream).shuffle(&mut members);

        let n = members.len() as f64;
        let n_train = (fractions[0] * n).round() as usize;
        let n_valid = ((fractions[1] * n).round() as usize).min(members.len() - n_train);
        for (i, item) in members.into_iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
            entries.push(ManifestEntry {
                path: item.path.clone(),
                slide_id: item.slide_id.clone(),
                split,
            });
        }
    }
    entries.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    Ok(DatasetManifest { seed, entries })
}
