//! Dataset manifests and seeded train/validation/test splits.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::io::{read_f0, read_features, read_tokens, write_f0, write_features, write_tokens};
use super::Utterance;
use crate::error::{invalid, Error, Result};
use crate::rng::seeded;

pub const MANIFEST_VERSION: u32 = 1;

/// One utterance; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub text: PathBuf,
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f0: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(crate::error::FormatError::from)?;
        if m.version != MANIFEST_VERSION {
            return Err(crate::error::FormatError::UnsupportedVersion {
                found: m.version,
                supported: MANIFEST_VERSION,
            }
            .into());
        }
        let mut seen = HashSet::new();
        for e in &m.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!(
                    "duplicate utterance id `{}` in {}",
                    e.id,
                    path.display()
                )));
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(crate::error::FormatError::from)?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }
}

/// Writes every utterance's files under `dir/<split>/` and the manifest to
/// `dir/<split>.json`, returning the manifest path.
pub fn write_split<'a>(
    dir: &Path,
    split: &str,
    utterances: impl IntoIterator<Item = &'a Utterance>,
) -> Result<PathBuf> {
    let sub = dir.join(split);
    fs::create_dir_all(&sub)?;
    let mut entries = Vec::new();
    for u in utterances {
        let text = PathBuf::from(split).join(format!("{}.txt", u.id));
        let features = PathBuf::from(split).join(format!("{}.feat", u.id));
        write_tokens(&dir.join(&text), &u.text)?;
        write_features(&dir.join(&features), &u.features)?;
        let f0 = match &u.f0 {
            Some(track) => {
                let p = PathBuf::from(split).join(format!("{}.f0", u.id));
                write_f0(&dir.join(&p), track)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: u.id.clone(),
            text,
            features,
            f0,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        split: split.to_string(),
        entries,
    };
    let path = dir.join(format!("{split}.json"));
    manifest.write(&path)?;
    Ok(path)
}

/// Reads a manifest and every file it references.
pub fn load_split(manifest_path: &Path, vocab: usize) -> Result<(DatasetManifest, Vec<Utterance>)> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut utts = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let ctx = |err: Error| Error::Data(format!("utterance `{}`: {err}", e.id));
        let text = read_tokens(&base.join(&e.text), vocab).map_err(ctx)?;
        let features = read_features(&base.join(&e.features)).map_err(ctx)?;
        let f0 = match &e.f0 {
            Some(p) => Some(read_f0(&base.join(p)).map_err(ctx)?),
            None => None,
        };
        utts.push(Utterance {
            id: e.id.clone(),
            text,
            features,
            f0,
        });
    }
    Ok((manifest, utts))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        // 2000 / 200 / 200 of 2400
        Self {
            train: 2000.0 / 2400.0,
            val: 200.0 / 2400.0,
            test: 200.0 / 2400.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..count` cut into three disjoint parts. Train and
/// validation sizes are rounded half-up; test takes the remainder.
pub fn split_dataset(count: usize, fractions: SplitFractions, seed: u64) -> Result<SplitIndices> {
    if count == 0 {
        return Err(invalid("cannot split an empty dataset"));
    }
    let f = [fractions.train, fractions.val, fractions.test];
    if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!(
            "split fractions must lie in [0,1] and sum to 1, got {:?}",
            f
        )));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut seeded(seed));
    let round = |x: f64| (x * count as f64 + 0.5).floor() as usize;
    let n_train = round(fractions.train).min(count);
    let n_val = round(fractions.val).min(count - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(SplitIndices { train: idx, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_partition() {
        let fr = SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        };
        let s = split_dataset(100, fr, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_dataset(100, fr, 3).unwrap(), s);
        assert_ne!(split_dataset(100, fr, 4).unwrap(), s);
    }

    #[test]
    fn default_fractions_give_desk_sizes() {
        let s = split_dataset(2400, SplitFractions::default(), 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2000, 200, 200));
    }

    #[test]
    fn split_rejects_bad_input() {
        let bad = SplitFractions {
            train: 0.8,
            val: 0.3,
            test: 0.1,
        };
        assert!(split_dataset(10, bad, 0).is_err());
        assert!(split_dataset(0, SplitFractions::default(), 0).is_err());
    }
}
