//! Tab-separated dataset and pair manifests.
//!
//! A dataset manifest has one record per line,
//! `split<TAB>path<TAB>identity<TAB>width<TAB>height`, with paths relative to
//! the manifest's directory. A pair list has `path_a<TAB>path_b<TAB>same`
//! with `same` in `{0, 1}`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::synth::{synth_dataset, Dataset, SynthConfig};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::resample::resize_bilinear;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Gallery,
    Probe,
    Pairs,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Probe => "probe",
            Split::Pairs => "pairs",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "gallery" => Ok(Split::Gallery),
            "probe" => Ok(Split::Probe),
            "pairs" => Ok(Split::Pairs),
            other => Err(invalid!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub path: String,
    pub identity: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn field<T: FromStr>(line: usize, name: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Format(format!("manifest line {line}: bad {name} {raw:?}")))
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\t{}\n", e.split, e.path, e.identity, e.width, e.height))
            .collect()
    }

    /// Parses manifest text; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::Format(format!("manifest line {}: expected 5 fields, got {}", i + 1, cols.len())));
            }
            entries.push(ManifestEntry {
                split: cols[0].parse()?,
                path: cols[1].to_string(),
                identity: field(i + 1, "identity", cols[2])?,
                width: field(i + 1, "width", cols[3])?,
                height: field(i + 1, "height", cols[4])?,
            });
        }
        Ok(Self { root: root.into(), entries })
    }

    /// Reads and validates: identities dense from 0 and every path present.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&fs::read_to_string(path)?, root)?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.entries.iter().map(|e| e.identity + 1).max().unwrap_or(0);
        let mut seen = vec![false; n];
        self.entries.iter().for_each(|e| seen[e.identity] = true);
        if let Some(gap) = seen.iter().position(|s| !s) {
            return Err(invalid!("identity ids must be dense from 0; {gap} is missing"));
        }
        if let Some(e) = self.entries.iter().find(|e| !self.root.join(&e.path).is_file()) {
            return Err(invalid!("manifest path {} does not exist", self.root.join(&e.path).display()));
        }
        Ok(())
    }

    pub fn identities(&self) -> usize {
        self.entries.iter().map(|e| e.identity + 1).max().unwrap_or(0)
    }

    /// Loads one split with native sizes.
    pub fn load_images(&self, split: Split) -> Result<Vec<(Image, usize)>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| Ok((Image::read(self.root.join(&e.path))?, e.identity)))
            .collect()
    }

    /// Loads one split resized to `size x size`, with labels re-densified
    /// in order of first appearance.
    pub fn load_dataset(&self, split: Split, size: usize) -> Result<Dataset> {
        let items = self.load_images(split)?;
        let mut remap = std::collections::BTreeMap::new();
        let mut images = Vec::with_capacity(items.len());
        let mut labels = Vec::with_capacity(items.len());
        for (img, id) in items {
            let n = remap.len();
            labels.push(*remap.entry(id).or_insert(n));
            images.push(resize_bilinear(&img, size, size)?);
        }
        let ds = Dataset { images, labels, n_ids: remap.len() };
        ds.validate()?;
        Ok(ds)
    }
}

/// Writes a synthetic dataset as PPM files plus `manifest.tsv` under `dir`.
pub fn synth_data(cfg: &SynthConfig, split: Split, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let ds = synth_dataset(cfg)?;
    let mut entries = Vec::with_capacity(ds.len());
    let mut counts = vec![0usize; ds.n_ids];
    for (img, &id) in ds.images.iter().zip(&ds.labels) {
        let rel = format!("id{id:04}/{:03}.ppm", counts[id]);
        counts[id] += 1;
        let path = dir.join(&rel);
        fs::create_dir_all(path.parent().expect("relative path has a parent"))?;
        img.write(&path)?;
        entries.push(ManifestEntry { split, path: rel, identity: id, width: img.width(), height: img.height() });
    }
    let m = DatasetManifest { root: dir.to_path_buf(), entries };
    m.write(dir.join("manifest.tsv"))?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRecord {
    pub a: String,
    pub b: String,
    pub same: bool,
}

/// Verification pairs, paths relative to `root`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairList {
    pub root: PathBuf,
    pub pairs: Vec<PairRecord>,
}

impl PairList {
    pub fn to_text(&self) -> String {
        self.pairs.iter().map(|p| format!("{}\t{}\t{}\n", p.a, p.b, u8::from(p.same))).collect()
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let same = match cols.as_slice() {
                [_, _, "1"] => true,
                [_, _, "0"] => false,
                _ => return Err(Error::Format(format!("pair line {}: expected a<TAB>b<TAB>0|1", i + 1))),
            };
            pairs.push(PairRecord { a: cols[0].into(), b: cols[1].into(), same });
        }
        Ok(Self { root: root.into(), pairs })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, path.parent().map(Path::to_path_buf).unwrap_or_default())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_data(&SynthConfig::new(2, 1, 8, 0), Split::Train, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
        let back = DatasetManifest::read(dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.entries, m.entries);
        let ds = back.load_dataset(Split::Train, 8).unwrap();
        assert_eq!((ds.len(), ds.n_ids), (2, 2));
    }

    #[test]
    fn bad_records_are_rejected() {
        assert!(DatasetManifest::parse("train\ta.ppm\t0\t4\n", ".").is_err());
        assert!(DatasetManifest::parse("test\ta.ppm\t0\t4\t4\n", ".").is_err());
        let m = DatasetManifest::parse("train\ta.ppm\t1\t4\t4\n", "/nonexistent").unwrap();
        assert!(m.validate().is_err());
        let p = PairList::parse("a\tb\t1\nc\td\t0\n", ".").unwrap();
        assert_eq!(p.to_text(), "a\tb\t1\nc\td\t0\n");
        assert!(PairList::parse("a\tb\t2\n", ".").is_err());
    }
}
