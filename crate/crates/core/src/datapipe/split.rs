//! Per-class train/test partition.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::stream_seed;

use super::manifest::DatasetManifest;
use super::NUM_CLASSES;

pub const DEFAULT_TRAIN_RATIO: f64 = 0.8;
pub const SPLIT_HEADER: &str = "image_id,split";

/// Absorbs the representation error of `1 − ratio` so that, for example,
/// a class of 5 at ratio 0.8 sends exactly one image to test.
const ROUNDING_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
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
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

/// Images sent to the test side for a class of `n` images.
pub fn test_count(n: usize, ratio: f64) -> usize {
    (((1.0 - ratio) * n as f64) + ROUNDING_SLACK).floor() as usize
}

/// `(image_id, label)` pairs on each side of the split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<(String, usize)>,
    pub test: Vec<(String, usize)>,
    pub seed: Option<u64>,
}

impl SplitSpec {
    pub fn side(&self, split: Split) -> &[(String, usize)] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn counts(&self, split: Split) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for (_, l) in self.side(split) {
            c[*l] += 1;
        }
        c
    }

    /// Writes `image_id,split` lines, train side first.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{SPLIT_HEADER}")?;
        for split in Split::ALL {
            for (id, _) in self.side(split) {
                writeln!(w, "{id},{split}")?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a split file; labels come from `manifest`.
    pub fn parse(text: &str, manifest: &DatasetManifest) -> Result<Self> {
        let labels: HashMap<&str, usize> = manifest.records.iter().map(|r| (r.image_id.as_str(), r.label)).collect();
        let mut spec = SplitSpec {
            train: Vec::new(),
            test: Vec::new(),
            seed: None,
        };
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line == SPLIT_HEADER) {
                continue;
            }
            let bad = |message: String| Error::Manifest { line: i + 1, message };
            let (id, side) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("expected `image_id,split`, got `{line}`")))?;
            let side: Split = side.trim().parse().map_err(|e: Error| bad(e.to_string()))?;
            let label = *labels
                .get(id)
                .ok_or_else(|| bad(format!("image `{id}` is not in the manifest")))?;
            if !seen.insert(id.to_owned()) {
                return Err(bad(format!("image `{id}` listed twice")));
            }
            match side {
                Split::Train => spec.train.push((id.to_owned(), label)),
                Split::Test => spec.test.push((id.to_owned(), label)),
            }
        }
        Ok(spec)
    }

    pub fn load(path: &Path, manifest: &DatasetManifest) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, manifest)
    }
}

/// Shuffles each class with its own seeded stream and sends the first
/// `n − test_count(n)` images to train, the rest to test.
pub fn stratified_split(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<SplitSpec> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1], got {ratio}")));
    }
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); NUM_CLASSES];
    for r in &manifest.records {
        by_class[r.label].push(&r.image_id);
    }
    let mut spec = SplitSpec {
        train: Vec::new(),
        test: Vec::new(),
        seed: Some(seed),
    };
    for (label, ids) in by_class.iter_mut().enumerate() {
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "split", label as u64));
        ids.shuffle(&mut rng);
        let n_train = ids.len() - test_count(ids.len(), ratio);
        spec.train.extend(ids[..n_train].iter().map(|id| (id.to_string(), label)));
        spec.test.extend(ids[n_train..].iter().map(|id| (id.to_string(), label)));
    }
    if spec.test.is_empty() && !spec.train.is_empty() {
        log::warn!("split ratio {ratio} leaves the test split empty");
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_rule() {
        assert_eq!(test_count(5, 0.8), 1);
        assert_eq!(test_count(1113, 0.8), 222);
        assert_eq!(test_count(10, 1.0), 0);
    }

    #[test]
    fn small_split_is_disjoint_and_deterministic() {
        let m = DatasetManifest::synthetic(&[5, 10, 3, 0, 1, 2, 7], "x");
        let a = stratified_split(&m, 0.8, 4).unwrap();
        assert_eq!(a, stratified_split(&m, 0.8, 4).unwrap());
        assert_ne!(a, stratified_split(&m, 0.8, 5).unwrap());
        assert_eq!(a.counts(Split::Train)[0], 4);
        assert_eq!(a.counts(Split::Test)[0], 1);
        let train: HashSet<_> = a.train.iter().map(|p| &p.0).collect();
        assert!(a.test.iter().all(|(id, _)| !train.contains(id)));
        assert_eq!(a.train.len() + a.test.len(), m.len());
    }

    #[test]
    fn ratio_one_empties_test() {
        let m = DatasetManifest::synthetic(&[5, 1, 1, 1, 1, 1, 1], "x");
        let s = stratified_split(&m, 1.0, 0).unwrap();
        assert!(s.test.is_empty());
        assert!(stratified_split(&m, 0.0, 0).is_err());
    }

    #[test]
    fn file_round_trip() {
        let m = DatasetManifest::synthetic(&[5, 4, 3, 2, 1, 1, 1], "x");
        let s = stratified_split(&m, 0.8, 1).unwrap();
        let mut buf = Vec::new();
        s.write(&mut buf).unwrap();
        let back = SplitSpec::parse(std::str::from_utf8(&buf).unwrap(), &m).unwrap();
        assert_eq!(back.train, s.train);
        assert_eq!(back.test, s.test);
        assert!(SplitSpec::parse("nope,train\n", &m).is_err());
        assert!(SplitSpec::parse("x_0000000,val\n", &m).is_err());
    }
}
