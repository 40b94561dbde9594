//! Class-balancing augmentation plans.
//!
//! Every class-split cell is enlarged to its target count by giving each
//! source image the same number of outputs. The first output of every
//! image is the untouched original; the rest are seeded draws from
//! [`Transform::sample`], keyed by image id and slot so that a plan never
//! depends on the order images are visited in.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::derive_seed;

use super::split::{Split, SplitSpec};
use super::transform::Transform;
use super::{class_index, CLASS_NAMES, NUM_CLASSES};

pub const PLAN_HEADER: &str = "output_id,source_id,split,class,transform";

/// Per-class target counts for both sides of a split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BalanceTargets {
    pub train: [usize; NUM_CLASSES],
    pub test: [usize; NUM_CLASSES],
}

impl BalanceTargets {
    /// The reference balanced dataset: 295375 training and 74004 test images.
    pub fn reference() -> Self {
        BalanceTargets {
            train: [40095, 69732, 37492, 36418, 41360, 35052, 35226],
            test: [10434, 17433, 9282, 9035, 10293, 8763, 8764],
        }
    }

    pub fn side(&self, split: Split) -> &[usize; NUM_CLASSES] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Parses `split.CLASS = count` lines, starting from all zeros.
    pub fn parse(text: &str) -> Result<Self> {
        let mut t = BalanceTargets {
            train: [0; NUM_CLASSES],
            test: [0; NUM_CLASSES],
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Manifest { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `split.CLASS = count`, got `{line}`")))?;
            let (split, class) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| bad(format!("expected `split.CLASS`, got `{}`", key.trim())))?;
            let split: Split = split.parse().map_err(|e: Error| bad(e.to_string()))?;
            let class = class_index(class).ok_or_else(|| bad(format!("unknown class `{class}`")))?;
            let n = value
                .trim()
                .parse()
                .map_err(|_| bad(format!("count `{}` is not a non-negative integer", value.trim())))?;
            match split {
                Split::Train => t.train[class] = n,
                Split::Test => t.test[class] = n,
            }
        }
        Ok(t)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for split in Split::ALL {
            for (j, n) in self.side(split).iter().enumerate() {
                out.push_str(&format!("{split}.{} = {n}\n", CLASS_NAMES[j]));
            }
        }
        out
    }
}

/// Planning outcome for one class on one side of the split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellPlan {
    pub label: usize,
    pub split: Split,
    pub source: usize,
    pub target: usize,
    /// Outputs per source image.
    pub multiplicity: usize,
    /// Images (the lexicographically first ids) that receive one extra
    /// output because the target is not a multiple of the source count.
    pub extra: usize,
}

impl CellPlan {
    pub fn planned(&self) -> usize {
        self.source * self.multiplicity + self.extra
    }

    pub fn is_exact(&self) -> bool {
        self.extra == 0
    }

    /// The uniform-multiplicity count nearest the target.
    pub fn closest_achievable(&self) -> usize {
        if self.source == 0 {
            return 0;
        }
        let lo = self.source * self.multiplicity;
        let hi = lo + self.source;
        if self.target - lo <= hi - self.target {
            lo
        } else {
            hi
        }
    }
}

/// Outputs planned for one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanEntry {
    pub image_id: String,
    pub label: usize,
    pub split: Split,
    /// Slot 0 is always [`Transform::Identity`].
    pub transforms: Vec<Transform>,
}

impl PlanEntry {
    pub fn output_id(&self, slot: usize) -> String {
        output_id(&self.image_id, slot)
    }
}

pub fn output_id(source_id: &str, slot: usize) -> String {
    format!("{source_id}_{slot:04}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPlan {
    pub seed: Option<u64>,
    pub cells: Vec<CellPlan>,
    /// Train entries then test entries; within a side by class, then id.
    pub entries: Vec<PlanEntry>,
}

/// Transform list of one image: identity, then `count − 1` seeded draws.
pub fn image_transforms(seed: u64, image_id: &str, count: usize) -> Vec<Transform> {
    let mut out = Vec::with_capacity(count);
    if count > 0 {
        out.push(Transform::Identity);
    }
    for slot in 1..count {
        let s = derive_seed(seed, &[b"augment", image_id.as_bytes(), &(slot as u64).to_le_bytes()]);
        out.push(Transform::sample(&mut ChaCha8Rng::seed_from_u64(s)));
    }
    out
}

/// Plans every class-split cell. Cells whose target is not a multiple of
/// the source count are still planned exactly, giving one extra output to
/// the first ids; they are listed by [`AugmentationPlan::deviations`].
pub fn plan_balance(split: &SplitSpec, targets: &BalanceTargets, seed: u64) -> Result<AugmentationPlan> {
    let mut cells = Vec::new();
    let mut entries = Vec::new();
    let mut problems = Vec::new();
    for side in Split::ALL {
        let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); NUM_CLASSES];
        for (id, label) in split.side(side) {
            by_class[*label].push(id);
        }
        for (label, ids) in by_class.iter_mut().enumerate() {
            ids.sort_unstable();
            let source = ids.len();
            let target = targets.side(side)[label];
            let name = CLASS_NAMES[label];
            if target < source {
                problems.push(format!("{side}.{name}: target {target} is below the {source} source images"));
                continue;
            }
            if source == 0 {
                if target > 0 {
                    problems.push(format!("{side}.{name}: target {target} but no source images"));
                }
                cells.push(CellPlan {
                    label,
                    split: side,
                    source,
                    target,
                    multiplicity: 0,
                    extra: 0,
                });
                continue;
            }
            let cell = CellPlan {
                label,
                split: side,
                source,
                target,
                multiplicity: target / source,
                extra: target % source,
            };
            if !cell.is_exact() {
                log::warn!(
                    "{side}.{name}: target {target} is not a multiple of {source}; closest achievable is {}, \
                     {} images get one extra output",
                    cell.closest_achievable(),
                    cell.extra
                );
            }
            for (rank, id) in ids.iter().enumerate() {
                let count = cell.multiplicity + usize::from(rank < cell.extra);
                entries.push(PlanEntry {
                    image_id: id.to_string(),
                    label,
                    split: side,
                    transforms: image_transforms(seed, id, count),
                });
            }
            cells.push(cell);
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    Ok(AugmentationPlan {
        seed: Some(seed),
        cells,
        entries,
    })
}

impl AugmentationPlan {
    pub fn cell(&self, split: Split, label: usize) -> Option<&CellPlan> {
        self.cells.iter().find(|c| c.split == split && c.label == label)
    }

    /// Planned outputs per class on one side.
    pub fn totals(&self, split: Split) -> [usize; NUM_CLASSES] {
        let mut t = [0; NUM_CLASSES];
        for e in self.entries.iter().filter(|e| e.split == split) {
            t[e.label] += e.transforms.len();
        }
        t
    }

    pub fn total(&self, split: Split) -> usize {
        self.totals(split).iter().sum()
    }

    pub fn deviations(&self) -> impl Iterator<Item = &CellPlan> {
        self.cells.iter().filter(|c| !c.is_exact())
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{PLAN_HEADER}")?;
        for e in &self.entries {
            for (slot, t) in e.transforms.iter().enumerate() {
                writeln!(w, "{},{},{},{},{t}", e.output_id(slot), e.image_id, e.split, CLASS_NAMES[e.label])?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    /// Reads a plan file. Cell summaries are rebuilt from the entries.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<PlanEntry> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line == PLAN_HEADER) {
                continue;
            }
            let bad = |message: String| Error::Manifest { line: i + 1, message };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", f.len())));
            }
            let split: Split = f[2].parse().map_err(|e: Error| bad(e.to_string()))?;
            let label = class_index(f[3]).ok_or_else(|| bad(format!("unknown class `{}`", f[3])))?;
            let t: Transform = f[4].parse().map_err(|e: Error| bad(e.to_string()))?;
            let same = entries
                .last()
                .is_some_and(|e| e.image_id == f[1] && e.split == split);
            if !same {
                if t != Transform::Identity {
                    return Err(bad(format!("first output of `{}` must be the identity", f[1])));
                }
                entries.push(PlanEntry {
                    image_id: f[1].to_owned(),
                    label,
                    split,
                    transforms: Vec::new(),
                });
            }
            let e = entries.last_mut().expect("pushed above");
            if e.label != label {
                return Err(bad(format!("`{}` changes class", f[1])));
            }
            if f[0] != e.output_id(e.transforms.len()) {
                return Err(bad(format!("unexpected output id `{}`", f[0])));
            }
            e.transforms.push(t);
        }
        let mut cells = Vec::new();
        for split in Split::ALL {
            for label in 0..NUM_CLASSES {
                let counts: Vec<usize> = entries
                    .iter()
                    .filter(|e| e.split == split && e.label == label)
                    .map(|e| e.transforms.len())
                    .collect();
                let source = counts.len();
                let target: usize = counts.iter().sum();
                let multiplicity = counts.iter().copied().min().unwrap_or(0);
                cells.push(CellPlan {
                    label,
                    split,
                    source,
                    target,
                    multiplicity,
                    extra: target - source * multiplicity,
                });
            }
        }
        Ok(AugmentationPlan {
            seed: None,
            cells,
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::manifest::DatasetManifest;
    use crate::datapipe::split::stratified_split;

    fn small_split() -> SplitSpec {
        stratified_split(&DatasetManifest::synthetic(&[5, 10, 3, 2, 5, 2, 3], "s"), 0.8, 1).unwrap()
    }

    fn targets(train: [usize; 7], test: [usize; 7]) -> BalanceTargets {
        BalanceTargets { train, test }
    }

    #[test]
    fn exact_multiples() {
        let s = small_split();
        let tr = s.counts(Split::Train).map(|n| n * 3);
        let te = s.counts(Split::Test).map(|n| n * 2);
        let p = plan_balance(&s, &targets(tr, te), 9).unwrap();
        assert_eq!(p.totals(Split::Train), tr);
        assert_eq!(p.totals(Split::Test), te);
        assert_eq!(p.deviations().count(), 0);
        for e in &p.entries {
            assert_eq!(e.transforms[0], Transform::Identity);
            let want = if e.split == Split::Train { 3 } else { 2 };
            assert_eq!(e.transforms.len(), want);
        }
    }

    #[test]
    fn remainder_goes_to_first_ids() {
        let s = small_split();
        let mut tr = s.counts(Split::Train);
        tr[1] = 8 * 2 + 3;
        let p = plan_balance(&s, &targets(tr, s.counts(Split::Test)), 9).unwrap();
        let cell = p.cell(Split::Train, 1).unwrap();
        assert_eq!((cell.multiplicity, cell.extra), (2, 3));
        assert_eq!(cell.closest_achievable(), 16);
        assert_eq!(p.totals(Split::Train)[1], 19);
        let nv: Vec<_> = p.entries.iter().filter(|e| e.split == Split::Train && e.label == 1).collect();
        assert!(nv.windows(2).all(|w| w[0].image_id < w[1].image_id));
        assert_eq!(nv.iter().map(|e| e.transforms.len()).collect::<Vec<_>>(), [3, 3, 3, 2, 2, 2, 2, 2]);
        assert_eq!(p.deviations().count(), 1);
    }

    #[test]
    fn impossible_targets_are_rejected() {
        let s = small_split();
        let mut tr = s.counts(Split::Train);
        tr[0] = 1;
        assert!(plan_balance(&s, &targets(tr, s.counts(Split::Test)), 0).is_err());
    }

    #[test]
    fn plans_are_deterministic_and_round_trip() {
        let s = small_split();
        let t = targets(s.counts(Split::Train).map(|n| n * 4), s.counts(Split::Test).map(|n| n * 3));
        let a = plan_balance(&s, &t, 5).unwrap();
        assert_eq!(a, plan_balance(&s, &t, 5).unwrap());
        assert_ne!(a.entries, plan_balance(&s, &t, 6).unwrap().entries);
        let mut buf = Vec::new();
        a.write(&mut buf).unwrap();
        let back = AugmentationPlan::parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.entries, a.entries);
        assert_eq!(back.cells, a.cells);
    }

    #[test]
    fn transforms_depend_only_on_id_and_slot() {
        let a = image_transforms(3, "img", 6);
        let b = image_transforms(3, "img", 9);
        assert_eq!(a[..], b[..6]);
        assert_ne!(image_transforms(3, "other", 6), a);
    }

    #[test]
    fn targets_text_round_trip() {
        let t = BalanceTargets::reference();
        assert_eq!(BalanceTargets::parse(&t.to_text()).unwrap(), t);
        assert!(BalanceTargets::parse("train.XYZ = 3").is_err());
    }
}
