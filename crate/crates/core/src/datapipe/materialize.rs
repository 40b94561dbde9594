//! Writing planned outputs to disk and reading them back as a dataset.
//!
//! Layout under the output directory: `{split}/manifest.csv` with
//! `output_id,source_id,class,transform` rows, the images beside it, and
//! `norm_stats.txt` holding the training-split normalization statistics.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Real;

use super::image::{preprocess, ImageBuffer, NormAccumulator, NormStats};
use super::manifest::find_image;
use super::plan::AugmentationPlan;
use super::split::Split;
use super::transform::{apply_transform, Transform};
use super::{class_index, CLASS_NAMES, NUM_CLASSES};

pub const OUTPUT_HEADER: &str = "output_id,source_id,class,transform";
pub const OUTPUT_MANIFEST: &str = "manifest.csv";
pub const NORM_STATS_FILE: &str = "norm_stats.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct OutputRecord {
    pub output_id: String,
    pub source_id: String,
    pub label: usize,
    pub transform: Transform,
}

impl OutputRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.output_id, self.source_id, CLASS_NAMES[self.label], self.transform
        )
    }
}

pub fn parse_output_manifest(text: &str) -> Result<Vec<OutputRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == OUTPUT_HEADER) {
            continue;
        }
        let bad = |message: String| Error::Manifest { line: i + 1, message };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", f.len())));
        }
        out.push(OutputRecord {
            output_id: f[0].to_owned(),
            source_id: f[1].to_owned(),
            label: class_index(f[2]).ok_or_else(|| bad(format!("unknown class `{}`", f[2])))?,
            transform: f[3].parse().map_err(|e: Error| bad(e.to_string()))?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct MaterializeOptions {
    /// Directory holding the source images, named `{image_id}.{ext}`.
    pub image_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Side of the square network input; `None` keeps the transformed
    /// image at its original size.
    pub input_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaterializeReport {
    pub train: [usize; NUM_CLASSES],
    pub test: [usize; NUM_CLASSES],
    /// Outputs written as byte copies of their source file.
    pub copied: usize,
    pub norm: NormStats,
}

impl MaterializeReport {
    pub fn side(&self, split: Split) -> &[usize; NUM_CLASSES] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Removes everything created so far unless disarmed.
struct Cleanup {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    armed: bool,
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        for f in self.files.iter().rev() {
            let _ = std::fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = std::fs::remove_dir(d);
        }
    }
}

fn create_dir(path: &Path, cleanup: &mut Cleanup) -> Result<()> {
    let mut missing = Vec::new();
    let mut p = Some(path);
    while let Some(d) = p.filter(|d| !d.as_os_str().is_empty() && !d.exists()) {
        missing.push(d.to_owned());
        p = d.parent();
    }
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    cleanup.dirs.extend(missing.into_iter().rev());
    Ok(())
}

/// Writes every planned output. Identity outputs whose source needs no
/// resizing are byte copies of the source file. On failure, files and
/// directories created by this call are removed.
pub fn materialize(plan: &AugmentationPlan, opts: &MaterializeOptions) -> Result<MaterializeReport> {
    let mut cleanup = Cleanup {
        files: Vec::new(),
        dirs: Vec::new(),
        armed: true,
    };
    create_dir(&opts.out_dir, &mut cleanup)?;
    let mut report = MaterializeReport {
        train: [0; NUM_CLASSES],
        test: [0; NUM_CLASSES],
        copied: 0,
        norm: NormStats::default(),
    };
    let mut acc = NormAccumulator::default();
    for split in Split::ALL {
        let dir = opts.out_dir.join(split.as_str());
        create_dir(&dir, &mut cleanup)?;
        let manifest_path = dir.join(OUTPUT_MANIFEST);
        let mut lines = String::from(OUTPUT_HEADER);
        lines.push('\n');
        let mut entries: Vec<_> = plan.entries.iter().filter(|e| e.split == split).collect();
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        for e in entries {
            let src_path = find_image(&opts.image_dir, &e.image_id).ok_or_else(|| Error::Image {
                path: opts.image_dir.join(&e.image_id),
                message: "source image not found".into(),
            })?;
            let src = ImageBuffer::load(&src_path)?;
            let fits = opts
                .input_size
                .is_none_or(|s| src.height() == s && src.width() == s);
            for (slot, t) in e.transforms.iter().enumerate() {
                let out_id = e.output_id(slot);
                let img = apply_transform(&src, t)?;
                let img = match opts.input_size {
                    Some(s) => preprocess(&img, s),
                    None => img,
                };
                if split == Split::Train {
                    acc.add(&img);
                }
                let path = if *t == Transform::Identity && fits {
                    let ext = src_path.extension().and_then(|x| x.to_str()).unwrap_or("png");
                    let path = dir.join(format!("{out_id}.{ext}"));
                    cleanup.files.push(path.clone());
                    std::fs::copy(&src_path, &path).map_err(|err| Error::io(&path, err))?;
                    report.copied += 1;
                    path
                } else {
                    let path = dir.join(format!("{out_id}.png"));
                    cleanup.files.push(path.clone());
                    img.save(&path)?;
                    path
                };
                debug_assert!(path.exists());
                let rec = OutputRecord {
                    output_id: out_id,
                    source_id: e.image_id.clone(),
                    label: e.label,
                    transform: t.clone(),
                };
                lines.push_str(&rec.to_line());
                lines.push('\n');
                match split {
                    Split::Train => report.train[e.label] += 1,
                    Split::Test => report.test[e.label] += 1,
                }
            }
        }
        cleanup.files.push(manifest_path.clone());
        std::fs::write(&manifest_path, lines).map_err(|err| Error::io(&manifest_path, err))?;
    }
    report.norm = acc.finish();
    let stats_path = opts.out_dir.join(NORM_STATS_FILE);
    cleanup.files.push(stats_path.clone());
    std::fs::write(&stats_path, report.norm.to_text()).map_err(|e| Error::io(&stats_path, e))?;
    cleanup.armed = false;
    Ok(report)
}

/// Writes an output manifest for an arbitrary record list.
pub fn write_output_manifest<W: Write>(records: &[OutputRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{OUTPUT_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.to_line())?;
    }
    Ok(())
}

/// Images listed in an output manifest, preprocessed and normalized on load.
#[derive(Clone, Debug)]
pub struct FileDataset {
    records: Vec<OutputRecord>,
    paths: Vec<Option<PathBuf>>,
    shape: [usize; 3],
    norm: NormStats,
}

impl FileDataset {
    /// Opens `{dir}/manifest.csv`. Missing image files are reported when
    /// loaded, not here.
    pub fn open(dir: &Path, input_size: usize, norm: NormStats) -> Result<Self> {
        let mpath = dir.join(OUTPUT_MANIFEST);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let records = parse_output_manifest(&text)?;
        let paths = records.iter().map(|r| find_image(dir, &r.output_id)).collect();
        Ok(FileDataset {
            records,
            paths,
            shape: [3, input_size, input_size],
            norm,
        })
    }

    pub fn records(&self) -> &[OutputRecord] {
        &self.records
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn set_norm(&mut self, norm: NormStats) {
        self.norm = norm;
    }

    pub fn load_image(&self, index: usize) -> Result<ImageBuffer> {
        let path = self.paths[index].as_ref().ok_or_else(|| Error::Image {
            path: PathBuf::from(&self.records[index].output_id),
            message: "image file not found".into(),
        })?;
        Ok(preprocess(&ImageBuffer::load(path)?, self.shape[1]))
    }

    /// Normalization statistics of every loadable image.
    pub fn compute_norm(&self) -> NormStats {
        let mut acc = NormAccumulator::default();
        for i in 0..self.records.len() {
            if let Ok(img) = self.load_image(i) {
                acc.add(&img);
            }
        }
        acc.finish()
    }
}

impl Dataset for FileDataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.records[index].output_id
    }

    fn label(&self, index: usize) -> usize {
        self.records[index].label
    }

    fn sample_shape(&self) -> &[usize] {
        &self.shape
    }

    fn load(&self, index: usize) -> Result<Vec<Real>> {
        Ok(self.norm.to_chw(&self.load_image(index)?))
    }
}
